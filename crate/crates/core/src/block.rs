//! Pre-norm transformer block: `x + Attn(LN(x))` followed by `x + FFN(LN(x))`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::CoreError;
use crate::scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::Result;

/// Weights for one transformer layer. Attention projections are square,
/// the feed-forward expands by a configurable multiple, and the two layer
/// norms carry their own gain/bias.
#[derive(Debug, Clone)]
pub struct TransformerBlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub heads: usize,
}

impl TransformerBlockParams {
    /// Random init at hidden size `h` with an `ff_mult`·h feed-forward.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, h: usize, ff_mult: usize, heads: usize) -> Self {
        let std = 1.0 / scalar::sqrt(h as f64);
        let ff = ff_mult * h;
        TransformerBlockParams {
            wq: Tensor::randn(rng, vec![h, h], std),
            wk: Tensor::randn(rng, vec![h, h], std),
            wv: Tensor::randn(rng, vec![h, h], std),
            wo: Tensor::randn(rng, vec![h, h], std),
            w1: Tensor::randn(rng, vec![h, ff], std),
            w2: Tensor::randn(rng, vec![ff, h], 1.0 / scalar::sqrt(ff as f64)),
            ln1_gain: Tensor::full(vec![h], 1.0),
            ln1_bias: Tensor::zeros(vec![h]),
            ln2_gain: Tensor::full(vec![h], 1.0),
            ln2_bias: Tensor::zeros(vec![h]),
            heads,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.wq.shape()[0]
    }

    /// Checks internal dimensional consistency.
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        let ff = self.w1.shape()[1];
        let square = |t: &Tensor| t.shape() == [h, h];
        if !(square(&self.wq) && square(&self.wk) && square(&self.wv) && square(&self.wo)) {
            return Err(CoreError::Shape {
                op: "transformer_block",
                detail: format!("attention projections must be {h}×{h}"),
            });
        }
        if self.w1.shape() != [h, ff] || self.w2.shape() != [ff, h] {
            return Err(CoreError::Shape {
                op: "transformer_block",
                detail: format!("feed-forward must be {h}×{ff} and {ff}×{h}"),
            });
        }
        for ln in [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ] {
            if ln.shape() != [h] {
                return Err(CoreError::Shape {
                    op: "transformer_block",
                    detail: format!("layer-norm vectors must have length {h}"),
                });
            }
        }
        if self.heads == 0 || h % self.heads != 0 {
            return Err(CoreError::InvalidArgument {
                op: "transformer_block",
                detail: format!("head count {} must divide hidden size {h}", self.heads),
            });
        }
        Ok(())
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.attn.q"), &self.wq));
        out.push((format!("{prefix}.attn.k"), &self.wk));
        out.push((format!("{prefix}.attn.v"), &self.wv));
        out.push((format!("{prefix}.attn.o"), &self.wo));
        out.push((format!("{prefix}.ffn.w1"), &self.w1));
        out.push((format!("{prefix}.ffn.w2"), &self.w2));
        out.push((format!("{prefix}.ln1.gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1_bias));
        out.push((format!("{prefix}.ln2.gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2_bias));
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.attn.q"), &mut self.wq));
        out.push((format!("{prefix}.attn.k"), &mut self.wk));
        out.push((format!("{prefix}.attn.v"), &mut self.wv));
        out.push((format!("{prefix}.attn.o"), &mut self.wo));
        out.push((format!("{prefix}.ffn.w1"), &mut self.w1));
        out.push((format!("{prefix}.ffn.w2"), &mut self.w2));
        out.push((format!("{prefix}.ln1.gain"), &mut self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &mut self.ln1_bias));
        out.push((format!("{prefix}.ln2.gain"), &mut self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &mut self.ln2_bias));
    }

    pub fn register(&self, tape: &mut Tape) -> BlockNodes {
        BlockNodes {
            wq: tape.input(&self.wq),
            wk: tape.input(&self.wk),
            wv: tape.input(&self.wv),
            wo: tape.input(&self.wo),
            w1: tape.input(&self.w1),
            w2: tape.input(&self.w2),
            ln1_gain: tape.input(&self.ln1_gain),
            ln1_bias: tape.input(&self.ln1_bias),
            ln2_gain: tape.input(&self.ln2_gain),
            ln2_bias: tape.input(&self.ln2_bias),
            heads: self.heads,
        }
    }
}

/// Tape handles for one block's weights.
pub struct BlockNodes {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub wo: Value,
    pub w1: Value,
    pub w2: Value,
    pub ln1_gain: Value,
    pub ln1_bias: Value,
    pub ln2_gain: Value,
    pub ln2_bias: Value,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention over already-projected q/k/v.
/// Columns are split evenly across heads; `heads == 1` is the plain op.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Value,
    k: Value,
    v: Value,
    heads: usize,
    causal: bool,
) -> Result<Value> {
    let h = tape.shape(q).last().copied().unwrap_or(0);
    if heads == 0 || h % heads != 0 {
        return Err(CoreError::InvalidArgument {
            op: "attention",
            detail: format!("head count {heads} must divide hidden size {h}"),
        });
    }
    if heads == 1 {
        return tape.attention(q, k, v, causal);
    }
    let w = h / heads;
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (c0, c1) = (hd * w, (hd + 1) * w);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        outs.push(tape.attention(qh, kh, vh, causal)?);
    }
    tape.concat_cols(&outs)
}

/// Runs the block on an `l×h` sequence; shape is preserved.
pub fn transformer_block(
    tape: &mut Tape,
    x: Value,
    p: &BlockNodes,
    eps: f64,
    causal: bool,
) -> Result<Value> {
    let n1 = tape.layer_norm(x, p.ln1_gain, p.ln1_bias, eps)?;
    let q = tape.matmul(n1, p.wq)?;
    let k = tape.matmul(n1, p.wk)?;
    let v = tape.matmul(n1, p.wv)?;
    let att = multi_head_attention(tape, q, k, v, p.heads, causal)?;
    let proj = tape.matmul(att, p.wo)?;
    let x1 = tape.add(x, proj)?;
    let n2 = tape.layer_norm(x1, p.ln2_gain, p.ln2_bias, eps)?;
    let hidden = tape.matmul(n2, p.w1)?;
    let act = tape.gelu(hidden)?;
    let ff = tape.matmul(act, p.w2)?;
    tape.add(x1, ff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let mut p = TransformerBlockParams::init(&mut rng, 4, 4, 1);
        p.wo = Tensor::zeros(vec![4, 4]);
        p.w2 = Tensor::zeros(vec![16, 4]);
        let x = Tensor::randn(&mut rng, vec![3, 4], 1.0);
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let nodes = p.register(&mut tape);
        let out = transformer_block(&mut tape, xv, &nodes, 1e-5, false).unwrap();
        assert_eq!(tape.data(out), x.data());
    }

    #[test]
    fn shape_is_preserved_for_any_length() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let p = TransformerBlockParams::init(&mut rng, 6, 4, 2);
        p.validate().unwrap();
        for l in [1usize, 2, 5, 9] {
            let x = Tensor::randn(&mut rng, vec![l, 6], 0.7);
            let mut tape = Tape::new();
            let xv = tape.input(&x);
            let nodes = p.register(&mut tape);
            let out = transformer_block(&mut tape, xv, &nodes, 1e-5, false).unwrap();
            assert_eq!(tape.shape(out), &[l, 6]);
        }
    }
}
