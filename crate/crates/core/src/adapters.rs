//! The three trainable pieces sitting between a frozen feature encoder and
//! a frozen decoder: an alignment adapter trained with CTC, a peak-driven
//! shrinking adapter, and low-rank deltas on frozen attention weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::block::{transformer_block, BlockNodes, TransformerBlockParams};
use crate::ctc::{select_peaks, LabelSequence, PeakSelection};
use crate::error::CoreError;
use crate::scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::Result;

/// Default layer-norm epsilon used by both adapters.
pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Output projection of the alignment adapter onto label logits. The tied
/// variant reuses a frozen copy of the decoder's embedding rows for the
/// label columns and trains only the blank column.
#[derive(Debug, Clone)]
pub enum CtcHeadParams {
    Untied { weight: Tensor },
    Tied { embed: Tensor, blank: Tensor },
}

impl CtcHeadParams {
    pub fn vocab(&self) -> usize {
        match self {
            CtcHeadParams::Untied { weight } => weight.cols() - 1,
            CtcHeadParams::Tied { embed, .. } => embed.rows(),
        }
    }
}

/// Frame-pair projection, one transformer layer, and a CTC head.
#[derive(Debug, Clone)]
pub struct AlignmentAdapterParams {
    pub pair_w: Tensor,
    pub pair_b: Tensor,
    pub block: TransformerBlockParams,
    pub head: CtcHeadParams,
}

impl AlignmentAdapterParams {
    /// Untied init: the CTC head is a free `h_llm×(V+1)` projection.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        h_audio: usize,
        h_llm: usize,
        vocab: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        let mut p = Self::base(rng, h_audio, h_llm, heads, ff_mult);
        p.head = CtcHeadParams::Untied {
            weight: Tensor::randn(rng, vec![h_llm, vocab + 1], 1.0 / scalar::sqrt(h_llm as f64))
                .with_requires_grad(),
        };
        p
    }

    /// Tied init: label logits come from a frozen copy of the embedding
    /// table (`V×h_llm`); only the blank column is trained.
    pub fn init_tied<R: Rng + ?Sized>(
        rng: &mut R,
        h_audio: usize,
        h_llm: usize,
        heads: usize,
        ff_mult: usize,
        embed: Tensor,
    ) -> Self {
        let mut frozen = embed;
        frozen.set_requires_grad(false);
        let blank = Tensor::randn(rng, vec![h_llm, 1], 1.0 / scalar::sqrt(h_llm as f64))
            .with_requires_grad();
        let mut p = Self::base(rng, h_audio, h_llm, heads, ff_mult);
        p.head = CtcHeadParams::Tied {
            embed: frozen,
            blank,
        };
        p
    }

    fn base<R: Rng + ?Sized>(
        rng: &mut R,
        h_audio: usize,
        h_llm: usize,
        heads: usize,
        ff_mult: usize,
    ) -> Self {
        let std = 1.0 / scalar::sqrt((2 * h_audio) as f64);
        AlignmentAdapterParams {
            pair_w: Tensor::randn(rng, vec![2 * h_audio, h_llm], std).with_requires_grad(),
            pair_b: Tensor::zeros(vec![h_llm]).with_requires_grad(),
            block: mark_trainable(TransformerBlockParams::init(rng, h_llm, ff_mult, heads)),
            head: CtcHeadParams::Untied {
                weight: Tensor::zeros(vec![h_llm, 1]),
            },
        }
    }

    pub fn h_llm(&self) -> usize {
        self.pair_w.cols()
    }

    pub fn h_audio(&self) -> usize {
        self.pair_w.rows() / 2
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((String::from("align.pair_proj.w"), &self.pair_w));
        out.push((String::from("align.pair_proj.b"), &self.pair_b));
        self.block.named_params("align.block", out);
        match &self.head {
            CtcHeadParams::Untied { weight } => {
                out.push((String::from("align.head.w"), weight));
            }
            CtcHeadParams::Tied { embed, blank } => {
                out.push((String::from("align.head.embed"), embed));
                out.push((String::from("align.head.blank"), blank));
            }
        }
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((String::from("align.pair_proj.w"), &mut self.pair_w));
        out.push((String::from("align.pair_proj.b"), &mut self.pair_b));
        self.block.named_params_mut("align.block", out);
        match &mut self.head {
            CtcHeadParams::Untied { weight } => {
                out.push((String::from("align.head.w"), weight));
            }
            CtcHeadParams::Tied { embed, blank } => {
                out.push((String::from("align.head.embed"), embed));
                out.push((String::from("align.head.blank"), blank));
            }
        }
    }

    pub fn register(&self, tape: &mut Tape) -> AlignmentNodes {
        AlignmentNodes {
            pair_w: tape.input(&self.pair_w),
            pair_b: tape.input(&self.pair_b),
            block: self.block.register(tape),
            head: match &self.head {
                CtcHeadParams::Untied { weight } => HeadNodes::Untied {
                    weight: tape.input(weight),
                },
                CtcHeadParams::Tied { embed, blank } => HeadNodes::Tied {
                    embed: tape.input(embed),
                    blank: tape.input(blank),
                },
            },
            h_audio: self.h_audio(),
        }
    }
}

fn mark_trainable(mut block: TransformerBlockParams) -> TransformerBlockParams {
    let mut named = Vec::new();
    block.named_params_mut("", &mut named);
    for (_, t) in named {
        t.set_requires_grad(true);
    }
    block
}

pub enum HeadNodes {
    Untied { weight: Value },
    Tied { embed: Value, blank: Value },
}

pub struct AlignmentNodes {
    pub pair_w: Value,
    pub pair_b: Value,
    pub block: BlockNodes,
    pub head: HeadNodes,
    h_audio: usize,
}

/// Aligned features and CTC log-posteriors for one utterance.
pub struct AlignOutput {
    pub features: Value,
    pub log_posteriors: Value,
}

/// Concatenates adjacent frame pairs, projects them to the decoder width,
/// runs the transformer layer and applies the CTC head. A trailing odd
/// frame is dropped.
pub fn align_forward(
    tape: &mut Tape,
    frames: Value,
    nodes: &AlignmentNodes,
    ln_eps: f64,
) -> Result<AlignOutput> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 2 || shape[1] != nodes.h_audio {
        return Err(CoreError::Shape {
            op: "align_forward",
            detail: format!(
                "expected frames of width {}, got {shape:?}",
                nodes.h_audio
            ),
        });
    }
    let l = shape[0];
    if l < 2 {
        return Err(CoreError::InvalidArgument {
            op: "align_forward",
            detail: format!("need at least 2 frames, got {l}"),
        });
    }
    let pairs = l / 2;
    let trimmed = tape.slice_rows(frames, 0, 2 * pairs)?;
    let stacked = tape.reshape(trimmed, vec![pairs, 2 * nodes.h_audio])?;
    let projected = tape.matmul(stacked, nodes.pair_w)?;
    let biased = tape.add_row(projected, nodes.pair_b)?;
    let features = transformer_block(tape, biased, &nodes.block, ln_eps, false)?;
    let logits = match &nodes.head {
        HeadNodes::Untied { weight } => tape.matmul(features, *weight)?,
        HeadNodes::Tied { embed, blank } => {
            let labels = tape.matmul_nt(features, *embed)?;
            let blank_col = tape.matmul(features, *blank)?;
            tape.concat_cols(&[labels, blank_col])?
        }
    };
    let log_posteriors = tape.log_softmax_rows(logits)?;
    Ok(AlignOutput {
        features,
        log_posteriors,
    })
}

/// One cross-attention and one layer norm, plus the learned row substituted
/// by the trainer when a decode comes back empty.
#[derive(Debug, Clone)]
pub struct ShrinkingAdapterParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub fallback: Tensor,
}

impl ShrinkingAdapterParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, h_llm: usize) -> Self {
        let std = 1.0 / scalar::sqrt(h_llm as f64);
        ShrinkingAdapterParams {
            wq: Tensor::randn(rng, vec![h_llm, h_llm], std).with_requires_grad(),
            wk: Tensor::randn(rng, vec![h_llm, h_llm], std).with_requires_grad(),
            wv: Tensor::randn(rng, vec![h_llm, h_llm], std).with_requires_grad(),
            wo: Tensor::randn(rng, vec![h_llm, h_llm], std).with_requires_grad(),
            ln_gain: Tensor::full(vec![h_llm], 1.0).with_requires_grad(),
            ln_bias: Tensor::zeros(vec![h_llm]).with_requires_grad(),
            fallback: Tensor::randn(rng, vec![1, h_llm], std).with_requires_grad(),
        }
    }

    pub fn h_llm(&self) -> usize {
        self.wq.rows()
    }

    pub fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((String::from("shrink.attn.q"), &self.wq));
        out.push((String::from("shrink.attn.k"), &self.wk));
        out.push((String::from("shrink.attn.v"), &self.wv));
        out.push((String::from("shrink.attn.o"), &self.wo));
        out.push((String::from("shrink.ln.gain"), &self.ln_gain));
        out.push((String::from("shrink.ln.bias"), &self.ln_bias));
        out.push((String::from("shrink.fallback"), &self.fallback));
    }

    pub fn named_params_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((String::from("shrink.attn.q"), &mut self.wq));
        out.push((String::from("shrink.attn.k"), &mut self.wk));
        out.push((String::from("shrink.attn.v"), &mut self.wv));
        out.push((String::from("shrink.attn.o"), &mut self.wo));
        out.push((String::from("shrink.ln.gain"), &mut self.ln_gain));
        out.push((String::from("shrink.ln.bias"), &mut self.ln_bias));
        out.push((String::from("shrink.fallback"), &mut self.fallback));
    }

    pub fn register(&self, tape: &mut Tape) -> ShrinkNodes {
        ShrinkNodes {
            wq: tape.input(&self.wq),
            wk: tape.input(&self.wk),
            wv: tape.input(&self.wv),
            wo: tape.input(&self.wo),
            ln_gain: tape.input(&self.ln_gain),
            ln_bias: tape.input(&self.ln_bias),
            fallback: tape.input(&self.fallback),
        }
    }
}

pub struct ShrinkNodes {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub wo: Value,
    pub ln_gain: Value,
    pub ln_bias: Value,
    pub fallback: Value,
}

/// Result of shrinking one aligned sequence on the tape.
pub struct ShrinkOutput {
    /// Compressed rows; `None` when the decode produced no peaks.
    pub x_out: Option<Value>,
    pub peaks: PeakSelection,
    pub compression_ratio: f64,
}

/// Keeps the peak rows of `aligned` as content, gathers auxiliary context
/// from the full sequence by cross-attention, and fuses the two with a
/// residual layer norm. `raw_frames` is the frame count before pair
/// concatenation and sets the compression-ratio denominator.
pub fn shrink(
    tape: &mut Tape,
    aligned: Value,
    log_posteriors: &Tensor,
    nodes: &ShrinkNodes,
    raw_frames: usize,
    ln_eps: f64,
) -> Result<ShrinkOutput> {
    if log_posteriors.rows() != tape.shape(aligned)[0] {
        return Err(CoreError::Shape {
            op: "shrink",
            detail: format!(
                "{} aligned rows but {} posterior rows",
                tape.shape(aligned)[0],
                log_posteriors.rows()
            ),
        });
    }
    let peaks = select_peaks(log_posteriors)?;
    shrink_with_peaks(tape, aligned, peaks, nodes, raw_frames, ln_eps)
}

/// Same as [`shrink`] with the routing decision already made. Peak indices
/// are constants of the forward pass; gradients flow through the selected
/// rows and the cross-attention only.
pub fn shrink_with_peaks(
    tape: &mut Tape,
    aligned: Value,
    peaks: PeakSelection,
    nodes: &ShrinkNodes,
    raw_frames: usize,
    ln_eps: f64,
) -> Result<ShrinkOutput> {
    if raw_frames == 0 {
        return Err(CoreError::InvalidArgument {
            op: "shrink",
            detail: format!("raw frame count must be positive"),
        });
    }
    if peaks.is_empty() {
        return Ok(ShrinkOutput {
            x_out: None,
            peaks,
            compression_ratio: 0.0,
        });
    }
    let content = tape.select_rows(aligned, &peaks.indices)?;
    let q = tape.matmul(content, nodes.wq)?;
    let k = tape.matmul(aligned, nodes.wk)?;
    let v = tape.matmul(aligned, nodes.wv)?;
    let gathered = tape.attention(q, k, v, false)?;
    let aux = tape.matmul(gathered, nodes.wo)?;
    let fused = tape.add(content, aux)?;
    let x_out = tape.layer_norm(fused, nodes.ln_gain, nodes.ln_bias, ln_eps)?;
    let ratio = peaks.len() as f64 / raw_frames as f64;
    Ok(ShrinkOutput {
        x_out: Some(x_out),
        peaks,
        compression_ratio: ratio,
    })
}

/// Value-level shrinking result.
#[derive(Debug, Clone)]
pub struct ShrunkSequence {
    pub x_out: Tensor,
    pub peak_indices: Vec<usize>,
    pub decoded_labels: LabelSequence,
    pub compression_ratio: f64,
}

/// Convenience wrapper that runs [`shrink`] on a scratch tape and returns
/// plain tensors; used on evaluation paths.
pub fn shrink_sequence(
    aligned: &Tensor,
    log_posteriors: &Tensor,
    params: &ShrinkingAdapterParams,
    raw_frames: usize,
    ln_eps: f64,
) -> Result<ShrunkSequence> {
    let mut tape = Tape::new();
    let a = tape.input(aligned);
    let nodes = params.register(&mut tape);
    let out = shrink(&mut tape, a, log_posteriors, &nodes, raw_frames, ln_eps)?;
    let x_out = match out.x_out {
        Some(v) => tape.value_tensor(v),
        None => Tensor::zeros(vec![0, params.h_llm()]),
    };
    Ok(ShrunkSequence {
        x_out,
        peak_indices: out.peaks.indices.clone(),
        decoded_labels: LabelSequence::new(out.peaks.labels),
        compression_ratio: out.compression_ratio,
    })
}

/// Low-rank delta for one frozen square weight: `W + (α/r)·A·B` with `B`
/// starting at zero so the initial effective weight is exactly `W`.
#[derive(Debug, Clone)]
pub struct LoraParams {
    pub down: Tensor,
    pub up: Tensor,
    pub alpha: f64,
}

impl LoraParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        h_in: usize,
        h_out: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(CoreError::InvalidArgument {
                op: "lora",
                detail: format!("rank must be at least 1"),
            });
        }
        Ok(LoraParams {
            down: Tensor::randn(rng, vec![h_in, rank], 1.0 / scalar::sqrt(h_in as f64))
                .with_requires_grad(),
            up: Tensor::zeros(vec![rank, h_out]).with_requires_grad(),
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn named_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.down"), &self.down));
        out.push((format!("{prefix}.up"), &self.up));
    }

    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.down"), &mut self.down));
        out.push((format!("{prefix}.up"), &mut self.up));
    }

    pub fn register(&self, tape: &mut Tape) -> LoraNodes {
        LoraNodes {
            down: tape.input(&self.down),
            up: tape.input(&self.up),
            scaling: self.scaling(),
        }
    }
}

pub struct LoraNodes {
    pub down: Value,
    pub up: Value,
    scaling: f64,
}

/// `x·(W + (α/r)·A·B)` with gradients confined to `A` and `B` (and `x`).
pub fn lora_apply(tape: &mut Tape, x: Value, w_frozen: Value, lora: &LoraNodes) -> Result<Value> {
    let base = tape.matmul(x, w_frozen)?;
    let down = tape.matmul(x, lora.down)?;
    let up = tape.matmul(down, lora.up)?;
    let delta = tape.scale(up, lora.scaling)?;
    tape.add(base, delta)
}

/// Exact parameter counts grouped by the first path segment of each name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCountReport {
    pub entries: Vec<(String, usize)>,
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

pub fn report_param_counts(named: &[(String, &Tensor)]) -> ParamCountReport {
    let mut entries = Vec::with_capacity(named.len());
    let mut groups: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for (name, t) in named {
        let n = t.len();
        entries.push((name.clone(), n));
        let head = name.split('.').next().unwrap_or(name).into();
        match groups.iter_mut().find(|(g, _)| *g == head) {
            Some((_, c)) => *c += n,
            None => groups.push((head, n)),
        }
        total += n;
    }
    ParamCountReport {
        entries,
        groups,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::greedy_decode;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha20Rng {
        rand_chacha::ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn align_shapes_follow_the_drop_rule() {
        let mut r = rng(5);
        let params = AlignmentAdapterParams::init(&mut r, 2, 3, 4, 1, 4);
        let frames = Tensor::randn(&mut r, vec![5, 2], 1.0);
        let mut tape = Tape::new();
        let fv = tape.input(&frames);
        let nodes = params.register(&mut tape);
        let out = align_forward(&mut tape, fv, &nodes, DEFAULT_LN_EPS).unwrap();
        assert_eq!(tape.shape(out.features), &[2, 3]);
        assert_eq!(tape.shape(out.log_posteriors), &[2, 5]);
    }

    #[test]
    fn align_rejects_single_frame() {
        let mut r = rng(6);
        let params = AlignmentAdapterParams::init(&mut r, 2, 3, 4, 1, 4);
        let frames = Tensor::randn(&mut r, vec![1, 2], 1.0);
        let mut tape = Tape::new();
        let fv = tape.input(&frames);
        let nodes = params.register(&mut tape);
        assert!(align_forward(&mut tape, fv, &nodes, DEFAULT_LN_EPS).is_err());
    }

    #[test]
    fn zero_weights_give_bias_only_features() {
        let mut r = rng(7);
        let mut params = AlignmentAdapterParams::init(&mut r, 2, 3, 4, 1, 4);
        params.pair_w = Tensor::zeros(vec![4, 3]);
        params.pair_b = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        params.block.wo = Tensor::zeros(vec![3, 3]);
        params.block.w2 = Tensor::zeros(vec![12, 3]);
        let frames = Tensor::randn(&mut r, vec![4, 2], 1.0);
        let mut tape = Tape::new();
        let fv = tape.input(&frames);
        let nodes = params.register(&mut tape);
        let out = align_forward(&mut tape, fv, &nodes, DEFAULT_LN_EPS).unwrap();
        for row in 0..2 {
            assert_eq!(
                &tape.data(out.features)[row * 3..(row + 1) * 3],
                &[0.5, -1.0, 2.0]
            );
        }
    }

    #[test]
    fn zeroed_cross_attention_reduces_to_layer_norm_of_content() {
        let mut r = rng(8);
        let mut params = ShrinkingAdapterParams::init(&mut r, 4);
        params.wo = Tensor::zeros(vec![4, 4]);
        let aligned = Tensor::randn(&mut r, vec![6, 4], 1.0);
        // posteriors with two non-blank runs
        let logp = Tensor::from_vec(
            vec![6, 3],
            vec![
                -0.1, -3.0, -2.0, //
                -0.2, -3.0, -2.0, //
                -3.0, -2.0, -0.1, //
                -3.0, -0.1, -2.0, //
                -3.0, -0.3, -2.0, //
                -3.0, -2.0, -0.2,
            ],
        )
        .unwrap();
        let shrunk = shrink_sequence(&aligned, &logp, &params, 12, DEFAULT_LN_EPS).unwrap();
        assert_eq!(shrunk.peak_indices, vec![0, 3]);
        // expected: plain layer norm of the selected rows
        let mut tape = Tape::new();
        let sel = tape.input(
            &Tensor::from_rows(&[aligned.row(0).to_vec(), aligned.row(3).to_vec()]).unwrap(),
        );
        let g = tape.input(&params.ln_gain);
        let b = tape.input(&params.ln_bias);
        let ln = tape.layer_norm(sel, g, b, DEFAULT_LN_EPS).unwrap();
        assert_eq!(shrunk.x_out.data(), tape.data(ln));
    }

    #[test]
    fn shrunk_length_matches_greedy_decode() {
        let mut r = rng(9);
        let params = ShrinkingAdapterParams::init(&mut r, 4);
        for _ in 0..20 {
            let rows = 12;
            let logits = Tensor::randn(&mut r, vec![rows, 4], 1.5);
            let mut tape = Tape::new();
            let lv = tape.input(&logits);
            let lp = tape.log_softmax_rows(lv).unwrap();
            let logp = tape.value_tensor(lp);
            let aligned = Tensor::randn(&mut r, vec![rows, 4], 1.0);
            let shrunk =
                shrink_sequence(&aligned, &logp, &params, rows * 2, DEFAULT_LN_EPS).unwrap();
            let decoded = greedy_decode(&logp).unwrap();
            assert_eq!(shrunk.decoded_labels, decoded);
            assert_eq!(shrunk.x_out.rows(), decoded.len());
            assert!(shrunk
                .peak_indices
                .windows(2)
                .all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn empty_decode_yields_empty_sequence() {
        let mut r = rng(10);
        let params = ShrinkingAdapterParams::init(&mut r, 4);
        let aligned = Tensor::randn(&mut r, vec![3, 4], 1.0);
        let logp = Tensor::from_vec(
            vec![3, 2],
            vec![-3.0, -0.05, -3.0, -0.05, -3.0, -0.05],
        )
        .unwrap();
        let shrunk = shrink_sequence(&aligned, &logp, &params, 6, DEFAULT_LN_EPS).unwrap();
        assert_eq!(shrunk.x_out.rows(), 0);
        assert!(shrunk.decoded_labels.is_empty());
        assert_eq!(shrunk.compression_ratio, 0.0);
    }

    #[test]
    fn lora_zero_init_is_the_frozen_map() {
        let mut r = rng(11);
        let w = Tensor::randn(&mut r, vec![4, 4], 0.5);
        let lora = LoraParams::init(&mut r, 4, 4, 2, 16.0).unwrap();
        let x = Tensor::randn(&mut r, vec![3, 4], 1.0);
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let wv = tape.input(&w);
        let nodes = lora.register(&mut tape);
        let out = lora_apply(&mut tape, xv, wv, &nodes).unwrap();
        let base = tape.matmul(xv, wv).unwrap();
        assert_eq!(tape.data(out), tape.data(base));
    }

    #[test]
    fn full_rank_lora_reconstructs_a_dense_delta() {
        let mut r = rng(12);
        let h = 3;
        let w = Tensor::randn(&mut r, vec![h, h], 0.5);
        let delta = Tensor::randn(&mut r, vec![h, h], 0.5);
        let alpha = 16.0;
        let mut lora = LoraParams::init(&mut r, h, h, h, alpha).unwrap();
        // A = I, B = (r/alpha)·delta  =>  W + (alpha/r)·A·B = W + delta
        let mut eye = Tensor::zeros(vec![h, h]);
        for i in 0..h {
            eye.data_mut()[i * h + i] = 1.0;
        }
        lora.down = eye;
        lora.up = Tensor::from_vec(
            vec![h, h],
            delta
                .data()
                .iter()
                .map(|v| v * h as f64 / alpha)
                .collect(),
        )
        .unwrap();
        let x = Tensor::randn(&mut r, vec![2, h], 1.0);
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let wv = tape.input(&w);
        let nodes = lora.register(&mut tape);
        let out = lora_apply(&mut tape, xv, wv, &nodes).unwrap();
        // dense materialization oracle
        let wd = Tensor::from_vec(
            vec![h, h],
            w.data()
                .iter()
                .zip(delta.data())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let wdv = tape.input(&wd);
        let expect = tape.matmul(xv, wdv).unwrap();
        for (got, want) in tape.data(out).iter().zip(tape.data(expect)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn param_counts_are_exact() {
        let mut r = rng(13);
        let params = AlignmentAdapterParams::init(&mut r, 4, 8, 5, 1, 4);
        let mut named = Vec::new();
        params.named_params(&mut named);
        let report = report_param_counts(&named);
        let pair: usize = report
            .entries
            .iter()
            .filter(|(n, _)| n.starts_with("align.pair_proj"))
            .map(|(_, c)| c)
            .sum();
        assert_eq!(pair, 2 * 4 * 8 + 8);
        let lora = LoraParams::init(&mut r, 8, 8, 2, 16.0).unwrap();
        let mut named = Vec::new();
        lora.named_params("lora.block0.q", &mut named);
        lora.named_params("lora.block0.v", &mut named);
        let report = report_param_counts(&named);
        assert_eq!(report.total, 2 * (8 * 2 + 2 * 8));
    }
}
