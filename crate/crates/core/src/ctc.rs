//! CTC loss over the blank-extended label lattice, greedy decoding, and
//! peak-frame extraction.
//!
//! Labels live in `[0, V)`; the blank id is fixed at `V`, the last column
//! of the posterior matrix. All lattice math stays in the log domain.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar::{self, log_add};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;
use crate::Result;

/// Blank id for a vocabulary of `vocab` labels.
pub const fn blank_id(vocab: usize) -> usize {
    vocab
}

/// Target token sequence; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSequence {
    pub tokens: Vec<usize>,
}

impl LabelSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        LabelSequence { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        if let Some(&bad) = self.tokens.iter().find(|&&t| t >= vocab) {
            return Err(CoreError::InvalidArgument {
                op: "ctc",
                detail: format!("label {bad} outside vocabulary of {vocab}"),
            });
        }
        Ok(())
    }

    /// Frames needed for a feasible alignment: one per label plus one blank
    /// between each adjacent repeat.
    pub fn min_input_len(&self) -> usize {
        let repeats = self.tokens.windows(2).filter(|w| w[0] == w[1]).count();
        self.tokens.len() + repeats
    }
}

/// Forward/backward log-probability lattices over the extended sequence.
/// Both include the emission at their own time step, so
/// `logsumexp_s(alpha[t][s] + beta[t][s] - logp[t][ext[s]])` reproduces
/// `log_likelihood` at every `t`.
#[derive(Debug, Clone)]
pub struct CtcTable {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_likelihood: f64,
    pub input_len: usize,
    pub ext_len: usize,
    pub ext_labels: Vec<usize>,
}

impl CtcTable {
    pub fn alpha_at(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.ext_len + s]
    }

    pub fn beta_at(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.ext_len + s]
    }
}

/// Loss value, gradient with respect to the log-posteriors, and the lattice.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Tensor,
    pub table: CtcTable,
}

/// Negative log-probability of `target` under per-frame log-posteriors of
/// shape `T×(V+1)`, marginalized over all alignments, with its gradient.
pub fn ctc_loss(log_posteriors: &Tensor, target: &LabelSequence) -> Result<CtcLoss> {
    let (t_len, vocab) = posterior_dims(log_posteriors)?;
    target.validate(vocab)?;
    let required = target.min_input_len();
    if t_len < required {
        return Err(CoreError::InfeasibleTarget {
            input_len: t_len,
            required,
        });
    }
    let blank = blank_id(vocab);
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target.tokens[s / 2] })
        .collect();
    let cols = vocab + 1;
    let y = |t: usize, k: usize| log_posteriors.data()[t * cols + k];

    if t_len == 0 {
        // Only the empty target is feasible; its probability is 1.
        return Ok(CtcLoss {
            loss: 0.0,
            grad: Tensor::zeros(vec![0, cols]),
            table: CtcTable {
                alpha: vec![],
                beta: vec![],
                log_likelihood: 0.0,
                input_len: 0,
                ext_len: s_len,
                ext_labels: ext,
            },
        });
    }

    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = y(0, ext[0]);
    if s_len > 1 {
        alpha[1] = y(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + y(t, ext[s])
            };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == f64::NEG_INFINITY {
        // Feasibility was checked above, so this cannot happen for finite
        // inputs; guard anyway so bugs fail loudly.
        return Err(CoreError::NonFinite { op: "ctc" });
    }

    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[last + s_len - 1] = y(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = y(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + y(t, ext[s])
            };
        }
    }

    // d(-log P)/dy[t][k] = -exp(LSE_{s: ext[s]=k}(alpha + beta) - y[t][k] - log P)
    let mut grad = vec![0.0; t_len * cols];
    for t in 0..t_len {
        let mut occ = vec![f64::NEG_INFINITY; cols];
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != f64::NEG_INFINITY {
                occ[ext[s]] = log_add(occ[ext[s]], ab);
            }
        }
        for k in 0..cols {
            if occ[k] != f64::NEG_INFINITY {
                grad[t * cols + k] = -scalar::exp(occ[k] - y(t, k) - log_p);
            }
        }
    }

    Ok(CtcLoss {
        loss: -log_p,
        grad: Tensor::from_vec(vec![t_len, cols], grad)?,
        table: CtcTable {
            alpha,
            beta,
            log_likelihood: log_p,
            input_len: t_len,
            ext_len: s_len,
            ext_labels: ext,
        },
    })
}

/// Records the CTC loss as a scalar node so it can participate in a larger
/// objective. The lattice itself is treated as a fused op.
pub fn ctc_loss_on_tape(tape: &mut Tape, logp: Value, target: &LabelSequence) -> Result<Value> {
    let values = tape.value_tensor(logp);
    let result = ctc_loss(&values, target)?;
    let grad = result.grad;
    let src = logp.0;
    tape.push(
        "ctc",
        vec![],
        vec![result.loss],
        Some(alloc::boxed::Box::new(move |_, g, grads| {
            let dst = &mut grads[src];
            for (d, s) in dst.iter_mut().zip(grad.data()) {
                *d += g[0] * s;
            }
        })),
    )
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks. Ties resolve
/// to the lowest id, so the blank (last column) always loses a tie.
pub fn greedy_decode(log_posteriors: &Tensor) -> Result<LabelSequence> {
    let (t_len, vocab) = posterior_dims(log_posteriors)?;
    let blank = blank_id(vocab);
    let mut tokens = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let k = argmax_row(log_posteriors, t);
        if k != prev && k != blank {
            tokens.push(k);
        }
        prev = k;
    }
    Ok(LabelSequence { tokens })
}

/// One frame kept per maximal run of a shared non-blank argmax label: the
/// frame with the highest posterior for that label, earliest on ties.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PeakSelection {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PeakSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn select_peaks(log_posteriors: &Tensor) -> Result<PeakSelection> {
    let (t_len, vocab) = posterior_dims(log_posteriors)?;
    let blank = blank_id(vocab);
    let cols = vocab + 1;
    let mut peaks = PeakSelection::default();
    let mut t = 0;
    while t < t_len {
        let label = argmax_row(log_posteriors, t);
        let mut end = t + 1;
        while end < t_len && argmax_row(log_posteriors, end) == label {
            end += 1;
        }
        if label != blank {
            let mut best = t;
            for u in t + 1..end {
                if log_posteriors.data()[u * cols + label]
                    > log_posteriors.data()[best * cols + label]
                {
                    best = u;
                }
            }
            peaks.indices.push(best);
            peaks.labels.push(label);
        }
        t = end;
    }
    Ok(peaks)
}

fn posterior_dims(logp: &Tensor) -> Result<(usize, usize)> {
    if !logp.is_matrix() || logp.cols() < 2 {
        return Err(CoreError::Shape {
            op: "ctc",
            detail: format!(
                "expected a T×(V+1) matrix with V >= 1, got {:?}",
                logp.shape()
            ),
        });
    }
    Ok((logp.rows(), logp.cols() - 1))
}

fn argmax_row(logp: &Tensor, t: usize) -> usize {
    let row = logp.row(t);
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_uniform(t: usize, cols: usize) -> Tensor {
        Tensor::full(vec![t, cols], scalar::ln(1.0 / cols as f64))
    }

    #[test]
    fn single_frame_single_label() {
        let logp = log_uniform(1, 2);
        let res = ctc_loss(&logp, &LabelSequence::new(vec![0])).unwrap();
        assert!((res.loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn three_frames_collapse_count() {
        // 6 of the 8 binary paths collapse to "a"; loss = -ln(6/8).
        let logp = log_uniform(3, 2);
        let res = ctc_loss(&logp, &LabelSequence::new(vec![0])).unwrap();
        assert!((res.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_an_error() {
        let logp = log_uniform(2, 3);
        let err = ctc_loss(&logp, &LabelSequence::new(vec![0, 0])).unwrap_err();
        assert_eq!(
            err,
            CoreError::InfeasibleTarget {
                input_len: 2,
                required: 3
            }
        );
    }

    #[test]
    fn empty_target_prob_is_all_blank_path() {
        let logp = log_uniform(3, 2);
        let res = ctc_loss(&logp, &LabelSequence::default()).unwrap();
        assert!((res.loss - 3.0 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn greedy_collapses_repeats_and_blanks() {
        // argmax path: a a <b> b b <b>  (vocab {a=0, b=1}, blank=2)
        let rows = [
            [0.0, -2.0, -3.0],
            [0.0, -2.0, -3.0],
            [-3.0, -2.0, 0.0],
            [-2.0, 0.0, -3.0],
            [-2.0, 0.0, -3.0],
            [-3.0, -2.0, 0.0],
        ];
        let logp =
            Tensor::from_vec(vec![6, 3], rows.iter().flatten().copied().collect()).unwrap();
        assert_eq!(greedy_decode(&logp).unwrap().tokens, vec![0, 1]);
    }

    #[test]
    fn blank_separates_repeated_label() {
        let rows = [[0.0, -3.0], [-3.0, 0.0], [0.0, -3.0]];
        let logp =
            Tensor::from_vec(vec![3, 2], rows.iter().flatten().copied().collect()).unwrap();
        assert_eq!(greedy_decode(&logp).unwrap().tokens, vec![0, 0]);
    }

    #[test]
    fn all_blank_decodes_empty() {
        let rows = [[-3.0, 0.0], [-3.0, 0.0]];
        let logp =
            Tensor::from_vec(vec![2, 2], rows.iter().flatten().copied().collect()).unwrap();
        assert!(greedy_decode(&logp).unwrap().is_empty());
        assert!(select_peaks(&logp).unwrap().is_empty());
    }

    #[test]
    fn ties_prefer_labels_over_blank_and_low_ids() {
        let rows = [[-1.0, -1.0, -1.0]];
        let logp =
            Tensor::from_vec(vec![1, 3], rows.iter().flatten().copied().collect()).unwrap();
        assert_eq!(greedy_decode(&logp).unwrap().tokens, vec![0]);
    }

    #[test]
    fn peaks_pick_strongest_frame_per_run() {
        // argmax path: a a <b> b ; the first run's strongest frame is 1.
        let rows = [
            [-0.5, -3.0, -2.0],
            [-0.2, -3.0, -2.0],
            [-3.0, -2.0, -0.1],
            [-3.0, -0.3, -2.0],
        ];
        let logp =
            Tensor::from_vec(vec![4, 3], rows.iter().flatten().copied().collect()).unwrap();
        let peaks = select_peaks(&logp).unwrap();
        assert_eq!(peaks.indices, vec![1, 3]);
        assert_eq!(peaks.labels, vec![0, 1]);
    }

    #[test]
    fn alpha_beta_cross_check_holds_everywhere() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let t_len = rng.gen_range(3..7);
            let vocab = rng.gen_range(1..4usize);
            let logits = Tensor::randn(&mut rng, vec![t_len, vocab + 1], 1.0);
            let logp = row_log_softmax(&logits);
            let target_len = rng.gen_range(0..=3usize.min(t_len));
            let target =
                LabelSequence::new((0..target_len).map(|_| rng.gen_range(0..vocab)).collect());
            if t_len < target.min_input_len() {
                continue;
            }
            let res = ctc_loss(&logp, &target).unwrap();
            let table = &res.table;
            for t in 0..t_len {
                let mut acc = f64::NEG_INFINITY;
                for s in 0..table.ext_len {
                    let ab = table.alpha_at(t, s) + table.beta_at(t, s);
                    if ab != f64::NEG_INFINITY {
                        let y = logp.at2(t, table.ext_labels[s]);
                        acc = log_add(acc, ab - y);
                    }
                }
                assert!(
                    (acc - table.log_likelihood).abs() < 1e-9,
                    "cross-check off at t={t}: {acc} vs {}",
                    table.log_likelihood
                );
            }
        }
    }

    fn row_log_softmax(x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = tape.log_softmax_rows(v).unwrap();
        tape.value_tensor(out)
    }
}
