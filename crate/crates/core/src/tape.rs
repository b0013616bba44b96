//! Reverse-mode tape over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass and is discarded afterwards; batch
//! elements each get their own tape. Every op validates shapes, computes
//! its output eagerly, checks it for NaN/Inf and registers a closure that
//! scatters the upstream gradient into its parents. Parents always precede
//! children on the tape, so [`Tape::backward`] is a single reverse sweep.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Node {
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }
}

/// Gradient scatter: `(nodes, upstream grad of self, grads of earlier nodes)`.
pub(crate) type Backward = Box<dyn Fn(&[Node], &[f64], &mut [Vec<f64>])>;

/// Gradients produced by one backward sweep, indexed by [`Value`].
pub struct GradStore {
    grads: Vec<Vec<f64>>,
}

impl GradStore {
    pub fn grad(&self, v: Value) -> &[f64] {
        &self.grads[v.0]
    }
}

/// Single-use recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backs: Vec<Option<Backward>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf holding a copy of `t`.
    pub fn input(&mut self, t: &Tensor) -> Value {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        });
        self.backs.push(None);
        Value(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Detached copy of a node's value.
    pub fn value_tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.data.clone()).expect("node values stay finite")
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        back: Option<Backward>,
    ) -> Result<Value> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op });
        }
        self.nodes.push(Node { shape, data });
        self.backs.push(back);
        Ok(Value(self.nodes.len() - 1))
    }

    fn node(&self, v: Value) -> &Node {
        &self.nodes[v.0]
    }

    fn require_matrix(&self, op: &'static str, v: Value) -> Result<(usize, usize)> {
        let n = self.node(v);
        if n.shape.len() != 2 {
            return Err(CoreError::Shape {
                op,
                detail: format!("expected a matrix, got shape {:?}", n.shape),
            });
        }
        Ok((n.shape[0], n.shape[1]))
    }

    // ---- primitive ops ---------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.require_matrix("matmul", a)?;
        let (kb, n) = self.require_matrix("matmul", b)?;
        if ka != kb {
            return Err(CoreError::Shape {
                op: "matmul",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let out = mm(&self.node(a).data, &self.node(b).data, m, ka, n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Some(Box::new(move |nodes, g, grads| {
                let (k, _) = (ka, n);
                // dA = g · Bᵀ, dB = Aᵀ · g
                accumulate(&mut grads[ai], &mm_nt(g, &nodes[bi].data, m, n, k));
                accumulate(&mut grads[bi], &mm_tn(&nodes[ai].data, g, m, k, n));
            })),
        )
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.require_matrix("matmul_nt", a)?;
        let (n, kb) = self.require_matrix("matmul_nt", b)?;
        if ka != kb {
            return Err(CoreError::Shape {
                op: "matmul_nt",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let out = mm_nt(&self.node(a).data, &self.node(b).data, m, ka, n);
        let (ai, bi) = (a.0, b.0);
        self.push(
            "matmul_nt",
            vec![m, n],
            out,
            Some(Box::new(move |nodes, g, grads| {
                // out = A·Bᵀ: dA = g·B, dB = gᵀ·A
                accumulate(&mut grads[ai], &mm(g, &nodes[bi].data, m, n, ka));
                accumulate(&mut grads[bi], &mm_tn(g, &nodes[ai].data, m, n, ka));
            })),
        )
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.node(a).shape != self.node(b).shape {
            return Err(CoreError::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.node(a).shape, self.node(b).shape),
            });
        }
        let out: Vec<f64> = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let (ai, bi) = (a.0, b.0);
        self.push(
            "add",
            shape,
            out,
            Some(Box::new(move |_, g, grads| {
                accumulate(&mut grads[ai], g);
                accumulate(&mut grads[bi], g);
            })),
        )
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Value, row: Value) -> Result<Value> {
        let (m, n) = self.require_matrix("add_row", a)?;
        let r = self.node(row);
        if r.data.len() != n {
            return Err(CoreError::Shape {
                op: "add_row",
                detail: format!("row has {} entries, matrix has {n} columns", r.data.len()),
            });
        }
        let mut out = self.node(a).data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += self.node(row).data[j];
            }
        }
        let (ai, ri) = (a.0, row.0);
        self.push(
            "add_row",
            vec![m, n],
            out,
            Some(Box::new(move |_, g, grads| {
                accumulate(&mut grads[ai], g);
                let gr = &mut grads[ri];
                for i in 0..m {
                    for j in 0..n {
                        gr[j] += g[i * n + j];
                    }
                }
            })),
        )
    }

    /// Multiplies every entry by a constant.
    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        if !c.is_finite() {
            return Err(CoreError::InvalidArgument {
                op: "scale",
                detail: format!("non-finite factor {c}"),
            });
        }
        let out: Vec<f64> = self.node(a).data.iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        let ai = a.0;
        self.push(
            "scale",
            shape,
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                for (dst, s) in ga.iter_mut().zip(g) {
                    *dst += c * s;
                }
            })),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let shape = self.node(a).shape.clone();
        let lanes = Lanes::new("softmax", &shape, axis)?;
        let x = &self.node(a).data;
        let mut out = vec![0.0; x.len()];
        lanes.for_each(|base, step| {
            softmax_lane(x, &mut out, base, step, lanes.len);
        });
        let ai = a.0;
        let v = self.push("softmax", shape, out, None)?;
        let out_id = v.0;
        self.backs[out_id] = Some(Box::new(move |nodes, g, grads| {
            let y = &nodes[out_id].data;
            let lanes = Lanes::from_shape(&nodes[out_id].shape, axis);
            let ga = &mut grads[ai];
            lanes.for_each(|base, step| {
                let mut dot = 0.0;
                let mut idx = base;
                for _ in 0..lanes.len {
                    dot += g[idx] * y[idx];
                    idx += step;
                }
                let mut idx = base;
                for _ in 0..lanes.len {
                    ga[idx] += y[idx] * (g[idx] - dot);
                    idx += step;
                }
            });
        }));
        Ok(v)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_rows(&mut self, a: Value) -> Result<Value> {
        let shape = self.node(a).shape.clone();
        let n = *shape.last().ok_or_else(|| CoreError::Shape {
            op: "log_softmax",
            detail: format!("scalar input"),
        })?;
        let x = &self.node(a).data;
        let rows = x.len() / n;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let lane = &x[r * n..(r + 1) * n];
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane {
                sum += scalar::exp(v - max);
            }
            let lse = max + scalar::ln(sum);
            for j in 0..n {
                out[r * n + j] = lane[j] - lse;
            }
        }
        let ai = a.0;
        let v = self.push("log_softmax", shape, out, None)?;
        let out_id = v.0;
        self.backs[out_id] = Some(Box::new(move |nodes, g, grads| {
            let y = &nodes[out_id].data;
            let ga = &mut grads[ai];
            let rows = y.len() / n;
            for r in 0..rows {
                let mut gsum = 0.0;
                for j in 0..n {
                    gsum += g[r * n + j];
                }
                for j in 0..n {
                    let p = scalar::exp(y[r * n + j]);
                    ga[r * n + j] += g[r * n + j] - p * gsum;
                }
            }
        }));
        Ok(v)
    }

    /// Layer norm over the last axis with affine gain/bias. Variance is the
    /// population variance; `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        let shape = self.node(x).shape.clone();
        let h = *shape.last().ok_or_else(|| CoreError::Shape {
            op: "layer_norm",
            detail: format!("scalar input"),
        })?;
        if h < 2 {
            return Err(CoreError::InvalidArgument {
                op: "layer_norm",
                detail: format!("hidden size {h} < 2"),
            });
        }
        if self.node(gain).data.len() != h || self.node(bias).data.len() != h {
            return Err(CoreError::Shape {
                op: "layer_norm",
                detail: format!("gain/bias must have length {h}"),
            });
        }
        let xs = &self.node(x).data;
        let rows = xs.len() / h;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let lane = &xs[r * h..(r + 1) * h];
            let mean = lane.iter().sum::<f64>() / h as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let inv = 1.0 / scalar::sqrt(var + eps);
            inv_std[r] = inv;
            for j in 0..h {
                let xh = (lane[j] - mean) * inv;
                xhat[r * h + j] = xh;
                out[r * h + j] = self.node(gain).data[j] * xh + self.node(bias).data[j];
            }
        }
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        self.push(
            "layer_norm",
            shape,
            out,
            Some(Box::new(move |nodes, g, grads| {
                let gain = &nodes[gi].data;
                let rows = xhat.len() / h;
                for r in 0..rows {
                    let xh = &xhat[r * h..(r + 1) * h];
                    let gr = &g[r * h..(r + 1) * h];
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    for j in 0..h {
                        let gg = gain[j] * gr[j];
                        mean_gg += gg;
                        mean_ggx += gg * xh[j];
                    }
                    mean_gg /= h as f64;
                    mean_ggx /= h as f64;
                    let inv = inv_std[r];
                    let gx = &mut grads[xi];
                    for j in 0..h {
                        let gg = gain[j] * gr[j];
                        gx[r * h + j] += inv * (gg - mean_gg - xh[j] * mean_ggx);
                    }
                }
                for r in 0..rows {
                    for j in 0..h {
                        grads[gi][j] += g[r * h + j] * xhat[r * h + j];
                        grads[bi][j] += g[r * h + j];
                    }
                }
            })),
        )
    }

    /// GELU with the tanh approximation; smooth everywhere so finite
    /// differences stay well-behaved.
    pub fn gelu(&mut self, a: Value) -> Result<Value> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A3: f64 = 0.044715;
        let x = self.node(a).data.clone();
        let out: Vec<f64> = x
            .iter()
            .map(|&v| {
                let u = C * (v + A3 * v * v * v);
                0.5 * v * (1.0 + scalar::tanh(u))
            })
            .collect();
        let shape = self.node(a).shape.clone();
        let ai = a.0;
        self.push(
            "gelu",
            shape,
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                for (j, &v) in x.iter().enumerate() {
                    let u = C * (v + A3 * v * v * v);
                    let t = scalar::tanh(u);
                    let du = C * (1.0 + 3.0 * A3 * v * v);
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    ga[j] += g[j] * d;
                }
            })),
        )
    }

    /// Gathers rows of a matrix in the given order (repeats allowed).
    pub fn select_rows(&mut self, a: Value, indices: &[usize]) -> Result<Value> {
        let (m, n) = self.require_matrix("select_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(CoreError::InvalidArgument {
                op: "select_rows",
                detail: format!("row {bad} out of range for {m} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&self.node(a).data[i * n..(i + 1) * n]);
        }
        let idx: Vec<usize> = indices.to_vec();
        let ai = a.0;
        self.push(
            "select_rows",
            vec![indices.len(), n],
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga[i * n + j] += g[r * n + j];
                    }
                }
            })),
        )
    }

    /// Keeps rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (m, n) = self.require_matrix("slice_rows", a)?;
        if start > end || end > m {
            return Err(CoreError::InvalidArgument {
                op: "slice_rows",
                detail: format!("range {start}..{end} out of bounds for {m} rows"),
            });
        }
        let out = self.node(a).data[start * n..end * n].to_vec();
        let ai = a.0;
        self.push(
            "slice_rows",
            vec![end - start, n],
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                for (off, s) in g.iter().enumerate() {
                    ga[start * n + off] += s;
                }
            })),
        )
    }

    /// Keeps columns `c0..c1` of a matrix.
    pub fn slice_cols(&mut self, a: Value, c0: usize, c1: usize) -> Result<Value> {
        let (m, n) = self.require_matrix("slice_cols", a)?;
        if c0 > c1 || c1 > n {
            return Err(CoreError::InvalidArgument {
                op: "slice_cols",
                detail: format!("range {c0}..{c1} out of bounds for {n} columns"),
            });
        }
        let w = c1 - c0;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.node(a).data[i * n + c0..i * n + c1]);
        }
        let ai = a.0;
        self.push(
            "slice_cols",
            vec![m, w],
            out,
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                for i in 0..m {
                    for j in 0..w {
                        ga[i * n + c0 + j] += g[i * w + j];
                    }
                }
            })),
        )
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument {
                op: "concat_rows",
                detail: format!("no operands"),
            });
        }
        let (_, n) = self.require_matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (m, np) = self.require_matrix("concat_rows", p)?;
            if np != n {
                return Err(CoreError::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {n} vs {np}"),
                });
            }
            rows += m;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(&self.node(p).data);
        }
        let ids: Vec<(usize, usize)> = parts.iter().map(|p| (p.0, self.node(*p).rows())).collect();
        self.push(
            "concat_rows",
            vec![rows, n],
            out,
            Some(Box::new(move |_, g, grads| {
                let mut row = 0;
                for &(id, m) in &ids {
                    let ga = &mut grads[id];
                    let src = &g[row * n..(row + m) * n];
                    accumulate(ga, src);
                    row += m;
                }
            })),
        )
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(CoreError::InvalidArgument {
                op: "concat_cols",
                detail: format!("no operands"),
            });
        }
        let (m, _) = self.require_matrix("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.require_matrix("concat_cols", p)?;
            if mp != m {
                return Err(CoreError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {m} vs {mp}"),
                });
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let w = widths[pi];
            for i in 0..m {
                out[i * total + col..i * total + col + w]
                    .copy_from_slice(&self.node(p).data[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let ids: Vec<(usize, usize)> = parts
            .iter()
            .zip(&widths)
            .map(|(p, &w)| (p.0, w))
            .collect();
        self.push(
            "concat_cols",
            vec![m, total],
            out,
            Some(Box::new(move |_, g, grads| {
                let mut col = 0;
                for &(id, w) in &ids {
                    let ga = &mut grads[id];
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * w + j] += g[i * total + col + j];
                        }
                    }
                    col += w;
                }
            })),
        )
    }

    /// Reinterprets the buffer under a new shape with the same volume.
    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).data.len() {
            return Err(CoreError::Shape {
                op: "reshape",
                detail: format!(
                    "cannot view {} values as {shape:?}",
                    self.node(a).data.len()
                ),
            });
        }
        let out = self.node(a).data.clone();
        let ai = a.0;
        self.push(
            "reshape",
            shape,
            out,
            Some(Box::new(move |_, g, grads| {
                accumulate(&mut grads[ai], g);
            })),
        )
    }

    /// Mean over every entry, as a scalar node.
    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let len = self.node(a).data.len();
        if len == 0 {
            return Err(CoreError::InvalidArgument {
                op: "mean_all",
                detail: format!("empty tensor"),
            });
        }
        let mean = self.node(a).data.iter().sum::<f64>() / len as f64;
        let ai = a.0;
        self.push(
            "mean_all",
            vec![],
            vec![mean],
            Some(Box::new(move |_, g, grads| {
                let s = g[0] / len as f64;
                for dst in grads[ai].iter_mut() {
                    *dst += s;
                }
            })),
        )
    }

    /// Mean negative log-likelihood of per-row targets under row-wise
    /// log-probabilities.
    pub fn nll_mean(&mut self, log_probs: Value, targets: &[usize]) -> Result<Value> {
        let (m, n) = self.require_matrix("nll_mean", log_probs)?;
        if targets.len() != m {
            return Err(CoreError::Shape {
                op: "nll_mean",
                detail: format!("{m} rows but {} targets", targets.len()),
            });
        }
        if targets.is_empty() {
            return Err(CoreError::InvalidArgument {
                op: "nll_mean",
                detail: format!("empty target"),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(CoreError::InvalidArgument {
                op: "nll_mean",
                detail: format!("target id {bad} out of range for {n} classes"),
            });
        }
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= self.node(log_probs).data[i * n + t];
        }
        loss /= m as f64;
        let tg: Vec<usize> = targets.to_vec();
        let ai = log_probs.0;
        self.push(
            "nll_mean",
            vec![],
            vec![loss],
            Some(Box::new(move |_, g, grads| {
                let ga = &mut grads[ai];
                let s = g[0] / tg.len() as f64;
                for (i, &t) in tg.iter().enumerate() {
                    ga[i * n + t] -= s;
                }
            })),
        )
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√h)·v`, optionally with a
    /// causal mask (requires square score matrix).
    pub fn attention(&mut self, q: Value, k: Value, v: Value, causal: bool) -> Result<Value> {
        let (m, hq) = self.require_matrix("attention", q)?;
        let (n, hk) = self.require_matrix("attention", k)?;
        let (nv, _) = self.require_matrix("attention", v)?;
        if hq != hk || n != nv {
            return Err(CoreError::Shape {
                op: "attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.node(q).shape,
                    self.node(k).shape,
                    self.node(v).shape
                ),
            });
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / scalar::sqrt(hq as f64))?;
        let logits = if causal {
            if m != n {
                return Err(CoreError::Shape {
                    op: "attention",
                    detail: format!("causal mask needs square scores, got {m}×{n}"),
                });
            }
            let mut mask = Tensor::zeros(vec![m, n]);
            {
                let data = mask.data_mut();
                for i in 0..m {
                    for j in (i + 1)..n {
                        data[i * n + j] = MASKED_SCORE;
                    }
                }
            }
            let mv = self.input(&mask);
            self.add(scaled, mv)?
        } else {
            scaled
        };
        let weights = self.softmax(logits, 1)?;
        self.matmul(weights, v)
    }

    // ---- backward sweep --------------------------------------------------

    /// Runs one reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Value) -> Result<GradStore> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::InvalidArgument {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            });
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.backs[i] {
                let (lower, rest) = grads.split_at_mut(i);
                back(&self.nodes, &rest[0], lower);
            }
        }
        for g in &grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(CoreError::NonFinite { op: "backward" });
            }
        }
        Ok(GradStore { grads })
    }
}

/// Additive mask applied to disallowed attention scores; large enough that
/// the weight underflows to exactly zero after softmax.
const MASKED_SCORE: f64 = -1.0e30;

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `a[m×k] · b[k×n]`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn softmax_lane(x: &[f64], out: &mut [f64], base: usize, step: usize, len: usize) {
    let mut max = f64::NEG_INFINITY;
    let mut idx = base;
    for _ in 0..len {
        max = max.max(x[idx]);
        idx += step;
    }
    let mut sum = 0.0;
    let mut idx = base;
    for _ in 0..len {
        let e = scalar::exp(x[idx] - max);
        out[idx] = e;
        sum += e;
        idx += step;
    }
    let mut idx = base;
    for _ in 0..len {
        out[idx] /= sum;
        idx += step;
    }
}

/// Iteration pattern over 1-D lanes of an n-d array along one axis.
struct Lanes {
    len: usize,
    inner: usize,
    outer: usize,
}

impl Lanes {
    fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(CoreError::InvalidArgument {
                op,
                detail: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        Ok(Self::from_shape(shape, axis))
    }

    fn from_shape(shape: &[usize], axis: usize) -> Self {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let total: usize = shape.iter().product();
        let outer = if len * inner == 0 {
            0
        } else {
            total / (len * inner)
        };
        Lanes { len, inner, outer }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i, self.inner);
            }
        }
    }
}
