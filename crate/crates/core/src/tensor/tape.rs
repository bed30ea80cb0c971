//! Reverse-mode gradient tape.
//!
//! Operations record one [`Rule`] per output while the tape is recording.
//! Nodes are pushed in execution order, so walking the list backwards is a
//! reverse topological order over the recorded graph: every node is visited
//! exactly once and inputs always come after their consumers. Gradients
//! accumulate in per-node buffers and are read back through [`GradTape::grad`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies a node on a specific tape. The epoch guards against a tensor
/// recorded on one tape leaking into an operation on another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) epoch: u64,
    pub(crate) index: usize,
}

/// Saved input: optional producer node plus the forward value (kept only
/// when the backward rule needs it).
pub(crate) struct In {
    pub(crate) node: Option<usize>,
    pub(crate) data: Arc<Vec<f64>>,
}

pub(crate) enum Rule {
    Leaf,
    /// out = a + b (same shape)
    Add { a: Option<usize>, b: Option<usize> },
    /// out = a - b
    Sub { a: Option<usize>, b: Option<usize> },
    /// out = a ⊙ b
    Mul { a: In, b: In },
    /// out = s·x
    Scale { x: Option<usize>, s: f64 },
    /// out = x + s
    AddScalar { x: Option<usize> },
    /// out = |x|
    Abs { x: In },
    /// out = exp(x); saves the output
    Exp { x: Option<usize>, out: Arc<Vec<f64>> },
    /// out = ln(x)
    Ln { x: In },
    /// out = ln(1 + e^x)
    Softplus { x: In },
    /// out = σ(x); saves the output
    Sigmoid { x: Option<usize>, out: Arc<Vec<f64>> },
    /// out = max(x, 0)
    Relu { x: In },
    /// out = gelu(x), tanh approximation
    Gelu { x: In },
    /// out = x^p elementwise
    PowConst { x: In, p: f64 },
    /// out = clamp(x, lo, hi); gradient passes only where not clipped
    Clip { x: In, lo: f64, hi: f64 },
    /// out = Σx (scalar)
    Sum { x: Option<usize> },
    /// out = mean(x) (scalar)
    Mean { x: Option<usize>, n: usize },
    /// out[m×n] = a[m×k] · b[k×n]
    Matmul { a: In, b: In, m: usize, k: usize, n: usize },
    /// out[m×n] = a[m×k] · b[n×k]ᵀ
    MatmulBt { a: In, b: In, m: usize, k: usize, n: usize },
    /// out[t×dout] = x[t×din] · w[dout×din]ᵀ + bias
    Linear {
        x: In,
        w: In,
        bias: Option<Option<usize>>,
        t: usize,
        din: usize,
        dout: usize,
    },
    /// out = Σ a⊙b (scalar)
    Dot { a: In, b: In },
    /// out[r,j] = x[r, start+j]
    SliceCols { x: Option<usize>, start: usize, len: usize, rows: usize, cols: usize },
    /// horizontal concat of per-part column blocks
    ConcatCols { parts: Vec<(Option<usize>, usize)>, rows: usize },
    /// vertical stack of two row blocks
    ConcatRows2 { a: Option<usize>, b: Option<usize>, a_rows: usize, b_rows: usize, cols: usize },
    /// out[r,:] = x[start+r, :]
    SliceRows { x: Option<usize>, start: usize, len: usize, cols: usize },
    /// out[r,:] = w[r]·x[r,:], w constant
    ScaleRows { x: Option<usize>, weights: Arc<Vec<f64>>, rows: usize, cols: usize },
    /// per-row softmax; saves the output
    SoftmaxRows { x: Option<usize>, out: Arc<Vec<f64>>, rows: usize, cols: usize },
    /// per-vector layer normalisation over the last extent
    LayerNorm {
        x: In,
        gamma: In,
        beta: Option<usize>,
        rows: usize,
        d: usize,
        eps: f64,
    },
    /// per-group normalisation over (C/G × H × W), per-channel affine
    GroupNorm {
        x: In,
        gamma: In,
        beta: Option<usize>,
        groups: usize,
        c: usize,
        h: usize,
        w: usize,
        eps: f64,
    },
    /// zero-padded cross-correlation
    Conv2d {
        x: In,
        kernels: In,
        bias: Option<usize>,
        c: usize,
        h: usize,
        w: usize,
        co: usize,
        kh: usize,
        kw: usize,
        ph: usize,
        pw: usize,
    },
    /// half-pixel-center bilinear interpolation
    BilinearResize { x: Option<usize>, c: usize, ih: usize, iw: usize, oh: usize, ow: usize },
    /// [N×d] tokens → [d×gh×gw] grid
    TokensToGrid { x: Option<usize>, d: usize, gh: usize, gw: usize },
    /// contiguous channel slice of a [C×H×W] grid
    SliceChannels { x: Option<usize>, start: usize, len: usize, h: usize, w: usize },
}

struct Node {
    rule: Rule,
    out_numel: usize,
}

/// Records operations for one forward pass and replays them in reverse.
pub struct GradTape {
    epoch: u64,
    active: bool,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn next_epoch() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    /// A recording tape.
    pub fn new() -> Self {
        GradTape {
            epoch: next_epoch(),
            active: true,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A tape that records nothing; use for pure inference.
    pub fn inactive() -> Self {
        GradTape {
            epoch: next_epoch(),
            active: false,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a tensor as a differentiation leaf on this tape.
    pub fn watch(&mut self, t: &mut Tensor) {
        if !self.active {
            return;
        }
        let idx = self.push(Rule::Leaf, t.numel());
        t.set_node(Some(NodeRef { epoch: self.epoch, index: idx }));
    }

    /// Producer node index of `t` on this tape, if tracked here. A tensor
    /// carrying a node from a different tape is a contract error.
    pub(crate) fn input_node(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(n) if n.epoch == self.epoch => Ok(Some(n.index)),
            Some(_) if !self.active => Ok(None),
            Some(_) => Err(Error::TapeMismatch),
        }
    }

    pub(crate) fn push(&mut self, rule: Rule, out_numel: usize) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node { rule, out_numel });
        self.grads.push(None);
        idx
    }

    /// Record `rule` for an output of `numel` elements; returns the node
    /// handle the output tensor should carry, or `None` when nothing needs
    /// recording (inactive tape or no tracked input).
    pub(crate) fn record(&mut self, tracked: bool, rule: Rule, numel: usize) -> Option<NodeRef> {
        if !self.active || !tracked {
            return None;
        }
        let idx = self.push(rule, numel);
        Some(NodeRef { epoch: self.epoch, index: idx })
    }


    /// Gradient of the recorded graph with respect to `t`, if any flowed.
    pub fn grad(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if node.epoch != self.epoch {
            return None;
        }
        self.grads[node.index]
            .as_ref()
            .map(|g| Tensor::from_vec(t.shape(), g.clone()).expect("grad shape"))
    }

    /// Like [`grad`](Self::grad) but zeros when no gradient flowed.
    pub fn grad_or_zeros(&self, t: &Tensor) -> Tensor {
        self.grad(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse pass from a scalar loss. Each call propagates a fresh unit
    /// seed and adds the result into the persistent accumulators, so
    /// repeated calls without [`reset_grads`](Self::reset_grads) accumulate.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = loss
            .node()
            .ok_or_else(|| Error::Contract("loss is not recorded on any tape".into()))?;
        if node.epoch != self.epoch {
            return Err(Error::TapeMismatch);
        }
        self.active = false;
        let numels: Vec<usize> = self.nodes.iter().map(|n| n.out_numel).collect();
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        work[node.index] = Some(vec![1.0]);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = work[idx].clone() else {
                continue;
            };
            Self::backward_rule(&self.nodes[idx].rule, &g, &mut work, &numels);
        }
        for (slot, w) in self.grads.iter_mut().zip(work) {
            if let Some(w) = w {
                match slot {
                    Some(acc) => axpy(acc, &w, 1.0),
                    None => *slot = Some(w),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(rule: &Rule, g: &[f64], work: &mut [Option<Vec<f64>>], numels: &[usize]) {
        match rule {
            Rule::Leaf => {}

            Rule::Add { a, b } => {
                acc(work, numels, *a, |d| axpy(d, g, 1.0));
                acc(work, numels, *b, |d| axpy(d, g, 1.0));
            }

            Rule::Sub { a, b } => {
                acc(work, numels, *a, |d| axpy(d, g, 1.0));
                acc(work, numels, *b, |d| axpy(d, g, -1.0));
            }

            Rule::Mul { a, b } => {
                acc(work, numels, a.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * b.data[i];
                    }
                });
                acc(work, numels, b.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * a.data[i];
                    }
                });
            }

            Rule::Scale { x, s } => {
                let s = *s;
                acc(work, numels, *x, |d| axpy(d, g, s));
            }

            Rule::AddScalar { x } => {
                acc(work, numels, *x, |d| axpy(d, g, 1.0));
            }

            Rule::Abs { x } => {
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sign(x.data[i]);
                    }
                });
            }

            Rule::Exp { x, out } => {
                acc(work, numels, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                });
            }

            Rule::Ln { x } => {
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x.data[i];
                    }
                });
            }

            Rule::Softplus { x } => {
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sigmoid(x.data[i]);
                    }
                });
            }

            Rule::Sigmoid { x, out } => {
                acc(work, numels, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }

            Rule::Relu { x } => {
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        if x.data[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }

            Rule::Gelu { x } => {
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_derivative(x.data[i]);
                    }
                });
            }

            Rule::PowConst { x, p } => {
                let p = *p;
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * p * x.data[i].powf(p - 1.0);
                    }
                });
            }

            Rule::Clip { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(work, numels, x.node, |d| {
                    for i in 0..d.len() {
                        if x.data[i] > lo && x.data[i] < hi {
                            d[i] += g[i];
                        }
                    }
                });
            }

            Rule::Sum { x } => {
                acc(work, numels, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0];
                    }
                });
            }

            Rule::Mean { x, n } => {
                let inv = 1.0 / *n as f64;
                acc(work, numels, *x, |d| {
                    for v in d.iter_mut() {
                        *v += g[0] * inv;
                    }
                });
            }

            Rule::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA += g · Bᵀ
                acc(work, numels, a.node, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for t in 0..k {
                                    d[i * k + t] += gij * b.data[t * n + j];
                                }
                            }
                        }
                    }
                });
                // dB += Aᵀ · g
                acc(work, numels, b.node, |d| {
                    for i in 0..m {
                        for t in 0..k {
                            let ait = a.data[i * k + t];
                            if ait != 0.0 {
                                for j in 0..n {
                                    d[t * n + j] += ait * g[i * n + j];
                                }
                            }
                        }
                    }
                });
            }

            Rule::MatmulBt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // out = A·Bᵀ; dA += g·B, dB += gᵀ·A
                acc(work, numels, a.node, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for t in 0..k {
                                    d[i * k + t] += gij * b.data[j * k + t];
                                }
                            }
                        }
                    }
                });
                acc(work, numels, b.node, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for t in 0..k {
                                    d[j * k + t] += gij * a.data[i * k + t];
                                }
                            }
                        }
                    }
                });
            }

            Rule::Linear { x, w, bias, t, din, dout } => {
                let (t, din, dout) = (*t, *din, *dout);
                // out = x·wᵀ (+ b); dx += g·w, dw += gᵀ·x, db += column sums of g
                acc(work, numels, x.node, |d| {
                    for i in 0..t {
                        for o in 0..dout {
                            let gio = g[i * dout + o];
                            if gio != 0.0 {
                                for j in 0..din {
                                    d[i * din + j] += gio * w.data[o * din + j];
                                }
                            }
                        }
                    }
                });
                acc(work, numels, w.node, |d| {
                    for i in 0..t {
                        for o in 0..dout {
                            let gio = g[i * dout + o];
                            if gio != 0.0 {
                                for j in 0..din {
                                    d[o * din + j] += gio * x.data[i * din + j];
                                }
                            }
                        }
                    }
                });
                if let Some(bnode) = bias {
                    acc(work, numels, *bnode, |d| {
                        for i in 0..t {
                            for o in 0..dout {
                                d[o] += g[i * dout + o];
                            }
                        }
                    });
                }
            }

            Rule::Dot { a, b } => {
                let s = g[0];
                acc(work, numels, a.node, |d| {
                    for i in 0..d.len() {
                        d[i] += s * b.data[i];
                    }
                });
                acc(work, numels, b.node, |d| {
                    for i in 0..d.len() {
                        d[i] += s * a.data[i];
                    }
                });
            }

            Rule::SliceCols { x, start, len, rows, cols } => {
                let (start, len, cols) = (*start, *len, *cols);
                let rows = *rows;
                acc(work, numels, *x, |d| {
                    for r in 0..rows {
                        for j in 0..len {
                            d[r * cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }

            Rule::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let rows = *rows;
                let mut offset = 0;
                for (node, cols) in parts {
                    let (cols, off) = (*cols, offset);
                    acc(work, numels, *node, |d| {
                        for r in 0..rows {
                            for j in 0..cols {
                                d[r * cols + j] += g[r * total + off + j];
                            }
                        }
                    });
                    offset += cols;
                }
            }

            Rule::ConcatRows2 { a, b, a_rows, b_rows, cols } => {
                let (a_rows, b_rows, cols) = (*a_rows, *b_rows, *cols);
                acc(work, numels, *a, |d| axpy(d, &g[..a_rows * cols], 1.0));
                acc(work, numels, *b, |d| {
                    axpy(d, &g[a_rows * cols..(a_rows + b_rows) * cols], 1.0)
                });
            }

            Rule::SliceRows { x, start, len, cols } => {
                let (start, len, cols) = (*start, *len, *cols);
                acc(work, numels, *x, |d| {
                    for r in 0..len {
                        for j in 0..cols {
                            d[(start + r) * cols + j] += g[r * cols + j];
                        }
                    }
                });
            }

            Rule::ScaleRows { x, weights, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(work, numels, *x, |d| {
                    for r in 0..rows {
                        let w = weights[r];
                        for j in 0..cols {
                            d[r * cols + j] += w * g[r * cols + j];
                        }
                    }
                });
            }

            Rule::SoftmaxRows { x, out, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(work, numels, *x, |d| {
                    for r in 0..rows {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for j in 0..cols {
                            dot += g[base + j] * out[base + j];
                        }
                        for j in 0..cols {
                            d[base + j] += out[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }

            Rule::LayerNorm { x, gamma, beta, rows, d, eps } => {
                let (rows, dim, eps) = (*rows, *d, *eps);
                let mut xhat = vec![0.0; rows * dim];
                let mut sigma = vec![0.0; rows];
                for r in 0..rows {
                    let row = &x.data[r * dim..(r + 1) * dim];
                    let mu = row.iter().sum::<f64>() / dim as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
                    let s = (var + eps).sqrt();
                    sigma[r] = s;
                    for j in 0..dim {
                        xhat[r * dim + j] = (row[j] - mu) / s;
                    }
                }
                acc(work, numels, gamma.node, |dg| {
                    for r in 0..rows {
                        for j in 0..dim {
                            dg[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                acc(work, numels, *beta, |db| {
                    for r in 0..rows {
                        for j in 0..dim {
                            db[j] += g[r * dim + j];
                        }
                    }
                });
                acc(work, numels, x.node, |dx| {
                    for r in 0..rows {
                        let base = r * dim;
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for j in 0..dim {
                            let h = g[base + j] * gamma.data[j];
                            mean_h += h;
                            mean_hx += h * xhat[base + j];
                        }
                        mean_h /= dim as f64;
                        mean_hx /= dim as f64;
                        for j in 0..dim {
                            let h = g[base + j] * gamma.data[j];
                            dx[base + j] += (h - mean_h - xhat[base + j] * mean_hx) / sigma[r];
                        }
                    }
                });
            }

            Rule::GroupNorm { x, gamma, beta, groups, c, h, w, eps } => {
                let (groups, c, hh, ww, eps) = (*groups, *c, *h, *w, *eps);
                let hw = hh * ww;
                let cg = c / groups;
                let m = cg * hw;
                let mut xhat = vec![0.0; c * hw];
                let mut sigma = vec![0.0; groups];
                for gi in 0..groups {
                    let base = gi * m;
                    let chunk = &x.data[base..base + m];
                    let mu = chunk.iter().sum::<f64>() / m as f64;
                    let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
                    let s = (var + eps).sqrt();
                    sigma[gi] = s;
                    for i in 0..m {
                        xhat[base + i] = (chunk[i] - mu) / s;
                    }
                }
                acc(work, numels, gamma.node, |dg| {
                    for ch in 0..c {
                        for i in 0..hw {
                            dg[ch] += g[ch * hw + i] * xhat[ch * hw + i];
                        }
                    }
                });
                acc(work, numels, *beta, |db| {
                    for ch in 0..c {
                        for i in 0..hw {
                            db[ch] += g[ch * hw + i];
                        }
                    }
                });
                acc(work, numels, x.node, |dx| {
                    for gi in 0..groups {
                        let base = gi * m;
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for local in 0..m {
                            let ch = gi * cg + local / hw;
                            let hval = g[base + local] * gamma.data[ch];
                            mean_h += hval;
                            mean_hx += hval * xhat[base + local];
                        }
                        mean_h /= m as f64;
                        mean_hx /= m as f64;
                        for local in 0..m {
                            let ch = gi * cg + local / hw;
                            let hval = g[base + local] * gamma.data[ch];
                            dx[base + local] +=
                                (hval - mean_h - xhat[base + local] * mean_hx) / sigma[gi];
                        }
                    }
                });
            }

            Rule::Conv2d { x, kernels, bias, c, h, w, co, kh, kw, ph, pw } => {
                let (c, h, w, co, kh, kw, ph, pw) = (*c, *h, *w, *co, *kh, *kw, *ph, *pw);
                let hp = h + 2 * ph;
                let wp = w + 2 * pw;
                let oh = hp - kh + 1;
                let ow = wp - kw + 1;
                // padded input, rebuilt from the saved value
                let mut xp = vec![0.0; c * hp * wp];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            xp[ch * hp * wp + (y + ph) * wp + (xx + pw)] =
                                x.data[ch * h * w + y * w + xx];
                        }
                    }
                }
                acc(work, numels, *bias, |db| {
                    for o in 0..co {
                        let mut s = 0.0;
                        for i in 0..oh * ow {
                            s += g[o * oh * ow + i];
                        }
                        db[o] += s;
                    }
                });
                acc(work, numels, kernels.node, |dk| {
                    for o in 0..co {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let go = g[o * oh * ow + y * ow + xx];
                                if go == 0.0 {
                                    continue;
                                }
                                for ch in 0..c {
                                    for i in 0..kh {
                                        for j in 0..kw {
                                            dk[((o * c + ch) * kh + i) * kw + j] +=
                                                go * xp[ch * hp * wp + (y + i) * wp + (xx + j)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(work, numels, x.node, |dx| {
                    let mut dxp = vec![0.0; c * hp * wp];
                    for o in 0..co {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let go = g[o * oh * ow + y * ow + xx];
                                if go == 0.0 {
                                    continue;
                                }
                                for ch in 0..c {
                                    for i in 0..kh {
                                        for j in 0..kw {
                                            dxp[ch * hp * wp + (y + i) * wp + (xx + j)] += go
                                                * kernels.data[((o * c + ch) * kh + i) * kw + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[ch * h * w + y * w + xx] +=
                                    dxp[ch * hp * wp + (y + ph) * wp + (xx + pw)];
                            }
                        }
                    }
                });
            }

            Rule::BilinearResize { x, c, ih, iw, oh, ow } => {
                let (c, ih, iw, oh, ow) = (*c, *ih, *iw, *oh, *ow);
                acc(work, numels, *x, |dx| {
                    for oy in 0..oh {
                        let (y0, y1, fy) = bilinear_axis(oy, ih, oh);
                        for ox in 0..ow {
                            let (x0, x1, fx) = bilinear_axis(ox, iw, ow);
                            for ch in 0..c {
                                let go = g[ch * oh * ow + oy * ow + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                dx[ch * ih * iw + y0 * iw + x0] += go * (1.0 - fy) * (1.0 - fx);
                                dx[ch * ih * iw + y0 * iw + x1] += go * (1.0 - fy) * fx;
                                dx[ch * ih * iw + y1 * iw + x0] += go * fy * (1.0 - fx);
                                dx[ch * ih * iw + y1 * iw + x1] += go * fy * fx;
                            }
                        }
                    }
                });
            }

            Rule::TokensToGrid { x, d, gh, gw } => {
                let (d, gh, gw) = (*d, *gh, *gw);
                acc(work, numels, *x, |dx| {
                    for ch in 0..d {
                        for r in 0..gh {
                            for cc in 0..gw {
                                dx[(r * gw + cc) * d + ch] += g[ch * gh * gw + r * gw + cc];
                            }
                        }
                    }
                });
            }

            Rule::SliceChannels { x, start, len, h, w } => {
                let (start, len, hw) = (*start, *len, *h * *w);
                acc(work, numels, *x, |dx| {
                    for i in 0..len * hw {
                        dx[start * hw + i] += g[i];
                    }
                });
            }
        }
    }
}

fn acc(
    work: &mut [Option<Vec<f64>>],
    numels: &[usize],
    node: Option<usize>,
    add: impl FnOnce(&mut [f64]),
) {
    if let Some(idx) = node {
        let slot = work[idx].get_or_insert_with(|| vec![0.0; numels[idx]]);
        add(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src.iter()) {
        *d += s * v;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

fn gelu_derivative(v: f64) -> f64 {
    let inner = GELU_C * (v + 0.044715 * v * v * v);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
}

/// Source coordinates for half-pixel-center (align-corners-false) sampling:
/// returns (low index, high index, fractional weight of the high index).
pub(crate) fn bilinear_axis(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_idx as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}
