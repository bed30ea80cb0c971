//! Differentiable tensor operations.
//!
//! Every function computes its output eagerly and records a backward rule
//! on the tape when recording is on and at least one input is tracked.
//! Shapes are validated up front; all storage is row-major f64.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::tape::{bilinear_axis, gelu as gelu_scalar, sigmoid as sigmoid_scalar, In, Rule};
use crate::tensor::{same_shape, GradTape, Tensor};

fn saved(tape: &GradTape, t: &Tensor) -> Result<In> {
    Ok(In {
        node: tape.input_node(t)?,
        data: t.data_arc(),
    })
}

fn out(tape: &mut GradTape, tracked: bool, rule: Rule, shape: &[usize], data: Vec<f64>) -> Tensor {
    let t = Tensor::from_vec(shape, data).expect("op output shape");
    let node = tape.record(tracked, rule, t.numel());
    t.with_node(node)
}

// ── Elementwise ──────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let an = tape.input_node(a)?;
    let bn = tape.input_node(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(out(
        tape,
        an.is_some() || bn.is_some(),
        Rule::Add { a: an, b: bn },
        a.shape(),
        data,
    ))
}

pub fn sub(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let an = tape.input_node(a)?;
    let bn = tape.input_node(b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(out(
        tape,
        an.is_some() || bn.is_some(),
        Rule::Sub { a: an, b: bn },
        a.shape(),
        data,
    ))
}

pub fn mul(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let ai = saved(tape, a)?;
    let bi = saved(tape, b)?;
    let tracked = ai.node.is_some() || bi.node.is_some();
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(out(tape, tracked, Rule::Mul { a: ai, b: bi }, a.shape(), data))
}

pub fn scale(x: &Tensor, s: f64, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let data = x.data().iter().map(|v| s * v).collect();
    Ok(out(tape, xn.is_some(), Rule::Scale { x: xn, s }, x.shape(), data))
}

pub fn add_scalar(x: &Tensor, s: f64, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let data = x.data().iter().map(|v| v + s).collect();
    Ok(out(tape, xn.is_some(), Rule::AddScalar { x: xn }, x.shape(), data))
}

pub fn neg(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    scale(x, -1.0, tape)
}

pub fn abs(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|v| v.abs()).collect();
    Ok(out(tape, tracked, Rule::Abs { x: xi }, x.shape(), data))
}

pub fn exp(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let data: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
    let shared = Arc::new(data.clone());
    Ok(out(tape, xn.is_some(), Rule::Exp { x: xn, out: shared }, x.shape(), data))
}

pub fn ln(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|v| v.ln()).collect();
    Ok(out(tape, tracked, Rule::Ln { x: xi }, x.shape(), data))
}

pub fn softplus(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v + (-v).exp().ln_1p() } else { v.exp().ln_1p() })
        .collect();
    Ok(out(tape, tracked, Rule::Softplus { x: xi }, x.shape(), data))
}

pub fn sigmoid(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let data: Vec<f64> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let shared = Arc::new(data.clone());
    Ok(out(tape, xn.is_some(), Rule::Sigmoid { x: xn, out: shared }, x.shape(), data))
}

pub fn relu(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Ok(out(tape, tracked, Rule::Relu { x: xi }, x.shape(), data))
}

pub fn gelu(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Ok(out(tape, tracked, Rule::Gelu { x: xi }, x.shape(), data))
}

pub fn pow_const(x: &Tensor, p: f64, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|v| v.powf(p)).collect();
    Ok(out(tape, tracked, Rule::PowConst { x: xi, p }, x.shape(), data))
}

/// Clamp to [lo, hi]; the gradient passes only through unclipped elements.
pub fn clip(x: &Tensor, lo: f64, hi: f64, tape: &mut GradTape) -> Result<Tensor> {
    let xi = saved(tape, x)?;
    let tracked = xi.node.is_some();
    let data = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
    Ok(out(tape, tracked, Rule::Clip { x: xi, lo, hi }, x.shape(), data))
}

// ── Reductions ───────────────────────────────────────────────────────

pub fn sum(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let s: f64 = x.data().iter().sum();
    Ok(out(tape, xn.is_some(), Rule::Sum { x: xn }, &[1], vec![s]))
}

pub fn mean(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let xn = tape.input_node(x)?;
    let n = x.numel();
    let s: f64 = x.data().iter().sum::<f64>() / n as f64;
    Ok(out(tape, xn.is_some(), Rule::Mean { x: xn, n }, &[1], vec![s]))
}

pub fn dot(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    same_shape("dot", a, b)?;
    let ai = saved(tape, a)?;
    let bi = saved(tape, b)?;
    let tracked = ai.node.is_some() || bi.node.is_some();
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(out(tape, tracked, Rule::Dot { a: ai, b: bi }, &[1], vec![s]))
}

// ── Linear algebra ───────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, dst: &mut [f64]) {
    // i-k-j order keeps the inner loop streaming over contiguous rows.
    for i in 0..m {
        let row = &mut dst[i * n..(i + 1) * n];
        row.fill(0.0);
        for t in 0..k {
            let aik = a[i * k + t];
            if aik != 0.0 {
                let brow = &b[t * n..(t + 1) * n];
                for (r, bv) in row.iter_mut().zip(brow) {
                    *r += aik * bv;
                }
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let ai = saved(tape, a)?;
    let bi = saved(tape, b)?;
    let tracked = ai.node.is_some() || bi.node.is_some();
    let mut data = vec![0.0; m * n];
    matmul_raw(a.data(), b.data(), m, k, n, &mut data);
    Ok(out(tape, tracked, Rule::Matmul { a: ai, b: bi, m, k, n }, &[m, n], data))
}

/// out[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_bt(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(
            "matmul_bt",
            format!("inner extents differ: {:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let ai = saved(tape, a)?;
    let bi = saved(tape, b)?;
    let tracked = ai.node.is_some() || bi.node.is_some();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[j * k + t];
            }
            data[i * n + j] = s;
        }
    }
    Ok(out(tape, tracked, Rule::MatmulBt { a: ai, b: bi, m, k, n }, &[m, n], data))
}

/// out[t×dout] = x[t×din] · w[dout×din]ᵀ + bias
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, tape: &mut GradTape) -> Result<Tensor> {
    let (t, din) = x.dims2()?;
    let (dout, din2) = w.dims2()?;
    if din != din2 {
        return Err(Error::dim(
            "linear",
            format!("input dim {} does not match weight {:?}", din, w.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::dim(
                "linear",
                format!("bias shape {:?}, expected [{}]", b.shape(), dout),
            ));
        }
    }
    let xi = saved(tape, x)?;
    let wi = saved(tape, w)?;
    let bnode = match bias {
        Some(b) => Some(tape.input_node(b)?),
        None => None,
    };
    let tracked = xi.node.is_some() || wi.node.is_some() || bnode.flatten().is_some();
    let mut data = vec![0.0; t * dout];
    for i in 0..t {
        for o in 0..dout {
            let mut s = 0.0;
            for j in 0..din {
                s += x.data()[i * din + j] * w.data()[o * din + j];
            }
            if let Some(b) = bias {
                s += b.data()[o];
            }
            data[i * dout + o] = s;
        }
    }
    Ok(out(
        tape,
        tracked,
        Rule::Linear { x: xi, w: wi, bias: bnode, t, din, dout },
        &[t, dout],
        data,
    ))
}

// ── Slicing and stacking ─────────────────────────────────────────────

pub fn slice_cols(x: &Tensor, start: usize, len: usize, tape: &mut GradTape) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if start + len > cols {
        return Err(Error::dim(
            "slice_cols",
            format!("slice {}..{} exceeds {} columns", start, start + len, cols),
        ));
    }
    let xn = tape.input_node(x)?;
    let mut data = vec![0.0; rows * len];
    for r in 0..rows {
        data[r * len..(r + 1) * len]
            .copy_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
    }
    Ok(out(
        tape,
        xn.is_some(),
        Rule::SliceCols { x: xn, start, len, rows, cols },
        &[rows, len],
        data,
    ))
}

pub fn concat_cols(parts: &[&Tensor], tape: &mut GradTape) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero parts".into()));
    }
    let rows = parts[0].dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    let mut nodes = Vec::with_capacity(parts.len());
    let mut tracked = false;
    for p in parts {
        let (r, c) = p.dims2()?;
        if r != rows {
            return Err(Error::dim("concat_cols", format!("row counts differ: {} vs {}", rows, r)));
        }
        let n = tape.input_node(p)?;
        tracked |= n.is_some();
        widths.push(c);
        nodes.push((n, c));
    }
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; rows * total];
    let mut off = 0;
    for (p, c) in parts.iter().zip(&widths) {
        for r in 0..rows {
            data[r * total + off..r * total + off + c]
                .copy_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
        off += c;
    }
    Ok(out(tape, tracked, Rule::ConcatCols { parts: nodes, rows }, &[rows, total], data))
}

pub fn concat_rows(a: &Tensor, b: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if ca != cb {
        return Err(Error::dim("concat_rows", format!("column counts differ: {} vs {}", ca, cb)));
    }
    let an = tape.input_node(a)?;
    let bn = tape.input_node(b)?;
    let mut data = Vec::with_capacity((ra + rb) * ca);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(out(
        tape,
        an.is_some() || bn.is_some(),
        Rule::ConcatRows2 { a: an, b: bn, a_rows: ra, b_rows: rb, cols: ca },
        &[ra + rb, ca],
        data,
    ))
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize, tape: &mut GradTape) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if start + len > rows {
        return Err(Error::dim(
            "slice_rows",
            format!("slice {}..{} exceeds {} rows", start, start + len, rows),
        ));
    }
    let xn = tape.input_node(x)?;
    let data = x.data()[start * cols..(start + len) * cols].to_vec();
    Ok(out(
        tape,
        xn.is_some(),
        Rule::SliceRows { x: xn, start, len, cols },
        &[len, cols],
        data,
    ))
}

/// Per-row scaling by constant weights (weights receive no gradient).
pub fn scale_rows(x: &Tensor, weights: &[f64], tape: &mut GradTape) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if weights.len() != rows {
        return Err(Error::dim(
            "scale_rows",
            format!("{} weights for {} rows", weights.len(), rows),
        ));
    }
    let xn = tape.input_node(x)?;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for j in 0..cols {
            data[r * cols + j] = weights[r] * x.data()[r * cols + j];
        }
    }
    Ok(out(
        tape,
        xn.is_some(),
        Rule::ScaleRows { x: xn, weights: Arc::new(weights.to_vec()), rows, cols },
        &[rows, cols],
        data,
    ))
}

// ── Neural-network primitives ────────────────────────────────────────

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor, tape: &mut GradTape) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let xn = tape.input_node(x)?;
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            data[r * cols + j] = e;
            denom += e;
        }
        for j in 0..cols {
            data[r * cols + j] /= denom;
        }
    }
    let shared = Arc::new(data.clone());
    Ok(out(
        tape,
        xn.is_some(),
        Rule::SoftmaxRows { x: xn, out: shared, rows, cols },
        &[rows, cols],
        data,
    ))
}

/// Layer normalisation over the last extent with affine parameters.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    tape: &mut GradTape,
) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Config("layernorm eps must be positive".into()));
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layernorm", "zero-rank input".to_string()))?;
    if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layernorm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let rows = x.numel() / d;
    let xi = saved(tape, x)?;
    let gi = saved(tape, gamma)?;
    let bn = tape.input_node(beta)?;
    let tracked = xi.node.is_some() || gi.node.is_some() || bn.is_some();
    let mut data = vec![0.0; rows * d];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let s = (var + eps).sqrt();
        for j in 0..d {
            data[r * d + j] = (row[j] - mu) / s * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out(
        tape,
        tracked,
        Rule::LayerNorm { x: xi, gamma: gi, beta: bn, rows, d, eps },
        x.shape(),
        data,
    ))
}

/// Group normalisation of a [C×H×W] map with per-channel affine.
pub fn groupnorm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    tape: &mut GradTape,
) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "groupnorm: {} channels not divisible by {} groups",
            c, groups
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "groupnorm",
            format!("affine shapes {:?}/{:?} for {} channels", gamma.shape(), beta.shape(), c),
        ));
    }
    let xi = saved(tape, x)?;
    let gi = saved(tape, gamma)?;
    let bnode = tape.input_node(beta)?;
    let tracked = xi.node.is_some() || gi.node.is_some() || bnode.is_some();
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mut data = vec![0.0; c * hw];
    for gidx in 0..groups {
        let base = gidx * m;
        let chunk = &x.data()[base..base + m];
        let mu = chunk.iter().sum::<f64>() / m as f64;
        let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        let s = (var + eps).sqrt();
        for local in 0..m {
            let ch = gidx * cg + local / hw;
            data[base + local] = (chunk[local] - mu) / s * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok(out(
        tape,
        tracked,
        Rule::GroupNorm { x: xi, gamma: gi, beta: bnode, groups, c, h, w, eps },
        x.shape(),
        data,
    ))
}

/// Zero-padded cross-correlation of a [C×H×W] input with [C'×C×kh×kw] kernels.
pub fn conv2d(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: (usize, usize),
    tape: &mut GradTape,
) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let kshape = kernels.shape();
    if kshape.len() != 4 || kshape[1] != c {
        return Err(Error::dim(
            "conv2d",
            format!("kernels {:?} for input {:?}", kshape, x.shape()),
        ));
    }
    let (co, kh, kw) = (kshape[0], kshape[2], kshape[3]);
    if bias.shape() != [co] {
        return Err(Error::dim("conv2d", format!("bias {:?} for {} filters", bias.shape(), co)));
    }
    let (ph, pw) = padding;
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    if kh > hp || kw > wp {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, hp, wp),
        ));
    }
    let oh = hp - kh + 1;
    let ow = wp - kw + 1;

    let xi = saved(tape, x)?;
    let ki = saved(tape, kernels)?;
    let bnode = tape.input_node(bias)?;
    let tracked = xi.node.is_some() || ki.node.is_some() || bnode.is_some();

    let mut xp = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x.data()[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            xp[ch * hp * wp + (y + ph) * wp + pw..ch * hp * wp + (y + ph) * wp + pw + w]
                .copy_from_slice(src);
        }
    }
    let mut data = vec![0.0; co * oh * ow];
    for o in 0..co {
        let b = bias.data()[o];
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = b;
                for ch in 0..c {
                    for i in 0..kh {
                        let krow = &kernels.data()[((o * c + ch) * kh + i) * kw..((o * c + ch) * kh + i + 1) * kw];
                        let xrow = &xp[ch * hp * wp + (y + i) * wp + xx..ch * hp * wp + (y + i) * wp + xx + kw];
                        for j in 0..kw {
                            s += krow[j] * xrow[j];
                        }
                    }
                }
                data[o * oh * ow + y * ow + xx] = s;
            }
        }
    }
    Ok(out(
        tape,
        tracked,
        Rule::Conv2d { x: xi, kernels: ki, bias: bnode, c, h, w, co, kh, kw, ph, pw },
        &[co, oh, ow],
        data,
    ))
}

/// Half-pixel-center bilinear interpolation of a [C×H×W] map. Produces a
/// bit-identical copy when the extents already match.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize, tape: &mut GradTape) -> Result<Tensor> {
    let (c, ih, iw) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize", "zero output extent".to_string()));
    }
    let xn = tape.input_node(x)?;
    let mut data = vec![0.0; c * out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = bilinear_axis(oy, ih, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = bilinear_axis(ox, iw, out_w);
            for ch in 0..c {
                let plane = &x.data()[ch * ih * iw..(ch + 1) * ih * iw];
                let v = plane[y0 * iw + x0] * (1.0 - fy) * (1.0 - fx)
                    + plane[y0 * iw + x1] * (1.0 - fy) * fx
                    + plane[y1 * iw + x0] * fy * (1.0 - fx)
                    + plane[y1 * iw + x1] * fy * fx;
                data[ch * out_h * out_w + oy * out_w + ox] = v;
            }
        }
    }
    Ok(out(
        tape,
        xn.is_some(),
        Rule::BilinearResize { x: xn, c, ih, iw, oh: out_h, ow: out_w },
        &[c, out_h, out_w],
        data,
    ))
}

/// Rearrange row-major patch tokens [N×d] into a [d×gh×gw] feature grid.
pub fn tokens_to_grid(x: &Tensor, gh: usize, gw: usize, tape: &mut GradTape) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if n != gh * gw {
        return Err(Error::dim(
            "tokens_to_grid",
            format!("{} tokens cannot fill a {}x{} grid", n, gh, gw),
        ));
    }
    let xn = tape.input_node(x)?;
    let mut data = vec![0.0; d * gh * gw];
    for r in 0..gh {
        for cc in 0..gw {
            for ch in 0..d {
                data[ch * gh * gw + r * gw + cc] = x.data()[(r * gw + cc) * d + ch];
            }
        }
    }
    Ok(out(
        tape,
        xn.is_some(),
        Rule::TokensToGrid { x: xn, d, gh, gw },
        &[d, gh, gw],
        data,
    ))
}

/// Contiguous channel slice of a [C×H×W] grid.
pub fn slice_channels(x: &Tensor, start: usize, len: usize, tape: &mut GradTape) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if start + len > c {
        return Err(Error::dim(
            "slice_channels",
            format!("slice {}..{} exceeds {} channels", start, start + len, c),
        ));
    }
    let xn = tape.input_node(x)?;
    let data = x.data()[start * h * w..(start + len) * h * w].to_vec();
    Ok(out(
        tape,
        xn.is_some(),
        Rule::SliceChannels { x: xn, start, len, h, w },
        &[len, h, w],
        data,
    ))
}

/// Drop a leading length-1 extent: [1, a, b] → [a, b], [1] stays scalar-like.
/// Reshapes share no rule because the data order is unchanged; the node is
/// carried over so gradients flow through untouched.
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let expect: usize = shape.iter().product();
    if expect != x.numel() {
        return Err(Error::dim(
            "reshape",
            format!("{:?} cannot view {} elements", shape, x.numel()),
        ));
    }
    let node = x.node();
    Ok(Tensor::from_vec(shape, x.data().to_vec())?.with_node(node))
}
