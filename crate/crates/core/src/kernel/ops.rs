//! Forward and reverse rules for every primitive. Each forward returns the
//! output plus whatever it needs to keep for the reverse pass.

use super::rng::counter_uniform;
use super::{KernelError, Tensor};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub(crate) enum Saved {
    #[default]
    Nothing,
    LayerNorm {
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        probs: Vec<f64>,
    },
    Dropout {
        keep: Vec<f64>,
    },
    LatticeGrad(Tensor),
}

/// `c = op(a) · op(b) + beta · c` where `op` optionally transposes.
/// `a` is m×k (or k×m stored when `a_t`), `b` is k×n (or n×k stored when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the strides
    // describe in-bounds row-major layouts of those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn shape_err(op: &str, detail: String) -> KernelError {
    KernelError::Shape(format!("{op}: {detail}"))
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(l) = s.last_mut() {
        *l = last;
    } else {
        s.push(last);
    }
    s
}

/// Splits a rank-2 or rank-3 shape into (batch, time, channels).
fn btc(op: &str, shape: &[usize]) -> Result<(usize, usize, usize), KernelError> {
    match *shape {
        [t, c] => Ok((1, t, c)),
        [b, t, c] => Ok((b, t, c)),
        _ => Err(shape_err(op, format!("expected rank 2 or 3, got {shape:?}"))),
    }
}

// ---------------------------------------------------------------- matmul

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    if b.rank() != 2 || a.rank() == 0 || a.cols() != b.shape()[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
    let mut out = Tensor::zeros(&with_last(a.shape(), n));
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), 0.0);
    Ok(out)
}

pub(crate) fn matmul_back(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.rows(), a.cols(), b.shape()[1]);
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    gemm(m, n, k, g.data(), false, b.data(), true, ga.data_mut(), 0.0);
    gemm(k, m, n, a.data(), true, g.data(), false, gb.data_mut(), 0.0);
    (ga, gb)
}

// ---------------------------------------------------------------- elementwise

pub(crate) fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    if b.rank() != 1 || x.rank() == 0 || x.cols() != b.len() {
        return Err(shape_err(
            "add_bias",
            format!("{:?} + {:?}", x.shape(), b.shape()),
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Ok(out)
}

pub(crate) fn add_bias_back(x: &Tensor, g: &Tensor) -> Tensor {
    let mut gb = Tensor::zeros(&[x.cols()]);
    for r in 0..g.rows() {
        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
            *acc += v;
        }
    }
    gb
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub(crate) fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", format!("{:?} * {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn swish(x: &Tensor) -> Tensor {
    map(x, |v| v * sigmoid(v))
}

pub(crate) fn swish_back(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let s = sigmoid(v);
            gv * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub(crate) fn relu_back(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// ---------------------------------------------------------------- normalization

pub(crate) fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Saved), KernelError> {
    let c = x.cols();
    if x.rank() == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[r] = rs;
        let o = out.row_mut(r);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            o[j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, Saved::LayerNorm { xhat, rstd }))
}

pub(crate) fn layer_norm_back(
    gamma: &Tensor,
    g: &Tensor,
    xhat: &[f64],
    rstd: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let c = g.cols();
    let rows = g.rows();
    let mut gx = Tensor::zeros(g.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    let mut dxhat = vec![0.0; c];
    for r in 0..rows {
        let gr = g.row(r);
        let xh = &xhat[r * c..(r + 1) * c];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..c {
            gg.data_mut()[j] += gr[j] * xh[j];
            gb.data_mut()[j] += gr[j];
            dxhat[j] = gr[j] * gamma.data()[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        let o = gx.row_mut(r);
        for j in 0..c {
            o[j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (gx, gg, gb)
}

// ---------------------------------------------------------------- softmax family

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn softmax(x: &Tensor) -> Result<Tensor, KernelError> {
    if x.rank() == 0 {
        return Err(shape_err("softmax", "scalar input".into()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row_max(row);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

pub(crate) fn softmax_back(y: &Tensor, g: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = yv * (gv - dot);
        }
    }
    gx
}

pub(crate) fn log_softmax(x: &Tensor) -> Result<Tensor, KernelError> {
    if x.rank() == 0 {
        return Err(shape_err("log_softmax", "scalar input".into()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row_max(row);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

pub(crate) fn log_softmax_back(y: &Tensor, g: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(y.shape());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), g.row(r));
        let gsum: f64 = gr.iter().sum();
        for (o, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
            *o = gv - yv.exp() * gsum;
        }
    }
    gx
}

// ---------------------------------------------------------------- attention

struct AttnDims {
    batch: usize,
    tq: usize,
    tk: usize,
    dk: usize,
    dv: usize,
    heads: usize,
}

fn attention_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<AttnDims, KernelError> {
    let (bq, tq, dq) = btc("attention", q.shape())?;
    let (bk, tk, dk) = btc("attention", k.shape())?;
    let (bv, tv, dv) = btc("attention", v.shape())?;
    let ok = heads > 0
        && q.rank() == k.rank()
        && k.rank() == v.rank()
        && bq == bk
        && bk == bv
        && tk == tv
        && dq == dk
        && dk % heads == 0
        && dv % heads == 0
        && tk > 0;
    if !ok {
        return Err(shape_err(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?}, heads {heads}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(AttnDims {
        batch: bq,
        tq,
        tk,
        dk,
        dv,
        heads,
    })
}

/// Multi-head scaled dot-product attention. Queries, keys and values are
/// already projected; head `h` uses channel block `h` of each.
pub(crate) fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Saved), KernelError> {
    let AttnDims {
        batch,
        tq,
        tk,
        dk,
        dv,
        heads,
    } = attention_dims(q, k, v, heads)?;
    let (hk, hv) = (dk / heads, dv / heads);
    let scale = 1.0 / (hk as f64).sqrt();
    let mut out = Tensor::zeros(&with_last(q.shape(), dv));
    let mut probs = vec![0.0; batch * heads * tq * tk];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * tq * tk;
            for i in 0..tq {
                let qrow = &qd[(b * tq + i) * dk + h * hk..][..hk];
                let p = &mut probs[pbase + i * tk..pbase + (i + 1) * tk];
                let mut m = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    if causal && j > i {
                        *pj = f64::NEG_INFINITY;
                        continue;
                    }
                    let krow = &kd[(b * tk + j) * dk + h * hk..][..hk];
                    let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                    *pj = s;
                    m = m.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = if pj.is_finite() { (*pj - m).exp() } else { 0.0 };
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.data_mut()[(b * tq + i) * dv + h * hv..][..hv];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vrow = &vd[(b * tk + j) * dv + h * hv..][..hv];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    Ok((out, Saved::Attention { probs }))
}

pub(crate) fn attention_back(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let AttnDims {
        batch,
        tq,
        tk,
        dk,
        dv,
        heads,
    } = attention_dims(q, k, v, heads).expect("validated in forward");
    let (hk, hv) = (dk / heads, dv / heads);
    let scale = 1.0 / (hk as f64).sqrt();
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dp = vec![0.0; tk];
    for b in 0..batch {
        for h in 0..heads {
            let pbase = (b * heads + h) * tq * tk;
            for i in 0..tq {
                let p = &probs[pbase + i * tk..pbase + (i + 1) * tk];
                let grow = &gd[(b * tq + i) * dv + h * hv..][..hv];
                let mut dot = 0.0;
                for j in 0..tk {
                    let vrow = &vd[(b * tk + j) * dv + h * hv..][..hv];
                    dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                    dot += p[j] * dp[j];
                    if p[j] != 0.0 {
                        let gvrow = &mut gv.data_mut()[(b * tk + j) * dv + h * hv..][..hv];
                        for (o, gg) in gvrow.iter_mut().zip(grow) {
                            *o += p[j] * gg;
                        }
                    }
                }
                let qrow = &qd[(b * tq + i) * dk + h * hk..][..hk];
                for j in 0..tk {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &kd[(b * tk + j) * dk + h * hk..][..hk];
                    let gqrow = &mut gq.data_mut()[(b * tq + i) * dk + h * hk..][..hk];
                    for (o, kv) in gqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    let gkrow = &mut gk.data_mut()[(b * tk + j) * dk + h * hk..][..hk];
                    for (o, qv) in gkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

// ---------------------------------------------------------------- convolution

/// Depthwise 1-D convolution over time with zero "same" padding.
/// `w` is kernel × channels and the kernel width must be odd.
pub(crate) fn depthwise_conv1d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    let (batch, t, c) = btc("depthwise_conv1d", x.shape())?;
    if w.rank() != 2 || w.shape()[1] != c || w.shape()[0] % 2 == 0 || b.shape() != [c] {
        return Err(shape_err(
            "depthwise_conv1d",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let kw = w.shape()[0];
    let pad = kw / 2;
    let mut out = Tensor::zeros(x.shape());
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for bi in 0..batch {
        for ti in 0..t {
            let o = &mut od[(bi * t + ti) * c..][..c];
            o.copy_from_slice(bd);
            for j in 0..kw {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = &xd[(bi * t + src as usize) * c..][..c];
                let wr = &wd[j * c..][..c];
                for ch in 0..c {
                    o[ch] += wr[ch] * xr[ch];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn depthwise_conv1d_back(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (batch, t, c) = btc("depthwise_conv1d", x.shape()).expect("validated in forward");
    let kw = w.shape()[0];
    let pad = kw / 2;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[c]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for bi in 0..batch {
        for ti in 0..t {
            let gr = &gd[(bi * t + ti) * c..][..c];
            for (acc, v) in gb.data_mut().iter_mut().zip(gr) {
                *acc += v;
            }
            for j in 0..kw {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = src as usize;
                for ch in 0..c {
                    gw.data_mut()[j * c + ch] += gr[ch] * xd[(bi * t + s) * c + ch];
                    gx.data_mut()[(bi * t + s) * c + ch] += gr[ch] * wd[j * c + ch];
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------- lookup / reshape

pub(crate) fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor, KernelError> {
    if table.rank() != 2 {
        return Err(shape_err("embedding", format!("table {:?}", table.shape())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(shape_err("embedding", format!("id {id} out of range {v}")));
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

pub(crate) fn embedding_back(table: &Tensor, ids: &[usize], g: &Tensor) -> Tensor {
    let mut gt = Tensor::zeros(table.shape());
    for (i, &id) in ids.iter().enumerate() {
        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    gt
}

/// Concatenates each run of `factor` consecutive frames into one frame,
/// dropping any trailing remainder: T × F becomes floor(T/factor) × factor·F.
pub(crate) fn stack_frames(x: &Tensor, factor: usize) -> Result<Tensor, KernelError> {
    let (batch, t, f) = btc("stack_frames", x.shape())?;
    if factor == 0 || t < factor {
        return Err(shape_err(
            "stack_frames",
            format!("{t} frames cannot be stacked by {factor}"),
        ));
    }
    let tout = t / factor;
    let shape = if x.rank() == 2 {
        vec![tout, factor * f]
    } else {
        vec![batch, tout, factor * f]
    };
    let mut out = Tensor::zeros(&shape);
    let width = factor * f;
    for b in 0..batch {
        for to in 0..tout {
            let src = &x.data()[(b * t + to * factor) * f..][..width];
            out.data_mut()[(b * tout + to) * width..][..width].copy_from_slice(src);
        }
    }
    Ok(out)
}

pub(crate) fn stack_frames_back(x: &Tensor, factor: usize, g: &Tensor) -> Tensor {
    let (batch, t, f) = btc("stack_frames", x.shape()).expect("validated in forward");
    let tout = t / factor;
    let width = factor * f;
    let mut gx = Tensor::zeros(x.shape());
    for b in 0..batch {
        for to in 0..tout {
            let src = &g.data()[(b * tout + to) * width..][..width];
            gx.data_mut()[(b * t + to * factor) * f..][..width].copy_from_slice(src);
        }
    }
    gx
}

pub(crate) fn dropout(x: &Tensor, p: f64, seed: u64) -> (Tensor, Saved) {
    let keep_scale = 1.0 / (1.0 - p);
    let keep: Vec<f64> = (0..x.len() as u64)
        .map(|i| {
            if counter_uniform(seed, i) < p {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let data = x.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
    (
        Tensor::new(x.shape().to_vec(), data).expect("same shape"),
        Saved::Dropout { keep },
    )
}

// ---------------------------------------------------------------- losses

/// Cross-entropy against a label-smoothed target: `(1−ε)` on the label plus
/// `ε/V` spread over every class, summed over rows.
pub(crate) fn smoothed_ce(
    logp: &Tensor,
    targets: &[usize],
    smoothing: f64,
) -> Result<Tensor, KernelError> {
    if logp.rank() != 2 || logp.rows() != targets.len() {
        return Err(shape_err(
            "smoothed_ce",
            format!("log-probs {:?} vs {} targets", logp.shape(), targets.len()),
        ));
    }
    let v = logp.cols();
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        if y >= v {
            return Err(shape_err("smoothed_ce", format!("target {y} out of range {v}")));
        }
        let row = logp.row(i);
        let row_sum: f64 = row.iter().sum();
        total -= (1.0 - smoothing) * row[y] + smoothing / v as f64 * row_sum;
    }
    Ok(Tensor::scalar(total))
}

pub(crate) fn smoothed_ce_back(
    logp: &Tensor,
    targets: &[usize],
    smoothing: f64,
    g: f64,
) -> Tensor {
    let v = logp.cols();
    let mut gx = Tensor::filled(logp.shape(), -g * smoothing / v as f64);
    for (i, &y) in targets.iter().enumerate() {
        gx.row_mut(i)[y] -= g * (1.0 - smoothing);
    }
    gx
}
