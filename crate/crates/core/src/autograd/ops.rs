//! Differentiable primitives.
//!
//! Broadcasting is restricted to leading dimensions: in a binary op one operand
//! may have a shape that is a suffix of the other's, and is repeated over the
//! remaining leading dimensions. Everything else needs an explicit reshape.

use std::rc::Rc;

use rand::Rng;

use super::tape::{BackwardFn, Tape};
use super::tensor::{numel, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Records a fused op with a hand-written backward rule.
pub fn custom_op(
    name: &'static str,
    shape: &[usize],
    data: Vec<f32>,
    inputs: &[&Tensor],
    backward: BackwardFn,
) -> Result<Tensor> {
    if numel(shape) != data.len() {
        return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
    }
    Tape::record(name, shape.to_vec(), data, inputs, move |_| backward)
}

// ---------------------------------------------------------------------------
// Kernels. Every output element accumulates its terms in ascending index order
// starting from +0.0, independent of the surrounding rows; bitwise equivalence
// tests (packing isolation, chunked loss, checkpointing) depend on that.
// ---------------------------------------------------------------------------

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] = sum_k a[m,k] * b[n,k]`
pub(crate) fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// `out[m,n] += sum_k a[k,m] * b[k,n]`
pub(crate) fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn logsumexp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return f32::NEG_INFINITY;
    }
    let mut sum = 0.0f32;
    for &x in row {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    /// rhs repeats over lhs's leading dims
    Rhs,
    /// lhs repeats over rhs's leading dims
    Lhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if is_suffix(b, a) {
        Ok((Bcast::Rhs, a.to_vec()))
    } else if is_suffix(a, b) {
        Ok((Bcast::Lhs, b.to_vec()))
    } else {
        Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

/// Sums a full-size gradient down to a repeated operand of `len` elements.
fn reduce_repeats(full: &[f32], len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    for chunk in full.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += *g;
        }
    }
    out
}

type Partial = fn(f32, f32, f32) -> f32;

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: fn(f32, f32) -> f32,
    da: Partial,
    db: Partial,
) -> Result<Tensor> {
    let (mode, shape) = bcast(op, a.shape(), b.shape())?;
    let (x, y) = (a.data(), b.data());
    let n = numel(&shape);
    let data: Vec<f32> = match mode {
        Bcast::Same => x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect(),
        Bcast::Rhs => (0..n).map(|i| f(x[i], y[i % y.len()])).collect(),
        Bcast::Lhs => (0..n).map(|i| f(x[i % x.len()], y[i])).collect(),
    };
    let (ab, bb) = (a.buffer().clone(), b.buffer().clone());
    Tape::record(op, shape, data, &[a, b], move |_| {
        Box::new(move |g, needs| {
            let (x, y) = (ab.data(), bb.data());
            let (lx, ly) = (x.len(), y.len());
            let full_a = |i: usize| x[i % lx];
            let full_b = |i: usize| y[i % ly];
            let ga = needs[0].then(|| {
                let full: Vec<f32> = (0..g.len()).map(|i| da(g[i], full_a(i), full_b(i))).collect();
                if lx == g.len() {
                    full
                } else {
                    reduce_repeats(&full, lx)
                }
            });
            let gb = needs[1].then(|| {
                let full: Vec<f32> = (0..g.len()).map(|i| db(g[i], full_a(i), full_b(i))).collect();
                if ly == g.len() {
                    full
                } else {
                    reduce_repeats(&full, ly)
                }
            });
            vec![ga, gb]
        })
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y, |g, _, y| g / y, |g, x, y| -g * x / (y * y))
}

fn unary(
    op: &'static str,
    a: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32, f32) -> f32 + 'static,
) -> Result<Tensor> {
    let data: Vec<f32> = a.data().iter().map(|&x| f(x)).collect();
    let ab = a.buffer().clone();
    Tape::record(op, a.shape().to_vec(), data, &[a], move |out| {
        let out = out.clone();
        Box::new(move |g, _| {
            let grad = g.iter().zip(ab.data()).zip(out.data()).map(|((&g, &x), &y)| df(g, x, y)).collect();
            vec![Some(grad)]
        })
    })
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    unary("neg", a, |x| -x, |g, _, _| -g)
}

pub fn add_scalar(a: &Tensor, c: f32) -> Result<Tensor> {
    unary("add_scalar", a, move |x| x + c, |g, _, _| g)
}

pub fn mul_scalar(a: &Tensor, c: f32) -> Result<Tensor> {
    unary("mul_scalar", a, move |x| x * c, move |g, _, _| g * c)
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    unary("exp", a, f32::exp, |g, _, y| g * y)
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    unary("log", a, f32::ln, |g, x, _| g / x)
}

pub fn powf(a: &Tensor, p: f32) -> Result<Tensor> {
    unary("powf", a, move |x| x.powf(p), move |g, x, _| g * p * x.powf(p - 1.0))
}

pub fn sigmoid(a: &Tensor) -> Result<Tensor> {
    unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), |g, _, y| g * y * (1.0 - y))
}

pub fn silu(a: &Tensor) -> Result<Tensor> {
    unary(
        "silu",
        a,
        |x| x / (1.0 + (-x).exp()),
        |g, x, _| {
            let s = 1.0 / (1.0 + (-x).exp());
            g * (s + x * s * (1.0 - s))
        },
    )
}

/// Gradient passes where `lo < x < hi`, zero outside.
pub fn clamp(a: &Tensor, lo: f32, hi: f32) -> Result<Tensor> {
    unary("clamp", a, move |x| x.clamp(lo, hi), move |g, x, _| if x > lo && x < hi { g } else { 0.0 })
}

/// Inverted dropout. Identity when `p == 0`.
pub fn dropout(a: &Tensor, p: f32, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(TensorError::Invalid { op: "dropout", reason: format!("probability {p} outside [0, 1)") });
    }
    if p == 0.0 {
        return Ok(a.clone());
    }
    let scale = 1.0 / (1.0 - p);
    let keep: Vec<f32> = (0..a.numel()).map(|_| if rng.random::<f32>() < p { 0.0 } else { scale }).collect();
    let data = a.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
    Tape::record("dropout", a.shape().to_vec(), data, &[a], move |_| {
        Box::new(move |g, _| vec![Some(g.iter().zip(&keep).map(|(g, k)| g * k).collect())])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compare {
    Eq,
    Lt,
    Gt,
}

/// 0/1 mask of `x <cmp> threshold`. Not differentiable.
pub fn compare(a: &Tensor, cmp: Compare, threshold: f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let hit = match cmp {
                Compare::Eq => x == threshold,
                Compare::Lt => x < threshold,
                Compare::Gt => x > threshold,
            };
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec_unchecked(a.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid { op, reason: format!("axis {axis} out of range for shape {shape:?}") });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    let mut acc = 0.0f32;
    for &x in a.data() {
        acc += x;
    }
    let n = a.numel();
    Tape::record("sum_all", Vec::new(), vec![acc], &[a], move |_| Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
}

pub fn mean_all(a: &Tensor) -> Result<Tensor> {
    let n = a.numel();
    let mut acc = 0.0f32;
    for &x in a.data() {
        acc += x;
    }
    Tape::record("mean_all", Vec::new(), vec![acc / n as f32], &[a], move |_| {
        Box::new(move |g, _| vec![Some(vec![g[0] / n as f32; n])])
    })
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis("sum_axis", a.shape(), axis)?;
    let x = a.data();
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                out[o * inner + i] += x[(o * len + l) * inner + i];
            }
        }
    }
    Tape::record("sum_axis", reduced_shape(a.shape(), axis), out, &[a], move |_| {
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        ga[(o * len + l) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(ga)]
        })
    })
}

pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let len = *a.shape().get(axis).ok_or_else(|| TensorError::Invalid {
        op: "mean_axis",
        reason: format!("axis {axis} out of range for shape {:?}", a.shape()),
    })?;
    mul_scalar(&sum_axis(a, axis)?, 1.0 / len as f32)
}

/// Maximum along `axis`; the gradient goes to the first maximal element.
pub fn max_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis("max_axis", a.shape(), axis)?;
    if len == 0 {
        return Err(TensorError::Invalid { op: "max_axis", reason: "empty axis".into() });
    }
    let x = a.data();
    let mut out = vec![f32::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = x[(o * len + l) * inner + i];
                if v > out[o * inner + i] || l == 0 {
                    out[o * inner + i] = v;
                    arg[o * inner + i] = l;
                }
            }
        }
    }
    Tape::record("max_axis", reduced_shape(a.shape(), axis), out, &[a], move |_| {
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    ga[(o * len + arg[o * inner + i]) * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(ga)]
        })
    })
}

fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(TensorError::Invalid { op, reason: format!("needs a non-empty last axis, got {:?}", a.shape()) }),
    }
}

/// Softmax over the last axis.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let d = last_dim("softmax", a)?;
    let mut out = vec![0.0f32; a.numel()];
    for (row, o) in a.data().chunks(d).zip(out.chunks_mut(d)) {
        softmax_row(row, o);
    }
    Tape::record("softmax", a.shape().to_vec(), out, &[a], move |y| {
        let y = y.clone();
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; g.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                let mut dot = 0.0f32;
                for (gv, yv) in gr.iter().zip(yr) {
                    dot += gv * yv;
                }
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(ga)]
        })
    })
}

/// Log-softmax over the last axis.
pub fn log_softmax(a: &Tensor) -> Result<Tensor> {
    let d = last_dim("log_softmax", a)?;
    let mut out = vec![0.0f32; a.numel()];
    for (row, o) in a.data().chunks(d).zip(out.chunks_mut(d)) {
        let lse = logsumexp(row);
        for (ov, x) in o.iter_mut().zip(row) {
            *ov = x - lse;
        }
    }
    Tape::record("log_softmax", a.shape().to_vec(), out, &[a], move |y| {
        let y = y.clone();
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; g.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                let mut total = 0.0f32;
                for gv in gr {
                    total += gv;
                }
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = gv - yv.exp() * total;
                }
            }
            vec![Some(ga)]
        })
    })
}

/// Picks `x[..., index[...]]` along the last axis.
pub fn gather_last(a: &Tensor, index: &[usize]) -> Result<Tensor> {
    let d = last_dim("gather_last", a)?;
    let rows = a.numel() / d;
    if index.len() != rows {
        return Err(TensorError::ShapeMismatch { op: "gather_last", lhs: a.shape().to_vec(), rhs: vec![index.len()] });
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= d) {
        return Err(TensorError::IndexOutOfRange { op: "gather_last", index: bad, bound: d });
    }
    let out = index.iter().enumerate().map(|(r, &i)| a.data()[r * d + i]).collect();
    let shape = a.shape()[..a.rank() - 1].to_vec();
    let index = index.to_vec();
    Tape::record("gather_last", shape, out, &[a], move |_| {
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; rows * d];
            for (r, &i) in index.iter().enumerate() {
                ga[r * d + i] = g[r];
            }
            vec![Some(ga)]
        })
    })
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// rhs is a single matrix shared by every batch entry
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn mat_dims(op: &'static str, a: &[usize], b: &[usize], transpose_b: bool) -> Result<MatDims> {
    let err = || TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if transpose_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != bk {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        return Err(err());
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    Ok(MatDims { batch: lead_a.iter().product(), m, k, n, shared_rhs, out_shape })
}

/// `a @ b` over the last two axes. `b` either has the same leading axes as
/// `a` or is a plain matrix.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = mat_dims("matmul", a.shape(), b.shape(), false)?;
    let MatDims { batch, m, k, n, shared_rhs, .. } = d;
    let mut out = vec![0.0f32; batch * m * n];
    if shared_rhs {
        mm(a.data(), b.data(), batch * m, k, n, &mut out);
    } else {
        for bi in 0..batch {
            mm(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    let (ab, bb) = (a.buffer().clone(), b.buffer().clone());
    Tape::record("matmul", d.out_shape, out, &[a, b], move |_| {
        Box::new(move |g, needs| {
            let (x, y) = (ab.data(), bb.data());
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0f32; batch * m * k];
                if shared_rhs {
                    mm_nt(g, y, batch * m, n, k, &mut ga);
                } else {
                    for bi in 0..batch {
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &y[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                if shared_rhs {
                    let mut gb = vec![0.0f32; k * n];
                    mm_tn(x, g, k, batch * m, n, &mut gb);
                    gb
                } else {
                    let mut gb = vec![0.0f32; batch * k * n];
                    for bi in 0..batch {
                        mm_tn(
                            &x[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    gb
                }
            });
            vec![ga, gb]
        })
    })
}

/// `a @ b^T` over the last two axes; `b` is `[..., n, k]` or `[n, k]`.
/// With a `[out, in]` weight this is a bias-free linear layer.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = mat_dims("matmul_t", a.shape(), b.shape(), true)?;
    let MatDims { batch, m, k, n, shared_rhs, .. } = d;
    let mut out = vec![0.0f32; batch * m * n];
    if shared_rhs {
        mm_nt(a.data(), b.data(), batch * m, k, n, &mut out);
    } else {
        for bi in 0..batch {
            mm_nt(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * n * k..(bi + 1) * n * k],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    let (ab, bb) = (a.buffer().clone(), b.buffer().clone());
    Tape::record("matmul_t", d.out_shape, out, &[a, b], move |_| {
        Box::new(move |g, needs| {
            let (x, y) = (ab.data(), bb.data());
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0f32; batch * m * k];
                if shared_rhs {
                    mm(g, y, batch * m, n, k, &mut ga);
                } else {
                    for bi in 0..batch {
                        mm(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &y[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                if shared_rhs {
                    let mut gb = vec![0.0f32; n * k];
                    mm_tn(g, x, n, batch * m, k, &mut gb);
                    gb
                } else {
                    let mut gb = vec![0.0f32; batch * n * k];
                    for bi in 0..batch {
                        mm_tn(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &x[bi * m * k..(bi + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut gb[bi * n * k..(bi + 1) * n * k],
                        );
                    }
                    gb
                }
            });
            vec![ga, gb]
        })
    })
}

// ---------------------------------------------------------------------------
// Indexing and layout
// ---------------------------------------------------------------------------

/// Rows of a `[vocab, dim]` table; output shape is `index_shape + [dim]`.
pub fn embedding(weight: &Tensor, ids: &[usize], index_shape: &[usize]) -> Result<Tensor> {
    if weight.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "embedding",
            reason: format!("weight must be 2-D, got {:?}", weight.shape()),
        });
    }
    if numel(index_shape) != ids.len() {
        return Err(TensorError::DataLength { shape: index_shape.to_vec(), len: ids.len() });
    }
    let (vocab, dim) = (weight.shape()[0], weight.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(TensorError::IndexOutOfRange { op: "embedding", index: bad, bound: vocab });
    }
    let w = weight.data();
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        out.extend_from_slice(&w[i * dim..(i + 1) * dim]);
    }
    let mut shape = index_shape.to_vec();
    shape.push(dim);
    let ids = ids.to_vec();
    Tape::record("embedding", shape, out, &[weight], move |_| {
        Box::new(move |g, _| {
            let mut gw = vec![0.0f32; vocab * dim];
            for (r, &i) in ids.iter().enumerate() {
                for (o, gv) in gw[i * dim..(i + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                    *o += *gv;
                }
            }
            vec![Some(gw)]
        })
    })
}

/// Same payload, new shape.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != a.numel() {
        return Err(TensorError::ShapeMismatch { op: "reshape", lhs: a.shape().to_vec(), rhs: shape.to_vec() });
    }
    Tape::record_shared("reshape", shape.to_vec(), a.buffer().clone(), &[a], |_| {
        Box::new(|g, _| vec![Some(g.to_vec())])
    })
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let mut seen = vec![false; a.rank()];
    if perm.len() != a.rank() || perm.iter().any(|&p| p >= a.rank() || std::mem::replace(&mut seen[p], true)) {
        return Err(TensorError::Invalid {
            op: "permute",
            reason: format!("{perm:?} is not a permutation of {:?}", a.shape()),
        });
    }
    let (out, out_shape) = permute_data(a.data(), a.shape(), perm);
    let mut inverse = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out_shape_c = out_shape.clone();
    Tape::record("permute", out_shape, out, &[a], move |_| {
        Box::new(move |g, _| vec![Some(permute_data(g, &out_shape_c, &inverse).0)])
    })
}

pub fn transpose(a: &Tensor, d0: usize, d1: usize) -> Result<Tensor> {
    let mut perm: Vec<usize> = (0..a.rank()).collect();
    if d0 >= a.rank() || d1 >= a.rank() {
        return Err(TensorError::Invalid {
            op: "transpose",
            reason: format!("axes ({d0}, {d1}) for shape {:?}", a.shape()),
        });
    }
    perm.swap(d0, d1);
    permute(a, &perm)
}

/// `a[..., start..end, ...]` along `axis`.
pub fn slice(a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis("slice", a.shape(), axis)?;
    if start > end || end > len {
        return Err(TensorError::Invalid {
            op: "slice",
            reason: format!("range {start}..{end} on axis of length {len}"),
        });
    }
    let width = end - start;
    let x = a.data();
    let mut out = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        out.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = width;
    Tape::record("slice", shape, out, &[a], move |_| {
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                ga[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
            }
            vec![Some(ga)]
        })
    })
}

/// Joins tensors along `axis`; all other axes must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| TensorError::Invalid { op: "concat", reason: "no inputs".into() })?;
    let (outer, _, inner) = split_axis("concat", first.shape(), axis)?;
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        let mut a = p.shape().to_vec();
        let mut b = first.shape().to_vec();
        if a.len() != b.len() {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: b, rhs: a });
        }
        lens.push(a[axis]);
        a[axis] = 0;
        b[axis] = 0;
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &l) in parts.iter().zip(&lens) {
            out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tape::record("concat", shape, out, parts, move |_| {
        Box::new(move |g, needs| {
            let mut grads: Vec<Option<Vec<f32>>> =
                lens.iter().zip(needs).map(|(&l, &n)| n.then(|| Vec::with_capacity(outer * l * inner))).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (slot, &l) in grads.iter_mut().zip(&lens) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + l * inner]);
                    }
                    off += l * inner;
                }
            }
            grads
        })
    })
}

/// Selects entries `indices` along `axis` (repeats allowed).
pub fn index_select(a: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    let (outer, len, inner) = split_axis("index_select", a.shape(), axis)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
        return Err(TensorError::IndexOutOfRange { op: "index_select", index: bad, bound: len });
    }
    let x = a.data();
    let count = indices.len();
    let mut out = Vec::with_capacity(outer * count * inner);
    for o in 0..outer {
        for &i in indices {
            out.extend_from_slice(&x[(o * len + i) * inner..(o * len + i + 1) * inner]);
        }
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = count;
    let indices = indices.to_vec();
    Tape::record("index_select", shape, out, &[a], move |_| {
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; outer * len * inner];
            for o in 0..outer {
                for (c, &i) in indices.iter().enumerate() {
                    let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                    for (d, s) in ga[(o * len + i) * inner..(o * len + i + 1) * inner].iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
            vec![Some(ga)]
        })
    })
}

// ---------------------------------------------------------------------------
// Fused transformer primitives
// ---------------------------------------------------------------------------

/// `x / sqrt(mean(x^2) + eps) * weight` over the last axis.
pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    let e = last_dim("rms_norm", x)?;
    if weight.shape() != [e] {
        return Err(TensorError::ShapeMismatch {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(TensorError::Invalid { op: "rms_norm", reason: format!("eps must be positive, got {eps}") });
    }
    let rows = x.numel() / e;
    let w = weight.data();
    let mut inv = vec![0.0f32; rows];
    let mut out = vec![0.0f32; x.numel()];
    for (r, (row, o)) in x.data().chunks(e).zip(out.chunks_mut(e)).enumerate() {
        let mut ss = 0.0f32;
        for v in row {
            ss += v * v;
        }
        let rinv = 1.0 / (ss / e as f32 + eps).sqrt();
        inv[r] = rinv;
        for ((ov, xv), wv) in o.iter_mut().zip(row).zip(w) {
            *ov = xv * rinv * wv;
        }
    }
    let (xb, wb) = (x.buffer().clone(), weight.buffer().clone());
    Tape::record("rms_norm", x.shape().to_vec(), out, &[x, weight], move |_| {
        Box::new(move |g, needs| {
            let (xd, w) = (xb.data(), wb.data());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0f32; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * e..(r + 1) * e];
                    let gr = &g[r * e..(r + 1) * e];
                    let rinv = inv[r];
                    let mut dot = 0.0f32;
                    for ((gv, wv), xv) in gr.iter().zip(w).zip(row) {
                        dot += gv * wv * xv;
                    }
                    let coef = rinv * rinv * rinv * dot / e as f32;
                    for (((o, gv), wv), xv) in gx[r * e..(r + 1) * e].iter_mut().zip(gr).zip(w).zip(row) {
                        *o = rinv * wv * gv - xv * coef;
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0f32; e];
                for r in 0..rows {
                    let rinv = inv[r];
                    for ((o, gv), xv) in gw.iter_mut().zip(&g[r * e..(r + 1) * e]).zip(&xd[r * e..(r + 1) * e]) {
                        *o += gv * xv * rinv;
                    }
                }
                gw
            });
            vec![gx, gw]
        })
    })
}

/// Precomputed rotary-embedding angles, `[max_positions, head_dim / 2]`.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    head_dim: usize,
    max_positions: usize,
    base: f32,
    cos: Rc<Vec<f32>>,
    sin: Rc<Vec<f32>>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, max_positions: usize, base: f32) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(TensorError::Invalid { op: "rope", reason: format!("head_dim must be even, got {head_dim}") });
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let theta = f64::from(base).powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * theta;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
        Ok(RotaryTable { head_dim, max_positions, base, cos: Rc::new(cos), sin: Rc::new(sin) })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f32 {
        self.base
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }
}

/// Rotates interleaved `(even, odd)` pairs of `x: [B, S, H, D]` by the angle
/// of each token's position. `positions` is `[S]` (shared by every row) or
/// `[B * S]`.
pub fn rope(x: &Tensor, positions: &[usize], table: &RotaryTable) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(TensorError::Invalid { op: "rope", reason: format!("expected [B, S, H, D], got {:?}", x.shape()) });
    }
    let (b, s, h, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if d != table.head_dim {
        return Err(TensorError::ShapeMismatch { op: "rope", lhs: x.shape().to_vec(), rhs: vec![table.head_dim] });
    }
    if positions.len() != s && positions.len() != b * s {
        return Err(TensorError::ShapeMismatch { op: "rope", lhs: x.shape().to_vec(), rhs: vec![positions.len()] });
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= table.max_positions) {
        return Err(TensorError::IndexOutOfRange { op: "rope", index: bad, bound: table.max_positions });
    }
    let half = d / 2;
    let shared = positions.len() == s;
    let pos: Vec<usize> = positions.to_vec();
    let rotate = move |data: &[f32], sign: f32, cos: &[f32], sin: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; data.len()];
        for bi in 0..b {
            for si in 0..s {
                let p = if shared { pos[si] } else { pos[bi * s + si] };
                let (c, sn) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
                for hi in 0..h {
                    let base = ((bi * s + si) * h + hi) * d;
                    for i in 0..half {
                        let (x0, x1) = (data[base + 2 * i], data[base + 2 * i + 1]);
                        let sv = sign * sn[i];
                        out[base + 2 * i] = x0 * c[i] - x1 * sv;
                        out[base + 2 * i + 1] = x0 * sv + x1 * c[i];
                    }
                }
            }
        }
        out
    };
    let out = rotate(x.data(), 1.0, &table.cos, &table.sin);
    let (cos, sin) = (table.cos.clone(), table.sin.clone());
    Tape::record("rope", x.shape().to_vec(), out, &[x], move |_| {
        Box::new(move |g, _| vec![Some(rotate(g, -1.0, &cos, &sin))])
    })
}

/// Convenience: bias-free linear layer `x @ weight^T`.
pub fn linear(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    matmul_t(x, weight)
}
