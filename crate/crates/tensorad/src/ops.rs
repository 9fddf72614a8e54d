//! The operation set, executed either eagerly (no tape) or on a [`Graph`].
//!
//! Model code is written once against [`Ops`]; inference uses [`Eager`] and
//! training uses [`Graph`].

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::kernels::conv::{conv3d_backward, conv3d_forward, Conv3dGeometry, Padding};
use crate::kernels::pool::{maxpool3d_backward, maxpool3d_forward, PoolGeometry, Rounding};
use crate::kernels::resample::{
    crop_or_pad3d_backward, crop_or_pad3d_forward, upsample3d_backward, upsample3d_forward,
};
use crate::kernels::volume::HexVolume;
use crate::real::Real;
use crate::tensor::Tensor;

/// Node gather/scatter map between a dense `[B, 3, X, Y, Z]` field and a
/// packed `[B, 3 * n]` vector over a subset of `n` nodes (component-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeIndex {
    pub dims: [usize; 3],
    pub nodes: Vec<usize>,
}

impl NodeIndex {
    pub fn packed_len(&self) -> usize {
        3 * self.nodes.len()
    }

    fn dense_vox(&self) -> usize {
        self.dims.iter().product()
    }
}

pub trait Ops<E: Real> {
    type V: Clone;

    fn constant(&self, t: Tensor<E>) -> Self::V;
    fn param(&self, t: &Arc<Tensor<E>>) -> Self::V;
    fn value(&self, v: &Self::V) -> Arc<Tensor<E>>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add_scalar(&self, a: &Self::V, s: E) -> Self::V;
    fn mul_scalar(&self, a: &Self::V, s: E) -> Self::V;
    fn relu(&self, x: &Self::V) -> Self::V;
    fn tanh(&self, x: &Self::V) -> Self::V;
    fn sigmoid(&self, x: &Self::V) -> Self::V;
    /// `[M, K] x [K, N] -> [M, N]`.
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Adds a `[N]` row vector to every row of `[M, N]`.
    fn add_bias(&self, x: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn reshape(&self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn concat(&self, xs: &[Self::V], axis: usize) -> Result<Self::V>;
    fn narrow(&self, x: &Self::V, axis: usize, start: usize, len: usize) -> Result<Self::V>;
    /// `y[:, c, ...] = x[:, c, ...] * scale[c] + shift[c]` with constant coefficients.
    fn channel_affine(&self, x: &Self::V, scale: &[E], shift: &[E]) -> Result<Self::V>;
    fn sum(&self, x: &Self::V) -> Self::V;
    fn mean(&self, x: &Self::V) -> Self::V;
    /// Mean of squared differences, a scalar.
    fn mse(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv3d(&self, x: &Self::V, filters: &Self::V, bias: &Self::V, stride: usize, padding: Padding)
        -> Result<Self::V>;
    fn maxpool3d(&self, x: &Self::V, window: [usize; 3], stride: [usize; 3], rounding: Rounding)
        -> Result<Self::V>;
    fn upsample3d(&self, x: &Self::V, factors: [usize; 3]) -> Result<Self::V>;
    fn crop_or_pad3d(&self, x: &Self::V, target: [usize; 3]) -> Result<Self::V>;
    fn gather_nodes(&self, x: &Self::V, index: &Arc<NodeIndex>) -> Result<Self::V>;
    fn scatter_nodes(&self, x: &Self::V, index: &Arc<NodeIndex>) -> Result<Self::V>;
    /// Deformed volume per batch item of a `[B, 3, X, Y, Z]` displacement field.
    fn hex_volume(&self, x: &Self::V, kernel: &Arc<HexVolume>) -> Result<Self::V>;
    /// Mean of `ReLU(1 - cos θ)` over nodes where both the (constant) force
    /// and the displacement are non-zero; θ is the angle between them.
    fn cosine_misalignment(&self, x: &Self::V, forces: &Tensor<E>) -> Result<Self::V>;
}

// ---------------------------------------------------------------------------
// Forward helpers shared by both executors.

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<E: Real>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::invalid("matmul", format!("cannot multiply {a:?} by {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

fn matmul_fwd<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![E::zero(); m * n];
    E::gemm(m, k, n, E::one(), a.data(), false, b.data(), false, E::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

fn add_bias_fwd<E: Real>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 || bias.shape() != [s[1]] {
        return Err(TensorError::shape("add_bias", &[s.get(1).copied().unwrap_or(0)], bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(s[1]) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

/// `(outer, axis_len, inner)` strides for slicing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_fwd<E: Real>(xs: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    const OP: &str = "concat";
    let first = xs.first().ok_or_else(|| TensorError::invalid(OP, "nothing to concatenate"))?;
    if axis >= first.rank() {
        return Err(TensorError::invalid(OP, format!("axis {axis} out of range for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in xs {
        let mut expect = first.shape().to_vec();
        expect[axis] = x.shape().get(axis).copied().unwrap_or(0);
        if x.shape() != expect.as_slice() {
            return Err(TensorError::shape(OP, &expect, x.shape()));
        }
        shape[axis] += x.shape()[axis];
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, out)
}

fn narrow_fwd<E: Real>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
    if axis >= x.rank() || start + len > x.shape()[axis] || len == 0 {
        return Err(TensorError::invalid(
            "narrow",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

fn narrow_bwd<E: Real>(in_shape: &[usize], axis: usize, start: usize, g: &Tensor<E>) -> Tensor<E> {
    let (outer, n, inner) = axis_split(in_shape, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let base = (o * n + start) * inner;
        od[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

fn channel_affine_fwd<E: Real>(x: &Tensor<E>, scale: &[E], shift: &[E]) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() < 2 || scale.len() != s[1] || shift.len() != s[1] {
        return Err(TensorError::invalid(
            "channel_affine",
            format!("{} scale / {} shift coefficients for shape {s:?}", scale.len(), shift.len()),
        ));
    }
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let c = i % s[1];
        for v in chunk {
            *v = *v * scale[c] + shift[c];
        }
    }
    Ok(out)
}

fn check_field(op: &'static str, shape: &[usize], vox: usize) -> Result<()> {
    if shape.len() != 5 || shape[1] != 3 || shape[2] * shape[3] * shape[4] != vox {
        return Err(TensorError::invalid(
            op,
            format!("expected [B, 3, X, Y, Z] with {vox} voxels, got {shape:?}"),
        ));
    }
    Ok(())
}

fn gather_fwd<E: Real>(x: &Tensor<E>, idx: &NodeIndex) -> Result<Tensor<E>> {
    check_field("gather_nodes", x.shape(), idx.dense_vox())?;
    let (b, vox, n) = (x.shape()[0], idx.dense_vox(), idx.nodes.len());
    let mut out = Vec::with_capacity(b * 3 * n);
    for bi in 0..b {
        for c in 0..3 {
            let plane = &x.data()[(bi * 3 + c) * vox..(bi * 3 + c + 1) * vox];
            out.extend(idx.nodes.iter().map(|&i| plane[i]));
        }
    }
    Tensor::new(&[b, 3 * n], out)
}

fn scatter_fwd<E: Real>(x: &Tensor<E>, idx: &NodeIndex) -> Result<Tensor<E>> {
    let s = x.shape();
    if s.len() != 2 || s[1] != idx.packed_len() {
        return Err(TensorError::shape("scatter_nodes", &[s.first().copied().unwrap_or(0), idx.packed_len()], s));
    }
    let (b, vox, n) = (s[0], idx.dense_vox(), idx.nodes.len());
    let [dx, dy, dz] = idx.dims;
    let mut out = Tensor::zeros(&[b, 3, dx, dy, dz]);
    let od = out.data_mut();
    for bi in 0..b {
        for c in 0..3 {
            let src = &x.data()[(bi * 3 + c) * n..(bi * 3 + c + 1) * n];
            let plane = &mut od[(bi * 3 + c) * vox..(bi * 3 + c + 1) * vox];
            for (&i, &v) in idx.nodes.iter().zip(src) {
                plane[i] = v;
            }
        }
    }
    Ok(out)
}

/// Volumes `[B]` and, if requested, gradients `[B, 3, X, Y, Z]` scaled per batch item.
fn hex_volume_eval<E: Real>(x: &Tensor<E>, kernel: &HexVolume, grad_scale: Option<&[E]>) -> (Tensor<E>, Option<Tensor<E>>) {
    let b = x.shape()[0];
    let vox = kernel.n_nodes();
    let mut vols = Vec::with_capacity(b);
    let mut grad = grad_scale.map(|_| Tensor::zeros(x.shape()));
    for bi in 0..b {
        let d = &x.data()[bi * 3 * vox..(bi + 1) * 3 * vox];
        let disp = |n: usize| [d[n].as_f64(), d[vox + n].as_f64(), d[2 * vox + n].as_f64()];
        match (grad.as_mut(), grad_scale) {
            (Some(gt), Some(scale)) => {
                let (v, gn) = kernel.volume_with_grad(disp);
                vols.push(E::lit(v));
                let s = scale[bi].as_f64();
                let gd = &mut gt.data_mut()[bi * 3 * vox..(bi + 1) * 3 * vox];
                for (n, g) in gn.iter().enumerate() {
                    for c in 0..3 {
                        gd[c * vox + n] = E::lit(s * g[c]);
                    }
                }
            }
            _ => vols.push(E::lit(kernel.volume(disp))),
        }
    }
    (Tensor::new(&[b], vols).unwrap(), grad)
}

/// Value and (optionally) gradient of the cosine misalignment penalty.
fn cosine_eval<E: Real>(x: &Tensor<E>, forces: &Tensor<E>, want_grad: bool) -> Result<(E, Option<Tensor<E>>)> {
    same_shape("cosine_misalignment", x, forces)?;
    let s = x.shape();
    if s.len() != 5 || s[1] != 3 {
        return Err(TensorError::invalid("cosine_misalignment", format!("expected [B, 3, X, Y, Z], got {s:?}")));
    }
    let vox = s[2] * s[3] * s[4];
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut raw_grad = want_grad.then(|| vec![0.0f64; x.len()]);
    for bi in 0..s[0] {
        let base = bi * 3 * vox;
        for n in 0..vox {
            let at = |t: &Tensor<E>, c: usize| t.data()[base + c * vox + n].as_f64();
            let f = [at(forces, 0), at(forces, 1), at(forces, 2)];
            let u = [at(x, 0), at(x, 1), at(x, 2)];
            let fn_ = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
            let un = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            if fn_ == 0.0 || un == 0.0 {
                continue;
            }
            count += 1;
            let cos = (f[0] * u[0] + f[1] * u[1] + f[2] * u[2]) / (fn_ * un);
            let penalty = 1.0 - cos;
            if penalty > 0.0 {
                total += penalty;
                if let Some(g) = raw_grad.as_mut() {
                    for c in 0..3 {
                        let dcos = f[c] / (fn_ * un) - cos * u[c] / (un * un);
                        g[base + c * vox + n] = -dcos;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Ok((E::zero(), want_grad.then(|| Tensor::zeros(s))));
    }
    let inv = 1.0 / count as f64;
    let grad = raw_grad.map(|g| Tensor::new(s, g.into_iter().map(|v| E::lit(v * inv)).collect()).unwrap());
    Ok((E::lit(total * inv), grad))
}

// ---------------------------------------------------------------------------
// Eager executor.

/// Tape-free executor for inference.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

type Shared<E> = Arc<Tensor<E>>;

impl<E: Real> Ops<E> for Eager {
    type V = Shared<E>;

    fn constant(&self, t: Tensor<E>) -> Shared<E> {
        Arc::new(t)
    }

    fn param(&self, t: &Arc<Tensor<E>>) -> Shared<E> {
        t.clone()
    }

    fn value(&self, v: &Shared<E>) -> Arc<Tensor<E>> {
        v.clone()
    }

    fn add(&self, a: &Shared<E>, b: &Shared<E>) -> Result<Shared<E>> {
        Ok(Arc::new(a.zip_map(b, |x, y| x + y)?))
    }

    fn sub(&self, a: &Shared<E>, b: &Shared<E>) -> Result<Shared<E>> {
        Ok(Arc::new(a.zip_map(b, |x, y| x - y)?))
    }

    fn mul(&self, a: &Shared<E>, b: &Shared<E>) -> Result<Shared<E>> {
        Ok(Arc::new(a.zip_map(b, |x, y| x * y)?))
    }

    fn add_scalar(&self, a: &Shared<E>, s: E) -> Shared<E> {
        Arc::new(a.map(|x| x + s))
    }

    fn mul_scalar(&self, a: &Shared<E>, s: E) -> Shared<E> {
        Arc::new(a.map(|x| x * s))
    }

    fn relu(&self, x: &Shared<E>) -> Shared<E> {
        Arc::new(x.map(|v| if v > E::zero() { v } else { E::zero() }))
    }

    fn tanh(&self, x: &Shared<E>) -> Shared<E> {
        Arc::new(x.map(|v| v.tanh()))
    }

    fn sigmoid(&self, x: &Shared<E>) -> Shared<E> {
        Arc::new(x.map(sigmoid))
    }

    fn matmul(&self, a: &Shared<E>, b: &Shared<E>) -> Result<Shared<E>> {
        Ok(Arc::new(matmul_fwd(a, b)?))
    }

    fn add_bias(&self, x: &Shared<E>, bias: &Shared<E>) -> Result<Shared<E>> {
        Ok(Arc::new(add_bias_fwd(x, bias)?))
    }

    fn reshape(&self, x: &Shared<E>, shape: &[usize]) -> Result<Shared<E>> {
        Ok(Arc::new((**x).clone().reshape(shape)?))
    }

    fn concat(&self, xs: &[Shared<E>], axis: usize) -> Result<Shared<E>> {
        let refs: Vec<&Tensor<E>> = xs.iter().map(|x| x.as_ref()).collect();
        Ok(Arc::new(concat_fwd(&refs, axis)?))
    }

    fn narrow(&self, x: &Shared<E>, axis: usize, start: usize, len: usize) -> Result<Shared<E>> {
        Ok(Arc::new(narrow_fwd(x, axis, start, len)?))
    }

    fn channel_affine(&self, x: &Shared<E>, scale: &[E], shift: &[E]) -> Result<Shared<E>> {
        Ok(Arc::new(channel_affine_fwd(x, scale, shift)?))
    }

    fn sum(&self, x: &Shared<E>) -> Shared<E> {
        Arc::new(Tensor::scalar(x.sum()))
    }

    fn mean(&self, x: &Shared<E>) -> Shared<E> {
        Arc::new(Tensor::scalar(x.sum() / E::lit(x.len().max(1) as f64)))
    }

    fn mse(&self, a: &Shared<E>, b: &Shared<E>) -> Result<Shared<E>> {
        same_shape("mse", a, b)?;
        let s: E = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(Arc::new(Tensor::scalar(s / E::lit(a.len().max(1) as f64))))
    }

    fn conv3d(&self, x: &Shared<E>, w: &Shared<E>, b: &Shared<E>, stride: usize, padding: Padding) -> Result<Shared<E>> {
        let g = Conv3dGeometry::infer(x.shape(), w.shape(), b.shape(), stride, padding)?;
        Ok(Arc::new(conv3d_forward(&g, x, w, b)))
    }

    fn maxpool3d(&self, x: &Shared<E>, window: [usize; 3], stride: [usize; 3], rounding: Rounding) -> Result<Shared<E>> {
        let g = PoolGeometry::infer(x.shape(), window, stride, rounding)?;
        Ok(Arc::new(maxpool3d_forward(&g, x).0))
    }

    fn upsample3d(&self, x: &Shared<E>, factors: [usize; 3]) -> Result<Shared<E>> {
        Ok(Arc::new(upsample3d_forward(x, factors)?))
    }

    fn crop_or_pad3d(&self, x: &Shared<E>, target: [usize; 3]) -> Result<Shared<E>> {
        Ok(Arc::new(crop_or_pad3d_forward(x, target)?))
    }

    fn gather_nodes(&self, x: &Shared<E>, index: &Arc<NodeIndex>) -> Result<Shared<E>> {
        Ok(Arc::new(gather_fwd(x, index)?))
    }

    fn scatter_nodes(&self, x: &Shared<E>, index: &Arc<NodeIndex>) -> Result<Shared<E>> {
        Ok(Arc::new(scatter_fwd(x, index)?))
    }

    fn hex_volume(&self, x: &Shared<E>, kernel: &Arc<HexVolume>) -> Result<Shared<E>> {
        check_field("hex_volume", x.shape(), kernel.n_nodes())?;
        Ok(Arc::new(hex_volume_eval(x, kernel, None).0))
    }

    fn cosine_misalignment(&self, x: &Shared<E>, forces: &Tensor<E>) -> Result<Shared<E>> {
        Ok(Arc::new(Tensor::scalar(cosine_eval(x, forces, false)?.0)))
    }
}

// ---------------------------------------------------------------------------
// Taped executor.

impl<E: Real> Ops<E> for Graph<E> {
    type V = Var;

    fn constant(&self, t: Tensor<E>) -> Var {
        Graph::constant(self, t)
    }

    fn param(&self, t: &Arc<Tensor<E>>) -> Var {
        Graph::param(self, t.clone())
    }

    fn value(&self, v: &Var) -> Arc<Tensor<E>> {
        Graph::value(self, *v)
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).zip_map(&self.value(*b), |x, y| x + y)?;
        Ok(self.push(out, &[*a, *b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.value(*a).zip_map(&self.value(*b), |x, y| x - y)?;
        Ok(self.push(out, &[*a, *b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        let out = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(out, &[*a, *b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_map(&av, |x, y| x * y).unwrap()),
            ]
        }))
    }

    fn add_scalar(&self, a: &Var, s: E) -> Var {
        let out = self.value(*a).map(|x| x + s);
        self.push(out, &[*a], |g, _| vec![Some(g.clone())])
    }

    fn mul_scalar(&self, a: &Var, s: E) -> Var {
        let out = self.value(*a).map(|x| x * s);
        self.push(out, &[*a], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    fn relu(&self, x: &Var) -> Var {
        let xv = self.value(*x);
        let out = xv.map(|v| if v > E::zero() { v } else { E::zero() });
        // Subgradient 0 at exactly 0.
        self.push(out, &[*x], move |g, _| {
            vec![Some(g.zip_map(&xv, |gv, v| if v > E::zero() { gv } else { E::zero() }).unwrap())]
        })
    }

    fn tanh(&self, x: &Var) -> Var {
        let out = Arc::new(self.value(*x).map(|v| v.tanh()));
        let y = out.clone();
        self.push(out.clone(), &[*x], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * (E::one() - yv * yv)).unwrap())]
        })
    }

    fn sigmoid(&self, x: &Var) -> Var {
        let out = Arc::new(self.value(*x).map(sigmoid));
        let y = out.clone();
        self.push(out.clone(), &[*x], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, yv| gv * yv * (E::one() - yv)).unwrap())]
        })
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        let out = matmul_fwd(&av, &bv)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        Ok(self.push(out, &[*a, *b], move |g, need| {
            let da = need[0].then(|| {
                let mut d = vec![E::zero(); m * k];
                E::gemm(m, n, k, E::one(), g.data(), false, bv.data(), true, E::zero(), &mut d);
                Tensor::new(&[m, k], d).unwrap()
            });
            let db = need[1].then(|| {
                let mut d = vec![E::zero(); k * n];
                E::gemm(k, m, n, E::one(), av.data(), true, g.data(), false, E::zero(), &mut d);
                Tensor::new(&[k, n], d).unwrap()
            });
            vec![da, db]
        }))
    }

    fn add_bias(&self, x: &Var, bias: &Var) -> Result<Var> {
        let out = add_bias_fwd(&self.value(*x), &self.value(*bias))?;
        let n = out.shape()[1];
        Ok(self.push(out, &[*x, *bias], move |g, need| {
            let db = need[1].then(|| {
                let mut d = vec![E::zero(); n];
                for row in g.data().chunks(n) {
                    for (acc, &v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::new(&[n], d).unwrap()
            });
            vec![Some(g.clone()), db]
        }))
    }

    fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(*x);
        let in_shape = xv.shape().to_vec();
        let out = (*xv).clone().reshape(shape)?;
        Ok(self.push(out, &[*x], move |g, _| vec![Some(g.clone().reshape(&in_shape).unwrap())]))
    }

    fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<Arc<Tensor<E>>> = xs.iter().map(|x| self.value(*x)).collect();
        let refs: Vec<&Tensor<E>> = vals.iter().map(|v| v.as_ref()).collect();
        let out = concat_fwd(&refs, axis)?;
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push(out, xs, move |g, need| {
            let mut start = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let part = nd.then(|| narrow_fwd(g, axis, start, w).unwrap());
                    start += w;
                    part
                })
                .collect()
        }))
    }

    fn narrow(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(*x);
        let out = narrow_fwd(&xv, axis, start, len)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(narrow_bwd(&in_shape, axis, start, g))]))
    }

    fn channel_affine(&self, x: &Var, scale: &[E], shift: &[E]) -> Result<Var> {
        let out = channel_affine_fwd(&self.value(*x), scale, shift)?;
        let scale = scale.to_vec();
        let zeros = vec![E::zero(); scale.len()];
        Ok(self.push(out, &[*x], move |g, _| vec![Some(channel_affine_fwd(g, &scale, &zeros).unwrap())]))
    }

    fn sum(&self, x: &Var) -> Var {
        let xv = self.value(*x);
        let shape = xv.shape().to_vec();
        self.push(Tensor::scalar(xv.sum()), &[*x], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    fn mean(&self, x: &Var) -> Var {
        let xv = self.value(*x);
        let shape = xv.shape().to_vec();
        let n = E::lit(xv.len().max(1) as f64);
        self.push(Tensor::scalar(xv.sum() / n), &[*x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0] / n))]
        })
    }

    fn mse(&self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        same_shape("mse", &av, &bv)?;
        let diff = av.zip_map(&bv, |x, y| x - y)?;
        let n = E::lit(diff.len().max(1) as f64);
        let loss = diff.data().iter().map(|&d| d * d).sum::<E>() / n;
        Ok(self.push(Tensor::scalar(loss), &[*a, *b], move |g, need| {
            let k = g.data()[0] * E::lit(2.0) / n;
            vec![
                need[0].then(|| diff.map(|d| d * k)),
                need[1].then(|| diff.map(|d| -d * k)),
            ]
        }))
    }

    fn conv3d(&self, x: &Var, w: &Var, b: &Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xv, wv, bv) = (self.value(*x), self.value(*w), self.value(*b));
        let geom = Conv3dGeometry::infer(xv.shape(), wv.shape(), bv.shape(), stride, padding)?;
        let out = conv3d_forward(&geom, &xv, &wv, &bv);
        Ok(self.push(out, &[*x, *w, *b], move |g, need| {
            let (gi, gw, gb) = conv3d_backward(&geom, &xv, &wv, g, need[0]);
            vec![gi, need[1].then_some(gw), need[2].then_some(gb)]
        }))
    }

    fn maxpool3d(&self, x: &Var, window: [usize; 3], stride: [usize; 3], rounding: Rounding) -> Result<Var> {
        let xv = self.value(*x);
        let geom = PoolGeometry::infer(xv.shape(), window, stride, rounding)?;
        let (out, argmax) = maxpool3d_forward(&geom, &xv);
        let in_shape = xv.shape().to_vec();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(maxpool3d_backward(&in_shape, &argmax, g))]))
    }

    fn upsample3d(&self, x: &Var, factors: [usize; 3]) -> Result<Var> {
        let xv = self.value(*x);
        let out = upsample3d_forward(&xv, factors)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(upsample3d_backward(&in_shape, factors, g))]))
    }

    fn crop_or_pad3d(&self, x: &Var, target: [usize; 3]) -> Result<Var> {
        let xv = self.value(*x);
        let out = crop_or_pad3d_forward(&xv, target)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(crop_or_pad3d_backward(&in_shape, g))]))
    }

    fn gather_nodes(&self, x: &Var, index: &Arc<NodeIndex>) -> Result<Var> {
        let out = gather_fwd(&self.value(*x), index)?;
        let idx = index.clone();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(scatter_fwd(g, &idx).unwrap())]))
    }

    fn scatter_nodes(&self, x: &Var, index: &Arc<NodeIndex>) -> Result<Var> {
        let out = scatter_fwd(&self.value(*x), index)?;
        let idx = index.clone();
        Ok(self.push(out, &[*x], move |g, _| vec![Some(gather_fwd(g, &idx).unwrap())]))
    }

    fn hex_volume(&self, x: &Var, kernel: &Arc<HexVolume>) -> Result<Var> {
        let xv = self.value(*x);
        check_field("hex_volume", xv.shape(), kernel.n_nodes())?;
        let out = hex_volume_eval(&xv, kernel, None).0;
        let kernel = kernel.clone();
        Ok(self.push(out, &[*x], move |g, _| vec![hex_volume_eval(&xv, &kernel, Some(g.data())).1]))
    }

    fn cosine_misalignment(&self, x: &Var, forces: &Tensor<E>) -> Result<Var> {
        let xv = self.value(*x);
        let (value, grad) = cosine_eval(&xv, forces, true)?;
        let grad = grad.expect("gradient requested");
        Ok(self.push(Tensor::scalar(value), &[*x], move |g, _| {
            let s = g.data()[0];
            vec![Some(grad.map(|v| v * s))]
        }))
    }
}
