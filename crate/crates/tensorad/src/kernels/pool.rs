//! Channel-wise 3D max pooling over `[B, C, X, Y, Z]`.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a trailing partial window is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Drop incomplete trailing windows.
    Floor,
    /// Keep incomplete trailing windows (max over the in-bounds part).
    #[default]
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub window: [usize; 3],
    pub stride: [usize; 3],
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// Output extent of one pooled axis.
pub fn pooled_extent(len: usize, window: usize, stride: usize, rounding: Rounding) -> Option<usize> {
    if window == 0 || stride == 0 || len == 0 {
        return None;
    }
    match rounding {
        Rounding::Floor => (len >= window).then(|| (len - window) / stride + 1),
        Rounding::Ceil => {
            if window > len.div_ceil(stride) * stride {
                return None;
            }
            let out = if len >= window {
                (len - window).div_ceil(stride) + 1
            } else {
                1
            };
            Some(out.min(len.div_ceil(stride)))
        }
    }
}

impl PoolGeometry {
    pub fn infer(input: &[usize], window: [usize; 3], stride: [usize; 3], rounding: Rounding) -> Result<Self> {
        const OP: &str = "maxpool3d";
        if input.len() != 5 {
            return Err(TensorError::invalid(OP, format!("input must be rank 5, got {input:?}")));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            output[d] = pooled_extent(input[2 + d], window[d], stride[d], rounding).ok_or_else(|| {
                TensorError::invalid(
                    OP,
                    format!(
                        "window {} (stride {}) larger than padded input extent {} on axis {d}",
                        window[d], stride[d], input[2 + d]
                    ),
                )
            })?;
        }
        Ok(PoolGeometry {
            batch: input[0],
            channels: input[1],
            window,
            stride,
            input: [input[2], input[3], input[4]],
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.output[0], self.output[1], self.output[2]]
    }
}

/// Returns the pooled tensor and, per output element, the flat input index of
/// the selected maximum (first index wins ties).
pub fn maxpool3d_forward<E: Real>(g: &PoolGeometry, input: &Tensor<E>) -> (Tensor<E>, Vec<usize>) {
    let [ix, iy, iz] = g.input;
    let [ox, oy, oz] = g.output;
    let in_vox = ix * iy * iz;
    let n_out = g.batch * g.channels * ox * oy * oz;
    let mut out = Vec::with_capacity(n_out);
    let mut argmax = Vec::with_capacity(n_out);
    let src = input.data();
    for bc in 0..g.batch * g.channels {
        let base = bc * in_vox;
        for x in 0..ox {
            let xr = x * g.stride[0]..(x * g.stride[0] + g.window[0]).min(ix);
            for y in 0..oy {
                let yr = y * g.stride[1]..(y * g.stride[1] + g.window[1]).min(iy);
                for z in 0..oz {
                    let zr = z * g.stride[2]..(z * g.stride[2] + g.window[2]).min(iz);
                    let mut best = usize::MAX;
                    let mut best_v = E::neg_infinity();
                    for xi in xr.clone() {
                        for yi in yr.clone() {
                            for zi in zr.clone() {
                                let idx = base + (xi * iy + yi) * iz + zi;
                                let v = src[idx];
                                if best == usize::MAX || v > best_v {
                                    best = idx;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
    }
    (Tensor::new(&g.output_shape(), out).unwrap(), argmax)
}

pub fn maxpool3d_backward<E: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<E>) -> Tensor<E> {
    let mut grad = Tensor::zeros(input_shape);
    let gd = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += g;
    }
    grad
}
