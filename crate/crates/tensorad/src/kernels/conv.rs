//! 3D cross-correlation via im2col + GEMM.
//!
//! Layouts: input `[B, C_in, X, Y, Z]`, filters `[C_out, C_in, k, k, k]`,
//! bias `[C_out]`, output `[B, C_out, X', Y', Z']`.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn infer(
        input: &[usize],
        filters: &[usize],
        bias: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        const OP: &str = "conv3d";
        if input.len() != 5 {
            return Err(TensorError::invalid(OP, format!("input must be rank 5, got {input:?}")));
        }
        if filters.len() != 5 || filters[2] != filters[3] || filters[3] != filters[4] {
            return Err(TensorError::invalid(
                OP,
                format!("filters must be [C_out, C_in, k, k, k], got {filters:?}"),
            ));
        }
        let kernel = filters[2];
        if kernel % 2 == 0 {
            return Err(TensorError::invalid(OP, format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be positive"));
        }
        if filters[1] != input[1] {
            return Err(TensorError::shape(OP, &[filters[0], input[1]], &filters[..2]));
        }
        if bias != [filters[0]] {
            return Err(TensorError::shape(OP, &[filters[0]], bias));
        }
        let pad = match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        };
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input[2 + d] + 2 * pad;
            if padded < kernel {
                return Err(TensorError::invalid(
                    OP,
                    format!("kernel {kernel} larger than padded input extent {padded}"),
                ));
            }
            output[d] = (padded - kernel) / stride + 1;
        }
        Ok(Conv3dGeometry {
            batch: input[0],
            c_in: input[1],
            c_out: filters[0],
            kernel,
            stride,
            pad,
            input: [input[2], input[3], input[4]],
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.pow(3)
    }

    /// Walks every run of (col row, output voxels, input voxels) that lies
    /// inside the unpadded input: `f(row, out_start, in_start, len)` covers
    /// outputs `out_start..out_start + len` (contiguous along z) reading
    /// inputs `in_start, in_start + stride, ...`. Row order is
    /// `((ci * k + dx) * k + dy) * k + dz`, matching the flattened filter layout.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let k = self.kernel;
        let [ix, iy, iz] = self.input;
        let [ox, oy, oz] = self.output;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.c_in {
            for dx in 0..k {
                for dy in 0..k {
                    for dz in 0..k {
                        let row = ((ci * k + dx) * k + dy) * k + dz;
                        // range of oz whose iz lands inside [0, iz)
                        let dz_i = dz as isize - p;
                        let z_lo = if dz_i >= 0 { 0 } else { ((-dz_i) + s - 1) / s };
                        let z_hi = ((iz as isize - 1 - dz_i).div_euclid(s) + 1).clamp(0, oz as isize);
                        if z_lo >= z_hi {
                            continue;
                        }
                        let len = (z_hi - z_lo) as usize;
                        for x in 0..ox {
                            let xi = (x as isize) * s + dx as isize - p;
                            if xi < 0 || xi >= ix as isize {
                                continue;
                            }
                            for y in 0..oy {
                                let yi = (y as isize) * s + dy as isize - p;
                                if yi < 0 || yi >= iy as isize {
                                    continue;
                                }
                                let out_base = (x * oy + y) * oz;
                                let in_base = ci * ix * iy * iz + ((xi as usize) * iy + yi as usize) * iz;
                                f(row, out_base + z_lo as usize, in_base + (z_lo * s + dz_i) as usize, len);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `cols` must start zeroed. Runs overwrite the same positions on every
    /// call, so padding entries stay zero when the buffer is reused across a batch.
    fn im2col<E: Real>(&self, input: &[E], cols: &mut [E]) {
        let (n, s) = (self.out_vox(), self.stride);
        if s == 1 {
            self.for_each_run(|row, o, i, len| {
                cols[row * n + o..row * n + o + len].copy_from_slice(&input[i..i + len]);
            });
        } else {
            self.for_each_run(|row, o, i, len| {
                let dst = &mut cols[row * n + o..row * n + o + len];
                for (z, d) in dst.iter_mut().enumerate() {
                    *d = input[i + z * s];
                }
            });
        }
    }

    fn col2im<E: Real>(&self, cols: &[E], grad_in: &mut [E]) {
        let (n, s) = (self.out_vox(), self.stride);
        self.for_each_run(|row, o, i, len| {
            let src = &cols[row * n + o..row * n + o + len];
            for (z, &v) in src.iter().enumerate() {
                grad_in[i + z * s] += v;
            }
        });
    }
}

pub fn conv3d_forward<E: Real>(
    g: &Conv3dGeometry,
    input: &Tensor<E>,
    filters: &Tensor<E>,
    bias: &Tensor<E>,
) -> Tensor<E> {
    let (kk, n) = (g.col_rows(), g.out_vox());
    let in_stride = g.c_in * g.in_vox();
    let out_stride = g.c_out * n;
    let mut out = vec![E::zero(); g.batch * out_stride];
    let mut cols = vec![E::zero(); kk * n];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        for (co, chunk) in dst.chunks_mut(n).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        E::gemm(g.c_out, kk, n, E::one(), filters.data(), false, &cols, false, E::one(), dst);
    }
    Tensor::new(&g.output_shape(), out).expect("conv3d output shape")
}

/// Gradients with respect to (input, filters, bias).
pub fn conv3d_backward<E: Real>(
    g: &Conv3dGeometry,
    input: &Tensor<E>,
    filters: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_input_grad: bool,
) -> (Option<Tensor<E>>, Tensor<E>, Tensor<E>) {
    let (kk, n) = (g.col_rows(), g.out_vox());
    let in_stride = g.c_in * g.in_vox();
    let out_stride = g.c_out * n;
    let mut grad_w = vec![E::zero(); g.c_out * kk];
    let mut grad_b = vec![E::zero(); g.c_out];
    let mut grad_in = need_input_grad.then(|| vec![E::zero(); g.batch * in_stride]);
    let mut cols = vec![E::zero(); kk * n];
    let mut dcols = vec![E::zero(); kk * n];
    for b in 0..g.batch {
        let go = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
        for (co, chunk) in go.chunks(n).enumerate() {
            grad_b[co] += chunk.iter().copied().sum::<E>();
        }
        g.im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
        E::gemm(g.c_out, n, kk, E::one(), go, false, &cols, true, E::one(), &mut grad_w);
        if let Some(gi) = grad_in.as_mut() {
            E::gemm(kk, g.c_out, n, E::one(), filters.data(), true, go, false, E::zero(), &mut dcols);
            g.col2im(&dcols, &mut gi[b * in_stride..(b + 1) * in_stride]);
        }
    }
    let filter_shape = [g.c_out, g.c_in, g.kernel, g.kernel, g.kernel];
    (
        grad_in.map(|d| Tensor::new(&[g.batch, g.c_in, g.input[0], g.input[1], g.input[2]], d).unwrap()),
        Tensor::new(&filter_shape, grad_w).unwrap(),
        Tensor::new(&[g.c_out], grad_b).unwrap(),
    )
}

/// Trainable parameter count of a conv layer with bias.
pub fn conv3d_param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
    c_out * (kernel.pow(3) * c_in + 1)
}
