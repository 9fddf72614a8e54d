//! Nearest-neighbour upsampling and centered crop/zero-pad on `[B, C, X, Y, Z]`.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

fn spatial(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(TensorError::invalid(op, format!("expected rank-5 input, got {shape:?}")));
    }
    Ok([shape[2], shape[3], shape[4]])
}

/// Maps every output voxel of one channel plane to its source voxel.
fn upsample_index(input: [usize; 3], factors: [usize; 3]) -> Vec<usize> {
    let out = [input[0] * factors[0], input[1] * factors[1], input[2] * factors[2]];
    let mut idx = Vec::with_capacity(out.iter().product());
    for x in 0..out[0] {
        for y in 0..out[1] {
            for z in 0..out[2] {
                idx.push(((x / factors[0]) * input[1] + y / factors[1]) * input[2] + z / factors[2]);
            }
        }
    }
    idx
}

pub fn upsample3d_forward<E: Real>(input: &Tensor<E>, factors: [usize; 3]) -> Result<Tensor<E>> {
    let dims = spatial("upsample3d", input.shape())?;
    if factors.contains(&0) {
        return Err(TensorError::invalid("upsample3d", "factors must be >= 1"));
    }
    let map = upsample_index(dims, factors);
    let in_vox: usize = dims.iter().product();
    let planes = input.shape()[0] * input.shape()[1];
    let mut out = Vec::with_capacity(planes * map.len());
    for p in 0..planes {
        let src = &input.data()[p * in_vox..(p + 1) * in_vox];
        out.extend(map.iter().map(|&i| src[i]));
    }
    let s = input.shape();
    Tensor::new(
        &[s[0], s[1], dims[0] * factors[0], dims[1] * factors[1], dims[2] * factors[2]],
        out,
    )
}

pub fn upsample3d_backward<E: Real>(input_shape: &[usize], factors: [usize; 3], grad_out: &Tensor<E>) -> Tensor<E> {
    let dims = [input_shape[2], input_shape[3], input_shape[4]];
    let map = upsample_index(dims, factors);
    let in_vox: usize = dims.iter().product();
    let mut grad = Tensor::zeros(input_shape);
    let planes = input_shape[0] * input_shape[1];
    let gd = grad.data_mut();
    for p in 0..planes {
        let go = &grad_out.data()[p * map.len()..(p + 1) * map.len()];
        let dst = &mut gd[p * in_vox..(p + 1) * in_vox];
        for (&i, &g) in map.iter().zip(go) {
            dst[i] += g;
        }
    }
    grad
}

/// Per-axis placement used by [`crop_or_pad3d_forward`]: an axis larger than
/// the target is center-cropped (extra voxel dropped at the high end), a
/// smaller one is centered inside zeros.
fn placement(input: usize, target: usize) -> (usize, usize, usize) {
    // (src_start, dst_start, len)
    if input >= target {
        ((input - target) / 2, 0, target)
    } else {
        (0, (target - input) / 2, input)
    }
}

fn copy_region<E: Real>(
    src: &[E],
    src_dims: [usize; 3],
    dst: &mut [E],
    dst_dims: [usize; 3],
    place: [(usize, usize, usize); 3],
) {
    let [(sx, dx, lx), (sy, dy, ly), (sz, dz, lz)] = place;
    for x in 0..lx {
        for y in 0..ly {
            let s0 = ((sx + x) * src_dims[1] + sy + y) * src_dims[2] + sz;
            let d0 = ((dx + x) * dst_dims[1] + dy + y) * dst_dims[2] + dz;
            dst[d0..d0 + lz].copy_from_slice(&src[s0..s0 + lz]);
        }
    }
}

pub fn crop_or_pad3d_forward<E: Real>(input: &Tensor<E>, target: [usize; 3]) -> Result<Tensor<E>> {
    let dims = spatial("crop_or_pad3d", input.shape())?;
    if target.contains(&0) {
        return Err(TensorError::invalid("crop_or_pad3d", "target extents must be positive"));
    }
    let place = [
        placement(dims[0], target[0]),
        placement(dims[1], target[1]),
        placement(dims[2], target[2]),
    ];
    let planes = input.shape()[0] * input.shape()[1];
    let (in_vox, out_vox) = (dims.iter().product::<usize>(), target.iter().product::<usize>());
    let mut out = vec![E::zero(); planes * out_vox];
    for p in 0..planes {
        copy_region(
            &input.data()[p * in_vox..(p + 1) * in_vox],
            dims,
            &mut out[p * out_vox..(p + 1) * out_vox],
            target,
            place,
        );
    }
    let s = input.shape();
    Tensor::new(&[s[0], s[1], target[0], target[1], target[2]], out)
}

pub fn crop_or_pad3d_backward<E: Real>(input_shape: &[usize], grad_out: &Tensor<E>) -> Tensor<E> {
    let dims = [input_shape[2], input_shape[3], input_shape[4]];
    let gs = grad_out.shape();
    let target = [gs[2], gs[3], gs[4]];
    // Swap roles: region of the output maps back onto the input.
    let place = [0, 1, 2].map(|d| {
        let (s, t, l) = placement(dims[d], target[d]);
        (t, s, l)
    });
    let planes = input_shape[0] * input_shape[1];
    let (in_vox, out_vox) = (dims.iter().product::<usize>(), target.iter().product::<usize>());
    let mut grad = vec![E::zero(); planes * in_vox];
    for p in 0..planes {
        copy_region(
            &grad_out.data()[p * out_vox..(p + 1) * out_vox],
            target,
            &mut grad[p * in_vox..(p + 1) * in_vox],
            dims,
            place,
        );
    }
    Tensor::new(input_shape, grad).unwrap()
}
