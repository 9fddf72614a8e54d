//! Finite-difference checks of every differentiable op.
//!
//! Each case builds a graph from leaf inputs, contracts the output with fixed
//! random weights into a scalar, and compares the tape gradient with central
//! differences (h = 1e-3) in f64.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viscosurr_tensorad::{
    lstm_layer, Graph, HexVolume, LstmWeights, NodeIndex, Ops, Padding, Result, Rounding, Tensor, Var,
};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so that ReLU kinks are not crossed by ±h.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Unit-scale magnitudes with random sign.
fn unit_scale(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.3..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values spaced 0.01 apart (shuffled) so max-pool ties never occur.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> f64 {
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let out = build(&g, &vars).unwrap();
    let y = g.value(out);
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Returns the worst relative error over all inputs.
fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let out = build(&g, &vars).unwrap();
    let weights = random(&mut rng, g.value(out).shape());
    let w = g.constant(weights.clone());
    let loss = g.sum(&g.mul(&out, &w).unwrap());
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(build, &plus, &weights) - eval(build, &minus, &weights)) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    println!("gradcheck {name:<24} max_rel_err = {worst:.3e}");
    assert!(worst < TOL, "{name}: max relative error {worst:e} >= {TOL:e}");
    worst
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    let (a, b) = (random(&mut r, &[3, 4]), random(&mut r, &[3, 4]));
    check("add", vec![a.clone(), b.clone()], &|g, v| g.add(&v[0], &v[1]));
    check("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(&v[0], &v[1]));
    check("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(&v[0], &v[1]));
    check("add_scalar", vec![a.clone()], &|g, v| Ok(g.add_scalar(&v[0], 0.7)));
    check("mul_scalar", vec![a.clone()], &|g, v| Ok(g.mul_scalar(&v[0], -1.3)));
    check("relu", vec![away_from_zero(&mut r, &[3, 4])], &|g, v| Ok(g.relu(&v[0])));
    check("tanh", vec![a.clone()], &|g, v| Ok(g.tanh(&v[0])));
    check("sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(&v[0])));
    check("sum", vec![a.clone()], &|g, v| Ok(g.sum(&v[0])));
    check("mean", vec![a.clone()], &|g, v| Ok(g.mean(&v[0])));
    check("mse", vec![a, b], &|g, v| g.mse(&v[0], &v[1]));
}

#[test]
fn linear_algebra_and_layout_ops() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, &[3, 5]), random(&mut r, &[5, 2])], &|g, v| {
        g.matmul(&v[0], &v[1])
    });
    check("add_bias", vec![random(&mut r, &[4, 3]), random(&mut r, &[3])], &|g, v| {
        g.add_bias(&v[0], &v[1])
    });
    check("reshape", vec![random(&mut r, &[2, 6])], &|g, v| {
        let y = g.reshape(&v[0], &[3, 4])?;
        g.mul(&y, &y)
    });
    check("concat", vec![random(&mut r, &[2, 3, 2]), random(&mut r, &[2, 1, 2])], &|g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check("narrow", vec![random(&mut r, &[3, 5])], &|g, v| g.narrow(&v[0], 1, 1, 3));
    check("channel_affine", vec![random(&mut r, &[2, 3, 2, 2, 1])], &|g, v| {
        g.channel_affine(&v[0], &[0.5, -2.0, 1.5], &[0.1, 0.2, 0.3])
    });
}

#[test]
fn conv3d_variants() {
    let mut r = rng();
    let x = random(&mut r, &[2, 2, 4, 3, 3]);
    let w = random(&mut r, &[3, 2, 3, 3, 3]);
    let b = random(&mut r, &[3]);
    check("conv3d same", vec![x.clone(), w.clone(), b.clone()], &|g, v| {
        g.conv3d(&v[0], &v[1], &v[2], 1, Padding::Same)
    });
    check("conv3d valid", vec![x.clone(), w.clone(), b.clone()], &|g, v| {
        g.conv3d(&v[0], &v[1], &v[2], 1, Padding::Valid)
    });
    check("conv3d stride 2", vec![x.clone(), w, b], &|g, v| g.conv3d(&v[0], &v[1], &v[2], 2, Padding::Same));
    check("conv3d 1x1", vec![x, random(&mut r, &[4, 2, 1, 1, 1]), random(&mut r, &[4])], &|g, v| {
        g.conv3d(&v[0], &v[1], &v[2], 1, Padding::Same)
    });
}

#[test]
fn pooling_and_resampling() {
    let mut r = rng();
    let x = distinct(&mut r, &[1, 2, 5, 4, 3]);
    check("maxpool3d ceil", vec![x.clone()], &|g, v| g.maxpool3d(&v[0], [3; 3], [3; 3], Rounding::Ceil));
    check("maxpool3d floor", vec![x], &|g, v| g.maxpool3d(&v[0], [2; 3], [2; 3], Rounding::Floor));
    let y = random(&mut r, &[1, 2, 2, 3, 2]);
    check("upsample3d", vec![y.clone()], &|g, v| g.upsample3d(&v[0], [2, 1, 3]));
    check("crop_or_pad3d", vec![y], &|g, v| g.crop_or_pad3d(&v[0], [1, 5, 2]));
}

fn lattice(dims: [usize; 3]) -> (Vec<[f64; 3]>, Vec<[u32; 8]>) {
    let node = |i: usize, j: usize, k: usize| ((i * dims[1] + j) * dims[2] + k) as u32;
    let mut rest = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                rest.push([i as f64, j as f64, k as f64]);
            }
        }
    }
    let mut cells = Vec::new();
    for i in 0..dims[0] - 1 {
        for j in 0..dims[1] - 1 {
            for k in 0..dims[2] - 1 {
                cells.push(std::array::from_fn(|c| node(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))));
            }
        }
    }
    (rest, cells)
}

#[test]
fn node_maps_and_volume() {
    let mut r = rng();
    let dims = [3, 2, 2];
    let index = Arc::new(NodeIndex { dims, nodes: vec![0, 3, 4, 11] });
    let i1 = index.clone();
    check("gather_nodes", vec![random(&mut r, &[2, 3, 3, 2, 2])], &move |g, v| g.gather_nodes(&v[0], &i1));
    let i2 = index.clone();
    check("scatter_nodes", vec![random(&mut r, &[2, 12])], &move |g, v| g.scatter_nodes(&v[0], &i2));

    let (rest, cells) = lattice(dims);
    let kernel = Arc::new(HexVolume::new(rest, cells).unwrap());
    let small = random(&mut r, &[2, 3, 3, 2, 2]).map(|v| 0.2 * v);
    check("hex_volume", vec![small], &move |g, v| g.hex_volume(&v[0], &kernel));

    let forces = random(&mut r, &[1, 3, 3, 2, 2]);
    let disp = unit_scale(&mut r, &[1, 3, 3, 2, 2]);
    check("cosine_misalignment", vec![disp], &move |g, v| g.cosine_misalignment(&v[0], &forces));
}

#[test]
fn lstm_bidirectional() {
    let mut r = rng();
    let (d, h, t, b) = (3, 2, 3, 2);
    let inputs = vec![
        random(&mut r, &[t * b, d]),
        random(&mut r, &[d, 4 * h]),
        random(&mut r, &[h, 4 * h]),
        random(&mut r, &[4 * h]),
        random(&mut r, &[d, 4 * h]),
        random(&mut r, &[h, 4 * h]),
        random(&mut r, &[4 * h]),
    ];
    check("lstm_layer bidi", inputs, &move |g, v| {
        let fw = LstmWeights { w_ih: v[1], w_hh: v[2], bias: v[3] };
        let bw = LstmWeights { w_ih: v[4], w_hh: v[5], bias: v[6] };
        let outs = lstm_layer(g, &v[0], t, b, &fw, Some(&bw))?;
        g.concat(&outs, 1)
    });
}

#[test]
fn composite_graph_with_shared_parameter() {
    let mut r = rng();
    let x = random(&mut r, &[1, 2, 4, 4, 3]);
    let w = random(&mut r, &[2, 2, 3, 3, 3]).map(|v| 0.3 * v);
    let b = random(&mut r, &[2]);
    // conv -> tanh -> pool -> upsample -> crop, reusing the same filters twice.
    check("composite", vec![x, w, b], &|g, v| {
        let h1 = g.tanh(&g.conv3d(&v[0], &v[1], &v[2], 1, Padding::Same)?);
        let h2 = g.tanh(&g.conv3d(&h1, &v[1], &v[2], 1, Padding::Same)?);
        let p = g.maxpool3d(&h2, [2; 3], [2; 3], Rounding::Ceil)?;
        let u = g.upsample3d(&p, [2, 2, 2])?;
        let c = g.crop_or_pad3d(&u, [4, 4, 3])?;
        g.concat(&[c, h1], 1)
    });
}
