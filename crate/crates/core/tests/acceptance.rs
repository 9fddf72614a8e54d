//! Acceptance report: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs as a plain binary so the report is always printed:
//!
//!     cargo test -p viscosurr-core --test acceptance
//!     cargo test -p viscosurr-core --test acceptance -- latency autodiff
//!
//! The training stage generates a desk-scale dataset plus independent
//! held-out sequences and trains four models; expect about half an hour on
//! one core. Latency thresholds can be changed
//! with `VISCOSURR_CNN_LATENCY_S` and `VISCOSURR_LSTM_LATENCY_S`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viscosurr_core::evalkit::{
    depth_profile_error, improvement_ratio, latency_bench, mean_abs_error, model_mae, predict_sequences,
    prune_weights, quantize_weights, volume_violation_trace, QuantMode,
};
use viscosurr_core::femsim::{
    derive_bulk_modulus, generate_dataset, qlv_update, relaxation_modulus, Mat3, Material, QlvCoefficients, QlvState,
    ScenarioConfig, SequenceDataset,
};
use viscosurr_core::meshkit::{build_box_mesh, total_volume, Field3, FixedSpec, GridMesh};
use viscosurr_core::store::{dataset_to_container, decode, encode};
use viscosurr_core::surrogate::{physics_loss, LossConfig, ModelInstance, ModelSpec, REFERENCE_CNN_LSTM_PARAMS};
use viscosurr_core::trainer::{split_dataset, train, DatasetSplit, EpochLog, Objective, SplitFractions, TrainConfig};
use viscosurr_tensorad::{
    lstm_layer, Eager, Graph, HexVolume, LstmWeights, NodeIndex, Ops, Padding, Result as TResult, Rounding, Tensor,
    Var,
};

const RELAXATION_RMS: f64 = 0.02;
const BULK_MODULUS: f64 = 0.0023667;
const BULK_TOL: f64 = 1e-7;
const GRAD_TOL: f64 = 1e-4;
const VOLUME_TOL: f64 = 1e-9;
const MIN_IMPROVEMENT: f64 = 0.20;
const TRAINING_BUDGET_S: f64 = 45.0 * 60.0;
const CNN_LATENCY_S: f64 = 0.05;
const LSTM_LATENCY_S: f64 = 0.07;
const F16_MAX_DEGRADATION: f64 = 0.05;
const PRUNE_FRACTION: f64 = 0.30;
const PRUNE_MAX_DEGRADATION: f64 = 0.10;
const FUZZ_CASES: usize = 1000;

const PAPER_DIMS: [usize; 3] = [17, 17, 8];
const DESK_DIMS: [usize; 3] = [9, 9, 5];
const DESK_SEQUENCES: usize = 80;
const DATA_SEED: u64 = 11;
const FRESH_SEQUENCES: usize = 40;
const FRESH_SEED: u64 = 12;
const TRAIN_SEED: u64 = 1;
const EPOCHS: usize = 30;
const LEARNING_RATE: f64 = 1e-3;
const UNET_FILTERS: usize = 16;
const LSTM_HIDDEN: usize = 32;
const LSTM_STEPS: usize = 8;

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn line(&mut self, name: &'static str, pass: bool, detail: impl AsRef<str>) {
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        if !pass {
            self.failed.push(name);
        }
    }
}

fn main() {
    // Like libtest, positional arguments select groups by substring.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let groups: [(&str, fn(&mut Report)); 9] = [
        ("relaxation", relaxation),
        ("bulk-modulus", bulk_modulus),
        ("parameter-counts", parameter_counts),
        ("autodiff", autodiff),
        ("volume-invariants", volume_invariants),
        ("zero-lambda", zero_lambda_equivalence),
        ("store-fuzz", store_fuzz),
        ("latency", latency),
        ("desk-training", desk_pipeline),
    ];
    let mut report = Report { failed: Vec::new() };
    for (name, run) in groups {
        if filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str())) {
            run(&mut report);
        }
    }
    if report.failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: {} failing: {}", report.failed.len(), report.failed.join(", "));
        std::process::exit(1);
    }
}

/// RMS deviation of the normalized response to a held unit strain from G(t).
fn step_response_rms(m: &Material, dt: f64, t_end: f64) -> f64 {
    let coeffs = QlvCoefficients::new(m, dt).unwrap();
    let mut state = QlvState::new(m.prony.len());
    let s_e = Mat3::from_diagonal_element(2.5);
    let steps = (t_end / dt).round() as usize;
    let mut sq = 0.0;
    for n in 1..=steps {
        let s = qlv_update(&mut state, &s_e, &coeffs);
        let g = relaxation_modulus(m, n as f64 * dt).unwrap();
        sq += (s[(0, 0)] / 2.5 - g).powi(2);
    }
    (sq / steps as f64).sqrt()
}

fn relaxation(r: &mut Report) {
    let start = Instant::now();
    let paper = Material::paper();
    let rms_paper = step_response_rms(&paper, paper.min_tau() / 20.0, 3.0 * paper.max_tau());
    let desk = Material::desk();
    let rms_desk = step_response_rms(&desk, desk.min_tau() / 20.0, 3.0 * desk.max_tau());
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "stress relaxation",
        rms_paper < RELAXATION_RMS && rms_desk < RELAXATION_RMS && secs < 60.0,
        format!("RMS vs G(t) paper {rms_paper:.2e}, rescaled {rms_desk:.2e} (limit {RELAXATION_RMS}); {secs:.2} s"),
    );
}

fn bulk_modulus(r: &mut Report) {
    let k = derive_bulk_modulus(0.0004, 0.42).unwrap();
    r.line(
        "bulk modulus",
        (k - BULK_MODULUS).abs() <= BULK_TOL,
        format!("K = {k:.9} MPa, expected {BULK_MODULUS} ± {BULK_TOL:e}"),
    );
}

fn parameter_counts(r: &mut Report) {
    let spec = ModelSpec::cnn_lstm(PAPER_DIMS, 512, 2);
    let shapes = spec.parameter_shapes(PAPER_DIMS.iter().product()).unwrap();
    let count = |prefix: &str| -> usize {
        shapes.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, s)| s.iter().product::<usize>()).sum()
    };
    let (enc, dec, out) = (count("enc."), count("dec."), count("out."));
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    r.line(
        "parameter counts",
        (enc, dec, out) == (2624, 27680, 195),
        format!(
            "conv layers {enc} / {dec} / {out} (expected 2624 / 27680 / 195); total {total} vs reference \
             {REFERENCE_CNN_LSTM_PARAMS} (projection-layer size is not given by the reference, so totals differ)"
        ),
    );
}

type Build = dyn Fn(&Graph<f64>, &[Var]) -> TResult<Var>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Unit-scale magnitudes (0.3..1) with random sign.
fn unit_scale(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.3..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values 0.01 apart so max-pool ties never occur.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

/// Worst relative error between tape and central-difference gradients of
/// `sum(w * build(inputs))` with fixed random `w`.
fn gradcheck(inputs: Vec<Tensor<f64>>, build: &Build) -> f64 {
    const H: f64 = 1e-3;
    let scalar = |xs: &[Tensor<f64>], w: &Tensor<f64>| -> f64 {
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
        let y = g.value(build(&g, &vars).unwrap());
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(Arc::new(t.clone()))).collect();
    let out = build(&g, &vars).unwrap();
    let weights = random(&mut ChaCha8Rng::seed_from_u64(99), g.value(out).shape());
    let loss = g.sum(&g.mul(&out, &g.constant(weights.clone())).unwrap());
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
            let numeric = (scalar(&plus, &weights) - scalar(&minus, &weights)) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn lattice_kernel(dims: [usize; 3]) -> Arc<HexVolume> {
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
    Arc::new(HexVolume::new(rest, cells).unwrap())
}

/// Gradient of the full physics loss (gate open, cosine term on) against
/// central differences at h = 1e-6.
fn physics_loss_gradcheck() -> f64 {
    let mesh = build_box_mesh([3, 3, 3], [1.0; 3], FixedSpec::None).unwrap();
    let v0 = mesh.rest_volume();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let shape = [2, 3, 3, 3, 3];
    let n: usize = shape.iter().product();
    // Stretch both items by 40% so the volume gate is open.
    let stretch: Vec<f64> = (0..n / 2)
        .map(|i| {
            let (c, node) = (i / 27, i % 27);
            0.4 * mesh.rest_positions()[node][c]
        })
        .collect();
    let pred0: Vec<f64> = (0..n).map(|i| stretch[i % (n / 2)] + 0.05 * unit_scale(&mut rng, &[1]).data()[0]).collect();
    let target = unit_scale(&mut rng, &shape);
    let forces = unit_scale(&mut rng, &shape);
    let cfg = LossConfig { cosine_term_weight: 0.5, ..LossConfig::default() };
    let eval = |x: &[f64]| {
        let p = Arc::new(Tensor::new(&shape, x.to_vec()).unwrap());
        let terms = physics_loss(&Eager, &p, &Arc::new(target.clone()), mesh.volume_kernel(), v0, &cfg, Some(&forces))
            .unwrap();
        assert!(terms.delta_v.iter().all(|dv| dv.abs() > 0.07 * v0), "gate must be open");
        terms.total.item().unwrap()
    };
    let graph = Graph::<f64>::new();
    let p = graph.param(Arc::new(Tensor::new(&shape, pred0.clone()).unwrap()));
    let t = graph.constant(target.clone());
    let terms = physics_loss(&graph, &p, &t, mesh.volume_kernel(), v0, &cfg, Some(&forces)).unwrap();
    let analytic = graph.backward(terms.total).unwrap().get(p).unwrap().clone();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        let (mut xp, mut xm) = (pred0.clone(), pred0.clone());
        xp[i] += h;
        xm[i] -= h;
        let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    worst
}

fn autodiff(r: &mut Report) {
    let start = Instant::now();
    let mut g = ChaCha8Rng::seed_from_u64(7);
    let (a, b) = (random(&mut g, &[3, 4]), random(&mut g, &[3, 4]));
    let x = random(&mut g, &[2, 2, 4, 3, 3]);
    let (w, bias) = (random(&mut g, &[3, 2, 3, 3, 3]), random(&mut g, &[3]));
    let y = random(&mut g, &[1, 2, 2, 3, 2]);
    let index = Arc::new(NodeIndex { dims: [3, 2, 2], nodes: vec![0, 3, 4, 11] });
    let (i1, i2) = (index.clone(), index);
    let kernel = lattice_kernel([3, 2, 2]);
    let cos_forces = random(&mut g, &[1, 3, 3, 2, 2]);
    let (d, hdim, t, bt) = (3, 2, 3, 2);
    let lstm_inputs = vec![
        random(&mut g, &[t * bt, d]),
        random(&mut g, &[d, 4 * hdim]),
        random(&mut g, &[hdim, 4 * hdim]),
        random(&mut g, &[4 * hdim]),
        random(&mut g, &[d, 4 * hdim]),
        random(&mut g, &[hdim, 4 * hdim]),
        random(&mut g, &[4 * hdim]),
    ];
    let relu_input = unit_scale(&mut g, &[3, 4]);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| g.add(&v[0], &v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| g.sub(&v[0], &v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| g.mul(&v[0], &v[1]))),
        ("add_scalar", vec![a.clone()], Box::new(|g, v| Ok(g.add_scalar(&v[0], 0.7)))),
        ("mul_scalar", vec![a.clone()], Box::new(|g, v| Ok(g.mul_scalar(&v[0], -1.3)))),
        ("relu", vec![relu_input], Box::new(|g, v| Ok(g.relu(&v[0])))),
        ("tanh", vec![a.clone()], Box::new(|g, v| Ok(g.tanh(&v[0])))),
        ("sigmoid", vec![a.clone()], Box::new(|g, v| Ok(g.sigmoid(&v[0])))),
        ("sum", vec![a.clone()], Box::new(|g, v| Ok(g.sum(&v[0])))),
        ("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(&v[0])))),
        ("mse", vec![a, b], Box::new(|g, v| g.mse(&v[0], &v[1]))),
        ("matmul", vec![random(&mut g, &[3, 5]), random(&mut g, &[5, 2])], Box::new(|g, v| g.matmul(&v[0], &v[1]))),
        ("add_bias", vec![random(&mut g, &[4, 3]), random(&mut g, &[3])], Box::new(|g, v| g.add_bias(&v[0], &v[1]))),
        (
            "reshape",
            vec![random(&mut g, &[2, 6])],
            Box::new(|g, v| {
                let y = g.reshape(&v[0], &[3, 4])?;
                g.mul(&y, &y)
            }),
        ),
        (
            "concat",
            vec![random(&mut g, &[2, 3, 2]), random(&mut g, &[2, 1, 2])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        ("narrow", vec![random(&mut g, &[3, 5])], Box::new(|g, v| g.narrow(&v[0], 1, 1, 3))),
        (
            "channel_affine",
            vec![random(&mut g, &[2, 3, 2, 2, 1])],
            Box::new(|g, v| g.channel_affine(&v[0], &[0.5, -2.0, 1.5], &[0.1, 0.2, 0.3])),
        ),
        (
            "conv3d",
            vec![x.clone(), w.clone(), bias.clone()],
            Box::new(|g, v| g.conv3d(&v[0], &v[1], &v[2], 1, Padding::Same)),
        ),
        ("conv3d stride 2", vec![x, w, bias], Box::new(|g, v| g.conv3d(&v[0], &v[1], &v[2], 2, Padding::Valid))),
        (
            "maxpool3d",
            vec![distinct(&mut g, &[1, 2, 5, 4, 3])],
            Box::new(|g, v| g.maxpool3d(&v[0], [3; 3], [3; 3], Rounding::Ceil)),
        ),
        ("upsample3d", vec![y.clone()], Box::new(|g, v| g.upsample3d(&v[0], [2, 1, 3]))),
        ("crop_or_pad3d", vec![y], Box::new(|g, v| g.crop_or_pad3d(&v[0], [1, 5, 2]))),
        ("gather_nodes", vec![random(&mut g, &[2, 3, 3, 2, 2])], Box::new(move |g, v| g.gather_nodes(&v[0], &i1))),
        ("scatter_nodes", vec![random(&mut g, &[2, 12])], Box::new(move |g, v| g.scatter_nodes(&v[0], &i2))),
        (
            "hex_volume",
            vec![random(&mut g, &[2, 3, 3, 2, 2]).map(|v| 0.2 * v)],
            Box::new(move |g, v| g.hex_volume(&v[0], &kernel)),
        ),
        (
            "cosine_misalignment",
            vec![unit_scale(&mut g, &[1, 3, 3, 2, 2])],
            Box::new(move |g, v| g.cosine_misalignment(&v[0], &cos_forces)),
        ),
        (
            "bidirectional lstm",
            lstm_inputs,
            Box::new(move |g, v| {
                let fw = LstmWeights { w_ih: v[1], w_hh: v[2], bias: v[3] };
                let bw = LstmWeights { w_ih: v[4], w_hh: v[5], bias: v[6] };
                let outs = lstm_layer(g, &v[0], t, bt, &fw, Some(&bw))?;
                g.concat(&outs, 1)
            }),
        ),
    ];
    let mut worst = ("", 0.0f64);
    for (name, inputs, build) in &cases {
        let e = gradcheck(inputs.clone(), build.as_ref());
        if e >= worst.1 {
            worst = (name, e);
        }
    }
    let loss = physics_loss_gradcheck();
    if loss >= worst.1 {
        worst = ("physics_loss", loss);
    }
    let secs = start.elapsed().as_secs_f64();
    r.line(
        "autodiff finite differences",
        worst.1 < GRAD_TOL && secs < 120.0,
        format!(
            "{} ops + physics_loss end-to-end; worst relative error {:.2e} ({}), physics_loss {loss:.2e} \
             (limit {GRAD_TOL:e}); {secs:.1} s",
            cases.len(),
            worst.1,
            worst.0
        ),
    );
}

/// Displacement realising `x -> A x + t` at every node.
fn affine_field(mesh: &GridMesh, a: [[f64; 3]; 3], t: [f64; 3]) -> Field3 {
    let mut f = Field3::for_mesh(mesh);
    for (n, x) in mesh.rest_positions().iter().enumerate() {
        f.set(n, std::array::from_fn(|i| (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() + t[i] - x[i]));
    }
    f
}

fn volume_invariants(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut worst_translation = 0.0f64;
    let mut worst_scale = 0.0f64;
    for dims in [DESK_DIMS, PAPER_DIMS, [4, 3, 2]] {
        let mesh = build_box_mesh(dims, [1.0, 1.5, 0.7], FixedSpec::None).unwrap();
        let v0 = mesh.rest_volume();
        for _ in 0..20 {
            let t = std::array::from_fn(|_| rng.random_range(-20.0..20.0));
            let v = total_volume(&mesh, &affine_field(&mesh, id, t)).unwrap();
            worst_translation = worst_translation.max((v - v0).abs() / v0);
            let s: f64 = rng.random_range(0.3..3.0);
            let scaled = [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]];
            let v = total_volume(&mesh, &affine_field(&mesh, scaled, [0.0; 3])).unwrap();
            let expected = s * s * s * v0;
            worst_scale = worst_scale.max((v - expected).abs() / expected);
        }
    }
    r.line(
        "volume invariants",
        worst_translation <= VOLUME_TOL && worst_scale <= VOLUME_TOL,
        format!(
            "translation relative error {worst_translation:.1e}, uniform scale {worst_scale:.1e} \
             (limit {VOLUME_TOL:e}, 60 cases each)"
        ),
    );
}

fn tiny_dataset(n: usize, seed: u64) -> SequenceDataset {
    let mesh = build_box_mesh([5, 5, 3], [1.0; 3], FixedSpec::PaperDefault).unwrap();
    let cfg = ScenarioConfig { frames: 4, ..ScenarioConfig::default() };
    generate_dataset(&mesh, &Material::desk(), n, seed, &cfg).unwrap()
}

fn zero_lambda_equivalence(r: &mut Report) {
    let ds = tiny_dataset(6, 2);
    let split = split_dataset(6, SplitFractions { train: 0.67, val: 0.33, test: 0.0 }, 1).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, max_epochs: 3, batch_size: 4, seed: 5, ..TrainConfig::default() };
    let run = |objective: &Objective| {
        let spec = ModelSpec { filters: 4, ..ModelSpec::cnn_lstm(ds.mesh.dims(), 8, 2) }.with_seed(1);
        let out = train(ModelInstance::build(spec, &ds.mesh).unwrap(), &ds, &split, &cfg, objective, &mut |_| {})
            .unwrap();
        let params: Vec<u32> =
            out.last.model.params.iter().flat_map(|p| p.value.data().iter().map(|x| x.to_bits())).collect();
        let history: Vec<(u64, u64)> =
            out.last.history.iter().map(|l: &EpochLog| (l.train_loss.to_bits(), l.val_loss.to_bits())).collect();
        (params, history)
    };
    let mse = run(&Objective::Mse);
    let physics = run(&Objective::Physics(LossConfig { lambda: 0.0, ..LossConfig::default() }));
    r.line(
        "zero-lambda equivalence",
        mse == physics,
        format!("{} parameters and {} epoch losses compared bitwise after 3 epochs", mse.0.len(), mse.1.len()),
    );
}

fn store_fuzz(r: &mut Report) {
    let ds = tiny_dataset(3, 9);
    let bytes = encode(&dataset_to_container(&ds)).unwrap();
    let round_trip = decode(&bytes).map(|c| encode(&c).unwrap() == bytes).unwrap_or(false);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut errors, mut panics, mut silent) = (0, 0, 0);
    for case in 0..FUZZ_CASES {
        let mut corrupt = bytes.clone();
        if case % 2 == 0 {
            corrupt.truncate(rng.random_range(0..bytes.len()));
        } else {
            for _ in 0..rng.random_range(1..=3) {
                let i = rng.random_range(0..corrupt.len());
                corrupt[i] ^= 1 << rng.random_range(0..8);
            }
            if corrupt == bytes {
                corrupt[0] ^= 1;
            }
        }
        match catch_unwind(AssertUnwindSafe(|| decode(&corrupt))) {
            Ok(Err(_)) => errors += 1,
            Ok(Ok(_)) => silent += 1,
            Err(_) => panics += 1,
        }
    }
    r.line(
        "store round trip and fuzzing",
        round_trip && errors == FUZZ_CASES,
        format!(
            "round trip exact: {round_trip}; {FUZZ_CASES} truncation/bit-flip cases: {errors} errors, \
             {panics} panics, {silent} accepted"
        ),
    );
}

fn threshold(var: &str, default: f64) -> f64 {
    std::env::var(var).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn latency(r: &mut Report) {
    let mesh = build_box_mesh(PAPER_DIMS, [1.0; 3], FixedSpec::PaperDefault).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let bench = |spec: ModelSpec| {
        let model = ModelInstance::build(spec, &mesh).unwrap();
        pool.install(|| latency_bench(&model, 100, 10, 0)).unwrap()
    };
    let cnn = bench(ModelSpec::cnn_unet(PAPER_DIMS, 64));
    let lstm = bench(ModelSpec::cnn_lstm(PAPER_DIMS, 512, 2));
    let cnn_max = threshold("VISCOSURR_CNN_LATENCY_S", CNN_LATENCY_S);
    let lstm_max = threshold("VISCOSURR_LSTM_LATENCY_S", LSTM_LATENCY_S);
    r.line(
        "single-thread latency",
        cnn.mean_s < cnn_max && lstm.mean_s < lstm_max,
        format!(
            "17x17x8 U-Net(64) {:.4} s/frame (limit {cnn_max}), CNN-LSTM(512, 2) {:.4} s/frame (limit {lstm_max}); \
             100 runs after 10 warm-up on {}",
            cnn.mean_s, lstm.mean_s, cnn.hardware
        ),
    );
}

/// Best-validation model of one training run.
fn fit(ds: &SequenceDataset, split: &DatasetSplit, spec: ModelSpec, lambda: f64) -> ModelInstance {
    let cfg = TrainConfig {
        learning_rate: LEARNING_RATE,
        max_epochs: EPOCHS,
        patience: EPOCHS,
        seed: TRAIN_SEED,
        ..TrainConfig::default()
    };
    let objective = Objective::Physics(LossConfig { lambda, ..LossConfig::default() });
    let model = ModelInstance::build(spec.with_seed(TRAIN_SEED), &ds.mesh).unwrap();
    let out = train(model, ds, split, &cfg, &objective, &mut |_| {}).unwrap();
    assert!(out.aborted.is_none(), "training diverged");
    out.best.model
}

struct Scores {
    mae: f64,
    depth_mean: f64,
    preds: Vec<Vec<Field3>>,
}

fn score(model: &ModelInstance, held: &SequenceDataset, seqs: &[usize]) -> Scores {
    let preds = predict_sequences(model, held, seqs).unwrap();
    let flat: Vec<&Field3> = preds.iter().flatten().collect();
    let reference: Vec<&Field3> =
        seqs.iter().flat_map(|&s| held.sequences[s].frames.iter().map(|f| &f.displacement)).collect();
    let mae = mean_abs_error(&flat, &reference, &held.mesh.free_nodes());
    let depth_mean = depth_profile_error(&flat, &reference, &held.mesh).unwrap().mean_mae();
    Scores { mae, depth_mean, preds }
}

/// Mean and max |dV| of the generic (index 0) and physics-guided (index 1) predictions.
fn volume_errors(
    held: &SequenceDataset,
    seqs: &[usize],
    generic: &Scores,
    physics: &Scores,
    train_mean: f64,
) -> (Vec<f64>, Vec<f64>) {
    let refs: Vec<_> = seqs.iter().map(|&s| (s, &held.sequences[s])).collect();
    let pick = |sc: &Scores| seqs.iter().map(|&s| sc.preds[s].clone()).collect::<Vec<_>>();
    let trace = volume_violation_trace(
        &held.mesh,
        &refs,
        &[("generic".to_string(), pick(generic)), ("physics".to_string(), pick(physics))],
        train_mean,
        3,
    )
    .unwrap();
    (trace.mean_abs_dv(), trace.overall_max_abs_dv())
}

fn desk_pipeline(r: &mut Report) {
    let mesh = build_box_mesh(DESK_DIMS, [1.0; 3], FixedSpec::PaperDefault).unwrap();
    let cfg = ScenarioConfig { press_probability: 0.35, ..ScenarioConfig::default() };
    let start = Instant::now();
    let ds = generate_dataset(&mesh, &Material::desk(), DESK_SEQUENCES, DATA_SEED, &cfg).unwrap();
    let fresh = generate_dataset(&mesh, &Material::desk(), FRESH_SEQUENCES, FRESH_SEED, &cfg).unwrap();
    let gen_s = start.elapsed().as_secs_f64();
    let fractions = SplitFractions { train: 0.7, val: 0.15, test: 0.15 };
    let split = split_dataset(DESK_SEQUENCES, fractions, TRAIN_SEED).unwrap();
    // Held-out pool: the test split followed by independently generated sequences.
    let mut held = ds.subset(&split.test);
    held.sequences.extend(fresh.sequences);
    let all: Vec<usize> = (0..held.sequences.len()).collect();
    let test_only: Vec<usize> = (0..split.test.len()).collect();

    let start = Instant::now();
    let linear = fit(&ds, &split, ModelSpec::linear(DESK_DIMS), 0.0);
    let unet_model = fit(&ds, &split, ModelSpec::cnn_unet(DESK_DIMS, UNET_FILTERS), 0.0);
    let lstm_spec = ModelSpec::cnn_lstm(DESK_DIMS, LSTM_HIDDEN, LSTM_STEPS);
    let generic_model = fit(&ds, &split, lstm_spec.clone(), 0.0);
    let physics_model = fit(&ds, &split, lstm_spec, 0.1);
    let train_s = start.elapsed().as_secs_f64();
    let (linear, unet) = (score(&linear, &held, &all), score(&unet_model, &held, &all));
    let (generic, physics) = (score(&generic_model, &held, &all), score(&physics_model, &held, &all));

    let improvement = improvement_ratio(linear.mae, generic.mae);
    r.line(
        "model ordering",
        linear.depth_mean > unet.depth_mean
            && unet.depth_mean >= generic.depth_mean
            && improvement >= MIN_IMPROVEMENT
            && train_s < TRAINING_BUDGET_S,
        format!(
            "trained on {DESK_SEQUENCES} sequences on 9x9x5, scored on {} held-out ({} test split + {FRESH_SEQUENCES} \
             fresh); depth-profile mean MAE linear {:.4e} > U-Net {:.4e} >= CNN-LSTM {:.4e} mm; mean MAE linear \
             {:.4e}, CNN-LSTM {:.4e} mm, improvement {:.1}% (min {:.0}%); data {gen_s:.0} s, training {train_s:.0} s \
             (budget {TRAINING_BUDGET_S:.0} s)",
            all.len(),
            split.test.len(),
            linear.depth_mean,
            unet.depth_mean,
            generic.depth_mean,
            linear.mae,
            generic.mae,
            100.0 * improvement,
            100.0 * MIN_IMPROVEMENT
        ),
    );

    let train_mean =
        split.train.iter().map(|&s| ds.sequences[s].max_force_magnitude()).sum::<f64>() / split.train.len() as f64;
    let (mean, max) = volume_errors(&held, &all, &generic, &physics, train_mean);
    let (test_mean, test_max) = volume_errors(&held, &test_only, &generic, &physics, train_mean);
    r.line(
        "physics-guided volume error",
        mean[1] < mean[0] && max[1] < max[0],
        format!(
            "{} held-out sequences: mean |dV| generic {:.4e} -> physics {:.4e} mm3 ({:.1}% lower), max |dV| \
             {:.4e} -> {:.4e} mm3 ({:.1}% lower), MAE {:.4e} -> {:.4e} mm; test split alone: mean {:.4e} -> {:.4e}, \
             max {:.4e} -> {:.4e} mm3",
            all.len(),
            mean[0],
            mean[1],
            100.0 * improvement_ratio(mean[0], mean[1]),
            max[0],
            max[1],
            100.0 * improvement_ratio(max[0], max[1]),
            generic.mae,
            physics.mae,
            test_mean[0],
            test_mean[1],
            test_max[0],
            test_max[1]
        ),
    );

    // Compression is judged on the CNN (U-Net); the CNN-LSTM's response is reported alongside.
    let changes = |model: &ModelInstance| {
        let base = model_mae(model, &held, &all).unwrap();
        let degradation = |m: &ModelInstance| (model_mae(m, &held, &all).unwrap() - base) / base;
        [
            degradation(&quantize_weights(model, QuantMode::F16)),
            degradation(&quantize_weights(model, QuantMode::I8)),
            degradation(&prune_weights(model, PRUNE_FRACTION).unwrap()),
        ]
    };
    let [f16, i8, pruned] = changes(&unet_model);
    let [lstm_f16, lstm_i8, lstm_pruned] = changes(&generic_model);
    r.line(
        "compression",
        f16 < F16_MAX_DEGRADATION && i8 > f16 && pruned.abs() <= PRUNE_MAX_DEGRADATION,
        format!(
            "held-out MAE change of the U-Net: f16 {:+.3}% (limit {:.0}%), i8 {:+.3}% (must exceed f16), \
             {:.0}% pruning {:+.3}% (limit ±{:.0}%); CNN-LSTM for reference: f16 {:+.3}%, i8 {:+.3}%, pruning {:+.3}%",
            100.0 * f16,
            100.0 * F16_MAX_DEGRADATION,
            100.0 * i8,
            100.0 * PRUNE_FRACTION,
            100.0 * pruned,
            100.0 * PRUNE_MAX_DEGRADATION,
            100.0 * lstm_f16,
            100.0 * lstm_i8,
            100.0 * lstm_pruned
        ),
    );
}
