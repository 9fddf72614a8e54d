//! Accuracy and consistency metrics: Bland-Altman agreement, depth-profile
//! error, volume-violation traces, compression (quantization, pruning) and
//! inference latency.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viscosurr_tensorad::Tensor;

use crate::error::{CoreError, Result};
use crate::femsim::{Sequence, SequenceDataset};
use crate::meshkit::{depth_layers, total_volume, Field3, GridMesh};
use crate::surrogate::ModelInstance;

/// Conventional 95 % limits of agreement.
pub const Z_95: f64 = 1.96;
/// Two-sided 96 % limits.
pub const Z_96: f64 = 2.054;

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn diff_norm(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

/// Node-wise mean of a set of displacement fields.
pub fn time_mean(frames: &[&Field3]) -> Result<Field3> {
    let first = frames.first().ok_or_else(|| CoreError::contract("time_mean", "no frames"))?;
    let mut out = Field3::zeros(first.dims());
    for f in frames {
        if f.dims() != first.dims() {
            return Err(CoreError::contract("time_mean", "frames have different dims"));
        }
        for (o, v) in out.values_mut().iter_mut().zip(f.values()) {
            *o += v;
        }
    }
    let n = frames.len() as f64;
    out.values_mut().iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanPoint {
    pub node: usize,
    /// `(|û| + |u|) / 2` (mm).
    pub mean: f64,
    /// `|û| - |u|` (mm).
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanReport {
    pub points: Vec<BlandAltmanPoint>,
    pub mean_difference: f64,
    /// Sample standard deviation of the differences.
    pub sd_difference: f64,
    pub z: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
}

impl BlandAltmanReport {
    /// `node,mean_mm,difference_mm` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,mean_mm,difference_mm\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{:.9e},{:.9e}", p.node, p.mean, p.difference);
        }
        s
    }
}

/// Agreement between time-averaged predicted and reference displacement
/// magnitudes over `nodes`.
pub fn bland_altman(pred: &Field3, reference: &Field3, nodes: &[usize], z: f64) -> Result<BlandAltmanReport> {
    if nodes.is_empty() {
        return Err(CoreError::contract("bland_altman", "empty node set"));
    }
    if pred.dims() != reference.dims() {
        return Err(CoreError::contract("bland_altman", "prediction and reference dims differ"));
    }
    let points: Vec<BlandAltmanPoint> = nodes
        .iter()
        .map(|&n| {
            let (a, b) = (norm(pred.get(n)), norm(reference.get(n)));
            BlandAltmanPoint { node: n, mean: 0.5 * (a + b), difference: a - b }
        })
        .collect();
    let k = points.len() as f64;
    let mean_difference = points.iter().map(|p| p.difference).sum::<f64>() / k;
    let sd_difference = if points.len() > 1 {
        (points.iter().map(|p| (p.difference - mean_difference).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BlandAltmanReport {
        points,
        mean_difference,
        sd_difference,
        z,
        lower_limit: mean_difference - z * sd_difference,
        upper_limit: mean_difference + z * sd_difference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthBin {
    pub normalized_depth: f64,
    /// Mean over frames and nodes of `|û - u|` (mm).
    pub mae: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthProfileReport {
    pub bins: Vec<DepthBin>,
}

impl DepthProfileReport {
    /// Unweighted mean of the bin errors.
    pub fn mean_mae(&self) -> f64 {
        if self.bins.is_empty() {
            return 0.0;
        }
        self.bins.iter().map(|b| b.mae).sum::<f64>() / self.bins.len() as f64
    }

    /// Fraction of bins where `self` is strictly below `other`, ignoring
    /// bins where both errors are exactly zero (fully constrained layers).
    pub fn fraction_lower_than(&self, other: &DepthProfileReport) -> f64 {
        let pairs: Vec<_> =
            self.bins.iter().zip(&other.bins).filter(|(a, b)| a.mae != 0.0 || b.mae != 0.0).collect();
        if pairs.is_empty() {
            return 0.0;
        }
        pairs.iter().filter(|(a, b)| a.mae < b.mae).count() as f64 / pairs.len() as f64
    }

    /// `normalized_depth,mae_mm,nodes` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("normalized_depth,mae_mm,nodes\n");
        for b in &self.bins {
            let _ = writeln!(s, "{:.6},{:.9e},{}", b.normalized_depth, b.mae, b.nodes);
        }
        s
    }
}

/// Error per depth layer, averaged over aligned frame pairs and the layer's nodes.
pub fn depth_profile_error(pred: &[&Field3], reference: &[&Field3], mesh: &GridMesh) -> Result<DepthProfileReport> {
    if pred.len() != reference.len() {
        return Err(CoreError::contract(
            "depth_profile_error",
            format!("{} predicted vs {} reference frames", pred.len(), reference.len()),
        ));
    }
    for f in pred.iter().chain(reference) {
        f.check_mesh("depth_profile_error", mesh)?;
    }
    let bins = depth_layers(mesh)
        .into_iter()
        .map(|layer| {
            let mut sum = 0.0;
            for (p, r) in pred.iter().zip(reference) {
                sum += layer.nodes.iter().map(|&n| diff_norm(p.get(n), r.get(n))).sum::<f64>();
            }
            let count = (layer.nodes.len() * pred.len()).max(1) as f64;
            DepthBin { normalized_depth: layer.normalized_depth, mae: sum / count, nodes: layer.nodes.len() }
        })
        .collect();
    Ok(DepthProfileReport { bins })
}

/// Mean over frames and the given nodes of `|û - u|` (mm).
pub fn mean_abs_error(pred: &[&Field3], reference: &[&Field3], nodes: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (p, r) in pred.iter().zip(reference) {
        sum += nodes.iter().map(|&n| diff_norm(p.get(n), r.get(n))).sum::<f64>();
    }
    sum / (nodes.len() * pred.len()).max(1) as f64
}

/// Relative improvement of `b` over the baseline `a`: `(a - b) / a`.
pub fn improvement_ratio(a: f64, b: f64) -> f64 {
    (a - b) / a
}

/// Predictions for every frame of the given sequences, in order.
pub fn predict_sequences(model: &ModelInstance, dataset: &SequenceDataset, seqs: &[usize]) -> Result<Vec<Vec<Field3>>> {
    seqs.iter()
        .map(|&s| {
            let forces: Vec<&Field3> = dataset.sequences[s].frames.iter().map(|f| &f.force).collect();
            model.predict_sequence(&forces, 16)
        })
        .collect()
}

/// Held-out accuracy of a model: mean `|û - u|` over every frame of `seqs`
/// and every unconstrained node.
pub fn model_mae(model: &ModelInstance, dataset: &SequenceDataset, seqs: &[usize]) -> Result<f64> {
    let preds = predict_sequences(model, dataset, seqs)?;
    let p: Vec<&Field3> = preds.iter().flatten().collect();
    let r: Vec<&Field3> = seqs.iter().flat_map(|&s| dataset.sequences[s].frames.iter().map(|f| &f.displacement)).collect();
    Ok(mean_abs_error(&p, &r, &dataset.mesh.free_nodes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub sequence: usize,
    pub times: Vec<f64>,
    /// Total applied force magnitude per frame (N).
    pub force_magnitude: Vec<f64>,
    pub max_force: f64,
    pub mean_force: f64,
    /// `V_t - V_origin` of the reference frames (mm³).
    pub reference_dv: Vec<f64>,
    /// One series per model, same order as [`VolumeTrace::models`].
    pub model_dv: Vec<Vec<f64>>,
    pub reference_max_abs_dv: f64,
    pub model_max_abs_dv: Vec<f64>,
    /// `|max_force - training mean of max_force|`.
    pub force_deviation: f64,
    /// Among the sequences whose force deviates most from training.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeTrace {
    pub models: Vec<String>,
    pub sequences: Vec<SequenceTrace>,
}

impl VolumeTrace {
    /// Mean over sequences of each model's max |ΔV|.
    pub fn mean_max_abs_dv(&self) -> Vec<f64> {
        let n = self.sequences.len().max(1) as f64;
        (0..self.models.len()).map(|m| self.sequences.iter().map(|s| s.model_max_abs_dv[m]).sum::<f64>() / n).collect()
    }

    /// Mean over all frames of each model's |ΔV|.
    pub fn mean_abs_dv(&self) -> Vec<f64> {
        (0..self.models.len())
            .map(|m| {
                let all: Vec<f64> = self.sequences.iter().flat_map(|s| s.model_dv[m].iter().map(|d| d.abs())).collect();
                all.iter().sum::<f64>() / all.len().max(1) as f64
            })
            .collect()
    }

    /// Largest |ΔV| of each model over all sequences.
    pub fn overall_max_abs_dv(&self) -> Vec<f64> {
        (0..self.models.len())
            .map(|m| self.sequences.iter().map(|s| s.model_max_abs_dv[m]).fold(0.0, f64::max))
            .collect()
    }

    /// Indices (into `sequences`) of the `k` highest-force sequences.
    pub fn highest_force(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.sequences.len()).collect();
        idx.sort_by(|&a, &b| self.sequences[b].max_force.total_cmp(&self.sequences[a].max_force));
        idx.truncate(k);
        idx
    }

    /// `sequence,frame,t_s,force_n,reference_dv_mm3,<model>_dv_mm3...` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sequence,frame,t_s,force_n,reference_dv_mm3");
        for m in &self.models {
            let _ = write!(s, ",{m}_dv_mm3");
        }
        s.push('\n');
        for seq in &self.sequences {
            for j in 0..seq.times.len() {
                let _ = write!(
                    s,
                    "{},{},{:.6},{:.9e},{:.9e}",
                    seq.sequence, j, seq.times[j], seq.force_magnitude[j], seq.reference_dv[j]
                );
                for m in &seq.model_dv {
                    let _ = write!(s, ",{:.9e}", m[j]);
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Volume change of reference and predicted frames per sequence. The
/// `flag_count` sequences whose peak force is furthest from
/// `training_max_force_mean` are flagged.
pub fn volume_violation_trace(
    mesh: &GridMesh,
    sequences: &[(usize, &Sequence)],
    predictions: &[(String, Vec<Vec<Field3>>)],
    training_max_force_mean: f64,
    flag_count: usize,
) -> Result<VolumeTrace> {
    if sequences.is_empty() {
        return Err(CoreError::contract("volume_violation_trace", "no sequences"));
    }
    let v0 = mesh.rest_volume();
    let dv = |f: &Field3| total_volume(mesh, f).map(|v| v - v0);
    let max_abs = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut traces = Vec::with_capacity(sequences.len());
    for (i, &(id, seq)) in sequences.iter().enumerate() {
        let reference_dv = seq.frames.iter().map(|f| dv(&f.displacement)).collect::<Result<Vec<_>>>()?;
        let mut model_dv = Vec::with_capacity(predictions.len());
        for (name, preds) in predictions {
            let frames = preds.get(i).ok_or_else(|| {
                CoreError::contract("volume_violation_trace", format!("{name}: missing predictions for sequence {id}"))
            })?;
            if frames.len() != seq.frames.len() {
                return Err(CoreError::contract(
                    "volume_violation_trace",
                    format!("{name}: {} predicted vs {} reference frames", frames.len(), seq.frames.len()),
                ));
            }
            model_dv.push(frames.iter().map(dv).collect::<Result<Vec<_>>>()?);
        }
        let force_magnitude = seq.force_magnitudes();
        let max_force = force_magnitude.iter().copied().fold(0.0, f64::max);
        let mean_force = force_magnitude.iter().sum::<f64>() / force_magnitude.len().max(1) as f64;
        traces.push(SequenceTrace {
            sequence: id,
            times: seq.frames.iter().map(|f| f.t).collect(),
            reference_max_abs_dv: max_abs(&reference_dv),
            model_max_abs_dv: model_dv.iter().map(|d| max_abs(d)).collect(),
            force_deviation: (max_force - training_max_force_mean).abs(),
            force_magnitude,
            max_force,
            mean_force,
            reference_dv,
            model_dv,
            flagged: false,
        });
    }
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by(|&a, &b| traces[b].force_deviation.total_cmp(&traces[a].force_deviation));
    for &i in order.iter().take(flag_count) {
        traces[i].flagged = true;
    }
    Ok(VolumeTrace { models: predictions.iter().map(|(n, _)| n.clone()).collect(), sequences: traces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    F16,
    /// Per-tensor affine int8 (scale and zero point from min/max).
    I8,
}

/// Per-tensor affine int8 encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedI8 {
    pub values: Vec<i8>,
    pub scale: f32,
    pub zero_point: i32,
    /// Exact value of a constant tensor (scale 0).
    pub offset: f32,
}

pub fn quantize_i8(data: &[f32]) -> QuantizedI8 {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if data.is_empty() || lo == hi {
        let offset = if data.is_empty() { 0.0 } else { lo };
        return QuantizedI8 { values: vec![0; data.len()], scale: 0.0, zero_point: 0, offset };
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = (-128.0 - lo / scale).round() as i32;
    let values = data
        .iter()
        .map(|&x| ((x / scale).round() as i32 + zero_point).clamp(-128, 127) as i8)
        .collect();
    QuantizedI8 { values, scale, zero_point, offset: 0.0 }
}

pub fn dequantize_i8(q: &QuantizedI8) -> Vec<f32> {
    if q.scale == 0.0 {
        return vec![q.offset; q.values.len()];
    }
    q.values.iter().map(|&v| (v as i32 - q.zero_point) as f32 * q.scale).collect()
}

/// Copy of `model` whose parameters went through the given number format.
pub fn quantize_weights(model: &ModelInstance, mode: QuantMode) -> ModelInstance {
    let mut out = model.clone();
    for p in &mut out.params {
        let data: Vec<f32> = match mode {
            QuantMode::F16 => p.value.data().iter().map(|&x| f16::from_f32(x).to_f32()).collect(),
            QuantMode::I8 => dequantize_i8(&quantize_i8(p.value.data())),
        };
        p.value = Arc::new(Tensor::new(p.value.shape(), data).expect("same shape"));
    }
    out
}

/// Copy of `model` with the smallest-magnitude `fraction` of every
/// convolution kernel set to zero.
pub fn prune_weights(model: &ModelInstance, fraction: f64) -> Result<ModelInstance> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CoreError::contract("prune_weights", format!("fraction must lie in [0, 1), got {fraction}")));
    }
    let mut out = model.clone();
    for p in out.params.iter_mut().filter(|p| p.value.rank() == 5) {
        let n = p.value.len();
        let k = (fraction * n as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let data = p.value.data();
        order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
        let t = Arc::make_mut(&mut p.value);
        for &i in &order[..k] {
            t.data_mut()[i] = 0.0;
        }
    }
    Ok(out)
}

/// Minimum timed iterations accepted by [`latency_bench`].
pub const MIN_BENCH_ITERATIONS: usize = 100;
pub const MIN_BENCH_WARMUP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub dims: [usize; 3],
    pub iterations: usize,
    pub warmup: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub min_s: f64,
    /// `1 / mean_s`.
    pub rate_hz: f64,
    pub hardware: String,
}

/// CPU model string and architecture of this machine.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split_once(':')).map(|(_, v)| v.trim().to_string()))
        .unwrap_or_else(|| "unknown CPU".to_string());
    format!("{cpu} ({}), single thread", std::env::consts::ARCH)
}

/// Times `forward_window` on random force windows on the calling thread.
pub fn latency_bench(model: &ModelInstance, iterations: usize, warmup: usize, seed: u64) -> Result<LatencyReport> {
    if iterations < MIN_BENCH_ITERATIONS || warmup < MIN_BENCH_WARMUP {
        return Err(CoreError::Config(format!(
            "latency bench needs at least {MIN_BENCH_ITERATIONS} iterations and {MIN_BENCH_WARMUP} warm-up runs, got {iterations} and {warmup}"
        )));
    }
    let mesh = model.mesh();
    let top = mesh.top_free_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = model.spec.window();
    let frames: Vec<Field3> = (0..t + 8)
        .map(|_| {
            let mut f = Field3::for_mesh(mesh);
            for _ in 0..2 {
                if let Some(&n) = top.get(rng.random_range(0..top.len().max(1))) {
                    f.set(n, [rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4), -rng.random_range(0.0..2e-4)]);
                }
            }
            f
        })
        .collect();
    let window = |i: usize| -> Vec<&Field3> { (0..t).map(|k| &frames[(i + k) % frames.len()]).collect() };
    for i in 0..warmup {
        model.forward_window(&window(i))?;
    }
    let mut times = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let w = window(i);
        let start = Instant::now();
        let out = model.forward_window(&w)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    let mean_s = times.iter().sum::<f64>() / iterations as f64;
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |q: f64| sorted[((q * (iterations - 1) as f64).round() as usize).min(iterations - 1)];
    Ok(LatencyReport {
        model: model.spec.kind.name().to_string(),
        dims: model.spec.dims,
        iterations,
        warmup,
        mean_s,
        median_s: pct(0.5),
        p95_s: pct(0.95),
        min_s: sorted[0],
        rate_hz: 1.0 / mean_s,
        hardware: hardware_descriptor(),
    })
}
