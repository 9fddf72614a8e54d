//! Sequence-level dataset splitting, mini-batch Adam training with
//! best-validation checkpointing, loss evaluation and the N_N / N_t sweep.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use viscosurr_tensorad::{Eager, Graph, Ops, Tensor};

use crate::error::{CoreError, Result};
use crate::femsim::SequenceDataset;
use crate::meshkit::Field3;
use crate::surrogate::{physics_loss, window_frames, LossConfig, ModelInstance, ModelSpec, Normalization};

/// Fractions of sequences assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.7, val: 0.15, test: 0.15 }
    }
}

/// Sequence indices of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n_sequences` under `seed` and cuts it by `fractions`
/// (rounded to whole sequences). When the fractions sum to one the test
/// split takes the remainder, so the three splits partition the input.
pub fn split_dataset(n_sequences: usize, fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    let SplitFractions { train, val, test } = fractions;
    let valid = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
    let sum = train + val + test;
    if !valid(train) || !valid(val) || !valid(test) || sum > 1.0 + 1e-9 {
        return Err(CoreError::Config(format!(
            "split fractions must lie in [0, 1] and sum to at most 1, got ({train}, {val}, {test})"
        )));
    }
    let n = n_sequences as f64;
    let n_train = ((n * train).round() as usize).min(n_sequences);
    let n_val = ((n * val).round() as usize).min(n_sequences - n_train);
    let n_test = if (sum - 1.0).abs() < 1e-9 {
        n_sequences - n_train - n_val
    } else {
        ((n * test).round() as usize).min(n_sequences - n_train - n_val)
    };
    for (name, frac, count) in [("train", train, n_train), ("val", val, n_val), ("test", test, n_test)] {
        if frac > 0.0 && count == 0 {
            return Err(CoreError::Config(format!(
                "{name} split is empty ({n_sequences} sequences, fraction {frac})"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n_sequences).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |k: usize| {
        let mut part: Vec<usize> = order.drain(..k).collect();
        part.sort_unstable();
        part
    };
    let train = take(n_train);
    let val = take(n_val);
    let test = take(n_test);
    Ok(DatasetSplit { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 300,
            batch_size: 8,
            patience: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.epsilon > 0.0) {
            return Err(CoreError::Config("Adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training objective: plain MSE, or MSE plus the gated volume penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    Mse,
    Physics(LossConfig),
}

impl Objective {
    pub fn lambda(&self) -> f64 {
        match self {
            Objective::Mse => 0.0,
            Objective::Physics(cfg) => cfg.lambda,
        }
    }
}

/// First and second moment estimates, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(model: &ModelInstance) -> Self {
        let zeros = || model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam update of every parameter. With `learning_rate = 0` the
/// parameters are left bit-identical.
pub fn adam_step(model: &mut ModelInstance, grads: &[Tensor<f32>], state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let (lr, eps) = (cfg.learning_rate as f32, cfg.epsilon as f32);
    for (((param, g), m), v) in model.params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let p = Arc::make_mut(&mut param.value);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mse: f64,
    /// Mean |ΔV| (mm³) of the validation predictions.
    pub mean_abs_dv: f64,
}

impl EpochLog {
    /// Stable `key=value` progress line.
    pub fn progress_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6e} val_loss={:.6e} val_mse={:.6e} mean_abs_dv={:.6e}",
            self.epoch, self.train_loss, self.val_loss, self.val_mse, self.mean_abs_dv
        )
    }
}

/// Model, optimizer and bookkeeping after some number of epochs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelInstance,
    pub objective: Objective,
    pub config: TrainConfig,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
    /// Best validation loss so far and the epoch it was reached.
    pub best_val: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss.
    pub best: Checkpoint,
    /// State after the last completed epoch (resume point).
    pub last: Checkpoint,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
    pub early_stopped: bool,
}

/// A training example: the window ending at `frame` of sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub seq: usize,
    pub frame: usize,
}

pub fn windows(dataset: &SequenceDataset, seqs: &[usize]) -> Vec<WindowRef> {
    seqs.iter()
        .flat_map(|&seq| (0..dataset.sequences[seq].frames.len()).map(move |frame| WindowRef { seq, frame }))
        .collect()
}

/// Normalization statistics over every frame of the given sequences.
pub fn fit_normalization(dataset: &SequenceDataset, seqs: &[usize]) -> Normalization {
    let nodes = dataset.mesh.free_nodes();
    let pairs = seqs.iter().flat_map(|&s| dataset.sequences[s].frames.iter().map(|f| (&f.force, &f.displacement)));
    Normalization::fit(pairs, &nodes)
}

struct Batch {
    input: Tensor<f32>,
    target: Tensor<f32>,
    forces: Tensor<f32>,
}

fn stack(fields: &[&Field3], dims: [usize; 3]) -> Result<Tensor<f32>> {
    let vox = 3 * dims.iter().product::<usize>();
    let mut data = vec![0.0f32; fields.len() * vox];
    for (f, slot) in fields.iter().zip(data.chunks_mut(vox)) {
        f.write_channels_first(slot);
    }
    let [x, y, z] = dims;
    Ok(Tensor::new(&[fields.len(), 3, x, y, z], data)?)
}

fn make_batch(model: &ModelInstance, dataset: &SequenceDataset, items: &[WindowRef], zero: &Field3) -> Result<Batch> {
    let t = model.spec.window();
    let windows: Vec<Vec<&Field3>> = items
        .iter()
        .map(|w| {
            let forces: Vec<&Field3> = dataset.sequences[w.seq].frames.iter().map(|f| &f.force).collect();
            window_frames(&forces, w.frame, t, zero)
        })
        .collect();
    let refs: Vec<&[&Field3]> = windows.iter().map(|w| w.as_slice()).collect();
    let input = model.encode_inputs(&refs)?;
    let frame = |w: &WindowRef| &dataset.sequences[w.seq].frames[w.frame];
    let targets: Vec<&Field3> = items.iter().map(|w| &frame(w).displacement).collect();
    let forces: Vec<&Field3> = items.iter().map(|w| &frame(w).force).collect();
    Ok(Batch { input, target: stack(&targets, model.spec.dims)?, forces: stack(&forces, model.spec.dims)? })
}

fn loss_terms<O: Ops<f32>>(
    ops: &O,
    pred: &O::V,
    target: &O::V,
    forces: &Tensor<f32>,
    model: &ModelInstance,
    objective: &Objective,
) -> Result<(O::V, O::V, Option<O::V>, Vec<f64>)> {
    let mesh = model.mesh();
    match objective {
        Objective::Mse => {
            let mse = ops.mse(pred, target)?;
            let vols = ops.hex_volume(pred, mesh.volume_kernel())?;
            let v0 = mesh.rest_volume();
            let dv = ops.value(&vols).data().iter().map(|&v| v as f64 - v0).collect();
            Ok((mse.clone(), mse, None, dv))
        }
        Objective::Physics(cfg) => {
            let t = physics_loss(ops, pred, target, mesh.volume_kernel(), mesh.rest_volume(), cfg, Some(forces))?;
            Ok((t.total, t.mse, t.physics, t.delta_v))
        }
    }
}

/// Decomposed loss over a set of sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLoss {
    pub total: f64,
    pub mse: f64,
    /// Mean volume-penalty contribution (0 for the plain objective).
    pub physics: f64,
    /// `V_t - V_origin` of every predicted frame (mm³), in window order.
    pub delta_v: Vec<f64>,
}

impl EvalLoss {
    pub fn mean_abs_dv(&self) -> f64 {
        if self.delta_v.is_empty() {
            return 0.0;
        }
        self.delta_v.iter().map(|d| d.abs()).sum::<f64>() / self.delta_v.len() as f64
    }

    pub fn max_abs_dv(&self) -> f64 {
        self.delta_v.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

/// Tape-free loss evaluation with an arbitrary predictor mapping a batch of
/// windows to `[B, 3, X, Y, Z]` displacements.
pub fn evaluate_with(
    model: &ModelInstance,
    dataset: &SequenceDataset,
    seqs: &[usize],
    objective: &Objective,
    batch_size: usize,
    mut predict: impl FnMut(&Tensor<f32>, &[WindowRef]) -> Result<Tensor<f32>>,
) -> Result<EvalLoss> {
    let zero = Field3::zeros(model.spec.dims);
    let items = windows(dataset, seqs);
    let (mut total, mut mse, mut physics) = (0.0, 0.0, 0.0);
    let mut delta_v = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = make_batch(model, dataset, chunk, &zero)?;
        let pred = Arc::new(predict(&batch.input, chunk)?);
        let target = Arc::new(batch.target);
        let (t, m, p, dv) = loss_terms(&Eager, &pred, &target, &batch.forces, model, objective)?;
        let w = chunk.len() as f64;
        total += w * t.item().unwrap_or(f32::NAN) as f64;
        mse += w * m.item().unwrap_or(f32::NAN) as f64;
        physics += w * p.map_or(0.0, |p| p.item().unwrap_or(f32::NAN) as f64);
        delta_v.extend(dv);
    }
    let n = items.len().max(1) as f64;
    Ok(EvalLoss { total: total / n, mse: mse / n, physics: physics / n, delta_v })
}

/// Loss of `model` over the given sequences, without a tape.
pub fn evaluate_loss(
    model: &ModelInstance,
    dataset: &SequenceDataset,
    seqs: &[usize],
    objective: &Objective,
) -> Result<EvalLoss> {
    let params: Vec<_> = model.params.iter().map(|p| p.value.clone()).collect();
    evaluate_with(model, dataset, seqs, objective, 16, |input, chunk| {
        let out = model.forward(&Eager, &params, &Arc::new(input.clone()), chunk.len())?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    })
}

/// One optimizer step on a batch; returns the batch loss.
fn train_batch(
    model: &mut ModelInstance,
    batch: Batch,
    n: usize,
    opt: &mut AdamState,
    objective: &Objective,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let grads = {
        let graph = Graph::<f32>::new();
        let vars: Vec<_> = model.params.iter().map(|p| graph.param(p.value.clone())).collect();
        let input = graph.constant(batch.input);
        let target = graph.constant(batch.target);
        let pred = model.forward(&graph, &vars, &input, n)?;
        let (total, _, _, _) = loss_terms(&graph, &pred, &target, &batch.forces, model, objective)?;
        let loss = graph.value(total).item().unwrap_or(f32::NAN) as f64;
        if !loss.is_finite() {
            return Err(CoreError::Training { epoch, msg: format!("non-finite batch loss {loss}") });
        }
        let mut g = graph.backward(total)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(&model.params)
            .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(CoreError::Training { epoch, msg: "non-finite gradient".into() });
        }
        (grads, loss)
    };
    adam_step(model, &grads.0, opt, config);
    Ok(grads.1)
}

/// Fits normalization on the training split and trains from scratch.
pub fn train(
    mut model: ModelInstance,
    dataset: &SequenceDataset,
    split: &DatasetSplit,
    config: &TrainConfig,
    objective: &Objective,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_compatible(&model, dataset)?;
    model.norm = fit_normalization(dataset, &split.train);
    let start = Checkpoint {
        optimizer: AdamState::new(&model),
        model,
        objective: objective.clone(),
        config: config.clone(),
        epoch: 0,
        history: Vec::new(),
        best_val: f64::INFINITY,
        best_epoch: 0,
    };
    resume(start.clone(), start, dataset, split, on_epoch)
}

fn check_compatible(model: &ModelInstance, dataset: &SequenceDataset) -> Result<()> {
    if model.mesh().schema_tag() != dataset.mesh.schema_tag() {
        return Err(CoreError::Schema { expected: model.mesh().schema_tag(), found: dataset.mesh.schema_tag() });
    }
    Ok(())
}

/// Continues training from `last` (keeping `best` as the incumbent) until
/// `last.config.max_epochs` or early stopping.
pub fn resume(
    last: Checkpoint,
    best: Checkpoint,
    dataset: &SequenceDataset,
    split: &DatasetSplit,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    last.config.validate()?;
    if let Objective::Physics(cfg) = &last.objective {
        cfg.validate()?;
    }
    check_compatible(&last.model, dataset)?;
    if split.train.is_empty() {
        return Err(CoreError::Config("training split is empty".into()));
    }
    let mut state = last;
    let mut best = best;
    let zero = Field3::zeros(state.model.spec.dims);
    let train_items = windows(dataset, &split.train);
    let select_seqs = if split.val.is_empty() { &split.train } else { &split.val };
    let mut early_stopped = false;
    while state.epoch < state.config.max_epochs {
        if state.epoch - state.best_epoch > state.config.patience && state.epoch > 0 {
            early_stopped = true;
            break;
        }
        let mut items = train_items.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        rng.set_stream(state.epoch as u64 + 1);
        items.shuffle(&mut rng);

        let mut next = state.clone();
        let mut loss_sum = 0.0;
        let mut failure = None;
        for chunk in items.chunks(state.config.batch_size) {
            let batch = make_batch(&next.model, dataset, chunk, &zero)?;
            let epoch = next.epoch + 1;
            let res = train_batch(
                &mut next.model,
                batch,
                chunk.len(),
                &mut next.optimizer,
                &next.objective,
                &next.config,
                epoch,
            );
            match res {
                Ok(l) => loss_sum += l * chunk.len() as f64,
                Err(CoreError::Training { epoch, msg }) => {
                    failure = Some(format!("epoch {epoch}: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = failure {
            return Ok(TrainOutcome { best, last: state, aborted: Some(msg), early_stopped: false });
        }
        let val = evaluate_loss(&next.model, dataset, select_seqs, &next.objective)?;
        if !val.total.is_finite() {
            let msg = format!("epoch {}: non-finite validation loss", next.epoch + 1);
            return Ok(TrainOutcome { best, last: state, aborted: Some(msg), early_stopped: false });
        }
        next.epoch += 1;
        let log = EpochLog {
            epoch: next.epoch,
            train_loss: loss_sum / items.len() as f64,
            val_loss: val.total,
            val_mse: val.mse,
            mean_abs_dv: val.mean_abs_dv(),
        };
        on_epoch(&log);
        next.history.push(log);
        if val.total < next.best_val {
            next.best_val = val.total;
            next.best_epoch = next.epoch;
            best = next.clone();
        } else {
            // Keep the incumbent's history in step with the run.
            best.history = next.history.clone();
        }
        state = next;
    }
    if state.epoch - state.best_epoch > state.config.patience && state.epoch < state.config.max_epochs {
        early_stopped = true;
    }
    Ok(TrainOutcome { best, last: state, aborted: None, early_stopped })
}

/// One row of the N_N / N_t sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub id: usize,
    pub hidden: usize,
    pub steps: usize,
    /// Published parameter total for this configuration.
    pub reference_params: usize,
}

/// Configurations 1–7: N_N ∈ {64, 128, 256, 512, 1024} at N_t = 2, then N_t ∈ {3, 4} at N_N = 512.
pub fn table2_configs() -> [SweepConfig; 7] {
    let c = |id, hidden, steps, reference_params| SweepConfig { id, hidden, steps, reference_params };
    [
        c(1, 64, 2, 1_219_235),
        c(2, 128, 2, 2_501_155),
        c(3, 256, 2, 5_261_603),
        c(4, 512, 2, 11_568_931),
        c(5, 1024, 2, 27_329_315),
        c(6, 512, 3, 11_568_931),
        c(7, 512, 4, 11_568_931),
    ]
}

/// Result of one sweep configuration.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub param_count: usize,
    pub outcome: TrainOutcome,
    /// Best-checkpoint loss on the test split.
    pub test: EvalLoss,
}

/// Trains one CNN-LSTM per configuration (in parallel, each isolated) with
/// `base` supplying every other hyper-parameter.
pub fn sweep(
    base: &ModelSpec,
    configs: &[SweepConfig],
    dataset: &SequenceDataset,
    split: &DatasetSplit,
    config: &TrainConfig,
    objective: &Objective,
) -> Result<Vec<SweepResult>> {
    configs
        .par_iter()
        .map(|&c| {
            let spec = ModelSpec { hidden: c.hidden, steps: c.steps, ..base.clone() };
            let model = ModelInstance::build(spec, &dataset.mesh)?;
            let param_count = model.param_count();
            let outcome = train(model, dataset, split, config, objective, &mut |_| {})?;
            let test_seqs = if split.test.is_empty() { &split.val } else { &split.test };
            let test = evaluate_loss(&outcome.best.model, dataset, test_seqs, objective)?;
            Ok(SweepResult { config: c, param_count, outcome, test })
        })
        .collect()
}
