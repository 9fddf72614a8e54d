//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use viscosurr_core::evalkit::{
    bland_altman, depth_profile_error, improvement_ratio, latency_bench, mean_abs_error, predict_sequences,
    time_mean, volume_violation_trace,
};
use viscosurr_core::femsim::{generate_dataset, Material, ScenarioConfig, SequenceDataset};
use viscosurr_core::meshkit::{build_box_mesh, Field3, FixedSpec};
use viscosurr_core::store::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_json};
use viscosurr_core::surrogate::{LossConfig, ModelInstance, ModelSpec, PoolRounding};
use viscosurr_core::CoreError;
use viscosurr_core::trainer::{
    resume, split_dataset, train, DatasetSplit, Objective, SplitFractions, TrainConfig, TrainOutcome,
};
use viscosurr_simserve::{AppState, EngineKind, ServerConfig};

use crate::manifest::{beside, Recorder};
use crate::{
    BenchArgs, Cli, Command, EvalArgs, Failure, FixedFaces, GendataArgs, MaterialPreset, ModelChoice, Rounding,
    SequenceSet, ServeArgs, TrainArgs,
};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let threads = cli.threads.map(|n| n as usize);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gendata(a) => gendata(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Bench(a) => bench(&a),
        Command::Serve(a) => serve(&a, threads),
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("arguments serialize")
}

fn material(preset: MaterialPreset) -> Material {
    match preset {
        MaterialPreset::Paper => Material::paper(),
        MaterialPreset::Desk => Material::desk(),
    }
}

fn fixed_spec(f: FixedFaces) -> FixedSpec {
    match f {
        FixedFaces::Paper => FixedSpec::PaperDefault,
        FixedFaces::Bottom => FixedSpec::BottomOnly,
        FixedFaces::None => FixedSpec::None,
    }
}

fn fractions(s: [f64; 3]) -> SplitFractions {
    SplitFractions { train: s[0], val: s[1], test: s[2] }
}

fn gendata(a: &GendataArgs) -> Result<(), Failure> {
    let rec = Recorder::start("gendata");
    let mesh = build_box_mesh(a.mesh, a.spacing, fixed_spec(a.fixed))?;
    let material = match &a.material_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Material>(&text)
                .map_err(|e| Failure::Config(format!("{}: invalid material: {e}", path.display())))?
        }
        None => material(a.material),
    };
    let cfg = ScenarioConfig {
        frames: a.frames,
        sample_interval: a.sample_interval,
        max_force: a.max_force,
        press_probability: a.press_probability,
        press_max_force: a.press_max_force,
        ..ScenarioConfig::default()
    };
    cfg.validate()?;
    if a.sequences == 0 {
        return Err(Failure::Config("--sequences must be at least 1".into()));
    }
    let ds = generate_dataset(&mesh, &material, a.sequences, a.seed, &cfg)?;
    save_dataset(&a.out, &ds)?;
    println!(
        "wrote {} sequences x {} frames on a {:?} grid (dt {:.4e} s) to {}",
        ds.sequences.len(),
        a.frames,
        a.mesh,
        ds.dt,
        a.out.display()
    );
    let config = json!({ "args": to_value(a), "material": ds.material, "scenario": ds.config, "dt": ds.dt });
    let inputs = a.material_file.iter().cloned().collect();
    rec.finish(&beside(&a.out), config, Some(a.seed), inputs, vec![a.out.clone()])
}

fn model_spec(
    choice: ModelChoice,
    dims: [usize; 3],
    nn: usize,
    nt: usize,
    filters: Option<usize>,
    rounding: Rounding,
) -> ModelSpec {
    match choice {
        ModelChoice::Linear => ModelSpec::linear(dims),
        ModelChoice::Cnn => ModelSpec::cnn_unet(dims, filters.unwrap_or(64)),
        ModelChoice::CnnLstm => {
            let base = ModelSpec::cnn_lstm(dims, nn, nt);
            ModelSpec {
                filters: filters.unwrap_or(base.filters),
                pool_rounding: match rounding {
                    Rounding::Floor => PoolRounding::Floor,
                    Rounding::Ceil => PoolRounding::Ceil,
                },
                ..base
            }
        }
    }
}

fn last_path(out: &Path) -> PathBuf {
    out.with_extension("last.vsdt")
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let rec = Recorder::start("train");
    let ds = load_dataset(&a.data, None)?;
    let split_seed = a.split_seed.unwrap_or(a.seed);
    let split = split_dataset(ds.sequences.len(), fractions(a.split), split_seed)?;
    let loss = LossConfig {
        lambda: a.lambda,
        volume_gate_fraction: a.gate,
        volume_gate_abs: a.gate_abs,
        cosine_term_weight: a.cosine_weight,
    };
    loss.validate()?;
    let objective = Objective::Physics(loss);
    let cfg = TrainConfig {
        learning_rate: a.lr,
        max_epochs: a.epochs,
        batch_size: a.batch,
        patience: a.patience,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut progress = |log: &viscosurr_core::trainer::EpochLog| eprintln!("{}", log.progress_line());
    let last_out = last_path(&a.out);
    let outcome: TrainOutcome = if a.resume {
        let mut last = load_checkpoint(&last_out, Some(&ds.mesh))?;
        let best = load_checkpoint(&a.out, Some(&ds.mesh))?;
        last.config.max_epochs = a.epochs;
        resume(last, best, &ds, &split, &mut progress)?
    } else {
        let spec = model_spec(a.model, ds.mesh.dims(), a.nn, a.nt, a.filters, a.pool_rounding).with_seed(a.seed);
        let model = ModelInstance::build(spec, &ds.mesh)?;
        train(model, &ds, &split, &cfg, &objective, &mut progress)?
    };
    save_checkpoint(&a.out, &outcome.best)?;
    save_checkpoint(&last_out, &outcome.last)?;
    let model = &outcome.best.model;
    let config = json!({
        "args": to_value(a),
        "model_spec": model.spec,
        "param_count": model.param_count(),
        "train_config": outcome.last.config,
        "objective": outcome.last.objective,
        "split_seed": split_seed,
        "split": split,
        "epochs_run": outcome.last.epoch,
        "best_epoch": outcome.best.best_epoch,
        "best_val_loss": outcome.best.best_val,
        "early_stopped": outcome.early_stopped,
        "aborted": outcome.aborted,
    });
    rec.finish(&beside(&a.out), config, Some(a.seed), vec![a.data.clone()], vec![a.out.clone(), last_out])?;
    if let Some(msg) = outcome.aborted {
        return Err(Failure::Training(format!("training aborted: {msg} (last good state saved)")));
    }
    println!(
        "{} ({} parameters): best val loss {:.6e} at epoch {}, {} epochs run{}",
        model.spec.kind.name(),
        model.param_count(),
        outcome.best.best_val,
        outcome.best.best_epoch,
        outcome.last.epoch,
        if outcome.early_stopped { ", stopped early" } else { "" }
    );
    Ok(())
}

fn selected(split: &DatasetSplit, set: SequenceSet, n: usize) -> Vec<usize> {
    match set {
        SequenceSet::Train => split.train.clone(),
        SequenceSet::Val => split.val.clone(),
        SequenceSet::Test => split.test.clone(),
        SequenceSet::All => (0..n).collect(),
    }
}

fn labels(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "model".into()))
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if stems.iter().filter(|t| *t == s).count() > 1 { format!("{s}-{i}") } else { s.clone() })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let rec = Recorder::start("eval");
    let ds: SequenceDataset = load_dataset(&a.data, None)?;
    let split = split_dataset(ds.sequences.len(), fractions(a.split), a.split_seed)?;
    let seqs = selected(&split, a.sequences, ds.sequences.len());
    if seqs.is_empty() {
        return Err(Failure::Config(format!("the {:?} selection of {} is empty", a.sequences, a.data.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Config(format!("{}: {e}", a.out.display())))?;
    let mesh = &ds.mesh;
    let free = mesh.free_nodes();
    let reference: Vec<&Field3> = seqs.iter().flat_map(|&s| ds.sequences[s].frames.iter().map(|f| &f.displacement)).collect();
    let reference_mean = time_mean(&reference)?;
    let names = labels(&a.checkpoints);
    let single = a.checkpoints.len() == 1;
    let mut outputs = Vec::new();
    let mut models = Vec::new();
    let mut traces = Vec::new();
    let mut baseline_mae = None;
    for (path, label) in a.checkpoints.iter().zip(&names) {
        let ckpt = load_checkpoint(path, Some(mesh)).map_err(|e| match e {
            CoreError::Schema { .. } => Failure::Config(format!(
                "checkpoint {} does not fit dataset {}: {e}",
                path.display(),
                a.data.display()
            )),
            other => Failure::from(other),
        })?;
        let model = ckpt.model;
        let preds = predict_sequences(&model, &ds, &seqs)?;
        let flat: Vec<&Field3> = preds.iter().flatten().collect();
        let mae = mean_abs_error(&flat, &reference, &free);
        let depth = depth_profile_error(&flat, &reference, mesh)?;
        let ba = bland_altman(&time_mean(&flat)?, &reference_mean, &free, a.z)?;
        let file = |name: &str| if single { a.out.join(name) } else { a.out.join(format!("{label}_{name}")) };
        let (ba_path, depth_path) = (file("bland_altman.csv"), file("depth_profile.csv"));
        write_text(&ba_path, &ba.to_csv())?;
        write_text(&depth_path, &depth.to_csv())?;
        outputs.extend([ba_path, depth_path]);
        let base = *baseline_mae.get_or_insert(mae);
        models.push(json!({
            "label": label,
            "checkpoint": path,
            "kind": model.spec.kind.name(),
            "param_count": model.param_count(),
            "mae_mm": mae,
            "improvement_over_first": improvement_ratio(base, mae),
            "depth_profile_mean_mae_mm": depth.mean_mae(),
            "depth_profile": depth.bins,
            "bland_altman": {
                "mean_difference_mm": ba.mean_difference,
                "sd_difference_mm": ba.sd_difference,
                "z": ba.z,
                "lower_limit_mm": ba.lower_limit,
                "upper_limit_mm": ba.upper_limit,
            },
        }));
        traces.push((label.clone(), preds));
    }
    let train_forces: Vec<f64> = split.train.iter().map(|&s| ds.sequences[s].max_force_magnitude()).collect();
    let train_mean = if train_forces.is_empty() {
        0.0
    } else {
        train_forces.iter().sum::<f64>() / train_forces.len() as f64
    };
    let seq_refs: Vec<(usize, &_)> = seqs.iter().map(|&s| (s, &ds.sequences[s])).collect();
    let trace = volume_violation_trace(mesh, &seq_refs, &traces, train_mean, a.flag_count)?;
    let trace_path = a.out.join("volume_trace.csv");
    write_text(&trace_path, &trace.to_csv())?;
    outputs.push(trace_path);
    let (mean_max, mean_abs, overall) = (trace.mean_max_abs_dv(), trace.mean_abs_dv(), trace.overall_max_abs_dv());
    for (i, m) in models.iter_mut().enumerate() {
        m["volume"] = json!({
            "mean_abs_dv_mm3": mean_abs[i],
            "mean_max_abs_dv_mm3": mean_max[i],
            "max_abs_dv_mm3": overall[i],
        });
    }
    let ref_max: Vec<f64> = trace.sequences.iter().map(|s| s.reference_max_abs_dv).collect();
    let metrics = json!({
        "data": a.data,
        "sequences": seqs,
        "rest_volume_mm3": mesh.rest_volume(),
        "reference": {
            "mean_max_abs_dv_mm3": ref_max.iter().sum::<f64>() / ref_max.len() as f64,
            "max_abs_dv_mm3": ref_max.iter().fold(0.0f64, |m, v| m.max(*v)),
        },
        "flagged_sequences": trace.sequences.iter().filter(|s| s.flagged).map(|s| s.sequence).collect::<Vec<_>>(),
        "models": models,
    });
    let metrics_path = a.out.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    outputs.push(metrics_path);
    for m in metrics["models"].as_array().into_iter().flatten() {
        println!(
            "{:<24} {:<9} MAE {:.4e} mm  depth-mean {:.4e} mm  mean|dV| {:.4e} mm3  max|dV| {:.4e} mm3",
            m["label"].as_str().unwrap_or(""),
            m["kind"].as_str().unwrap_or(""),
            m["mae_mm"].as_f64().unwrap_or(f64::NAN),
            m["depth_profile_mean_mae_mm"].as_f64().unwrap_or(f64::NAN),
            m["volume"]["mean_abs_dv_mm3"].as_f64().unwrap_or(f64::NAN),
            m["volume"]["max_abs_dv_mm3"].as_f64().unwrap_or(f64::NAN),
        );
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.checkpoints.iter().cloned());
    rec.finish(&a.out.join("manifest.json"), json!({ "args": to_value(a), "split": split }), None, inputs, outputs)
}

fn bench(a: &BenchArgs) -> Result<(), Failure> {
    let rec = Recorder::start("bench");
    let model = match (&a.checkpoint, a.model) {
        (Some(path), _) => load_checkpoint(path, None)?.model,
        (None, Some(choice)) => {
            let mesh = build_box_mesh(a.mesh, [1.0; 3], FixedSpec::PaperDefault)?;
            let spec = model_spec(choice, a.mesh, a.nn, a.nt, a.filters, Rounding::Ceil).with_seed(a.seed);
            ModelInstance::build(spec, &mesh)?
        }
        (None, None) => return Err(Failure::Config("bench needs --checkpoint or --model".into())),
    };
    let report = latency_bench(&model, a.iterations, a.warmup, a.seed)?;
    println!(
        "{} {:?}: mean {:.4e} s  median {:.4e} s  p95 {:.4e} s  ({:.1} Hz, {} iterations) on {}",
        report.model,
        report.dims,
        report.mean_s,
        report.median_s,
        report.p95_s,
        report.rate_hz,
        report.iterations,
        report.hardware
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
        let inputs = a.checkpoint.iter().cloned().collect();
        let config = json!({ "args": to_value(a), "model_spec": model.spec, "param_count": model.param_count() });
        rec.finish(&beside(out), config, Some(a.seed), inputs, vec![out.clone()])?;
    }
    Ok(())
}

fn serve(a: &ServeArgs, threads: Option<usize>) -> Result<(), Failure> {
    let fem_mesh = match a.mesh {
        Some(dims) => Some(build_box_mesh(dims, [1.0; 3], FixedSpec::PaperDefault)?),
        None => None,
    };
    let config = ServerConfig {
        default_engine: if a.fem { EngineKind::Fem } else { EngineKind::Surrogate },
        checkpoint: a.checkpoint.clone(),
        fem_mesh,
        material: material(a.material),
        scenario: ScenarioConfig::default(),
    };
    let state: Arc<AppState> = AppState::new(config);
    if let Some(path) = &a.checkpoint {
        state.model(path).map_err(|e| Failure::Config(e.message))?;
    }
    let mut builder = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        builder.worker_threads(n).max_blocking_threads(n.max(1));
    }
    let runtime = builder.enable_all().build().map_err(|e| Failure::Config(format!("runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .map_err(|e| Failure::Config(format!("bind {}:{}: {e}", a.host, a.port)))?;
        let addr = listener.local_addr().map_err(|e| Failure::Config(e.to_string()))?;
        println!("listening on http://{addr}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        viscosurr_simserve::serve(listener, state, shutdown).await.map_err(|e| Failure::Config(format!("serve: {e}")))
    })
}
