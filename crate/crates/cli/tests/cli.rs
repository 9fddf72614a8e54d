use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

const BIN: &str = env!("CARGO_BIN_EXE_viscosurr");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).env_remove("VISCOSURR_THREADS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).to_string()
}

fn gendata(dir: &Path, out: &str, seed: &str, mesh: &str) -> Output {
    run(dir, &["gendata", "--mesh", mesh, "--sequences", "2", "--frames", "3", "--seed", seed, "--out", out])
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

#[test]
fn help_enumerates_subcommands_and_flags_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let top = run(dir.path(), &["--help"]);
    assert_eq!(code(&top), 0);
    for sub in ["gendata", "train", "eval", "bench", "serve"] {
        assert!(stdout(&top).contains(sub), "top-level help lacks {sub}");
    }
    let expected: &[(&str, &[&str])] = &[
        ("gendata", &["--mesh", "--spacing", "--material-file", "--sequences", "--frames", "--seed", "--out"]),
        ("train", &["--data", "--model", "--nn", "--nt", "--lambda", "--gate", "--cosine-weight", "--seed", "--out"]),
        ("eval", &["--data", "--checkpoints", "--out"]),
        ("bench", &["--checkpoint", "--iterations"]),
        ("serve", &["--checkpoint", "--port", "--fem"]),
    ];
    for (sub, flags) in expected {
        let o = run(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for flag in *flags {
            assert!(text.contains(flag), "{sub} --help lacks {flag}:\n{text}");
        }
        assert!(text.contains("--config") && text.contains("--threads"), "{sub} lacks global flags");
    }
    let train = stdout(&run(dir.path(), &["train", "--help"]));
    for default in ["[default: 512]", "[default: 2]", "[default: 0.1]", "[default: 0.07]", "[default: 0]", "[default: 0.00001]"] {
        assert!(train.contains(default), "train --help lacks {default}:\n{train}");
    }
    assert!(train.contains("linear") && train.contains("cnn-lstm"));
    let gen = stdout(&run(dir.path(), &["gendata", "--help"]));
    assert!(gen.contains("in mm") && gen.contains("in N") && gen.contains("in s"), "units missing:\n{gen}");
    assert!(gen.contains("[default: 9,9,5]"));
    let bench = stdout(&run(dir.path(), &["bench", "--help"]));
    assert!(bench.contains("[default: 100]"));
}

#[test]
fn gendata_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = gendata(dir.path(), "a.vsdt", "1", "5,5,3");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&gendata(dir.path(), "b.vsdt", "1", "5,5,3")), 0);
    let (fa, fb) = (std::fs::read(dir.path().join("a.vsdt")).unwrap(), std::fs::read(dir.path().join("b.vsdt")).unwrap());
    assert_eq!(fa, fb);
    assert_eq!(code(&gendata(dir.path(), "c.vsdt", "2", "5,5,3")), 0);
    assert_ne!(fa, std::fs::read(dir.path().join("c.vsdt")).unwrap());
    let m = read_json(dir.path().join("a.vsdt.manifest.json"));
    assert_eq!(m["command"], "gendata");
    assert_eq!(m["seed"], 1);
    assert_eq!(m["config"]["args"]["frames"], 3);
    assert_eq!(m["config"]["args"]["press_probability"], 0.35);
    assert!(m["config"]["material"]["prony"].is_array());
    assert_eq!(m["outputs"][0], "a.vsdt");
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing_out = run(dir.path(), &["gendata", "--sequences", "2"]);
    assert_eq!(code(&missing_out), 2);
    assert!(stderr(&missing_out).contains("--out"));
    assert_eq!(code(&gendata(dir.path(), "x.vsdt", "1", "5,5")), 2);
    assert_eq!(code(&gendata(dir.path(), "x.vsdt", "1", "1,1,1")), 2);
    assert_eq!(code(&run(dir.path(), &["gendata", "--frames", "0", "--out", "x.vsdt"])), 2);
    assert_eq!(code(&run(dir.path(), &["train", "--data", "nope.vsdt", "--out", "m.vsdt"])), 2);
    let bad_model = run(dir.path(), &["train", "--data", "d.vsdt", "--model", "transformer", "--out", "m.vsdt"]);
    assert_eq!(code(&bad_model), 2);
    assert!(stderr(&bad_model).contains("transformer"));
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn train_is_deterministic_and_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gendata(d, "ds.vsdt", "3", "5,5,3")), 0);
    let train = |out: &str| {
        run(d, &[
            "train", "--data", "ds.vsdt", "--model", "linear", "--epochs", "2", "--lr", "1e-3", "--split", "0.5,0.5,0",
            "--seed", "4", "--out", out,
        ])
    };
    let t = train("m1.vsdt");
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    assert!(stderr(&t).contains("epoch=1 train_loss="));
    assert_eq!(code(&train("m2.vsdt")), 0);
    assert_eq!(std::fs::read(d.join("m1.vsdt")).unwrap(), std::fs::read(d.join("m2.vsdt")).unwrap());
    assert!(d.join("m1.last.vsdt").exists());
    let m = read_json(d.join("m1.vsdt.manifest.json"));
    assert_eq!(m["config"]["train_config"]["learning_rate"], 1e-3);
    assert_eq!(m["config"]["objective"]["kind"], "physics");
    assert_eq!(m["config"]["epochs_run"], 2);

    let resumed = run(d, &[
        "train", "--data", "ds.vsdt", "--model", "linear", "--epochs", "3", "--lr", "1e-3", "--split", "0.5,0.5,0",
        "--seed", "4", "--resume", "--out", "m1.vsdt",
    ]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert_eq!(read_json(d.join("m1.vsdt.manifest.json"))["config"]["epochs_run"], 3);

    let e = run(d, &[
        "eval", "--data", "ds.vsdt", "--checkpoints", "m2.vsdt", "--split", "0.5,0.5,0", "--split-seed", "4",
        "--sequences", "val", "--out", "report",
    ]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    for f in ["bland_altman.csv", "depth_profile.csv", "volume_trace.csv", "metrics.json", "manifest.json"] {
        assert!(d.join("report").join(f).exists(), "missing {f}");
    }
    let metrics = read_json(d.join("report/metrics.json"));
    assert_eq!(metrics["models"][0]["kind"], "linear");
    assert!(metrics["models"][0]["mae_mm"].as_f64().unwrap() >= 0.0);
    assert_eq!(metrics["models"][0]["improvement_over_first"], 0.0);
    let ba = std::fs::read_to_string(d.join("report/bland_altman.csv")).unwrap();
    assert!(ba.starts_with("node,mean_mm,difference_mm"));

    // Two checkpoints: per-model files plus one combined trace.
    let e2 = run(d, &[
        "eval", "--data", "ds.vsdt", "--checkpoints", "m1.vsdt", "m2.vsdt", "--split", "0.5,0.5,0", "--split-seed",
        "4", "--sequences", "all", "--out", "report2",
    ]);
    assert_eq!(code(&e2), 0, "{}", stderr(&e2));
    assert!(d.join("report2/m1_bland_altman.csv").exists() && d.join("report2/m2_depth_profile.csv").exists());
    assert_eq!(read_json(d.join("report2/metrics.json"))["models"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_rejects_checkpoint_for_another_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gendata(d, "small.vsdt", "3", "4,4,3")), 0);
    assert_eq!(code(&gendata(d, "ds.vsdt", "3", "5,5,3")), 0);
    let t = run(d, &["train", "--data", "small.vsdt", "--model", "linear", "--epochs", "1", "--split", "0.5,0.5,0", "--out", "m.vsdt"]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let e = run(d, &["eval", "--data", "ds.vsdt", "--checkpoints", "m.vsdt", "--split", "0.5,0.5,0", "--sequences", "all", "--out", "r"]);
    assert_eq!(code(&e), 2);
    assert!(stderr(&e).contains("does not fit"), "{}", stderr(&e));
    let missing = run(d, &[
        "eval", "--data", "ds.vsdt", "--checkpoints", "gone.vsdt", "--split", "0.5,0.5,0", "--sequences", "all",
        "--out", "r",
    ]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("gone.vsdt") && !stderr(&missing).contains("does not fit"));
}

#[test]
fn diverging_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&gendata(d, "ds.vsdt", "3", "5,5,3")), 0);
    let t = run(d, &[
        "train", "--data", "ds.vsdt", "--model", "linear", "--epochs", "20", "--lr", "1e38", "--split", "0.5,0.5,0",
        "--out", "m.vsdt",
    ]);
    assert_eq!(code(&t), 4, "{}", stderr(&t));
    assert!(stderr(&t).contains("aborted"));
    assert!(d.join("m.last.vsdt").exists(), "last good state must be saved");
}

#[test]
fn bench_enforces_minimum_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let short = run(d, &["bench", "--model", "linear", "--mesh", "5,5,3", "--iterations", "50"]);
    assert_eq!(code(&short), 2);
    assert!(stderr(&short).contains("100"));
    let ok = run(d, &["bench", "--model", "linear", "--mesh", "5,5,3", "--out", "lat.json"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let r = read_json(d.join("lat.json"));
    assert_eq!(r["iterations"], 100);
    assert!(r["mean_s"].as_f64().unwrap() > 0.0);
    assert!(d.join("lat.json.manifest.json").exists());
    assert_eq!(code(&run(d, &["bench", "--iterations", "100"])), 2, "needs --checkpoint or --model");
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.toml"),
        "[gendata]\nmesh = [5, 5, 3]\nsequences = 2\nframes = 3\nseed = 7\nmax_force = 0.0002\nsample-interval = 0.1\nout = \"from_config.vsdt\"\n",
    )
    .unwrap();
    let o = run(d, &["--config", "cfg.toml", "gendata"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&gendata(d, "direct7.vsdt", "7", "5,5,3")), 0);
    assert_eq!(std::fs::read(d.join("from_config.vsdt")).unwrap(), std::fs::read(d.join("direct7.vsdt")).unwrap());

    let o = run(d, &["gendata", "--seed", "1", "--out", "override.vsdt", "--config", "cfg.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&gendata(d, "direct1.vsdt", "1", "5,5,3")), 0);
    assert_eq!(std::fs::read(d.join("override.vsdt")).unwrap(), std::fs::read(d.join("direct1.vsdt")).unwrap());
    assert_eq!(read_json(d.join("override.vsdt.manifest.json"))["seed"], 1);

    std::fs::write(d.join("bad.toml"), "seed = 3\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.toml", "gendata", "--out", "x.vsdt"])), 2);
    std::fs::write(d.join("typo.toml"), "[gendata]\nsequencez = 3\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "typo.toml", "gendata", "--out", "x.vsdt"])), 2);
    assert_eq!(code(&run(d, &["--config", "missing.toml", "gendata", "--out", "x.vsdt"])), 2);
}

#[test]
fn thread_cap_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["gendata", "--mesh", "5,5,3", "--sequences", "2", "--frames", "3", "--out", "t.vsdt"];
    let o = Command::new(BIN).current_dir(d).args(args).env("VISCOSURR_THREADS", "1").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(d.join("t.vsdt.manifest.json"))["threads"], 1);
    let bad = Command::new(BIN).current_dir(d).args(args).env("VISCOSURR_THREADS", "0").output().unwrap();
    assert_eq!(code(&bad), 2);
    let junk = Command::new(BIN).current_dir(d).args(args).env("VISCOSURR_THREADS", "many").output().unwrap();
    assert_eq!(code(&junk), 2);
}

struct Child(std::process::Child);

impl Drop for Child {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serve_answers_a_zero_force_frame() {
    let mut child = Child(
        Command::new(BIN)
            .args(["serve", "--fem", "--material", "desk", "--mesh", "5,5,3", "--port", "0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let mut line = String::new();
    BufReader::new(child.0.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let base = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
    let client = reqwest::Client::new();
    let created: Value = client.post(format!("{base}/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(created["engine"], "fem");
    let id = created["id"].as_str().unwrap();
    let ws_url = format!("{}/sessions/{id}/stream", base.replacen("http://", "ws://", 1));
    let (mut ws, _) = tokio_tungstenite::connect_async(ws_url).await.unwrap();
    ws.send(Message::text("{\"forces\":[]}\n")).await.unwrap();
    let reply = match ws.next().await.unwrap().unwrap() {
        Message::Text(t) => serde_json::from_str::<Value>(&t).unwrap(),
        other => panic!("unexpected {other:?}"),
    };
    let u = reply["u"].as_array().unwrap();
    assert_eq!(u.len(), 3 * 75);
    assert!(u.iter().all(|v| v.as_f64() == Some(0.0)));
    assert_eq!(reply["dv"], 0.0);
    assert!(reply["latency"].as_f64().unwrap() >= 0.0);
}

#[test]
fn serve_rejects_unreadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["serve", "--checkpoint", "nope.vsdt", "--port", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope.vsdt"));
}
