//! End-to-end runs of the `mbbr` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mbbr_cli::artifacts::{config_hash, sha256_hex};
use mbbr_cli::commands::{load_classifier, load_model};
use mbbr_cli::config::{ExperimentConfig, Overrides};
use mbbr_cli::exit;
use mbbr_core::eval::PairPrediction;
use mbbr_core::mbbr::MbbrModel;
use mbbr_core::rng::derive_seed;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"synthetic": {"num_scenes": 60}},
  "encoder": {"num_layers": 1, "num_heads": 2, "model_dim": 16, "ffn_dim": 32},
  "pretrain": {"epochs": 2},
  "evaluation": {"few_shot": {"fit": {"epochs": 3}}},
  "k_shots": [2],
  "seeds": [0, 1],
  "ablation": {"mask_ratios": [0.5], "probe": {"fit": {"epochs": 3}}}
}"#;

struct Run {
    code: i32,
    stderr: String,
}

fn mbbr<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_mbbr")).args(args).output().unwrap();
    Run { code: out.status.code().unwrap(), stderr: String::from_utf8_lossy(&out.stderr).into_owned() }
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self::with_config(TINY)
    }

    fn with_config(text: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), text).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        self.path("config.json").display().to_string()
    }

    /// Runs `command` with the workspace config, writing into `out`.
    fn run(&self, out: &str, command: &[&str]) -> Run {
        let mut args = vec!["--config".to_string(), self.config(), "--out".into(), self.path(out).display().to_string()];
        args.extend(command.iter().map(|s| s.to_string()));
        mbbr(&args)
    }

    fn ok(&self, out: &str, command: &[&str]) -> PathBuf {
        let r = self.run(out, command);
        assert_eq!(r.code, 0, "{command:?} failed: {}", r.stderr);
        self.path(out)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn manifest_files(dir: &Path) -> Vec<String> {
    json(&dir.join("manifest.json"))["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["file"].as_str().unwrap().to_string())
        .collect()
}

fn assert_manifest_hashes(dir: &Path) {
    for o in json(&dir.join("manifest.json"))["outputs"].as_array().unwrap() {
        let bytes = fs::read(dir.join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
}

fn no_partial_files(dir: &Path) {
    for e in fs::read_dir(dir).unwrap() {
        let name = e.unwrap().file_name().into_string().unwrap();
        assert!(!name.ends_with(".partial"), "leftover {name}");
    }
}

fn resolved(text: &str, seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_json(text, "t").unwrap().resolve(&Overrides { seed: Some(seed), ..Overrides::default() }).unwrap()
}

#[test]
fn synth_is_byte_deterministic() {
    let ws = Workspace::new();
    let a = ws.ok("a", &["synth"]);
    let b = ws.ok("b", &["synth"]);
    for f in ["scenes.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_manifest_hashes(&a);
    assert_eq!(fs::read_to_string(a.join("scenes.jsonl")).unwrap().lines().count(), 60);
    let c = ws.ok("c", &["--seed", "5", "synth"]);
    assert_ne!(fs::read(a.join("scenes.jsonl")).unwrap(), fs::read(c.join("scenes.jsonl")).unwrap());
}

#[test]
fn zero_scenes_give_an_empty_file_and_a_manifest() {
    let ws = Workspace::with_config(r#"{"data": {"synthetic": {"num_scenes": 0}}}"#);
    let out = ws.ok("out", &["synth"]);
    assert_eq!(fs::read(out.join("scenes.jsonl")).unwrap(), b"");
    assert_eq!(manifest_files(&out), ["scenes.jsonl"]);
}

#[test]
fn manifest_echoes_the_resolved_config() {
    let ws = Workspace::new();
    let out = ws.ok("out", &["--seed", "3", "synth"]);
    let m = json(&out.join("manifest.json"));
    let cfg = resolved(TINY, 3);
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"], cfg.to_value());
    assert_eq!(m["config_sha256"].as_str().unwrap(), config_hash(&cfg));
    assert!(m["config"].get("out").is_none());
}

#[test]
fn config_hash_tracks_every_field() {
    let base = resolved(TINY, 0);
    let mut changed = base.clone();
    changed.encoder.dropout = 0.1;
    assert_ne!(config_hash(&base), config_hash(&changed));
    let mut changed = base.clone();
    changed.evaluation.n = 50;
    assert_ne!(config_hash(&base), config_hash(&changed));
    let mut moved = base.clone();
    moved.out = PathBuf::from("elsewhere");
    assert_eq!(config_hash(&base), config_hash(&moved));
}

#[test]
fn zero_epoch_pretraining_stores_the_initialization() {
    let ws = Workspace::new();
    let out = ws.ok("out", &["--seed", "4", "pretrain", "--epochs", "0"]);
    let cfg = resolved(TINY, 4);
    let stored = load_model::<f64>(&out.join("model.ckpt")).unwrap();
    let init = MbbrModel::<f64>::init(&cfg.encoder, cfg.pretrain.mask_fill, None, derive_seed(4, "pretrain")).unwrap();
    assert_eq!(stored, init);
    assert_eq!(json(&out.join("training_log.json"))["epochs"].as_array().unwrap().len(), 0);
}

#[test]
fn pretraining_is_byte_deterministic_and_logs_every_epoch() {
    let ws = Workspace::new();
    let a = ws.ok("a", &["pretrain", "--epochs", "3"]);
    let b = ws.ok("b", &["pretrain", "--epochs", "3"]);
    for f in ["model.ckpt", "training_log.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = json(&a.join("training_log.json"));
    assert_eq!(log["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(log["config"]["pretrain"]["epochs"], 3);
    assert_eq!(manifest_files(&a), ["model.ckpt", "training_log.json"]);
    assert!(a.join("train_timing.json").exists());
    assert_manifest_hashes(&a);
    no_partial_files(&a);
}

#[test]
fn finetune_writes_a_loadable_classifier_and_predictions() {
    let ws = Workspace::new();
    let pre = ws.ok("pre", &["pretrain"]);
    let ckpt = pre.join("model.ckpt").display().to_string();
    let out = ws.ok("ft", &["finetune", "--checkpoint", &ckpt, "--k-shot", "1"]);
    let (classifier, model) = load_classifier::<f64>(&out.join("classifier.ckpt")).unwrap();
    assert!(model.is_none());
    assert_eq!(classifier.num_classes(), 12);
    let text = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert!(text.lines().count() > 0);
    for line in text.lines() {
        let p: PairPrediction = serde_json::from_str(line).unwrap();
        assert_eq!(p.scores.len(), 12);
        assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let again = ws.ok("ft2", &["finetune", "--checkpoint", &ckpt, "--k-shot", "1"]);
    assert_eq!(fs::read(out.join("classifier.ckpt")).unwrap(), fs::read(again.join("classifier.ckpt")).unwrap());
}

#[test]
fn unfrozen_finetune_stores_the_tuned_encoder() {
    let ws = Workspace::with_config(&TINY.replace(
        r#""few_shot": {"fit": {"epochs": 3}}"#,
        r#""few_shot": {"unfreeze_encoder": true, "fit": {"epochs": 2}}"#,
    ));
    let pre = ws.ok("pre", &["pretrain"]);
    let ckpt = pre.join("model.ckpt");
    let out = ws.ok("ft", &["finetune", "--checkpoint", ckpt.to_str().unwrap(), "--k-shot", "1"]);
    let (_, model) = load_classifier::<f64>(&out.join("classifier.ckpt")).unwrap();
    assert_ne!(model.unwrap(), load_model::<f64>(&ckpt).unwrap());
}

#[test]
fn eval_report_is_deterministic_and_echoes_its_inputs() {
    let ws = Workspace::new();
    let pre = ws.ok("pre", &["pretrain"]);
    let ckpt = pre.join("model.ckpt");
    let c = ckpt.to_str().unwrap();
    let a = ws.ok("a", &["eval", "--checkpoint", c]);
    let b = ws.ok("b", &["eval", "--checkpoint", c]);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let report = json(&a.join("report.json"));
    assert_eq!(report["config"]["experiment"], resolved(TINY, 0).to_value());
    assert_eq!(report["config"]["checkpoint_sha256"][0].as_str().unwrap(), sha256_hex(&fs::read(&ckpt).unwrap()));
    let per_seed = ws.ok("c", &["eval", "--checkpoint", c, "--checkpoint", c]);
    assert_eq!(json(&per_seed.join("report.json"))["cells"], report["cells"]);
    assert_eq!(ws.run("d", &["eval", "--checkpoint", c, "--checkpoint", c, "--checkpoint", c]).code, exit::CONFIG);
}

#[test]
fn ablation_sweeps_report_their_values_in_order() {
    let ws = Workspace::new();
    let out = ws.ok("out", &["ablate"]);
    assert_eq!(manifest_files(&out), ["mask_ratio.json", "loss_kind.json", "features.json"]);
    let mask = json(&out.join("mask_ratio.json"));
    assert_eq!(mask["values"], serde_json::json!([0.5]));
    assert_eq!(mask["report"]["rows"].as_array().unwrap().len(), 1);
    let loss = json(&out.join("loss_kind.json"));
    assert_eq!(loss["values"], serde_json::json!(["reconstruction", "classification"]));
    let features = json(&out.join("features.json"));
    assert_eq!(features["values"], serde_json::json!(["L+S", "L+S+V"]));
    // 14 spatial + 2 × 300 label dims, plus 2 × 16 encoded dims.
    assert_eq!(features["feature_dims"], serde_json::json!([614, 646]));
    let only = ws.ok("only", &["ablate", "--sweep", "features"]);
    assert_eq!(manifest_files(&only), ["features.json"]);
    assert_eq!(fs::read(only.join("features.json")).unwrap(), fs::read(out.join("features.json")).unwrap());
}

#[test]
fn attention_rows_are_distributions() {
    let ws = Workspace::new();
    let data = ws.ok("data", &["synth"]);
    let pre = ws.ok("pre", &["pretrain"]);
    let out = ws.ok(
        "att",
        &[
            "export-attention",
            "--checkpoint",
            pre.join("model.ckpt").to_str().unwrap(),
            "--scenes",
            data.join("scenes.jsonl").to_str().unwrap(),
        ],
    );
    let att = json(&out.join("attention.json"));
    let scenes = att["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 60);
    for s in scenes {
        let n = s["num_entities"].as_u64().unwrap() as usize;
        let layers = s["layers"].as_array().unwrap();
        assert_eq!(layers.len(), 1);
        for head in layers[0].as_array().unwrap() {
            let w: Vec<f64> = head.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            assert_eq!(w.len(), n * n);
            for row in w.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_precision_runs_end_to_end() {
    let ws = Workspace::new();
    let pre = ws.ok("pre", &["--precision", "f32", "pretrain"]);
    assert_eq!(json(&pre.join("manifest.json"))["config"]["precision"], "f32");
    ws.ok("ev", &["--precision", "f32", "eval", "--checkpoint", pre.join("model.ckpt").to_str().unwrap()]);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let ws = Workspace::new();
    // Usage and config errors.
    assert_eq!(mbbr(&["frobnicate"]).code, exit::CONFIG);
    assert_eq!(mbbr(&["--config", ws.path("missing.json").to_str().unwrap(), "synth"]).code, exit::CONFIG);
    let bad = Workspace::with_config(r#"{"sed": 1}"#);
    let r = bad.run("out", &["synth"]);
    assert_eq!(r.code, exit::CONFIG);
    assert!(r.stderr.contains("sed"), "{}", r.stderr);
    assert_eq!(ws.run("out", &["eval", "--data", ws.path("absent.jsonl").to_str().unwrap()]).code, exit::CONFIG);

    // Data errors, with the offending line in the message.
    fs::write(ws.path("bad.jsonl"), "\n{\"scene_id\": 1}\n").unwrap();
    let r = ws.run("out", &["pretrain", "--data", ws.path("bad.jsonl").to_str().unwrap()]);
    assert_eq!(r.code, exit::DATA);
    assert!(r.stderr.contains("bad.jsonl:2:"), "{}", r.stderr);
    fs::write(ws.path("bad.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(ws.run("out", &["eval", "--checkpoint", ws.path("bad.ckpt").to_str().unwrap()]).code, exit::DATA);

    // I/O failure: the output directory is a regular file.
    fs::write(ws.path("taken"), b"").unwrap();
    assert_eq!(ws.run("taken", &["synth"]).code, exit::RUNTIME);

    // Numeric failure: a learning rate that overflows the weights.
    let wild = Workspace::with_config(&TINY.replace(r#""epochs": 2}"#, r#""epochs": 2, "learning_rate": 1e300}"#));
    let r = wild.run("out", &["pretrain"]);
    assert_eq!(r.code, exit::NUMERIC, "{}", r.stderr);
}
