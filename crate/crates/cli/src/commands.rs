//! One function per subcommand. Each writes its artifacts plus a manifest
//! into the output directory and echoes the resolved config into every
//! JSON artifact and checkpoint.

use std::path::{Path, PathBuf};

use mbbr_core::data::{
    build_label_embeddings, load_scenes, sample_k_shot, scenes_to_jsonl, split_scenes, strip_labels,
    synthesize_dataset, LabelEmbeddingTable, LabelSpace, Scene, FEATURE_DIM,
};
use mbbr_core::encoder::{attention_scores, PaddedBatch};
use mbbr_core::eval::{
    evaluate_few_shot, mask_ratio_sweep, sweep_chart, FewShotEvalConfig, FewShotReport, Models,
};
use mbbr_core::fewshot::{
    predict_scenes, train_few_shot, visual_inputs, ClassifierDescription, ClassifierWeights, FeatureAblationConfig, FewShotConfig,
    FitConfig, Representation,
};
use mbbr_core::mbbr::{
    build_entity_embeddings, pretrain, pretrain_classification_variant, LossKind, MaskPlan, MbbrModel,
    ModelDescription, PreparedScene, PretrainOutcome,
};
use mbbr_core::nn::Params;
use mbbr_core::rng::derive_seed;
use mbbr_core::tensor::{read_checkpoint, Checkpoint};
use mbbr_core::Scalar;
use serde::Serialize;
use serde_json::{json, Value};

use crate::artifacts::{sha256_hex, to_json_bytes, Artifacts};
use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";
pub const TRAINING_LOG: &str = "training_log.json";
pub const TIMING: &str = "train_timing.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const REPORT: &str = "report.json";
pub const ATTENTION: &str = "attention.json";

/// Which ablation sweeps `ablate` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    MaskRatio,
    LossKind,
    Features,
}

impl Sweep {
    pub const ALL: [Sweep; 3] = [Sweep::MaskRatio, Sweep::LossKind, Sweep::Features];

    pub fn file_name(self) -> &'static str {
        match self {
            Sweep::MaskRatio => "mask_ratio.json",
            Sweep::LossKind => "loss_kind.json",
            Sweep::Features => "features.json",
        }
    }
}

fn label_space(cfg: &ExperimentConfig) -> LabelSpace {
    LabelSpace {
        num_categories: Some(cfg.data.num_categories()),
        num_predicates: Some(cfg.data.num_predicates()),
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Vec<Scene>> {
    Ok(match &cfg.data {
        DataSource::Synthetic(s) => synthesize_dataset(s)?,
        DataSource::File { path, .. } => load_scenes(path, label_space(cfg))?,
    })
}

fn label_table(cfg: &ExperimentConfig) -> CliResult<LabelEmbeddingTable> {
    Ok(build_label_embeddings(&cfg.labels, cfg.data.num_categories())?)
}

fn checkpoint_bytes(metadata: Value, tensors: Vec<mbbr_core::tensor::NamedTensor>) -> CliResult<Vec<u8>> {
    Ok(Checkpoint { metadata, tensors }.to_bytes()?)
}

fn model_metadata<T: Scalar>(command: &str, cfg: &ExperimentConfig, model: &MbbrModel<T>, prefix: &str) -> Value {
    json!({
        "command": command,
        "config": cfg,
        "model": model.describe(),
        "model_prefix": prefix,
    })
}

/// Loads the encoder model stored in a `pretrain` or unfrozen `finetune`
/// checkpoint.
pub fn load_model<T: Scalar>(path: &Path) -> CliResult<MbbrModel<T>> {
    let ckpt = read_checkpoint(path)?;
    model_from(&ckpt, path)
}

fn model_from<T: Scalar>(ckpt: &Checkpoint, path: &Path) -> CliResult<MbbrModel<T>> {
    let bad = |m: &str| mbbr_core::Error::Checkpoint(format!("{}: {m}", path.display()));
    let desc: ModelDescription = serde_json::from_value(ckpt.metadata.get("model").cloned().ok_or_else(|| bad("no model description"))?)
        .map_err(|e| bad(&e.to_string()))?;
    let prefix = ckpt.metadata.get("model_prefix").and_then(Value::as_str).unwrap_or("");
    Ok(MbbrModel::from_checkpoint(&desc, ckpt, prefix)?)
}

/// Loads the classifier of a `finetune` checkpoint, plus its fine-tuned
/// encoder when the encoder was unfrozen.
pub fn load_classifier<T: Scalar>(path: &Path) -> CliResult<(ClassifierWeights<T>, Option<MbbrModel<T>>)> {
    let ckpt = read_checkpoint(path)?;
    let bad = |m: &str| mbbr_core::Error::Checkpoint(format!("{}: {m}", path.display()));
    let desc: ClassifierDescription =
        serde_json::from_value(ckpt.metadata.get("classifier").cloned().ok_or_else(|| bad("no classifier description"))?)
            .map_err(|e| bad(&e.to_string()))?;
    let classifier = ClassifierWeights::from_checkpoint(&desc, &ckpt, "classifier")?;
    let model = if ckpt.metadata.get("model").is_some() { Some(model_from(&ckpt, path)?) } else { None };
    Ok((classifier, model))
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(CliError::Config("synth needs a synthetic data source".into()));
    };
    let scenes = synthesize_dataset(s)?;
    let mut art = Artifacts::create(&cfg.out)?;
    art.write_bytes("scenes.jsonl", scenes_to_jsonl(&scenes)?.as_bytes())?;
    eprintln!("wrote {} scenes", scenes.len());
    art.finish("synth", cfg)
}

fn run_pretraining<T: Scalar>(
    train: &[Scene],
    cfg: &ExperimentConfig,
    loss: LossKind,
) -> CliResult<PretrainOutcome<T>> {
    let pcfg = mbbr_core::mbbr::PretrainConfig { loss_kind: loss, ..cfg.pretrain.clone() };
    Ok(match loss {
        LossKind::Reconstruction => pretrain(&strip_labels(train), &cfg.encoder, &pcfg)?,
        LossKind::Classification => pretrain_classification_variant(train, cfg.data.num_categories(), &cfg.encoder, &pcfg)?,
    })
}

#[derive(Serialize)]
struct Timing<'a> {
    epoch_seconds: &'a [f64],
    total_seconds: f64,
}

pub fn cmd_pretrain<T: Scalar>(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let scenes = load_dataset(cfg)?;
    let (train, _) = split_scenes(&scenes, cfg.test_fraction);
    let outcome = run_pretraining::<T>(&train, cfg, cfg.pretrain.loss_kind)?;
    for (e, l) in outcome.losses.iter().enumerate() {
        eprintln!("epoch {e:>3}  loss {l:.6}");
    }
    let mut art = Artifacts::create(&cfg.out)?;
    let tensors = outcome.model.to_named_tensors("");
    art.write_bytes(MODEL_CHECKPOINT, &checkpoint_bytes(model_metadata("pretrain", cfg, &outcome.model, ""), tensors)?)?;
    art.write_json(TRAINING_LOG, &outcome.log(cfg.to_value(), cfg.seed))?;
    let timing = Timing {
        epoch_seconds: &outcome.epoch_seconds,
        total_seconds: outcome.epoch_seconds.iter().sum(),
    };
    art.write_untracked(TIMING, &to_json_bytes(&timing)?)?;
    art.finish("pretrain", cfg)
}

pub fn cmd_finetune<T: Scalar>(cfg: &ExperimentConfig, checkpoint: Option<&Path>, k_shot: usize) -> CliResult<PathBuf> {
    let model = checkpoint.map(load_model::<T>).transpose()?;
    let scenes = load_dataset(cfg)?;
    let (train, test) = split_scenes(&scenes, cfg.test_fraction);
    let table = label_table(cfg)?;
    let num_predicates = cfg.data.num_predicates();
    let samples = sample_k_shot(&train, k_shot, num_predicates, derive_seed(cfg.seed, "sampling"))?;
    let fs = FewShotConfig {
        fit: FitConfig { seed: derive_seed(cfg.seed, "classifier"), ..cfg.evaluation.few_shot.fit.clone() },
        ..cfg.evaluation.few_shot.clone()
    };
    let outcome = train_few_shot(&samples, &train, model.as_ref(), &table, num_predicates, &fs)?;
    let reps = visual_inputs(&test, outcome.model_or(model.as_ref()), &fs, 32)?;
    let preds = predict_scenes(&test, &reps, &table, &fs.ablation, &outcome.classifier)?;

    let mut art = Artifacts::create(&cfg.out)?;
    let mut metadata = json!({
        "command": "finetune",
        "config": cfg,
        "k_shot": k_shot,
        "classifier": outcome.classifier.describe(),
    });
    let mut tensors = outcome.classifier.checkpoint_tensors("classifier");
    if let Some(m) = &outcome.model {
        metadata["model"] = serde_json::to_value(m.describe()).map_err(mbbr_core::Error::from)?;
        metadata["model_prefix"] = json!("model");
        tensors.extend(m.to_named_tensors("model"));
    }
    art.write_bytes(CLASSIFIER_CHECKPOINT, &checkpoint_bytes(metadata, tensors)?)?;
    let mut lines = String::new();
    for p in preds.iter().flatten() {
        lines.push_str(&serde_json::to_string(p).map_err(mbbr_core::Error::from)?);
        lines.push('\n');
    }
    art.write_bytes(PREDICTIONS, lines.as_bytes())?;
    eprintln!("trained on {} samples, scored {} test pairs", samples.len(), preds.iter().map(Vec::len).sum::<usize>());
    art.finish("finetune", cfg)
}

fn eval_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    cfg.seeds.iter().map(|s| derive_seed(cfg.seed, &format!("eval-{s}"))).collect()
}

fn checkpoint_hashes(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    paths
        .iter()
        .map(|p| std::fs::read(p).map(|b| sha256_hex(&b)).map_err(|e| CliError::io(p, e)))
        .collect()
}

fn with_echo(mut report: FewShotReport, cfg: &ExperimentConfig, checkpoints: &[String]) -> FewShotReport {
    report.config = json!({ "experiment": cfg, "evaluation": report.config, "checkpoint_sha256": checkpoints });
    report
}

pub fn cmd_eval<T: Scalar>(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<PathBuf> {
    let models: Vec<MbbrModel<T>> = checkpoints.iter().map(|p| load_model(p)).collect::<CliResult<_>>()?;
    let source = match models.len() {
        0 => Models::None,
        1 => Models::Shared(&models[0]),
        n if n == cfg.seeds.len() => Models::PerSeed(&models),
        n => {
            return Err(CliError::Config(format!(
                "{n} checkpoints for {} seeds; pass none, one or one per seed",
                cfg.seeds.len()
            )))
        }
    };
    let scenes = load_dataset(cfg)?;
    let (train, test) = split_scenes(&scenes, cfg.test_fraction);
    let table = label_table(cfg)?;
    let report = evaluate_few_shot(
        &train,
        &test,
        source,
        &table,
        cfg.data.num_predicates(),
        &cfg.k_shots,
        &eval_seeds(cfg),
        &cfg.evaluation,
    )?;
    let report = with_echo(report, cfg, &checkpoint_hashes(checkpoints)?);
    print!("{}", report.summary());
    let mut art = Artifacts::create(&cfg.out)?;
    art.write_json(REPORT, &report)?;
    art.finish("eval", cfg)
}

pub fn cmd_ablate<T: Scalar>(cfg: &ExperimentConfig, sweeps: &[Sweep]) -> CliResult<PathBuf> {
    let scenes = load_dataset(cfg)?;
    let (train, test) = split_scenes(&scenes, cfg.test_fraction);
    let table = label_table(cfg)?;
    let num_predicates = cfg.data.num_predicates();
    let seeds = eval_seeds(cfg);
    let mut art = Artifacts::create(&cfg.out)?;
    let evaluate = |models: Models<'_, T>, ecfg: &FewShotEvalConfig| -> CliResult<FewShotReport> {
        let r = evaluate_few_shot(&train, &test, models, &table, num_predicates, &cfg.k_shots, &seeds, ecfg)?;
        Ok(with_echo(r, cfg, &[]))
    };
    let needs_model = sweeps.iter().any(|s| *s != Sweep::MaskRatio)
        && cfg.evaluation.few_shot.representation == Representation::Encoded;
    let recon = if needs_model { Some(run_pretraining::<T>(&train, cfg, LossKind::Reconstruction)?.model) } else { None };
    let shared = || recon.as_ref().map_or(Models::None, Models::Shared);

    for &sweep in sweeps {
        let value = match sweep {
            Sweep::MaskRatio => {
                let report = mask_ratio_sweep::<T>(
                    &scenes,
                    cfg.data.num_categories(),
                    &cfg.ablation.mask_ratios,
                    &cfg.encoder,
                    &cfg.pretrain,
                    &cfg.ablation.probe,
                )?;
                eprint!("{}", sweep_chart(&report.rows));
                json!({ "config": cfg, "sweep": "mask_ratio", "values": cfg.ablation.mask_ratios, "report": report })
            }
            Sweep::LossKind => {
                let rec = evaluate(shared(), &cfg.evaluation)?;
                let cls_model = if needs_model {
                    Some(run_pretraining::<T>(&train, cfg, LossKind::Classification)?.model)
                } else {
                    None
                };
                let cls = evaluate(cls_model.as_ref().map_or(Models::None, Models::Shared), &cfg.evaluation)?;
                json!({
                    "config": cfg,
                    "sweep": "loss_kind",
                    "values": ["reconstruction", "classification"],
                    "reports": [rec, cls],
                })
            }
            Sweep::Features => {
                let full = cfg.evaluation.few_shot.ablation;
                let ls = FeatureAblationConfig::LINGUISTIC_SPATIAL;
                let visual_dim = match cfg.evaluation.few_shot.representation {
                    Representation::Encoded => cfg.encoder.model_dim,
                    Representation::Raw => FEATURE_DIM,
                };
                let mut ls_cfg = cfg.evaluation.clone();
                ls_cfg.few_shot.ablation = ls;
                let ls_report = evaluate(Models::None, &ls_cfg)?;
                let full_report = evaluate(shared(), &cfg.evaluation)?;
                json!({
                    "config": cfg,
                    "sweep": "features",
                    "values": [ls.label(), full.label()],
                    "feature_dims": [ls.feature_dim(visual_dim, table.dim()), full.feature_dim(visual_dim, table.dim())],
                    "reports": [ls_report, full_report],
                })
            }
        };
        art.write_json(sweep.file_name(), &value)?;
    }
    art.finish("ablate", cfg)
}

#[derive(Serialize)]
struct SceneAttention {
    scene_id: String,
    num_entities: usize,
    /// layer → head → `n×n` row-major weights.
    layers: Vec<Vec<Vec<f64>>>,
}

pub fn cmd_export_attention<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, scenes: &Path) -> CliResult<PathBuf> {
    let model = load_model::<T>(checkpoint)?;
    let scenes = load_scenes(scenes, label_space(cfg))?;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let mut embeddings = Vec::new();
        for s in chunk.iter().filter(|s| !s.entities.is_empty()) {
            let prepared = PreparedScene::<T>::from_scene(s)?;
            embeddings.push(build_entity_embeddings(&prepared, &MaskPlan::none(s.entities.len()), &model)?);
        }
        let maps = if embeddings.is_empty() {
            None
        } else {
            let batch = PaddedBatch::from_scenes(&embeddings, None)?;
            Some(attention_scores(&batch, &model.encoder, &model.encoder_config)?)
        };
        let mut slot = 0;
        for s in chunk {
            let n = s.entities.len();
            let mut layers = Vec::new();
            if let (Some(maps), true) = (&maps, n > 0) {
                for layer in 0..maps.layers.len() {
                    let heads = (0..maps.heads)
                        .map(|h| {
                            let full = maps.scores(layer, h, slot);
                            (0..n)
                                .flat_map(|i| full[i * maps.seq..i * maps.seq + n].iter().map(|v| v.to_f64_lossy()))
                                .collect()
                        })
                        .collect();
                    layers.push(heads);
                }
                slot += 1;
            }
            out.push(SceneAttention { scene_id: s.scene_id.clone(), num_entities: n, layers });
        }
    }
    let mut art = Artifacts::create(&cfg.out)?;
    let checkpoint_sha256 = sha256_hex(&std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?);
    art.write_json(ATTENTION, &json!({ "config": cfg, "checkpoint_sha256": checkpoint_sha256, "scenes": out }))?;
    art.finish("export-attention", cfg)
}
