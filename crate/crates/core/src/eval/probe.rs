use serde::{Deserialize, Serialize};

use crate::data::{split_scenes, Scene, FEATURE_DIM};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::{fit_classifier, rank_predicates, raw_features, softmax_scores, FitConfig};
use crate::mbbr::{draw_mask, pretrain, reconstruct_all, MaskPlan, MbbrModel, PreparedScene, PretrainConfig};
use crate::rng::{derive_seed, rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Fraction of scenes held out for probe accuracy.
    pub test_fraction: f64,
    pub fit: FitConfig,
    pub batch_size: usize,
    /// Standardize probe inputs with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { test_fraction: 0.2, fit: FitConfig::default(), batch_size: 32, standardize: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub ratio: f64,
    /// Top-1 accuracy of the probe on reconstructed masked entities.
    pub accuracy: f64,
    /// Same probe protocol on the original features of the same entities.
    pub baseline_accuracy: f64,
    pub train_masked: usize,
    pub test_masked: usize,
}

struct Masked<T> {
    recon: Vec<T>,
    raw: Vec<T>,
    labels: Vec<usize>,
}

fn collect_masked<T: Scalar>(
    scenes: &[Scene],
    model: &MbbrModel<T>,
    plans: &[MaskPlan],
    batch_size: usize,
) -> Result<Masked<T>> {
    let prepared: Vec<PreparedScene<T>> = scenes.iter().map(PreparedScene::from_scene).collect::<Result<_>>()?;
    let recon = reconstruct_all(&prepared, plans, model, batch_size)?;
    let mut out = Masked { recon: Vec::new(), raw: Vec::new(), labels: Vec::new() };
    for ((scene, plan), y) in scenes.iter().zip(plans).zip(&recon) {
        let raw = raw_features::<T>(scene)?;
        for (i, &m) in plan.0.iter().enumerate() {
            if m {
                out.recon.extend_from_slice(y.row(i));
                out.raw.extend_from_slice(raw.row(i));
                out.labels.push(scene.entities[i].category_id);
            }
        }
    }
    Ok(out)
}

fn accuracy<T: Scalar>(
    train: &[T],
    train_labels: &[usize],
    test: &[T],
    test_labels: &[usize],
    num_categories: usize,
    standardize: bool,
    fit: &FitConfig,
) -> Result<f64> {
    let x = Tensor::new(vec![train_labels.len(), FEATURE_DIM], train.to_vec())?;
    let w = fit_classifier(&x, train_labels, num_categories, None, standardize, fit)?;
    let logits = w.logits(&Tensor::new(vec![test_labels.len(), FEATURE_DIM], test.to_vec())?)?;
    let correct = test_labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| rank_predicates(&softmax_scores(logits.row(i)))[0] == l)
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Linear probe for category identity on reconstructions of masked
/// entities, next to the same probe on their original features.
pub fn masked_top1_probe<T: Scalar>(
    scenes: &[Scene],
    model: &MbbrModel<T>,
    num_categories: usize,
    ratio: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("probe ratio {ratio} is outside [0, 1]")));
    }
    let (train, test) = split_scenes(scenes, cfg.test_fraction);
    let mut r = rng(derive_seed(seed, "probe-mask"));
    let mut plans = |set: &[Scene]| -> Vec<MaskPlan> {
        set.iter().map(|s| draw_mask(s.entities.len(), ratio, &mut r)).collect()
    };
    let (train_plans, test_plans) = (plans(&train), plans(&test));
    let a = collect_masked(&train, model, &train_plans, cfg.batch_size)?;
    let b = collect_masked(&test, model, &test_plans, cfg.batch_size)?;
    if a.labels.is_empty() || b.labels.is_empty() {
        return Err(Error::Invalid(format!(
            "mask ratio {ratio} left no masked entities in the {} split",
            if a.labels.is_empty() { "train" } else { "test" }
        )));
    }
    if let Some(&bad) = a.labels.iter().chain(&b.labels).find(|&&c| c >= num_categories) {
        return Err(Error::MissingCategory(bad));
    }
    let fit = FitConfig { seed: derive_seed(seed, "probe"), ..cfg.fit.clone() };
    Ok(ProbeResult {
        ratio,
        accuracy: accuracy(&a.recon, &a.labels, &b.recon, &b.labels, num_categories, cfg.standardize, &fit)?,
        baseline_accuracy: accuracy(&a.raw, &a.labels, &b.raw, &b.labels, num_categories, cfg.standardize, &fit)?,
        train_masked: a.labels.len(),
        test_masked: b.labels.len(),
    })
}

pub const DEFAULT_SWEEP_RATIOS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];

/// Reference curve (ratio in percent, top-1 accuracy in percent).
pub const REFERENCE_SWEEP: [(f64, f64); 5] = [(10.0, 21.13), (25.0, 24.56), (50.0, 34.97), (75.0, 30.18), (90.0, 19.21)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub rows: Vec<ProbeResult>,
    pub paper_reference: serde_json::Value,
}

pub fn sweep_reference() -> serde_json::Value {
    serde_json::json!({
        "label": "paper-reported",
        "dataset": "VG200",
        "metric": "top-1 accuracy of reconstructed masked entities (percent)",
        "points": REFERENCE_SWEEP.iter().map(|&(r, a)| serde_json::json!({"mask_ratio_percent": r, "accuracy_percent": a})).collect::<Vec<_>>(),
        "raw_feature_baseline_percent": 74.9,
        "masked_reconstruction_percent": 34.9,
    })
}

/// Pretrains one model per ratio and probes it at that same ratio.
pub fn mask_ratio_sweep<T: Scalar>(
    scenes: &[Scene],
    num_categories: usize,
    ratios: &[f64],
    encoder: &EncoderConfig,
    pretrain_cfg: &PretrainConfig,
    probe: &ProbeConfig,
) -> Result<SweepReport> {
    if let Some(&bad) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Config(format!("sweep ratio {bad} is outside (0, 1)")));
    }
    let (train, _) = split_scenes(scenes, probe.test_fraction);
    let unlabeled: Vec<_> = train.iter().map(Scene::without_labels).collect();
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let cfg = PretrainConfig { mask_ratio: ratio, ..pretrain_cfg.clone() };
        let model = pretrain::<T>(&unlabeled, encoder, &cfg)?.model;
        rows.push(masked_top1_probe(scenes, &model, num_categories, ratio, pretrain_cfg.seed, probe)?);
    }
    Ok(SweepReport { seed: pretrain_cfg.seed, rows, paper_reference: sweep_reference() })
}

/// Horizontal bar chart of probe accuracy per ratio.
pub fn sweep_chart(rows: &[ProbeResult]) -> String {
    let mut out = String::from("mask ratio | top-1 accuracy\n");
    for r in rows {
        let bar = "#".repeat((r.accuracy * 50.0).round() as usize);
        out.push_str(&format!("{:>9.2}  | {:<50} {:.4}\n", r.ratio, bar, r.accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SyntheticConfig};
    use crate::mbbr::MaskFill;

    fn small() -> (Vec<Scene>, MbbrModel<f64>) {
        let scenes = synthesize_dataset(&SyntheticConfig { num_scenes: 12, num_categories: 3, ..SyntheticConfig::default() }).unwrap();
        let enc = EncoderConfig { num_layers: 1, num_heads: 2, model_dim: 8, ffn_dim: 8, ..EncoderConfig::default() };
        (scenes, MbbrModel::init(&enc, MaskFill::Learned, None, 1).unwrap())
    }

    #[test]
    fn zero_ratio_is_an_error() {
        let (scenes, model) = small();
        let r = masked_top1_probe(&scenes, &model, 3, 0.0, 1, &ProbeConfig::default());
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn single_category_is_always_right() {
        let (mut scenes, model) = small();
        for s in &mut scenes {
            for e in &mut s.entities {
                e.category_id = 0;
            }
        }
        let fit = FitConfig { epochs: 1, ..FitConfig::default() };
        let r = masked_top1_probe(&scenes, &model, 1, 0.5, 1, &ProbeConfig { fit, ..ProbeConfig::default() }).unwrap();
        assert_eq!((r.accuracy, r.baseline_accuracy), (1.0, 1.0));
    }

    #[test]
    fn chart_has_one_line_per_row() {
        let rows: Vec<ProbeResult> = [0.1, 0.5]
            .iter()
            .map(|&ratio| ProbeResult { ratio, accuracy: ratio, baseline_accuracy: 0.9, train_masked: 1, test_masked: 1 })
            .collect();
        assert_eq!(sweep_chart(&rows).lines().count(), 3);
    }
}
