use serde::{Deserialize, Serialize};

use crate::data::{sample_k_shot, LabelEmbeddingTable, Scene};
use crate::error::{Error, Result};
use crate::eval::recall::{recall_at, Averaging, ConstraintMode, RecallConfig};
use crate::fewshot::{predict_scenes, train_few_shot, visual_inputs, FewShotConfig, FitConfig};
use crate::mbbr::MbbrModel;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotEvalConfig {
    pub few_shot: FewShotConfig,
    /// Global budget `N` of `R_k@N`.
    pub n: usize,
    pub averaging: Averaging,
    pub modes: Vec<ConstraintMode>,
}

impl Default for FewShotEvalConfig {
    fn default() -> Self {
        FewShotEvalConfig {
            few_shot: FewShotConfig::default(),
            n: 20,
            averaging: Averaging::Macro,
            modes: vec![ConstraintMode::Graph, ConstraintMode::NoGraph],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub k_shot: usize,
    pub constraint_mode: ConstraintMode,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotReport {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub cells: Vec<ReportCell>,
    pub paper_reference: serde_json::Value,
}

impl FewShotReport {
    pub fn cell(&self, k_shot: usize, mode: ConstraintMode) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.k_shot == k_shot && c.constraint_mode == mode)
    }

    /// Fixed-width text table of all cells.
    pub fn summary(&self) -> String {
        let mut out = format!("{:>6}  {:<9}  {:>8}  {:>8}\n", "k", "mode", "mean", "std");
        for c in &self.cells {
            let mode = match c.constraint_mode {
                ConstraintMode::Graph => "graph",
                ConstraintMode::NoGraph => "no-graph",
            };
            out.push_str(&format!("{:>6}  {:<9}  {:>8.4}  {:>8.4}\n", c.k_shot, mode, c.mean, c.std));
        }
        out
    }
}

/// Mean and sample standard deviation; a single value has deviation 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn few_shot_reference() -> serde_json::Value {
    serde_json::json!({
        "label": "paper-reported",
        "dataset": "VRD",
        "metric": "R@20 (percent)",
        "cells": [
            {"k_shot": 10, "constraint_mode": "graph", "variant": "reconstruction pretraining, L+S+V", "mean": 20.87, "std": 2.46},
            {"k_shot": 10, "constraint_mode": "graph", "variant": "classification pretraining, L+S+V", "mean": 16.7, "std": 1.51},
            {"k_shot": 10, "constraint_mode": "graph", "variant": "L+S", "mean": 13.68}
        ]
    })
}

/// Per seed model source: one shared model or one per seed.
#[derive(Clone, Copy, Debug)]
pub enum Models<'a, T> {
    None,
    Shared(&'a MbbrModel<T>),
    PerSeed(&'a [MbbrModel<T>]),
}

impl<'a, T> Models<'a, T> {
    fn get(&self, i: usize) -> Option<&'a MbbrModel<T>> {
        match *self {
            Models::None => None,
            Models::Shared(m) => Some(m),
            Models::PerSeed(ms) => ms.get(i),
        }
    }
}

/// Few-shot protocol: for every `k` and seed, sample `k` training triplets
/// per predicate from `train`, fit the classifier and score `test` with
/// `R_k@N` under each constraint mode.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_few_shot<T: Scalar>(
    train: &[Scene],
    test: &[Scene],
    models: Models<'_, T>,
    table: &LabelEmbeddingTable,
    num_predicates: usize,
    k_shots: &[usize],
    seeds: &[u64],
    cfg: &FewShotEvalConfig,
) -> Result<FewShotReport> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    if let Models::PerSeed(ms) = models {
        if ms.len() != seeds.len() {
            return Err(Error::Config(format!("{} models for {} seeds", ms.len(), seeds.len())));
        }
    }
    let mut results: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); cfg.modes.len()]; k_shots.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        let model = models.get(si);
        let frozen_reps = if cfg.few_shot.unfreeze_encoder {
            None
        } else {
            Some(visual_inputs(test, model, &cfg.few_shot, 32)?)
        };
        for (ki, &k) in k_shots.iter().enumerate() {
            let samples = sample_k_shot(train, k, num_predicates, derive_seed(seed, "sampling"))?;
            let fs = FewShotConfig {
                fit: FitConfig { seed: derive_seed(seed, "classifier"), ..cfg.few_shot.fit.clone() },
                ..cfg.few_shot.clone()
            };
            let outcome = train_few_shot(&samples, train, model, table, num_predicates, &fs)?;
            let reps = match &frozen_reps {
                Some(r) => r.clone(),
                None => visual_inputs(test, outcome.model_or(model), &fs, 32)?,
            };
            let preds = predict_scenes(test, &reps, table, &fs.ablation, &outcome.classifier)?;
            for (mi, &mode) in cfg.modes.iter().enumerate() {
                let rc = RecallConfig { k: mode.k(num_predicates), n: cfg.n, averaging: cfg.averaging };
                results[ki][mi].push(recall_at(&preds, test, &rc)?);
            }
        }
    }
    let mut cells = Vec::new();
    for (ki, &k) in k_shots.iter().enumerate() {
        for (mi, &mode) in cfg.modes.iter().enumerate() {
            let per_seed = results[ki][mi].clone();
            let (mean, std) = mean_std(&per_seed);
            cells.push(ReportCell { k_shot: k, constraint_mode: mode, mean, std, per_seed });
        }
    }
    Ok(FewShotReport {
        config: serde_json::to_value(cfg)?,
        seeds: seeds.to_vec(),
        cells,
        paper_reference: few_shot_reference(),
    })
}
