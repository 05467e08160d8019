use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::fewshot::rank_predicates;

/// Predicate scores for one ordered entity pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPrediction {
    pub scene_id: String,
    #[serde(rename = "subject")]
    pub subject_index: usize,
    #[serde(rename = "object")]
    pub object_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Per-scene recall averaged over scenes.
    Macro,
    /// Recalled triplets over all ground-truth triplets.
    Micro,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// One predicate per pair (`k = 1`).
    Graph,
    /// Every predicate per pair (`k = K`).
    NoGraph,
}

impl ConstraintMode {
    pub fn k(self, num_predicates: usize) -> usize {
        match self {
            ConstraintMode::Graph => 1,
            ConstraintMode::NoGraph => num_predicates,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub k: usize,
    pub n: usize,
    pub averaging: Averaging,
}

impl RecallConfig {
    pub fn new(k: usize, n: usize) -> Self {
        RecallConfig { k, n, averaging: Averaging::Macro }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::Config(format!("recall needs k >= 1 and N >= 1, got k={} N={}", self.k, self.n)));
        }
        Ok(())
    }
}

/// `(subject, object, predicate)` triplets surviving the per-pair top-`k`
/// and global top-`n` cuts, best first.
pub fn kept_triplets(predictions: &[PairPrediction], k: usize, n: usize) -> Vec<(usize, usize, usize)> {
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for &pred in rank_predicates(&p.scores).iter().take(k) {
            pool.push((p.scores[pred], i, pred));
        }
    }
    pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pool.truncate(n);
    pool.into_iter()
        .map(|(_, i, pred)| (predictions[i].subject_index, predictions[i].object_index, pred))
        .collect()
}

/// Recalled and total ground-truth triplets of one scene.
pub fn scene_hits(predictions: &[PairPrediction], scene: &Scene, k: usize, n: usize) -> Result<(usize, usize)> {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, p) in predictions.iter().enumerate() {
        if p.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "scene {}: non-finite score for pair ({}, {})",
                scene.scene_id, p.subject_index, p.object_index
            )));
        }
        index.entry((p.subject_index, p.object_index)).or_insert(i);
    }
    for t in &scene.relationships {
        if !index.contains_key(&(t.subject, t.object)) {
            return Err(Error::Invalid(format!(
                "scene {}: no prediction for ground-truth pair ({}, {})",
                scene.scene_id, t.subject, t.object
            )));
        }
    }
    let kept = kept_triplets(predictions, k, n);
    let hits = scene
        .relationships
        .iter()
        .filter(|t| kept.contains(&(t.subject, t.object, t.predicate_id)))
        .count();
    Ok((hits, scene.relationships.len()))
}

/// `R_k@N` over scenes; scenes without ground truth are skipped.
pub fn recall_at(predictions: &[Vec<PairPrediction>], ground_truth: &[Scene], cfg: &RecallConfig) -> Result<f64> {
    cfg.validate()?;
    if predictions.len() != ground_truth.len() {
        return Err(Error::Invalid(format!(
            "{} prediction groups for {} scenes",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut per_scene = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, s) in predictions.iter().zip(ground_truth) {
        if s.relationships.is_empty() {
            continue;
        }
        let (h, t) = scene_hits(p, s, cfg.k, cfg.n)?;
        per_scene.push(h as f64 / t as f64);
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::Invalid("no ground-truth triplets to recall".into()));
    }
    Ok(match cfg.averaging {
        Averaging::Macro => per_scene.iter().sum::<f64>() / per_scene.len() as f64,
        Averaging::Micro => hits as f64 / total as f64,
    })
}
