use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

use super::scene::{RelationshipTriplet, Scene};

/// One annotated triplet selected for few-shot training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRef {
    pub scene_index: usize,
    pub scene_id: String,
    pub triplet: RelationshipTriplet,
}

/// Draws exactly `k` triplets per predicate, uniformly without replacement
/// within each predicate, ordered by predicate id.
pub fn sample_k_shot(scenes: &[Scene], k: usize, num_predicates: usize, seed: u64) -> Result<Vec<TripletRef>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut pools: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_predicates];
    for (si, s) in scenes.iter().enumerate() {
        for (ti, t) in s.relationships.iter().enumerate() {
            if t.predicate_id >= num_predicates {
                return Err(Error::Invalid(format!(
                    "scene {} has predicate {} outside [0, {num_predicates})",
                    s.scene_id, t.predicate_id
                )));
            }
            pools[t.predicate_id].push((si, ti));
        }
    }
    let shortages: Vec<(usize, usize)> = pools
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() < k)
        .map(|(i, p)| (i, p.len()))
        .collect();
    if !shortages.is_empty() {
        return Err(Error::Shortage { k, shortages });
    }
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(k * num_predicates);
    for pool in &pools {
        for idx in sample(&mut r, pool.len(), k).into_iter() {
            let (si, ti) = pool[idx];
            out.push(TripletRef {
                scene_index: si,
                scene_id: scenes[si].scene_id.clone(),
                triplet: scenes[si].relationships[ti],
            });
        }
    }
    Ok(out)
}

/// Resolves a hand-curated list of `(scene_id, relationship index)` pairs.
pub fn curated_samples(scenes: &[Scene], picks: &[(String, usize)]) -> Result<Vec<TripletRef>> {
    picks
        .iter()
        .map(|(id, ti)| {
            let si = scenes
                .iter()
                .position(|s| &s.scene_id == id)
                .ok_or_else(|| Error::Invalid(format!("unknown scene {id}")))?;
            let triplet = *scenes[si]
                .relationships
                .get(*ti)
                .ok_or_else(|| Error::Invalid(format!("scene {id} has no relationship {ti}")))?;
            Ok(TripletRef {
                scene_index: si,
                scene_id: id.clone(),
                triplet,
            })
        })
        .collect()
}
