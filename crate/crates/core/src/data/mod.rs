//! Scenes, JSONL ingestion, the synthetic benchmark, k-shot sampling and
//! label embeddings.

mod io;
mod kshot;
mod labels;
mod scene;
mod synth;

pub use io::{load_scenes, parse_scenes, scenes_to_jsonl, write_scenes};
pub use kshot::{curated_samples, sample_k_shot, TripletRef};
pub use labels::{build_label_embeddings, LabelEmbeddingTable, LabelSource, DEFAULT_LABEL_DIM};
pub use scene::{
    strip_labels, BoundingBox, Entity, LabelSpace, RelationshipTriplet, Scene, UnlabeledEntity,
    UnlabeledScene, FEATURE_DIM,
};
pub use synth::{
    geometric_predicate, synthesize_dataset, SyntheticConfig, SyntheticWorld, CONTEXT_DIM,
    GEOMETRIC_NAMES, NUM_GEOMETRIC,
};

/// Deterministic train/test split: the last `ceil(test_fraction·n)` scenes
/// are held out (at least one when `n ≥ 2` and the fraction is positive).
pub fn split_scenes<S: Clone>(scenes: &[S], test_fraction: f64) -> (Vec<S>, Vec<S>) {
    let n = scenes.len();
    let mut test = (test_fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize;
    if test_fraction > 0.0 && n >= 2 {
        test = test.clamp(1, n - 1);
    }
    let cut = n - test.min(n);
    (scenes[..cut].to_vec(), scenes[cut..].to_vec())
}
