//! Seeded synthetic scene benchmark.
//!
//! Each scene draws a latent context `c ∈ R^32`. Entity features are
//! `prototype[category] + α·M·c + σ_n·ε`, so unmasked entities carry
//! information about masked ones only through `c`. Categories are drawn from
//! `softmax(α·U·c)`, which makes scene composition depend on the same
//! context (uniform when α = 0). Boxes are independent of category.
//!
//! Relationships are a deterministic function of boxes, categories and the
//! scene type. A geometric predicate is chosen by priority (contains,
//! overlaps, above, below, left of, right of). Each scene is active or not
//! with probability one half, and its context is `c = ±κ·u + ε` for a fixed
//! random unit axis `u`. In active scenes, subjects from the active groups
//! (`category % num_groups < active_groups`) take the semantic variant of
//! that predicate instead, so the same pair in the same layout relates
//! differently depending on the scene. Prototypes share a per-group
//! component, so visual features carry group identity.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};

use super::scene::{BoundingBox, Entity, RelationshipTriplet, Scene, FEATURE_DIM};

pub const CONTEXT_DIM: usize = 32;

/// Number of geometric predicates; ids `0..6`, semantic ones follow.
pub const NUM_GEOMETRIC: usize = 6;
pub const GEOMETRIC_NAMES: [&str; NUM_GEOMETRIC] =
    ["contains", "overlaps", "above", "below", "left_of", "right_of"];

pub const OVERLAP_IOU: f64 = 0.25;
/// Minimum center offset, as a fraction of the image side, for the
/// directional predicates.
pub const OFFSET_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_scenes: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    pub num_categories: usize,
    pub num_predicates: usize,
    pub num_groups: usize,
    /// Groups whose subjects take semantic predicates in active scenes.
    pub active_groups: usize,
    /// σ_p
    pub prototype_scale: f64,
    /// α
    pub context_strength: f64,
    /// κ, distance of the active and inactive context means from the origin.
    pub scene_separation: f64,
    /// σ_n
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_scenes: 500,
            min_entities: 4,
            max_entities: 8,
            num_categories: 20,
            num_predicates: 12,
            num_groups: 4,
            active_groups: 2,
            prototype_scale: 1.0,
            context_strength: 2.0,
            scene_separation: 2.0,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.min_entities == 0 || self.min_entities > self.max_entities {
            return fail("entity range must satisfy 1 <= min <= max");
        }
        if self.num_categories == 0 || self.num_groups == 0 {
            return fail("num_categories and num_groups must be positive");
        }
        if self.num_predicates < NUM_GEOMETRIC {
            return fail("num_predicates must be at least 6 (the geometric predicates)");
        }
        if self.num_predicates > 2 * NUM_GEOMETRIC {
            return fail("num_predicates must be at most 12 (one semantic variant per geometric predicate)");
        }
        if self.active_groups > self.num_groups {
            return fail("active_groups must not exceed num_groups");
        }
        for (name, v) in [
            ("prototype_scale", self.prototype_scale),
            ("context_strength", self.context_strength),
            ("scene_separation", self.scene_separation),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("synthetic: {name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn predicate_names(&self) -> Vec<String> {
        (0..self.num_predicates)
            .map(|p| match GEOMETRIC_NAMES.get(p) {
                Some(n) => n.to_string(),
                None => format!("semantic_{}", p - NUM_GEOMETRIC),
            })
            .collect()
    }
}

/// Fixed quantities shared by every scene of one seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub prototypes: Vec<Vec<f64>>,
    /// FEATURE_DIM × CONTEXT_DIM, row-major.
    pub context_map: Vec<f64>,
    /// num_categories × CONTEXT_DIM, row-major.
    pub category_affinity: Vec<f64>,
    pub num_groups: usize,
    pub active_groups: usize,
    pub num_predicates: usize,
    /// Unit vector separating active from inactive contexts.
    pub scene_axis: Vec<f64>,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(derive_seed(cfg.seed, "synth-world"));
        let g = cfg.num_groups;
        let group_centers: Vec<Vec<f64>> =
            (0..g).map(|_| (0..FEATURE_DIM).map(|_| normal(&mut r)).collect()).collect();
        let scale = cfg.prototype_scale / 2f64.sqrt();
        let prototypes = (0..cfg.num_categories)
            .map(|c| {
                let center = &group_centers[c % g];
                center.iter().map(|&m| scale * (m + normal(&mut r))).collect()
            })
            .collect();
        let inv = 1.0 / (CONTEXT_DIM as f64).sqrt();
        let context_map = (0..FEATURE_DIM * CONTEXT_DIM).map(|_| normal(&mut r) * inv).collect();
        let category_affinity = (0..cfg.num_categories * CONTEXT_DIM)
            .map(|_| normal(&mut r) * inv)
            .collect();

        let axis: Vec<f64> = (0..CONTEXT_DIM).map(|_| normal(&mut r)).collect();
        let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scene_axis = axis.into_iter().map(|a| a / norm).collect();
        Ok(SyntheticWorld {
            prototypes,
            context_map,
            category_affinity,
            num_groups: g,
            active_groups: cfg.active_groups,
            num_predicates: cfg.num_predicates,
            scene_axis,
        })
    }

    pub fn group(&self, category: usize) -> usize {
        category % self.num_groups
    }

    /// The predicate (if any) the generator assigns to an ordered pair.
    pub fn relation(
        &self,
        active_scene: bool,
        subject: (usize, &BoundingBox),
        object: (usize, &BoundingBox),
        width: f64,
        height: f64,
    ) -> Option<usize> {
        let geo = geometric_predicate(subject.1, object.1, width, height)?;
        let variant = NUM_GEOMETRIC + geo;
        if active_scene && self.group(subject.0) < self.active_groups && variant < self.num_predicates {
            Some(variant)
        } else {
            Some(geo)
        }
    }
}

/// Geometric predicate for an ordered pair, by fixed priority.
pub fn geometric_predicate(s: &BoundingBox, o: &BoundingBox, width: f64, height: f64) -> Option<usize> {
    if s.contains(o) {
        return Some(0);
    }
    if s.iou(o) > OVERLAP_IOU {
        return Some(1);
    }
    let (sx, sy) = s.center();
    let (ox, oy) = o.center();
    let dx = (ox - sx) / width;
    let dy = (oy - sy) / height;
    if dy.abs() > OFFSET_THRESHOLD && dy.abs() >= dx.abs() {
        // image y grows downwards: the subject is above when its center is higher
        return Some(if dy > 0.0 { 2 } else { 3 });
    }
    if dx.abs() > OFFSET_THRESHOLD && dx.abs() > dy.abs() {
        return Some(if dx > 0.0 { 4 } else { 5 });
    }
    None
}

/// Generates the benchmark; a pure function of `cfg`.
pub fn synthesize_dataset(cfg: &SyntheticConfig) -> Result<Vec<Scene>> {
    Ok(generate(cfg)?.into_iter().map(|(s, _)| s).collect())
}

/// Scenes together with their latent scene activity.
fn generate(cfg: &SyntheticConfig) -> Result<Vec<(Scene, bool)>> {
    let world = SyntheticWorld::new(cfg)?;
    let mut r = rng(derive_seed(cfg.seed, "synth-scenes"));
    let alpha = cfg.context_strength;
    let mut scenes = Vec::with_capacity(cfg.num_scenes);
    for index in 0..cfg.num_scenes {
        let width = r.gen_range(400..=800) as f64;
        let height = r.gen_range(300..=600) as f64;
        let n = r.gen_range(cfg.min_entities..=cfg.max_entities);
        let active = r.gen::<bool>();
        let sign = if active { 1.0 } else { -1.0 };
        let context: Vec<f64> = world
            .scene_axis
            .iter()
            .map(|u| sign * cfg.scene_separation * u + normal(&mut r))
            .collect();
        let shift: Vec<f64> = (0..FEATURE_DIM)
            .map(|d| {
                let row = &world.context_map[d * CONTEXT_DIM..(d + 1) * CONTEXT_DIM];
                alpha * row.iter().zip(&context).map(|(m, c)| m * c).sum::<f64>()
            })
            .collect();
        let weights: Vec<f64> = (0..cfg.num_categories)
            .map(|k| {
                let row = &world.category_affinity[k * CONTEXT_DIM..(k + 1) * CONTEXT_DIM];
                alpha * row.iter().zip(&context).map(|(u, c)| u * c).sum::<f64>()
            })
            .collect();
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = weights.iter().sum();

        let mut entities = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = r.gen::<f64>() * total;
            let mut category = cfg.num_categories - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    category = k;
                    break;
                }
                u -= w;
            }
            let w = (r.gen_range(0.1..0.5) * width).round().max(1.0);
            let h = (r.gen_range(0.1..0.5) * height).round().max(1.0);
            let x = (r.gen::<f64>() * (width - w)).round();
            let y = (r.gen::<f64>() * (height - h)).round();
            let bbox = BoundingBox::new(x, y, x + w, y + h);
            let proto = &world.prototypes[category];
            let feature = (0..FEATURE_DIM)
                .map(|d| proto[d] + shift[d] + cfg.feature_noise * normal(&mut r))
                .collect();
            entities.push(Entity { category_id: category, bbox, feature });
        }

        let mut relationships = Vec::new();
        for s in 0..n {
            for o in 0..n {
                if s == o {
                    continue;
                }
                let rel = world.relation(
                    active,
                    (entities[s].category_id, &entities[s].bbox),
                    (entities[o].category_id, &entities[o].bbox),
                    width,
                    height,
                );
                if let Some(p) = rel {
                    relationships.push(RelationshipTriplet { subject: s, object: o, predicate_id: p });
                }
            }
        }
        scenes.push((
            Scene {
                scene_id: format!("synth-{index:05}"),
                width,
                height,
                entities,
                relationships,
            },
            active,
        ));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::LabelSpace;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_scenes: 40,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn noise_free_features_equal_prototypes() {
        let cfg = SyntheticConfig {
            context_strength: 0.0,
            feature_noise: 0.0,
            ..small()
        };
        let world = SyntheticWorld::new(&cfg).unwrap();
        for scene in synthesize_dataset(&cfg).unwrap() {
            for e in &scene.entities {
                assert_eq!(e.feature, world.prototypes[e.category_id]);
            }
        }
    }

    #[test]
    fn same_vertical_extent_is_neither_above_nor_below() {
        let a = BoundingBox::new(0.0, 100.0, 50.0, 200.0);
        let b = BoundingBox::new(300.0, 100.0, 350.0, 200.0);
        let p = geometric_predicate(&a, &b, 400.0, 400.0);
        assert_eq!(p, Some(4));
        assert_eq!(geometric_predicate(&b, &a, 400.0, 400.0), Some(5));
        let c = BoundingBox::new(60.0, 100.0, 110.0, 200.0);
        assert_eq!(geometric_predicate(&a, &c, 4000.0, 400.0), None);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synthesize_dataset(&small()).unwrap();
        let b = synthesize_dataset(&small()).unwrap();
        assert_eq!(
            crate::data::scenes_to_jsonl(&a).unwrap(),
            crate::data::scenes_to_jsonl(&b).unwrap()
        );
        let c = synthesize_dataset(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenes_are_valid_and_self_consistent() {
        let cfg = small();
        let world = SyntheticWorld::new(&cfg).unwrap();
        let space = LabelSpace {
            num_categories: Some(cfg.num_categories),
            num_predicates: Some(cfg.num_predicates),
        };
        let mut seen = [false; 2];
        for (s, t) in generate(&cfg).unwrap() {
            seen[t as usize] = true;
            s.validate(space).unwrap();
            assert!((cfg.min_entities..=cfg.max_entities).contains(&s.entities.len()));
            for r in &s.relationships {
                let (a, b) = (&s.entities[r.subject], &s.entities[r.object]);
                let again = world.relation(t, (a.category_id, &a.bbox), (b.category_id, &b.bbox), s.width, s.height);
                assert_eq!(again, Some(r.predicate_id));
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    #[test]
    fn semantic_variants_need_active_scene_and_group() {
        let cfg = small();
        let world = SyntheticWorld::new(&cfg).unwrap();
        let s = BoundingBox::new(0.0, 0.0, 50.0, 50.0);
        let o = BoundingBox::new(300.0, 0.0, 350.0, 50.0);
        assert_eq!(world.relation(false, (0, &s), (1, &o), 400.0, 400.0), Some(4));
        assert_eq!(world.relation(true, (0, &s), (1, &o), 400.0, 400.0), Some(10));
        assert_eq!(world.relation(true, (2, &s), (0, &o), 400.0, 400.0), Some(4));
        let geometric_only = SyntheticWorld::new(&SyntheticConfig { num_predicates: 6, ..small() }).unwrap();
        assert_eq!(geometric_only.relation(true, (0, &s), (1, &o), 400.0, 400.0), Some(4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SyntheticConfig { num_predicates: 5, ..small() }.validate().is_err());
        assert!(SyntheticConfig { num_predicates: 13, ..small() }.validate().is_err());
        assert!(SyntheticConfig { active_groups: 5, ..small() }.validate().is_err());
        assert!(SyntheticConfig { min_entities: 0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { feature_noise: -1.0, ..small() }.validate().is_err());
    }
}
