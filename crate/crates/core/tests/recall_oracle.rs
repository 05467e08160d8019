//! `recall_at` against a brute-force oracle that decides membership of each
//! candidate by counting the candidates ranked ahead of it.

use mbbr_core::data::{BoundingBox, Entity, RelationshipTriplet, Scene};
use mbbr_core::eval::{kept_triplets, recall_at, Averaging, PairPrediction, RecallConfig};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Instance {
    num_predicates: usize,
    predictions: Vec<Vec<PairPrediction>>,
    scenes: Vec<Scene>,
}

fn scene_strategy(num_predicates: usize) -> impl Strategy<Value = (Vec<PairPrediction>, Scene)> {
    let all_pairs: Vec<(usize, usize)> = (0..4).flat_map(|s| (0..4).filter(move |&o| o != s).map(move |o| (s, o))).collect();
    (
        prop::sample::subsequence(all_pairs, 1..=5).prop_shuffle(),
        // Quarter steps make ties common.
        prop::collection::vec(prop::collection::vec(0u8..5, num_predicates), 5),
        prop::collection::vec((0usize..5, 0..num_predicates), 1..=4),
    )
        .prop_map(move |(pairs, scores, gt)| {
            let predictions = pairs
                .iter()
                .zip(&scores)
                .map(|(&(s, o), sc)| PairPrediction {
                    scene_id: "s".into(),
                    subject_index: s,
                    object_index: o,
                    scores: sc.iter().map(|&q| f64::from(q) / 4.0).collect(),
                })
                .collect();
            let mut relationships: Vec<RelationshipTriplet> = Vec::new();
            for (p, predicate_id) in gt {
                let (subject, object) = pairs[p % pairs.len()];
                let t = RelationshipTriplet { subject, object, predicate_id };
                if !relationships.contains(&t) {
                    relationships.push(t);
                }
            }
            let entities = (0..4)
                .map(|i| Entity {
                    category_id: 0,
                    bbox: BoundingBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0),
                    feature: Vec::new(),
                })
                .collect();
            let scene = Scene { scene_id: "s".into(), width: 10.0, height: 10.0, entities, relationships };
            (predictions, scene)
        })
}

fn instance_strategy() -> impl Strategy<Value = Instance> {
    (1usize..=6)
        .prop_flat_map(|k| (Just(k), prop::collection::vec(scene_strategy(k), 1..=3)))
        .prop_map(|(num_predicates, scenes)| {
            let (predictions, scenes) = scenes.into_iter().unzip();
            Instance { num_predicates, predictions, scenes }
        })
}

/// Candidate `(pair index, predicate)` of one scene, in the total order used
/// for the global cut: score descending, then pair order, then predicate id.
fn ahead(p: &[PairPrediction], a: (usize, usize), b: (usize, usize)) -> bool {
    let (sa, sb) = (p[a.0].scores[a.1], p[b.0].scores[b.1]);
    sa > sb || (sa == sb && (a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)))
}

fn oracle_kept(p: &[PairPrediction], k: usize, n: usize) -> Vec<(usize, usize, usize)> {
    let in_top_k = |i: usize, pred: usize| {
        let s = &p[i].scores;
        let better = (0..s.len()).filter(|&q| s[q] > s[pred] || (s[q] == s[pred] && q < pred)).count();
        better < k
    };
    let candidates: Vec<(usize, usize)> = (0..p.len())
        .flat_map(|i| (0..p[i].scores.len()).map(move |pred| (i, pred)))
        .filter(|&(i, pred)| in_top_k(i, pred))
        .collect();
    let mut kept: Vec<(usize, usize, usize)> = candidates
        .iter()
        .filter(|&&c| candidates.iter().filter(|&&d| ahead(p, d, c)).count() < n)
        .map(|&(i, pred)| (p[i].subject_index, p[i].object_index, pred))
        .collect();
    kept.sort_unstable();
    kept
}

fn oracle_recall(inst: &Instance, k: usize, n: usize, averaging: Averaging) -> f64 {
    let mut per_scene = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, s) in inst.predictions.iter().zip(&inst.scenes) {
        let kept = oracle_kept(p, k, n);
        let h = s
            .relationships
            .iter()
            .filter(|t| kept.binary_search(&(t.subject, t.object, t.predicate_id)).is_ok())
            .count();
        per_scene.push(h as f64 / s.relationships.len() as f64);
        hits += h;
        total += s.relationships.len();
    }
    match averaging {
        Averaging::Macro => per_scene.iter().sum::<f64>() / per_scene.len() as f64,
        Averaging::Micro => hits as f64 / total as f64,
    }
}

fn recall(inst: &Instance, k: usize, n: usize, averaging: Averaging) -> f64 {
    recall_at(&inst.predictions, &inst.scenes, &RecallConfig { k, n, averaging }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force_oracle(inst in instance_strategy()) {
        for k in 1..=inst.num_predicates {
            for n in 1..=5 * inst.num_predicates + 1 {
                for p in &inst.predictions {
                    let mut kept = kept_triplets(p, k, n);
                    kept.sort_unstable();
                    prop_assert_eq!(kept, oracle_kept(p, k, n));
                }
                for averaging in [Averaging::Macro, Averaging::Micro] {
                    prop_assert_eq!(recall(&inst, k, n, averaging), oracle_recall(&inst, k, n, averaging));
                }
            }
        }
    }

    #[test]
    fn monotone_in_n(inst in instance_strategy()) {
        for k in 1..=inst.num_predicates {
            for n in 1..=5 * inst.num_predicates {
                prop_assert!(recall(&inst, k, n + 1, Averaging::Macro) >= recall(&inst, k, n, Averaging::Macro));
            }
        }
    }

    /// Once the global cut keeps the whole pool, a larger `k` only adds candidates.
    #[test]
    fn monotone_in_k_without_global_cut(inst in instance_strategy()) {
        let n = 5 * inst.num_predicates;
        for k in 1..inst.num_predicates {
            prop_assert!(recall(&inst, k + 1, n, Averaging::Macro) >= recall(&inst, k, n, Averaging::Macro));
        }
    }

    #[test]
    fn everything_kept_recalls_every_annotated_pair(inst in instance_strategy()) {
        let k = inst.num_predicates;
        prop_assert_eq!(recall(&inst, k, 5 * k, Averaging::Micro), 1.0);
    }
}

/// With a fixed `N`, extra candidates from one pair can push another pair's
/// hit out of the global cut.
#[test]
fn larger_k_can_lower_recall_under_a_global_cut() {
    let pair = |s, o, scores: &[f64]| PairPrediction {
        scene_id: "s".into(),
        subject_index: s,
        object_index: o,
        scores: scores.to_vec(),
    };
    let inst = Instance {
        num_predicates: 2,
        predictions: vec![vec![pair(0, 1, &[0.9, 0.8]), pair(1, 0, &[0.7, 0.1])]],
        scenes: vec![Scene {
            scene_id: "s".into(),
            width: 10.0,
            height: 10.0,
            entities: (0..2)
                .map(|i| Entity { category_id: 0, bbox: BoundingBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0), feature: Vec::new() })
                .collect(),
            relationships: vec![RelationshipTriplet { subject: 1, object: 0, predicate_id: 0 }],
        }],
    };
    assert_eq!(recall(&inst, 1, 2, Averaging::Macro), 1.0);
    assert_eq!(recall(&inst, 2, 2, Averaging::Macro), 0.0);
    assert_eq!(oracle_recall(&inst, 2, 2, Averaging::Macro), 0.0);
}
