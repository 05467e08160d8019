//! Scene JSONL: lossless write/read and line-accurate rejection.

use mbbr_core::data::{
    load_scenes, parse_scenes, scenes_to_jsonl, write_scenes, BoundingBox, Entity, LabelSpace, RelationshipTriplet,
    Scene, FEATURE_DIM,
};
use mbbr_core::rng::{rng, Rng};
use mbbr_core::Error;
use proptest::prelude::*;
use rand::Rng as _;

/// Finite doubles spread over the whole exponent range, signs included.
fn any_finite(r: &mut Rng) -> f64 {
    loop {
        let v = f64::from_bits(r.gen::<u64>());
        if v.is_finite() {
            return v;
        }
    }
}

fn random_scene(r: &mut Rng, index: usize) -> Scene {
    let width = r.gen_range(1.0..5000.0);
    let height = r.gen_range(1.0..5000.0);
    let n = r.gen_range(0..9);
    let entities = (0..n)
        .map(|_| {
            let x_lt: f64 = r.gen_range(0.0..width * 0.9);
            let y_lt: f64 = r.gen_range(0.0..height * 0.9);
            let x_rb = r.gen_range(x_lt..width);
            let y_rb = r.gen_range(y_lt..height);
            Entity {
                category_id: r.gen_range(0..150),
                bbox: BoundingBox::new(x_lt, y_lt, x_rb, y_rb),
                feature: (0..FEATURE_DIM).map(|_| any_finite(r)).collect(),
            }
        })
        .filter(|e| e.bbox.check(width, height).is_ok())
        .collect::<Vec<_>>();
    let n = entities.len();
    let relationships = if n < 2 {
        Vec::new()
    } else {
        (0..r.gen_range(0..6))
            .map(|_| {
                let subject = r.gen_range(0..n);
                let object = (subject + r.gen_range(1..n)) % n;
                RelationshipTriplet { subject, object, predicate_id: r.gen_range(0..50) }
            })
            .collect()
    };
    Scene {
        scene_id: format!("scène \"{index}\"\t/{}", r.gen::<u32>()),
        width,
        height,
        entities,
        relationships,
    }
}

fn labels() -> LabelSpace {
    LabelSpace { num_categories: Some(150), num_predicates: Some(50) }
}

#[test]
fn thousand_random_scenes_survive_a_file_round_trip() {
    let mut r = rng(2024);
    let scenes: Vec<Scene> = (0..1000).map(|i| random_scene(&mut r, i)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    write_scenes(&path, &scenes).unwrap();
    let back = load_scenes(&path, labels()).unwrap();
    assert_eq!(back.len(), scenes.len());
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a, b);
        for (ea, eb) in a.entities.iter().zip(&b.entities) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ea.feature), bits(&eb.feature));
        }
    }
    assert_eq!(scenes_to_jsonl(&back).unwrap(), std::fs::read_to_string(&path).unwrap());
}

#[derive(Clone, Copy, Debug)]
enum Corruption {
    Truncated,
    NotAnObject,
    UnknownSubject,
    SelfRelation,
    ShortFeature,
    BoxOutsideImage,
    DegenerateBox,
    CategoryOutOfRange,
    PredicateOutOfRange,
    MissingField,
}

const CORRUPTIONS: [Corruption; 10] = [
    Corruption::Truncated,
    Corruption::NotAnObject,
    Corruption::UnknownSubject,
    Corruption::SelfRelation,
    Corruption::ShortFeature,
    Corruption::BoxOutsideImage,
    Corruption::DegenerateBox,
    Corruption::CategoryOutOfRange,
    Corruption::PredicateOutOfRange,
    Corruption::MissingField,
];

fn two_entity_scene(r: &mut Rng) -> Scene {
    let entity = |x: f64, r: &mut Rng| Entity {
        category_id: r.gen_range(0..150),
        bbox: BoundingBox::new(x, 1.0, x + 10.0, 20.0),
        feature: (0..FEATURE_DIM).map(|_| r.gen_range(-1.0..1.0)).collect(),
    };
    Scene {
        scene_id: "s".into(),
        width: 100.0,
        height: 100.0,
        entities: vec![entity(0.0, r), entity(50.0, r)],
        relationships: vec![RelationshipTriplet { subject: 0, object: 1, predicate_id: 3 }],
    }
}

fn corrupt(mut s: Scene, c: Corruption) -> String {
    match c {
        Corruption::Truncated => {
            let line = serde_json::to_string(&s).unwrap();
            return line[..line.len() / 2].to_string();
        }
        Corruption::NotAnObject => return "[1, 2, 3]".into(),
        Corruption::MissingField => {
            let mut v = serde_json::to_value(&s).unwrap();
            v.as_object_mut().unwrap().remove("height");
            return v.to_string();
        }
        Corruption::UnknownSubject => s.relationships[0].subject = 7,
        Corruption::SelfRelation => s.relationships[0].object = 0,
        Corruption::ShortFeature => {
            s.entities[1].feature.pop();
        }
        Corruption::BoxOutsideImage => s.entities[0].bbox.x_rb = 101.0,
        Corruption::DegenerateBox => s.entities[1].bbox.y_rb = s.entities[1].bbox.y_lt,
        Corruption::CategoryOutOfRange => s.entities[0].category_id = 150,
        Corruption::PredicateOutOfRange => s.relationships[0].predicate_id = 50,
    }
    serde_json::to_string(&s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every corruption is reported at its 1-based line, counting blank lines.
    #[test]
    fn invalid_record_is_rejected_at_its_line(
        valid in 0usize..6,
        blank_every in 2usize..5,
        which in 0usize..CORRUPTIONS.len(),
        seed: u64,
    ) {
        let mut r = rng(seed);
        let mut lines = Vec::new();
        for i in 0..valid {
            if i % blank_every == 1 {
                lines.push(String::new());
            }
            lines.push(serde_json::to_string(&two_entity_scene(&mut r)).unwrap());
        }
        lines.push(corrupt(two_entity_scene(&mut r), CORRUPTIONS[which]));
        let bad_line = lines.len();
        lines.push(serde_json::to_string(&two_entity_scene(&mut r)).unwrap());
        let text = lines.join("\n");
        match parse_scenes(&text, "input.jsonl", labels()) {
            Err(Error::Data { path, line, message }) => {
                prop_assert_eq!(path, "input.jsonl");
                prop_assert_eq!(line, bad_line, "{:?}: {}", CORRUPTIONS[which], message);
            }
            other => prop_assert!(false, "{:?} accepted or misreported: {:?}", CORRUPTIONS[which], other),
        }
    }
}

#[test]
fn diagnostics_name_the_problem() {
    let mut r = rng(1);
    let line = corrupt(two_entity_scene(&mut r), Corruption::UnknownSubject);
    let err = parse_scenes(&format!("\n{line}"), "x.jsonl", labels()).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("x.jsonl") && text.contains('2') && text.contains("out of range"), "{text}");
}
