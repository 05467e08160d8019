use serde::{Deserialize, Serialize};

/// Width of every per-entity visual feature.
pub const FEATURE_DIM: usize = 256;

/// Pixel-space box, top-left and bottom-right corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_lt: f64,
    pub y_lt: f64,
    pub x_rb: f64,
    pub y_rb: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox {
            x_lt: v[0],
            y_lt: v[1],
            x_rb: v[2],
            y_rb: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_lt, b.y_lt, b.x_rb, b.y_rb]
    }
}

impl BoundingBox {
    pub fn new(x_lt: f64, y_lt: f64, x_rb: f64, y_rb: f64) -> Self {
        BoundingBox { x_lt, y_lt, x_rb, y_rb }
    }

    pub fn width(&self) -> f64 {
        self.x_rb - self.x_lt
    }

    pub fn height(&self) -> f64 {
        self.y_rb - self.y_lt
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_lt + self.x_rb) / 2.0, (self.y_lt + self.y_rb) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_rb.min(other.x_rb) - self.x_lt.max(other.x_lt);
        let h = self.y_rb.min(other.y_rb) - self.y_lt.max(other.y_lt);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn union_area(&self, other: &BoundingBox) -> f64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_lt <= other.x_lt
            && self.y_lt <= other.y_lt
            && self.x_rb >= other.x_rb
            && self.y_rb >= other.y_rb
    }

    pub fn is_finite(&self) -> bool {
        [self.x_lt, self.y_lt, self.x_rb, self.y_rb]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Checks non-degeneracy and containment in a `width`×`height` image.
    pub fn check(&self, width: f64, height: f64) -> Result<(), String> {
        if !self.is_finite() {
            return Err(format!("box {:?} has non-finite coordinates", <[f64; 4]>::from(*self)));
        }
        if !(self.x_lt < self.x_rb && self.y_lt < self.y_rb) {
            return Err(format!("degenerate box {:?}", <[f64; 4]>::from(*self)));
        }
        if self.x_lt < 0.0 || self.y_lt < 0.0 || self.x_rb > width || self.y_rb > height {
            return Err(format!(
                "box {:?} outside image {width}x{height}",
                <[f64; 4]>::from(*self)
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub category_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationshipTriplet {
    pub subject: usize,
    pub object: usize,
    pub predicate_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub entities: Vec<Entity>,
    pub relationships: Vec<RelationshipTriplet>,
}

/// Label space bounds used when validating scenes.
#[derive(Clone, Copy, Debug, Default)]
pub struct LabelSpace {
    pub num_categories: Option<usize>,
    pub num_predicates: Option<usize>,
}

impl Scene {
    pub fn validate(&self, labels: LabelSpace) -> Result<(), String> {
        if !(self.width.is_finite() && self.width > 0.0 && self.height.is_finite() && self.height > 0.0) {
            return Err(format!(
                "scene {}: image size {}x{} must be positive",
                self.scene_id, self.width, self.height
            ));
        }
        for (i, e) in self.entities.iter().enumerate() {
            e.bbox
                .check(self.width, self.height)
                .map_err(|m| format!("scene {} entity {i}: {m}", self.scene_id))?;
            if e.feature.len() != FEATURE_DIM {
                return Err(format!(
                    "scene {} entity {i}: feature has {} values, expected {FEATURE_DIM}",
                    self.scene_id,
                    e.feature.len()
                ));
            }
            if e.feature.iter().any(|v| !v.is_finite()) {
                return Err(format!("scene {} entity {i}: non-finite feature", self.scene_id));
            }
            if let Some(c) = labels.num_categories {
                if e.category_id >= c {
                    return Err(format!(
                        "scene {} entity {i}: category {} outside [0, {c})",
                        self.scene_id, e.category_id
                    ));
                }
            }
        }
        let n = self.entities.len();
        for (t, r) in self.relationships.iter().enumerate() {
            if r.subject >= n || r.object >= n {
                return Err(format!(
                    "scene {} relationship {t}: entity index {} out of range for {n} entities",
                    self.scene_id,
                    r.subject.max(r.object)
                ));
            }
            if r.subject == r.object {
                return Err(format!(
                    "scene {} relationship {t}: subject and object are both entity {}",
                    self.scene_id, r.subject
                ));
            }
            if let Some(k) = labels.num_predicates {
                if r.predicate_id >= k {
                    return Err(format!(
                        "scene {} relationship {t}: predicate {} outside [0, {k})",
                        self.scene_id, r.predicate_id
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.entities.iter().map(|e| e.bbox).collect()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.entities.iter().map(|e| e.category_id).collect()
    }

    /// Drops category and relationship annotations.
    pub fn without_labels(&self) -> UnlabeledScene {
        UnlabeledScene {
            scene_id: self.scene_id.clone(),
            width: self.width,
            height: self.height,
            entities: self
                .entities
                .iter()
                .map(|e| UnlabeledEntity {
                    bbox: e.bbox,
                    feature: e.feature.clone(),
                })
                .collect(),
        }
    }

    /// Distinct ordered (subject, object) pairs carrying ground truth, in
    /// first-appearance order.
    pub fn annotated_pairs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for r in &self.relationships {
            if !out.contains(&(r.subject, r.object)) {
                out.push((r.subject, r.object));
            }
        }
        out
    }
}

/// An entity as seen by self-supervised pretraining: geometry and feature only.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledEntity {
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledScene {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub entities: Vec<UnlabeledEntity>,
}

impl UnlabeledScene {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }
}

pub fn strip_labels(scenes: &[Scene]) -> Vec<UnlabeledScene> {
    scenes.iter().map(Scene::without_labels).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entity(cat: usize, b: [f64; 4]) -> Entity {
        Entity {
            category_id: cat,
            bbox: b.into(),
            feature: vec![0.5; FEATURE_DIM],
        }
    }

    #[test]
    fn box_geometry() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BoundingBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(a.intersection_area(&b), 1.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&BoundingBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!(BoundingBox::new(0.0, 0.0, 4.0, 4.0).contains(&b));
        assert!(a.check(10.0, 10.0).is_ok());
        assert!(a.check(1.5, 10.0).is_err());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).check(10.0, 10.0).is_err());
    }

    #[test]
    fn validation_catches_bad_triplets() {
        let mut s = Scene {
            scene_id: "s".into(),
            width: 10.0,
            height: 10.0,
            entities: vec![entity(0, [0., 0., 5., 5.]), entity(1, [1., 1., 2., 2.])],
            relationships: vec![RelationshipTriplet { subject: 0, object: 1, predicate_id: 0 }],
        };
        assert!(s.validate(LabelSpace::default()).is_ok());
        s.relationships[0].object = 0;
        assert!(s.validate(LabelSpace::default()).is_err());
        s.relationships[0].object = 5;
        assert!(s.validate(LabelSpace::default()).unwrap_err().contains("index 5"));
        s.relationships[0].object = 1;
        let space = LabelSpace { num_categories: Some(1), num_predicates: None };
        assert!(s.validate(space).is_err());
    }

    #[test]
    fn json_uses_box_array() {
        let e = entity(3, [1., 2., 3., 4.]);
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["box"], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
        assert_eq!(v["category_id"], 3);
    }
}
