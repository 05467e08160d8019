use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng;

pub const DEFAULT_LABEL_DIM: usize = 300;

/// Where category label vectors come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Seeded random unit vectors.
    Fallback { seed: u64, dim: usize },
    /// Seeded unit vectors sharing a component per group `category % num_groups`.
    Grouped { seed: u64, dim: usize, num_groups: usize },
    /// JSONL of `{"category_id": int, "vector": [nums]}`.
    File { path: PathBuf },
}

impl Default for LabelSource {
    fn default() -> Self {
        LabelSource::Fallback {
            seed: 0,
            dim: DEFAULT_LABEL_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct LabelRecord {
    category_id: usize,
    vector: Vec<f64>,
}

impl LabelEmbeddingTable {
    pub fn fallback(num_categories: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let vectors = (0..num_categories)
            .map(|_| unit((0..dim).map(|_| StandardNormal.sample(&mut r)).collect()))
            .collect();
        LabelEmbeddingTable { dim, vectors }
    }

    /// Each vector is `normalize(g + e)` with the group direction `g` and the
    /// category direction `e` both random unit vectors, so categories in the
    /// same group have cosine similarity near one half.
    pub fn grouped(num_categories: usize, num_groups: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_groups == 0 {
            return Err(Error::Invalid("num_groups must be positive".into()));
        }
        let mut r = rng(seed);
        let mut draw = || unit((0..dim).map(|_| StandardNormal.sample(&mut r)).collect());
        let groups: Vec<Vec<f64>> = (0..num_groups.min(num_categories)).map(|_| draw()).collect();
        let vectors = (0..num_categories)
            .map(|c| {
                let own = draw();
                let g = &groups[c % num_groups];
                unit(own.iter().zip(g).map(|(a, b)| a + b).collect())
            })
            .collect();
        Ok(LabelEmbeddingTable { dim, vectors })
    }

    pub fn parse(text: &str, num_categories: usize) -> Result<Self> {
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; num_categories];
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Data {
                path: "label embeddings".into(),
                line: i + 1,
                message,
            };
            let rec: LabelRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if *dim.get_or_insert(rec.vector.len()) != rec.vector.len() {
                return Err(err(format!("vector has {} values, expected {}", rec.vector.len(), dim.unwrap())));
            }
            if rec.vector.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            if rec.category_id < num_categories {
                slots[rec.category_id] = Some(rec.vector);
            }
        }
        let vectors = slots
            .into_iter()
            .enumerate()
            .map(|(c, v)| v.ok_or(Error::MissingCategory(c)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabelEmbeddingTable {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn load(path: &Path, num_categories: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, num_categories)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, category: usize) -> Result<&[f64]> {
        self.vectors
            .get(category)
            .map(Vec::as_slice)
            .ok_or(Error::MissingCategory(category))
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn build_label_embeddings(source: &LabelSource, num_categories: usize) -> Result<LabelEmbeddingTable> {
    match source {
        LabelSource::Fallback { seed, dim } => Ok(LabelEmbeddingTable::fallback(num_categories, *dim, *seed)),
        LabelSource::Grouped { seed, dim, num_groups } => {
            LabelEmbeddingTable::grouped(num_categories, *num_groups, *dim, *seed)
        }
        LabelSource::File { path } => LabelEmbeddingTable::load(path, num_categories),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let a = LabelEmbeddingTable::fallback(7, DEFAULT_LABEL_DIM, 11);
        assert_eq!(a, LabelEmbeddingTable::fallback(7, DEFAULT_LABEL_DIM, 11));
        for c in 0..7 {
            let v = a.get(c).unwrap();
            assert_eq!(v.len(), 300);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_vectors_share_group_direction() {
        let t = LabelEmbeddingTable::grouped(8, 4, DEFAULT_LABEL_DIM, 5).unwrap();
        let dot = |a: usize, b: usize| -> f64 { t.get(a).unwrap().iter().zip(t.get(b).unwrap()).map(|(x, y)| x * y).sum() };
        assert!((dot(1, 1) - 1.0).abs() < 1e-12);
        assert!(dot(1, 5) > 0.3, "same group {}", dot(1, 5));
        assert!(dot(1, 2).abs() < 0.25, "different groups {}", dot(1, 2));
        assert!(LabelEmbeddingTable::grouped(8, 0, 4, 5).is_err());
    }

    #[test]
    fn file_missing_category() {
        let text = "{\"category_id\":0,\"vector\":[1,0]}\n{\"category_id\":1,\"vector\":[0,1]}\n";
        let t = LabelEmbeddingTable::parse(text, 2).unwrap();
        assert_eq!(t.get(1).unwrap(), &[0.0, 1.0]);
        assert!(matches!(LabelEmbeddingTable::parse(text, 3), Err(Error::MissingCategory(2))));
        let bad = "{\"category_id\":0,\"vector\":[1,0]}\n{\"category_id\":1,\"vector\":[0]}\n";
        assert!(LabelEmbeddingTable::parse(bad, 2).is_err());
    }
}
