//! Scene JSONL reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::write_atomic;

use super::scene::{LabelSpace, Scene};

/// Parses scene JSONL text. Blank lines are skipped; every other line must
/// be a valid scene record. Errors carry the 1-based line number.
pub fn parse_scenes(text: &str, source: &str, labels: LabelSpace) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Data {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let scene: Scene = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        scene.validate(labels).map_err(err)?;
        scenes.push(scene);
    }
    Ok(scenes)
}

pub fn load_scenes(path: &Path, labels: LabelSpace) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenes(&text, &path.display().to_string(), labels)
}

pub fn scenes_to_jsonl(scenes: &[Scene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_atomic(path, scenes_to_jsonl(scenes)?.as_bytes())
}
