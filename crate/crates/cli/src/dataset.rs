//! JSON-lines evaluation sets. Paths are relative to the dataset file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub query: PathBuf,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    /// `[x0, y0, x1, y1]` on the query image, end-exclusive.
    pub gt_box: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrientationRecord {
    /// Street panorama.
    pub query: PathBuf,
    /// Aerial image.
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub gt_rotation_deg: f64,
}

trait Relocate {
    fn relocate(&mut self, base: &Path);
}

impl Relocate for LocalizationRecord {
    fn relocate(&mut self, base: &Path) {
        self.query = base.join(&self.query);
        self.reference = base.join(&self.reference);
    }
}

impl Relocate for OrientationRecord {
    fn relocate(&mut self, base: &Path) {
        self.query = base.join(&self.query);
        self.reference = base.join(&self.reference);
    }
}

fn read_jsonl<T: DeserializeOwned + Relocate>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: T =
            serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        rec.relocate(base);
        out.push(rec);
    }
    Ok(out)
}

pub fn read_localization(path: &Path) -> Result<Vec<LocalizationRecord>> {
    read_jsonl(path)
}

pub fn read_orientation(path: &Path) -> Result<Vec<OrientationRecord>> {
    read_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
