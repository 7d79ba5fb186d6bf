use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Image file, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Zero-based class index.
    pub label: usize,
    /// Generative feature values, when known (synthetic stimuli).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<String>,
    pub geometry: ImageGeometry,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub feature_names: Vec<String>,
    pub items: Vec<ManifestItem>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.as_str(), i))
            .collect()
    }

    pub fn item(&self, id: &str) -> Option<&ManifestItem> {
        self.items.iter().find(|it| it.id == id)
    }

    pub fn image_path(&self, item: &ManifestItem) -> Option<PathBuf> {
        item.path.as_ref().map(|p| self.root.join(p))
    }

    pub fn count_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for it in &self.items {
            if let Some(c) = counts.get_mut(it.label) {
                *c += 1;
            }
        }
        counts
    }

    /// Structural checks. With `check_files`, every referenced image must
    /// exist on disk.
    pub fn validate(&self, check_files: bool) -> Vec<String> {
        let mut problems = Vec::new();
        if self.classes.len() < 2 {
            problems.push(format!(
                "need at least 2 classes, got {}",
                self.classes.len()
            ));
        }
        if !matches!(self.geometry.channels, 1 | 3) {
            problems.push(format!(
                "channels must be 1 or 3, got {}",
                self.geometry.channels
            ));
        }
        let mut seen = HashSet::new();
        for it in &self.items {
            if !seen.insert(it.id.as_str()) {
                problems.push(format!("duplicate item id '{}'", it.id));
            }
            if it.label >= self.classes.len() {
                problems.push(format!(
                    "item '{}' has label {} outside 0..{}",
                    it.id,
                    it.label,
                    self.classes.len()
                ));
            }
            match (&it.path, &it.features) {
                (None, None) => problems.push(format!(
                    "item '{}' has neither an image path nor features",
                    it.id
                )),
                (Some(p), _) if check_files && !self.root.join(p).is_file() => {
                    problems.push(format!("item '{}' references missing file {}", it.id, p))
                }
                _ => {}
            }
            if let Some(f) = &it.features {
                if !self.feature_names.is_empty() && f.len() != self.feature_names.len() {
                    problems.push(format!(
                        "item '{}' has {} features, expected {}",
                        it.id,
                        f.len(),
                        self.feature_names.len()
                    ));
                }
            }
        }
        problems
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Reads and validates a JSON manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let problems = manifest.validate(true);
    if !problems.is_empty() {
        return Err(Error::ingest(path, problems.join("; ")));
    }
    Ok(manifest)
}
