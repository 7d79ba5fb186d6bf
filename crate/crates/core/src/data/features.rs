use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Fixed linear map from recorded generative features to a low-dimensional
/// space: `projection * ((f - mean) / scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `out_dim` rows of `in_dim` weights.
    pub projection: Vec<Vec<f64>>,
}

impl FeatureMap {
    /// Standardizes with the population statistics of the manifest's features.
    pub fn standardized(manifest: &DatasetManifest, projection: Vec<Vec<f64>>) -> Result<Self> {
        let rows = manifest_features(manifest)?;
        let dim = rows[0].len();
        if projection.is_empty() || projection.iter().any(|p| p.len() != dim) {
            return Err(Error::Config(format!(
                "projection rows must have {dim} weights"
            )));
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let scale = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            scale,
            projection,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.len()
    }

    pub fn apply(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "feature map expects {} features, got {}",
                self.in_dim(),
                features.len()
            )));
        }
        let std: Vec<f64> = features
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((f, m), s)| (f - m) / s)
            .collect();
        Ok(self
            .projection
            .iter()
            .map(|row| row.iter().zip(&std).map(|(w, x)| w * x).sum())
            .collect())
    }
}

/// Feature vectors of every item; all items must carry features.
pub fn manifest_features(manifest: &DatasetManifest) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = manifest
        .items
        .iter()
        .map(|it| {
            it.features
                .clone()
                .ok_or_else(|| Error::Config(format!("item '{}' has no recorded features", it.id)))
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(
            "manifest features are empty or ragged".into(),
        ));
    }
    Ok(rows)
}
