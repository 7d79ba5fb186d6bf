use std::collections::HashMap;

use super::model::EmbeddingKind;
use crate::data::{DatasetManifest, FeatureMap, GreeblesSet, LearnerSession};
use crate::encoder::{image_to_tensor, preprocess};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

enum StimulusData<T> {
    /// Flat `N x C x H x W` pixels.
    Images { shape: [usize; 3], pixels: Vec<T> },
    /// Fixed embeddings, `N x D`.
    Embeddings { dim: usize, values: Vec<f64> },
}

/// Every stimulus of a dataset in model-ready form, indexed by item id.
pub struct Stimuli<T> {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    index: HashMap<String, usize>,
    data: StimulusData<T>,
}

impl<T: Scalar> Stimuli<T> {
    fn build(manifest: &DatasetManifest, data: StimulusData<T>) -> Self {
        let ids: Vec<String> = manifest.items.iter().map(|it| it.id.clone()).collect();
        let index = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Self {
            labels: manifest.items.iter().map(|it| it.label).collect(),
            ids,
            index,
            data,
        }
    }

    /// Loads and preprocesses every image file of the manifest.
    pub fn from_images(
        manifest: &DatasetManifest,
        height: usize,
        width: usize,
        channels: usize,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(manifest.items.len() * channels * height * width);
        for item in &manifest.items {
            let path = manifest
                .image_path(item)
                .ok_or_else(|| Error::Config(format!("item '{}' has no image file", item.id)))?;
            pixels.extend_from_slice(preprocess::<T>(&path, height, width, channels)?.data());
        }
        Ok(Self::build(
            manifest,
            StimulusData::Images {
                shape: [channels, height, width],
                pixels,
            },
        ))
    }

    /// Uses freshly generated images without a round trip through disk.
    pub fn from_greebles(set: &GreeblesSet, height: usize, width: usize) -> Result<Self> {
        let mut pixels = Vec::with_capacity(set.images.len() * 3 * height * width);
        for img in &set.images {
            let dynamic = image::DynamicImage::ImageRgb8(img.clone());
            pixels.extend_from_slice(image_to_tensor::<T>(&dynamic, height, width, 3)?.data());
        }
        Ok(Self::build(
            &set.manifest,
            StimulusData::Images {
                shape: [3, height, width],
                pixels,
            },
        ))
    }

    /// Embeds every item through a fixed map of its recorded features.
    pub fn from_features(manifest: &DatasetManifest, map: &FeatureMap) -> Result<Self> {
        let mut values = Vec::with_capacity(manifest.items.len() * map.out_dim());
        for item in &manifest.items {
            let f = item.features.as_ref().ok_or_else(|| {
                Error::Config(format!("item '{}' has no recorded features", item.id))
            })?;
            values.extend(map.apply(f)?);
        }
        Ok(Self::build(
            manifest,
            StimulusData::Embeddings {
                dim: map.out_dim(),
                values,
            },
        ))
    }

    /// Loads stimuli in the form a model's embedding kind needs.
    pub fn for_model(manifest: &DatasetManifest, kind: &EmbeddingKind) -> Result<Self> {
        match kind {
            EmbeddingKind::Cnn(cfg) => {
                Self::from_images(manifest, cfg.input_height, cfg.input_width, cfg.img_chns)
            }
            EmbeddingKind::Features(map) => Self::from_features(manifest, map),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown item '{id}'")))
    }

    /// Indices of a session's stimuli in step order.
    pub fn session_items(&self, session: &LearnerSession) -> Result<Vec<usize>> {
        session
            .interactions
            .iter()
            .map(|i| self.index_of(&i.item_id))
            .collect()
    }

    /// `[C, H, W]` for image stimuli.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        match &self.data {
            StimulusData::Images { shape, .. } => Some(*shape),
            StimulusData::Embeddings { .. } => None,
        }
    }

    /// Width of fixed embeddings.
    pub fn embedding_dim(&self) -> Option<usize> {
        match &self.data {
            StimulusData::Embeddings { dim, .. } => Some(*dim),
            StimulusData::Images { .. } => None,
        }
    }

    /// `N x C x H x W` batch of the given items.
    pub(crate) fn image_batch(&self, items: &[usize]) -> Result<Tensor<T>> {
        match &self.data {
            StimulusData::Images { shape, pixels } => {
                let len = shape.iter().product::<usize>();
                let mut data = Vec::with_capacity(items.len() * len);
                for &i in items {
                    data.extend_from_slice(&pixels[i * len..(i + 1) * len]);
                }
                Tensor::new(&[items.len(), shape[0], shape[1], shape[2]], data)
            }
            StimulusData::Embeddings { .. } => {
                Err(Error::Config("stimuli hold embeddings, not images".into()))
            }
        }
    }

    /// `N x D` fixed embeddings of the given items.
    pub(crate) fn embedding_batch(&self, items: &[usize]) -> Result<Tensor<T>> {
        match &self.data {
            StimulusData::Embeddings { dim, values } => {
                let mut data = Vec::with_capacity(items.len() * dim);
                for &i in items {
                    data.extend(values[i * dim..(i + 1) * dim].iter().map(|&v| T::lit(v)));
                }
                Tensor::new(&[items.len(), *dim], data)
            }
            StimulusData::Images { .. } => {
                Err(Error::Config("stimuli hold images, not embeddings".into()))
            }
        }
    }
}
