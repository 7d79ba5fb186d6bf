#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vkt_core::data::{DatasetManifest, FeatureMap, GreeblesSpec, ImageGeometry, ManifestItem};
use vkt_core::encoder::EncoderConfig;
use vkt_core::numerics::{ParamStore, Scalar, Tensor};
use vkt_core::tracers::{
    EmbeddingKind, ModelConfig, Stimuli, TraceSequence, TracerKind, TracerVariant,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Items with random recorded features and no image files.
pub fn feature_manifest(
    classes: usize,
    per_class: usize,
    feat_dim: usize,
    seed: u64,
) -> DatasetManifest {
    let mut r = rng(seed);
    DatasetManifest {
        name: "toy".into(),
        classes: (0..classes).map(|c| format!("class{c}")).collect(),
        geometry: ImageGeometry {
            height: 4,
            width: 4,
            channels: 1,
        },
        feature_names: (0..feat_dim).map(|j| format!("f{j}")).collect(),
        items: (0..classes * per_class)
            .map(|i| ManifestItem {
                id: format!("item{i}"),
                path: None,
                label: i % classes,
                features: Some((0..feat_dim).map(|_| r.random_range(-1.0..1.0)).collect()),
            })
            .collect(),
        root: PathBuf::new(),
    }
}

pub fn random_map(manifest: &DatasetManifest, dim: usize, seed: u64) -> FeatureMap {
    let mut r = rng(seed);
    let f = manifest.feature_names.len();
    let proj = (0..dim)
        .map(|_| (0..f).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    FeatureMap::standardized(manifest, proj).unwrap()
}

pub fn feature_setup<T: Scalar>(
    classes: usize,
    dim: usize,
    seed: u64,
) -> (Stimuli<T>, EmbeddingKind) {
    let m = feature_manifest(classes, 12, 5, seed);
    let map = random_map(&m, dim, seed + 1);
    (
        Stimuli::from_features(&m, &map).unwrap(),
        EmbeddingKind::Features(map),
    )
}

/// Small Greebles set at `size x size`.
pub fn image_setup<T: Scalar>(
    per_class: usize,
    size: usize,
    dim: usize,
) -> (Stimuli<T>, EmbeddingKind) {
    let spec = GreeblesSpec {
        per_class,
        geometry: ImageGeometry {
            height: size,
            width: size,
            channels: 3,
        },
        ..GreeblesSpec::default()
    };
    let set = vkt_core::data::generate_greebles(&spec).unwrap();
    let stimuli = Stimuli::from_greebles(&set, size, size).unwrap();
    (
        stimuli,
        EmbeddingKind::Cnn(EncoderConfig::new(size, size, 3, dim).unwrap()),
    )
}

/// Distinct random items, random labels consistent with the stimuli and
/// random responses.
pub fn random_sequence<T: Scalar>(
    stimuli: &Stimuli<T>,
    classes: usize,
    train_len: usize,
    test_len: usize,
    r: &mut ChaCha8Rng,
) -> TraceSequence {
    let items = rand::seq::index::sample(r, stimuli.len(), train_len + test_len).into_vec();
    TraceSequence {
        labels: items.iter().map(|&i| stimuli.labels[i]).collect(),
        responses: items.iter().map(|_| r.random_range(0..classes)).collect(),
        items,
        train_len,
    }
}

pub fn small_config(kind: TracerKind, classes: usize, embedding: EmbeddingKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(TracerVariant::new(kind), classes, embedding);
    cfg.hidden = 6;
    cfg.layers = 3;
    cfg.head_hidden = 5;
    cfg.train_steps = 5;
    cfg
}

/// Overwrites every parameter with uniform values in `(-scale, scale)`;
/// single-value parameters (slopes, log scales) stay small and positive.
pub fn randomize<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let single = t.len() == 1;
        for v in t.data_mut() {
            *v = if single {
                T::lit(r.random_range(0.1..0.5))
            } else {
                T::lit(r.random_range(-scale..scale))
            };
        }
    }
}

pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
}
