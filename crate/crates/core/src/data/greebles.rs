//! Parametric Greebles-style stimuli: a colored body ellipse with a head
//! ellipse above it, flat shaded on a gray background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ImageGeometry, ManifestItem};
use crate::error::{Error, Result};

/// Order of the recorded feature vector.
pub const FEATURE_NAMES: [&str; 6] = [
    "body_size",
    "red",
    "green",
    "head_width",
    "head_size",
    "body_width",
];
/// Indices of the class-independent features.
pub const DISTRACTORS: [usize; 3] = [3, 4, 5];

const MIN_EXTENT: f64 = 0.04;
const MAX_EXTENT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub sd: f64,
}

impl Gaussian {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let n =
            Normal::new(self.mean, self.sd).map_err(|e| Error::Config(format!("gaussian: {e}")))?;
        Ok(n.sample(rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreeblesClass {
    pub name: String,
    pub body_size: Gaussian,
    pub red: Gaussian,
    pub green: Gaussian,
}

/// Extents are fractions of the canvas; colors are in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreeblesSpec {
    pub name: String,
    pub classes: Vec<GreeblesClass>,
    pub head_width: Gaussian,
    pub head_size: Gaussian,
    pub body_width: Gaussian,
    pub blue: f64,
    pub background: f64,
    pub geometry: ImageGeometry,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for GreeblesSpec {
    fn default() -> Self {
        let class = |name: &str, body: f64, red: f64, green: f64| GreeblesClass {
            name: name.into(),
            body_size: Gaussian {
                mean: body,
                sd: 0.08,
            },
            red: Gaussian { mean: red, sd: 0.1 },
            green: Gaussian {
                mean: green,
                sd: 0.1,
            },
        };
        GreeblesSpec {
            name: "greebles".into(),
            classes: vec![
                class("agara", 0.36, 0.75, 0.35),
                class("bari", 0.56, 0.75, 0.35),
                class("cooka", 0.46, 0.45, 0.65),
            ],
            head_width: Gaussian {
                mean: 0.22,
                sd: 0.05,
            },
            head_size: Gaussian {
                mean: 0.2,
                sd: 0.05,
            },
            body_width: Gaussian {
                mean: 0.4,
                sd: 0.08,
            },
            blue: 0.35,
            background: 0.5,
            geometry: ImageGeometry {
                height: 128,
                width: 128,
                channels: 3,
            },
            per_class: 400,
            seed: 0,
        }
    }
}

impl GreeblesSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::ingest(path, e.to_string()))
    }

    fn check(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(
                "greebles spec needs at least 2 classes".into(),
            ));
        }
        if self.geometry.channels != 3 || self.geometry.height < 8 || self.geometry.width < 8 {
            return Err(Error::Config(
                "greebles geometry must be RGB and at least 8x8".into(),
            ));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Feature vector in `FEATURE_NAMES` order, after clamping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreebleFeatures(pub [f64; 6]);

impl GreebleFeatures {
    /// Clamps to a drawable figure; returns whether any geometry was changed.
    fn clamp(mut self) -> (Self, bool) {
        let f = &mut self.0;
        let before = *f;
        for i in [1, 2] {
            f[i] = f[i].clamp(0.0, 1.0);
        }
        for i in [0, 3, 4, 5] {
            f[i] = f[i].clamp(MIN_EXTENT, MAX_EXTENT);
        }
        let height = f[0] + f[4];
        if height > MAX_EXTENT {
            f[0] *= MAX_EXTENT / height;
            f[4] *= MAX_EXTENT / height;
        }
        let geometry_changed = [0, 3, 4, 5].iter().any(|&i| f[i] != before[i]);
        (self, geometry_changed)
    }
}

fn channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one stimulus. Pixels whose center lies inside an ellipse take
/// its color; there is no anti-aliasing.
pub fn render(features: &GreebleFeatures, spec: &GreeblesSpec) -> RgbImage {
    let [body, red, green, head_w, head_h, body_w] = features.0;
    let (h, w) = (spec.geometry.height as f64, spec.geometry.width as f64);
    let bg = channel(spec.background);
    let color = Rgb([channel(red), channel(green), channel(spec.blue)]);
    let top = (h - (body + head_h) * h) / 2.0;
    let cx = w / 2.0;
    let head = (
        cx,
        top + head_h * h / 2.0,
        head_w * w / 2.0,
        head_h * h / 2.0,
    );
    let torso = (
        cx,
        top + head_h * h + body * h / 2.0,
        body_w * w / 2.0,
        body * h / 2.0,
    );
    let inside = |(cx, cy, a, b): (f64, f64, f64, f64), x: f64, y: f64| {
        let dx = (x - cx) / a;
        let dy = (y - cy) / b;
        dx * dx + dy * dy <= 1.0
    };
    RgbImage::from_fn(
        spec.geometry.width as u32,
        spec.geometry.height as u32,
        |i, j| {
            let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
            if inside(torso, x, y) || inside(head, x, y) {
                color
            } else {
                Rgb([bg, bg, bg])
            }
        },
    )
}

pub struct GreeblesSet {
    /// Items reference `images/<id>.png`; root is unset until written.
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    /// Items whose sampled geometry had to be clamped to the canvas.
    pub clamped: usize,
}

/// Samples features per class and renders every item. Deterministic in the spec.
pub fn generate_greebles(spec: &GreeblesSpec) -> Result<GreeblesSet> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::new();
    let mut images = Vec::new();
    let mut clamped = 0;
    for (label, class) in spec.classes.iter().enumerate() {
        for k in 0..spec.per_class {
            let raw = GreebleFeatures([
                class.body_size.sample(&mut rng)?,
                class.red.sample(&mut rng)?,
                class.green.sample(&mut rng)?,
                spec.head_width.sample(&mut rng)?,
                spec.head_size.sample(&mut rng)?,
                spec.body_width.sample(&mut rng)?,
            ]);
            let (features, changed) = raw.clamp();
            if changed {
                clamped += 1;
            }
            let id = format!("{}_{k:04}", class.name);
            images.push(render(&features, spec));
            items.push(ManifestItem {
                path: Some(format!("images/{id}.png")),
                id,
                label,
                features: Some(features.0.to_vec()),
            });
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} greebles clamped to the canvas");
    }
    Ok(GreeblesSet {
        manifest: DatasetManifest {
            name: spec.name.clone(),
            classes: spec.classes.iter().map(|c| c.name.clone()).collect(),
            geometry: spec.geometry,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            items,
            root: Default::default(),
        },
        images,
        clamped,
    })
}

impl GreeblesSet {
    /// Writes `manifest.json` and `images/*.png` under `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (item, img) in self.manifest.items.iter().zip(&self.images) {
            let path = dir.join(item.path.as_deref().unwrap_or_default());
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::ingest(&path, e.to_string()))?;
        }
        self.manifest.root = dir.to_path_buf();
        self.manifest.save(&dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GreeblesSpec {
        GreeblesSpec {
            per_class: 5,
            geometry: ImageGeometry {
                height: 32,
                width: 32,
                channels: 3,
            },
            ..GreeblesSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_greebles(&small()).unwrap();
        let b = generate_greebles(&small()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert!(a
            .images
            .iter()
            .zip(&b.images)
            .all(|(x, y)| x.as_raw() == y.as_raw()));
        assert_eq!(a.manifest.count_per_class(), vec![5, 5, 5]);
    }

    #[test]
    fn features_determine_the_image() {
        let spec = small();
        let set = generate_greebles(&spec).unwrap();
        for (item, img) in set.manifest.items.iter().zip(&set.images) {
            let f: [f64; 6] = item.features.clone().unwrap().try_into().unwrap();
            assert_eq!(render(&GreebleFeatures(f), &spec).as_raw(), img.as_raw());
        }
    }

    #[test]
    fn oversized_figure_is_clamped() {
        let (f, changed) = GreebleFeatures([0.9, 0.5, 0.5, 1.4, 0.5, 0.4]).clamp();
        assert!(changed);
        assert!(f.0[0] + f.0[4] <= MAX_EXTENT + 1e-12);
        assert_eq!(f.0[3], MAX_EXTENT);
    }

    #[test]
    fn body_takes_the_class_color() {
        let spec = small();
        let img = render(&GreebleFeatures([0.5, 1.0, 0.0, 0.2, 0.2, 0.5]), &spec);
        assert_eq!(img.get_pixel(16, 22), &Rgb([255, 0, channel(spec.blue)]));
        assert_eq!(img.get_pixel(0, 0), &Rgb([128, 128, 128]));
    }

    #[test]
    fn shipped_spec_matches_default() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/greebles_default.json"
        );
        assert_eq!(
            GreeblesSpec::load(Path::new(path)).unwrap(),
            GreeblesSpec::default()
        );
    }
}
