//! Shared CNN image encoder and image preprocessing.
//!
//! conv 5x5 (8) -> PReLU -> maxpool 4 -> PReLU -> conv 5x5 (16) -> PReLU ->
//! maxpool 4 -> flatten -> 512 -> 256 -> 256 -> D, PReLU after each linear.

use std::path::Path;

use image::imageops::FilterType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    uniform_fan_in, Graph, NodeId, ParamGroup, ParamId, ParamStore, Scalar, Tensor,
};

const CONV1_OUT: usize = 8;
const CONV2_OUT: usize = 16;
const KERNEL: usize = 5;
const PAD: usize = 2;
const POOL: usize = 4;
const HIDDEN: [usize; 3] = [512, 256, 256];
const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub img_chns: usize,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn new(
        input_height: usize,
        input_width: usize,
        img_chns: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let cfg = Self {
            input_height,
            input_width,
            img_chns,
            embed_dim,
        };
        if !matches!(img_chns, 1 | 3) {
            return Err(Error::Config(format!(
                "img_chns must be 1 or 3, got {img_chns}"
            )));
        }
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if cfg.img_feats() == 0 {
            return Err(Error::Config(format!(
                "input {input_height}x{input_width} is too small for two 4x pools"
            )));
        }
        Ok(cfg)
    }

    /// Flattened size after the second pool.
    pub fn img_feats(&self) -> usize {
        CONV2_OUT * (self.input_height / POOL / POOL) * (self.input_width / POOL / POOL)
    }

    /// Number of scalar parameters the encoder holds.
    pub fn param_count(&self) -> usize {
        let conv1 = CONV1_OUT * self.img_chns * KERNEL * KERNEL + CONV1_OUT;
        let conv2 = CONV2_OUT * CONV1_OUT * KERNEL * KERNEL + CONV2_OUT;
        let mut dense = 0;
        let mut prev = self.img_feats();
        for &h in HIDDEN.iter().chain(std::iter::once(&self.embed_dim)) {
            dense += h * prev + h;
            prev = h;
        }
        conv1 + conv2 + dense + 7
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    slope: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    /// Slopes after conv1, pool1 and conv2.
    conv_slopes: [ParamId; 3],
    dense: Vec<Dense>,
}

impl Encoder {
    /// Adds freshly initialized encoder parameters to `store`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        config: EncoderConfig,
    ) -> Self {
        let g = ParamGroup::Encoder;
        let slope = |store: &mut ParamStore<T>, name: String| {
            store.add(name, g, Tensor::full(&[1], T::lit(PRELU_INIT)))
        };
        let fan1 = config.img_chns * KERNEL * KERNEL;
        let conv1 = (
            store.add(
                "enc.conv1.w",
                g,
                uniform_fan_in(rng, &[CONV1_OUT, config.img_chns, KERNEL, KERNEL], fan1),
            ),
            store.add("enc.conv1.b", g, Tensor::zeros(&[CONV1_OUT])),
        );
        let s1 = slope(store, "enc.conv1.prelu".into());
        let s2 = slope(store, "enc.pool1.prelu".into());
        let fan2 = CONV1_OUT * KERNEL * KERNEL;
        let conv2 = (
            store.add(
                "enc.conv2.w",
                g,
                uniform_fan_in(rng, &[CONV2_OUT, CONV1_OUT, KERNEL, KERNEL], fan2),
            ),
            store.add("enc.conv2.b", g, Tensor::zeros(&[CONV2_OUT])),
        );
        let s3 = slope(store, "enc.conv2.prelu".into());
        let mut dense = Vec::new();
        let mut prev = config.img_feats();
        for (k, &h) in HIDDEN
            .iter()
            .chain(std::iter::once(&config.embed_dim))
            .enumerate()
        {
            dense.push(Dense {
                w: store.add(
                    format!("enc.fc{k}.w"),
                    g,
                    uniform_fan_in(rng, &[h, prev], prev),
                ),
                b: store.add(format!("enc.fc{k}.b"), g, Tensor::zeros(&[h])),
                slope: slope(store, format!("enc.fc{k}.prelu")),
            });
            prev = h;
        }
        Self {
            config,
            conv1,
            conv2,
            conv_slopes: [s1, s2, s3],
            dense,
        }
    }

    /// Rebinds to parameters already present in `store` (e.g. a checkpoint).
    pub fn bind<T: Scalar>(store: &ParamStore<T>, config: EncoderConfig) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let dense = (0..=HIDDEN.len())
            .map(|k| {
                Ok(Dense {
                    w: find(&format!("enc.fc{k}.w"))?,
                    b: find(&format!("enc.fc{k}.b"))?,
                    slope: find(&format!("enc.fc{k}.prelu"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc = Self {
            config,
            conv1: (find("enc.conv1.w")?, find("enc.conv1.b")?),
            conv2: (find("enc.conv2.w")?, find("enc.conv2.b")?),
            conv_slopes: [
                find("enc.conv1.prelu")?,
                find("enc.pool1.prelu")?,
                find("enc.conv2.prelu")?,
            ],
            dense,
        };
        let last = store.get(enc.dense[HIDDEN.len()].w).shape();
        if last != [config.embed_dim, HIDDEN[2]]
            || store.get(enc.dense[0].w).shape()[1] != config.img_feats()
        {
            return Err(Error::Checkpoint(
                "encoder parameter shapes do not match the config".into(),
            ));
        }
        Ok(enc)
    }

    /// Embeds `images` (`N x chns x H x W`) into `N x D`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: NodeId,
    ) -> Result<NodeId> {
        let c = &self.config;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [c.img_chns, c.input_height, c.input_width] {
            return Err(Error::Shape(format!(
                "encoder expects N x {} x {} x {}, got {shape:?}",
                c.img_chns, c.input_height, c.input_width
            )));
        }
        let n = shape[0];
        let p = |g: &mut Graph<T>, id| g.param(store, id);
        let (w1, b1) = (p(g, self.conv1.0), p(g, self.conv1.1));
        let mut x = g.conv2d(images, w1, b1, 1, PAD)?;
        let s = p(g, self.conv_slopes[0]);
        x = g.prelu(x, s)?;
        x = g.max_pool2d(x, POOL)?;
        let s = p(g, self.conv_slopes[1]);
        x = g.prelu(x, s)?;
        let (w2, b2) = (p(g, self.conv2.0), p(g, self.conv2.1));
        x = g.conv2d(x, w2, b2, 1, PAD)?;
        let s = p(g, self.conv_slopes[2]);
        x = g.prelu(x, s)?;
        x = g.max_pool2d(x, POOL)?;
        x = g.reshape(x, &[n, c.img_feats()])?;
        for d in &self.dense {
            let (w, b, s) = (p(g, d.w), p(g, d.b), p(g, d.slope));
            x = g.affine(x, w, Some(b))?;
            x = g.prelu(x, s)?;
        }
        Ok(x)
    }

    /// Embeds a batch outside of any training graph.
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let z = self.forward(&mut g, store, x)?;
        Ok(g.value(z).clone())
    }
}

/// Decodes an image file, resizes it bilinearly to `height x width` and
/// scales to [0, 1]. One channel means ITU-R 601 luma.
pub fn preprocess<T: Scalar>(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    image_to_tensor(&img, height, width, channels)
}

pub fn image_to_tensor<T: Scalar>(
    img: &image::DynamicImage,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Tensor<T>> {
    let resized = if img.width() as usize == width && img.height() as usize == height {
        img.to_rgb8()
    } else {
        img.resize_exact(width as u32, height as u32, FilterType::Triangle)
            .to_rgb8()
    };
    let plane = height * width;
    let scale = |v: u8| T::lit(v as f64 / 255.0);
    let data = match channels {
        3 => {
            let mut data = vec![T::zero(); 3 * plane];
            for (k, px) in resized.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * plane + k] = scale(px[ch]);
                }
            }
            data
        }
        1 => resized
            .pixels()
            .map(|px| {
                let y = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
                T::lit((y / 255.0).clamp(0.0, 1.0))
            })
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {other}"
            )))
        }
    };
    Tensor::new(&[channels, height, width], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn flattened_sizes() {
        assert_eq!(
            EncoderConfig::new(144, 144, 3, 16).unwrap().img_feats(),
            1296
        );
        assert_eq!(
            EncoderConfig::new(128, 128, 3, 16).unwrap().img_feats(),
            1024
        );
        assert_eq!(EncoderConfig::new(32, 32, 1, 4).unwrap().img_feats(), 64);
        assert!(EncoderConfig::new(8, 8, 3, 16).is_err());
        assert!(EncoderConfig::new(144, 144, 2, 16).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        for d in [8, 16, 32, 64] {
            let cfg = EncoderConfig::new(64, 64, 3, d).unwrap();
            let mut store = ParamStore::<f32>::new();
            Encoder::init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg);
            assert_eq!(store.count(), cfg.param_count());
        }
        let a = EncoderConfig::new(64, 64, 3, 8).unwrap().param_count();
        let b = EncoderConfig::new(64, 64, 3, 16).unwrap().param_count();
        assert_eq!(b - a, 8 * 256 + 8);
    }

    #[test]
    fn encode_shape_and_repeatability() {
        let cfg = EncoderConfig::new(32, 32, 3, 16).unwrap();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::init(&mut store, &mut ChaCha8Rng::seed_from_u64(1), cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images = Tensor::new(
            &[2, 3, 32, 32],
            (0..2 * 3 * 32 * 32).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let a = enc.encode(&store, &images).unwrap();
        assert_eq!(a.shape(), &[2, 16]);
        assert_eq!(a, enc.encode(&store, &images).unwrap());
        let wrong = Tensor::<f64>::zeros(&[1, 3, 28, 32]);
        assert!(matches!(enc.encode(&store, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn bind_recovers_the_layout() {
        let cfg = EncoderConfig::new(32, 32, 1, 4).unwrap();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::init(&mut store, &mut ChaCha8Rng::seed_from_u64(3), cfg);
        let bound = Encoder::bind(&store, cfg).unwrap();
        let images = Tensor::full(&[1, 1, 32, 32], 0.3);
        assert_eq!(
            enc.encode(&store, &images).unwrap(),
            bound.encode(&store, &images).unwrap()
        );
        let other = EncoderConfig::new(32, 32, 1, 8).unwrap();
        assert!(Encoder::bind(&store, other).is_err());
    }

    #[test]
    fn preprocess_contract() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        image::RgbImage::from_pixel(20, 10, image::Rgb([255, 255, 255]))
            .save(&white)
            .unwrap();
        let t: Tensor<f64> = preprocess(&white, 16, 16, 3).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
        let g: Tensor<f64> = preprocess(&white, 16, 16, 1).unwrap();
        assert_eq!(g.shape(), &[1, 16, 16]);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let noisy = dir.path().join("noisy.png");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        image::RgbImage::from_fn(37, 23, |_, _| {
            image::Rgb([rng.random(), rng.random(), rng.random()])
        })
        .save(&noisy)
        .unwrap();
        let a: Tensor<f32> = preprocess(&noisy, 16, 16, 3).unwrap();
        let b: Tensor<f32> = preprocess(&noisy, 16, 16, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        let err = preprocess::<f32>(&junk, 16, 16, 3).unwrap_err().to_string();
        assert!(err.contains("junk.png"), "{err}");
    }
}
