//! Frozen networks the demorpher is built around, behind pluggable traits,
//! with analytic toy implementations for desk-scale work.
//!
//! Every frozen backend exposes a parameter digest so callers can assert that
//! training never touched it. The discriminator is the one trainable backend.

mod discriminator;
mod frs;
mod perceptual;
mod preprocess;
mod toy;

use std::sync::Arc;

pub use discriminator::Discriminator;
pub use frs::ToyFrs;
pub use perceptual::ToyPerceptual;
pub use preprocess::{decode_png, encode_png, preprocess, resize_bilinear};
pub use toy::{ToyDecoder, ToyEncoder, ToyGenerator};

use crate::autodiff::{Tape, Var};
use crate::config::BackendConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor, LatentCode};

/// Unit-norm identity embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalises `v`; a zero vector maps to the first basis vector.
    pub fn from_raw(mut v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else if !v.is_empty() {
            v.iter_mut().for_each(|x| *x = 0.0);
            v[0] = 1.0;
        }
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Cosine similarity of two unit embeddings, clamped into `[-1, 1]`.
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    let d: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    d.clamp(-1.0, 1.0)
}

pub trait StyleFeatureEncoder: Send + Sync {
    /// Maps an image to its full latent code and layer-k feature map.
    fn encode(&self, image: &ImageTensor) -> Result<(LatentCode, FeatureMap)>;
    fn parameter_digest(&self) -> String;
}

pub trait Generator: Send + Sync {
    /// Synthesises an image from a layer-k feature map and the tail styles.
    fn synthesize(&self, features: &FeatureMap, w_tail: &LatentCode) -> Result<ImageTensor>;
    /// Recorded variant over a batch: `features[N,C,h,w]`, `w_tail[N,T,D]` to `[N,3,H,W]`.
    fn synthesize_tape(&self, tape: &mut Tape, features: Var, w_tail: Var) -> Result<Var>;
    fn parameter_digest(&self) -> String;
}

pub trait FaceRecognizer: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &ImageTensor) -> Result<Embedding>;
    /// Recorded variant over `[N,3,H,W]`, returning unit rows `[N, dim]`.
    fn embed_tape(&self, tape: &mut Tape, images: Var) -> Var;
    fn parameter_digest(&self) -> String;

    fn compare(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        Ok(similarity(&self.embed(a)?, &self.embed(b)?))
    }
}

pub trait PerceptualNet: Send + Sync {
    /// Fixed multi-scale feature stack of one image.
    fn features(&self, image: &ImageTensor) -> Vec<Tensor>;
    /// Recorded variant over `[N,3,H,W]`; one `[N, C_s, h_s, w_s]` var per stage.
    fn features_tape(&self, tape: &mut Tape, images: Var) -> Vec<Var>;
    fn parameter_digest(&self) -> String;
}

/// The frozen networks of one configuration.
#[derive(Clone)]
pub struct Backends {
    pub config: BackendConfig,
    pub encoder: Arc<dyn StyleFeatureEncoder>,
    pub generator: Arc<dyn Generator>,
    pub frs: Arc<dyn FaceRecognizer>,
    pub perceptual: Arc<dyn PerceptualNet>,
}

impl Backends {
    /// Analytic toy backends derived from `config.seed`.
    pub fn toy(config: &BackendConfig) -> Result<Self> {
        config.validate()?;
        let decoder = Arc::new(ToyDecoder::new(config)?);
        Ok(Self {
            config: config.clone(),
            encoder: Arc::new(ToyEncoder::new(decoder.clone())),
            generator: Arc::new(ToyGenerator::new(decoder)),
            frs: Arc::new(ToyFrs::new(config, 0)),
            perceptual: Arc::new(ToyPerceptual::new(config)),
        })
    }

    /// Combined digest of every frozen backend.
    pub fn frozen_digest(&self) -> String {
        crate::util::sha256_hex(
            [
                self.encoder.parameter_digest(),
                self.generator.parameter_digest(),
                self.frs.parameter_digest(),
                self.perceptual.parameter_digest(),
            ]
            .join(":")
            .as_bytes(),
        )
    }

    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.config.image_shape() {
            return Err(Error::ShapeMismatch(format!(
                "expected image {:?}, got {:?}",
                self.config.image_shape(),
                image.shape()
            )));
        }
        Ok(())
    }
}
