use std::sync::Arc;

use super::{Embedding, FaceRecognizer};
use crate::autodiff::{Tape, Var};
use crate::config::BackendConfig;
use crate::error::Result;
use crate::tensor::Tensor;
use crate::types::ImageTensor;
use crate::util::{normal_tensor, rng_for, smooth_planes, tensor_digest};

/// Linear toy face recogniser: `normalize(P · center(x))`.
///
/// Rows of `P` are spatially smoothed noise images, so the embedding
/// responds to low-frequency structure and ignores per-pixel noise.
/// Centering removes a global brightness offset before projection.
pub struct ToyFrs {
    name: String,
    projection: Arc<Tensor>,
    image_shape: [usize; 3],
}

impl ToyFrs {
    /// `index` selects an independent projection, used to emulate several
    /// recognisers over the same configuration.
    pub fn new(config: &BackendConfig, index: u64) -> Self {
        let [c, h, w] = config.image_shape();
        let mut rng = rng_for(config.seed, "toy-frs", index);
        let mut p = normal_tensor(&mut rng, &[config.frs_dim, c * h * w], 1.0);
        smooth_planes(p.data_mut(), config.frs_dim * c, h, w, 2);
        for row in p.data_mut().chunks_mut(c * h * w) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self { name: format!("toy-frs-{index}"), projection: Arc::new(p), image_shape: [c, h, w] }
    }
}

impl FaceRecognizer for ToyFrs {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, image: &ImageTensor) -> Result<Embedding> {
        if image.shape() != self.image_shape {
            return Err(crate::error::Error::ShapeMismatch(format!(
                "recogniser expects {:?}, got {:?}",
                self.image_shape,
                image.shape()
            )));
        }
        let x = image.data();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let raw = self
            .projection
            .data()
            .chunks(x.len())
            .map(|row| row.iter().zip(x).map(|(p, v)| p * (v - mean)).sum())
            .collect();
        Ok(Embedding::from_raw(raw))
    }

    fn embed_tape(&self, tape: &mut Tape, images: Var) -> Var {
        let n = tape.shape(images)[0];
        let flat = tape.reshape(images, &[n, self.projection.shape()[1]]);
        let centered = tape.center_rows(flat);
        let proj = tape.matmul_fixed(centered, self.projection.clone());
        tape.l2_normalize_rows(proj)
    }

    fn parameter_digest(&self) -> String {
        tensor_digest([self.projection.as_ref()])
    }
}
