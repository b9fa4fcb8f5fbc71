//! Linear toy generator and its exact pseudo-inverse encoder.
//!
//! The decoder maps `[F ; w_tail]` to pixels through nearest-neighbour
//! upsampling and fixed random 3x3 convolutions (one stage per factor of
//! two), plus a fixed random style basis for the tail latents. Being linear
//! and injective, its Moore-Penrose inverse recovers `(F, w_tail)` exactly
//! for every image in its range.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::{Generator, StyleFeatureEncoder};
use crate::autodiff::{Tape, Var};
use crate::config::BackendConfig;
use crate::error::{Error, Result};
use crate::tensor::{conv2d_direct, Tensor};
use crate::types::{FeatureMap, ImageTensor, LatentCode};
use crate::util::{normal_tensor, rng_for, tensor_digest};

pub struct ToyDecoder {
    config: BackendConfig,
    /// `[pixels, feat + tail]`
    matrix: Arc<Tensor>,
    /// `[feat + tail, pixels]`
    pinv: Arc<Tensor>,
    /// `[k * latent_dim, feat]`, synthesises the head latents the decoder ignores.
    head: Arc<Tensor>,
}

fn upsample_nearest2(x: &Tensor) -> Tensor {
    let [c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    Tensor::from_fn(&[c, 2 * h, 2 * w], |i| {
        let ch = i / (4 * h * w);
        let y = (i / (2 * w)) % (2 * h);
        let xx = i % (2 * w);
        x.data()[(ch * h + y / 2) * w + xx / 2]
    })
}

impl ToyDecoder {
    pub fn new(config: &BackendConfig) -> Result<Self> {
        let mut rng = rng_for(config.seed, "toy-decoder", 0);
        let c = config.feat_channels;
        let stages = (config.image_size / config.feat_h).trailing_zeros() as usize;
        let kernels: Vec<Tensor> = (0..stages)
            .map(|s| {
                let out_c = if s + 1 == stages { 3 } else { c };
                normal_tensor(&mut rng, &[out_c, c, 3, 3], 1.0 / (9.0 * c as f64).sqrt())
            })
            .collect();
        let pixels = 3 * config.image_size * config.image_size;
        let feat = c * config.feat_h * config.feat_w;
        let tail = config.tail_layers() * config.latent_dim;
        let style = normal_tensor(&mut rng, &[pixels, tail], 0.05);

        let decode_features = |f: Tensor| -> Tensor {
            let mut x = f;
            for k in &kernels {
                x = conv2d_direct(&upsample_nearest2(&x), k, None, 1, 1);
            }
            x
        };
        let cols = feat + tail;
        let mut m = DMatrix::<f64>::zeros(pixels, cols);
        for j in 0..feat {
            let mut basis = Tensor::zeros(&config.feat_shape());
            basis.data_mut()[j] = 1.0;
            let img = decode_features(basis);
            for (i, v) in img.data().iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        for j in 0..tail {
            for i in 0..pixels {
                m[(i, feat + j)] = style.data()[i * tail + j];
            }
        }
        let gram = m.transpose() * &m;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Config("toy decoder is not injective for this configuration".into()))?;
        let pinv = chol.solve(&m.transpose());

        let head = normal_tensor(
            &mut rng,
            &[config.injection_layer_k * config.latent_dim, feat],
            1.0 / (feat as f64).sqrt(),
        );
        let to_row_major = |mat: &DMatrix<f64>| -> Tensor {
            Tensor::from_fn(&[mat.nrows(), mat.ncols()], |i| mat[(i / mat.ncols(), i % mat.ncols())])
        };
        Ok(Self {
            config: config.clone(),
            matrix: Arc::new(to_row_major(&m)),
            pinv: Arc::new(to_row_major(&pinv)),
            head: Arc::new(head),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Dense decoder matrix `[pixels, feat + tail]`.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    fn digest(&self) -> String {
        tensor_digest([self.matrix.as_ref(), self.pinv.as_ref(), self.head.as_ref()])
    }

    fn feat_len(&self) -> usize {
        self.config.feat_channels * self.config.feat_h * self.config.feat_w
    }

    fn tail_len(&self) -> usize {
        self.config.tail_layers() * self.config.latent_dim
    }
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub struct ToyGenerator {
    decoder: Arc<ToyDecoder>,
}

impl ToyGenerator {
    pub fn new(decoder: Arc<ToyDecoder>) -> Self {
        Self { decoder }
    }
}

impl Generator for ToyGenerator {
    fn synthesize(&self, features: &FeatureMap, w_tail: &LatentCode) -> Result<ImageTensor> {
        let cfg = &self.decoder.config;
        if features.shape() != cfg.feat_shape() {
            return Err(Error::ShapeMismatch(format!(
                "feature map {:?}, expected {:?}",
                features.shape(),
                cfg.feat_shape()
            )));
        }
        if w_tail.shape() != [cfg.tail_layers(), cfg.latent_dim] {
            return Err(Error::ShapeMismatch(format!(
                "tail latents {:?}, expected [{}, {}]",
                w_tail.shape(),
                cfg.tail_layers(),
                cfg.latent_dim
            )));
        }
        let mut input = features.data().to_vec();
        input.extend_from_slice(w_tail.data());
        let px = matvec(&self.decoder.matrix, &input);
        ImageTensor::new(3, cfg.image_size, cfg.image_size, px)
    }

    fn synthesize_tape(&self, tape: &mut Tape, features: Var, w_tail: Var) -> Result<Var> {
        let cfg = &self.decoder.config;
        let n = tape.shape(features)[0];
        if tape.value(features).len() != n * self.decoder.feat_len()
            || tape.value(w_tail).len() != n * self.decoder.tail_len()
        {
            return Err(Error::ShapeMismatch(format!(
                "synthesis inputs {:?} / {:?}",
                tape.shape(features),
                tape.shape(w_tail)
            )));
        }
        let f = tape.reshape(features, &[n, self.decoder.feat_len()]);
        let w = tape.reshape(w_tail, &[n, self.decoder.tail_len()]);
        let joint = tape.concat1(f, w);
        let px = tape.matmul_fixed(joint, self.decoder.matrix.clone());
        Ok(tape.reshape(px, &[n, 3, cfg.image_size, cfg.image_size]))
    }

    fn parameter_digest(&self) -> String {
        self.decoder.digest()
    }
}

pub struct ToyEncoder {
    decoder: Arc<ToyDecoder>,
}

impl ToyEncoder {
    pub fn new(decoder: Arc<ToyDecoder>) -> Self {
        Self { decoder }
    }
}

impl StyleFeatureEncoder for ToyEncoder {
    fn encode(&self, image: &ImageTensor) -> Result<(LatentCode, FeatureMap)> {
        let cfg = &self.decoder.config;
        if image.shape() != cfg.image_shape() {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {:?}, got {:?}",
                cfg.image_shape(),
                image.shape()
            )));
        }
        let code = matvec(&self.decoder.pinv, image.data());
        let (feat, tail) = code.split_at(self.decoder.feat_len());
        let head = matvec(&self.decoder.head, feat);
        let mut w = head;
        w.extend_from_slice(tail);
        let w = LatentCode::from_tensor(Tensor::new(vec![cfg.latent_layers, cfg.latent_dim], w))?;
        let f = FeatureMap::from_tensor(Tensor::new(cfg.feat_shape().to_vec(), feat.to_vec()))?;
        Ok((w, f))
    }

    fn parameter_digest(&self) -> String {
        self.decoder.digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn setup() -> (ToyEncoder, ToyGenerator, BackendConfig) {
        let cfg = BackendConfig::toy();
        let dec = Arc::new(ToyDecoder::new(&cfg).unwrap());
        (ToyEncoder::new(dec.clone()), ToyGenerator::new(dec), cfg)
    }

    fn random_code(cfg: &BackendConfig, seed: u64) -> (FeatureMap, LatentCode) {
        let mut rng = rng_for(seed, "code", 0);
        let f = FeatureMap::from_tensor(normal_tensor(&mut rng, &cfg.feat_shape(), 0.3)).unwrap();
        let w = LatentCode::from_tensor(normal_tensor(&mut rng, &[cfg.tail_layers(), cfg.latent_dim], 0.3)).unwrap();
        (f, w)
    }

    #[test]
    fn encode_inverts_synthesize_on_the_range() {
        let (enc, gen, cfg) = setup();
        for seed in 0..5 {
            let (f, w) = random_code(&cfg, seed);
            let img = gen.synthesize(&f, &w).unwrap();
            let (w2, f2) = enc.encode(&img).unwrap();
            assert!(f2.tensor().max_abs_diff(f.tensor()) < 1e-8);
            assert!(w2.tail(cfg.injection_layer_k).unwrap().tensor().max_abs_diff(w.tensor()) < 1e-8);
            let again = gen.synthesize(&f2, &w2.tail(cfg.injection_layer_k).unwrap()).unwrap();
            assert!(again.tensor().max_abs_diff(img.tensor()) < 1e-4);
        }
    }

    #[test]
    fn decoder_is_affine_in_its_inputs() {
        let (_, gen, cfg) = setup();
        let (f1, w1) = random_code(&cfg, 10);
        let (f2, w2) = random_code(&cfg, 11);
        let a = 0.3;
        let mix = |x: &Tensor, y: &Tensor| x.zip_map(y, |p, q| a * p + (1.0 - a) * q);
        let fm = FeatureMap::from_tensor(mix(f1.tensor(), f2.tensor())).unwrap();
        let wm = LatentCode::from_tensor(mix(w1.tensor(), w2.tensor())).unwrap();
        let lhs = gen.synthesize(&fm, &wm).unwrap();
        let rhs = mix(gen.synthesize(&f1, &w1).unwrap().tensor(), gen.synthesize(&f2, &w2).unwrap().tensor());
        assert!(lhs.tensor().max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let (enc, gen, cfg) = setup();
        let small = ImageTensor::new(3, 8, 8, vec![0.0; 192]).unwrap();
        assert!(matches!(enc.encode(&small), Err(Error::ShapeMismatch(_))));
        let (f, _) = random_code(&cfg, 1);
        let bad_w = LatentCode::from_tensor(Tensor::zeros(&[3, cfg.latent_dim])).unwrap();
        assert!(matches!(gen.synthesize(&f, &bad_w), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_image_encodes_to_finite_code() {
        let (enc, _, cfg) = setup();
        let zero = ImageTensor::new(3, cfg.image_size, cfg.image_size, vec![0.0; 768]).unwrap();
        let (w, f) = enc.encode(&zero).unwrap();
        assert!(w.tensor().is_finite() && f.tensor().is_finite());
        assert_eq!(w.shape(), &[4, 8]);
        assert_eq!(f.shape(), &[8, 8, 8]);
    }

    #[test]
    fn tape_synthesis_matches_direct() {
        let (_, gen, cfg) = setup();
        let (f, w) = random_code(&cfg, 3);
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::stack(&[f.tensor(), f.tensor()]));
        let wv = tape.constant(Tensor::stack(&[w.tensor(), w.tensor()]));
        let out = gen.synthesize_tape(&mut tape, fv, wv).unwrap();
        let direct = gen.synthesize(&f, &w).unwrap();
        for img in tape.value(out).unstack() {
            assert!(img.max_abs_diff(direct.tensor()) < 1e-12);
        }
    }
}
