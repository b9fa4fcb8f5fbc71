//! Synthetic identity world built on the linear toy backends.
//!
//! An identity is a bounded vector `z`; its layer-k feature map is `Φ z` for
//! a fixed smooth basis `Φ`, and its document image is the toy generator's
//! output for that map with a fixed tail style. Document images therefore lie
//! exactly in the generator's range. Live captures add a global illumination
//! offset and pixel noise.

mod corpus;
mod manifest;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use corpus::{build_corpus, calibrate_toy_threshold, Corpus, CorpusIdentity, EvalPair, MorphEntry, Pairing, Split};
pub use manifest::{load_corpus, write_corpus};

use crate::backends::Backends;
use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor, LatentCode};
use crate::util::{normal_tensor, rng_for, smooth_planes};

/// Peak absolute pixel value any document render can reach.
const RENDER_BOUND: f64 = 0.85;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyIdentity {
    pub id: String,
    pub z: Vec<f64>,
}

/// Identity with coordinates uniform in `[-1, 1]`.
pub fn sample_identity(rng: &mut ChaCha8Rng, id_dim: usize, id: impl Into<String>) -> ToyIdentity {
    ToyIdentity { id: id.into(), z: (0..id_dim).map(|_| rng.random_range(-1.0..=1.0)).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptureDomain {
    Document,
    Live,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureParams {
    pub domain: CaptureDomain,
    pub noise_sigma: f64,
    /// Brightness offset added to every pixel.
    pub illum_shift: f64,
}

impl CaptureParams {
    pub fn document() -> Self {
        Self { domain: CaptureDomain::Document, noise_sigma: 0.0, illum_shift: 0.0 }
    }

    pub fn live(noise_sigma: f64, illum_shift: f64) -> Self {
        Self { domain: CaptureDomain::Live, noise_sigma, illum_shift }
    }

    /// A live capture with the shift drawn uniformly from `±cfg.illum_shift`.
    pub fn sample_live(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Self {
        let shift = if cfg.illum_shift > 0.0 { rng.random_range(-cfg.illum_shift..=cfg.illum_shift) } else { 0.0 };
        Self::live(cfg.noise_sigma, shift)
    }
}

/// Renderer for one backend configuration.
pub struct ToyWorld {
    pub backends: Backends,
    /// `[feat_len, id_dim]`
    basis: Tensor,
    style: LatentCode,
    id_dim: usize,
}

impl ToyWorld {
    pub fn new(backends: Backends, id_dim: usize) -> Result<Self> {
        let cfg = &backends.config;
        let [c, h, w] = cfg.feat_shape();
        let feat = c * h * w;
        let mut rng = rng_for(cfg.seed, "toy-world", id_dim as u64);
        // one smooth feature map per identity coordinate, stored column-wise
        let mut maps = normal_tensor(&mut rng, &[id_dim, c, h, w], 1.0);
        smooth_planes(maps.data_mut(), id_dim * c, h, w, 1);
        let mut basis = Tensor::from_fn(&[feat, id_dim], |i| maps.data()[(i % id_dim) * feat + i / id_dim]);
        let tail = cfg.tail_layers();
        // Neutral tail style, so renders share no identity-independent component.
        let style = LatentCode::from_tensor(Tensor::zeros(&[tail, cfg.latent_dim]))?;

        // Scale Φ so that |pixel| <= RENDER_BOUND for every z in the cube.
        let zero = FeatureMap::from_tensor(Tensor::zeros(&cfg.feat_shape()))?;
        let offset = backends.generator.synthesize(&zero, &style)?;
        let mut columns = Vec::with_capacity(id_dim);
        for j in 0..id_dim {
            let f = Tensor::from_fn(&cfg.feat_shape(), |i| basis.data()[i * id_dim + j]);
            let img = backends.generator.synthesize(&FeatureMap::from_tensor(f)?, &style)?;
            columns.push(img.tensor().zip_map(offset.tensor(), |a, b| a - b));
        }
        let peak = (0..offset.data().len())
            .map(|p| offset.data()[p].abs() + columns.iter().map(|col| col.data()[p].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let max_offset = offset.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_offset >= RENDER_BOUND {
            return Err(Error::Config("toy style offset saturates the pixel range".into()));
        }
        let spread = peak - max_offset;
        let scale = (RENDER_BOUND - max_offset) / spread;
        basis.data_mut().iter_mut().for_each(|v| *v *= scale);
        Ok(Self { backends, basis, style, id_dim })
    }

    pub fn id_dim(&self) -> usize {
        self.id_dim
    }

    /// Tail style shared by every document render.
    pub fn style(&self) -> &LatentCode {
        &self.style
    }

    pub fn features(&self, identity: &ToyIdentity) -> Result<FeatureMap> {
        if identity.z.len() != self.id_dim {
            return Err(Error::ShapeMismatch(format!("identity dim {} vs {}", identity.z.len(), self.id_dim)));
        }
        let shape = self.backends.config.feat_shape();
        let d = self.id_dim;
        let f = Tensor::from_fn(&shape, |i| {
            self.basis.data()[i * d..(i + 1) * d].iter().zip(&identity.z).map(|(b, z)| b * z).sum()
        });
        FeatureMap::from_tensor(f)
    }

    /// Document render plus capture effects; `rng` drives the noise only.
    pub fn render(&self, identity: &ToyIdentity, params: &CaptureParams, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
        let clean = self.backends.generator.synthesize(&self.features(identity)?, &self.style)?;
        if params.domain == CaptureDomain::Document && params.noise_sigma == 0.0 && params.illum_shift == 0.0 {
            return Ok(clean);
        }
        let noise = (params.noise_sigma > 0.0).then(|| Normal::new(0.0, params.noise_sigma).expect("sigma checked"));
        let data = clean
            .data()
            .iter()
            .map(|v| {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                (v + params.illum_shift + n).clamp(-1.0, 1.0)
            })
            .collect();
        ImageTensor::new(clean.channels(), clean.height(), clean.width(), data)
    }
}

fn same_shape(a: &ImageTensor, c: &ImageTensor) -> Result<()> {
    if a.shape() != c.shape() {
        return Err(Error::ShapeMismatch(format!("morph inputs {:?} vs {:?}", a.shape(), c.shape())));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::RangeError(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `α·a + (1−α)·c`, clipped to `[-1, 1]`.
pub fn morph_blend(img_a: &ImageTensor, img_c: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    same_shape(img_a, img_c)?;
    check_alpha(alpha)?;
    ImageTensor::from_tensor(img_a.tensor().zip_map(img_c.tensor(), |a, c| (alpha * a + (1.0 - alpha) * c).clamp(-1.0, 1.0)))
}

/// Blend inside `mask` (row-major `H x W`, true on the inner region); the
/// outer region is copied from `img_a`.
pub fn morph_splice(img_a: &ImageTensor, img_c: &ImageTensor, alpha: f64, mask: &[bool]) -> Result<ImageTensor> {
    same_shape(img_a, img_c)?;
    check_alpha(alpha)?;
    let plane = img_a.height() * img_a.width();
    if mask.len() != plane {
        return Err(Error::ShapeMismatch(format!("mask of {} cells for {plane} pixels", mask.len())));
    }
    let blend = morph_blend(img_a, img_c, alpha)?;
    let data = (0..img_a.data().len())
        .map(|i| if mask[i % plane] { blend.data()[i] } else { img_a.data()[i] })
        .collect();
    ImageTensor::new(img_a.channels(), img_a.height(), img_a.width(), data)
}

/// Centred square covering about `area` of an `h x w` grid.
pub fn centered_square_mask(h: usize, w: usize, area: f64) -> Vec<bool> {
    let sh = ((h as f64) * area.sqrt()).round() as usize;
    let sw = ((w as f64) * area.sqrt()).round() as usize;
    let (y0, x0) = ((h - sh.min(h)) / 2, (w - sw.min(w)) / 2);
    (0..h * w).map(|i| (y0..y0 + sh).contains(&(i / w)) && (x0..x0 + sw).contains(&(i % w))).collect()
}

/// Missing contributor of a blend morph in the linear world:
/// `(F_morph − (1−α)·F_ref) / α`.
pub fn analytic_demorph_oracle(f_morph: &FeatureMap, f_ref: &FeatureMap, alpha: f64) -> Result<FeatureMap> {
    if alpha == 0.0 {
        return Err(Error::DivisionDomain);
    }
    if f_morph.shape() != f_ref.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", f_morph.shape(), f_ref.shape())));
    }
    FeatureMap::from_tensor(f_morph.tensor().zip_map(f_ref.tensor(), |m, r| (m - (1.0 - alpha) * r) / alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionKind {
    Brightness,
    GaussianNoise,
    Downsample,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(Self::Brightness),
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "downsample" => Ok(Self::Downsample),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Brightness offset per severity level.
pub const BRIGHTNESS_STEP: f64 = 0.1;
/// Noise standard deviation per severity level.
pub const NOISE_STEP: f64 = 0.03;

/// Applies a corruption; severity 0 returns the input. Brightness and noise
/// scale linearly with severity; downsampling halves both sides once and
/// upsamples back.
pub fn corrupt(image: &ImageTensor, kind: CorruptionKind, severity: u32, seed: u64) -> Result<ImageTensor> {
    if severity == 0 {
        return Ok(image.clone());
    }
    let s = severity as f64;
    let out = match kind {
        CorruptionKind::Brightness => image.tensor().map(|v| (v + BRIGHTNESS_STEP * s).clamp(-1.0, 1.0)),
        CorruptionKind::GaussianNoise => {
            let mut rng = rng_for(seed, "corrupt-noise", 0);
            let noise = normal_tensor(&mut rng, image.shape(), NOISE_STEP * s);
            image.tensor().zip_map(&noise, |v, n| (v + n).clamp(-1.0, 1.0))
        }
        CorruptionKind::Downsample => {
            let (h, w) = (image.height(), image.width());
            let small = crate::backends::resize_bilinear(image, (h / 2).max(1), (w / 2).max(1))?;
            crate::backends::resize_bilinear(&small, h, w)?.into_tensor().map(|v| v.clamp(-1.0, 1.0))
        }
    };
    ImageTensor::from_tensor(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::similarity;
    use crate::config::BackendConfig;

    fn world() -> ToyWorld {
        ToyWorld::new(Backends::toy(&BackendConfig::toy()).unwrap(), 8).unwrap()
    }

    fn ident(seed: u64) -> ToyIdentity {
        sample_identity(&mut rng_for(seed, "id", 0), 8, format!("id{seed}"))
    }

    #[test]
    fn same_seed_same_identity() {
        assert_eq!(ident(3), ident(3));
        assert!(ident(3).z.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn document_renders_are_in_range_and_invertible() {
        let w = world();
        let mut rng = rng_for(0, "r", 0);
        let extreme = ToyIdentity { id: "x".into(), z: vec![1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0] };
        for id in [ident(1), ident(2), extreme] {
            let img = w.render(&id, &CaptureParams::document(), &mut rng).unwrap();
            assert!(img.data().iter().all(|v| v.abs() <= RENDER_BOUND + 1e-12));
            let (lat, f) = w.backends.encoder.encode(&img).unwrap();
            assert!(f.tensor().max_abs_diff(w.features(&id).unwrap().tensor()) < 1e-8);
            let back = w.backends.generator.synthesize(&f, &lat.tail(2).unwrap()).unwrap();
            assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-4);
        }
    }

    #[test]
    fn noiseless_renders_repeat_exactly() {
        let w = world();
        let a = w.render(&ident(4), &CaptureParams::live(0.0, 0.0), &mut rng_for(1, "a", 0)).unwrap();
        let b = w.render(&ident(4), &CaptureParams::live(0.0, 0.0), &mut rng_for(2, "b", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blend_is_linear_in_features() {
        let w = world();
        let mut rng = rng_for(0, "r", 0);
        let (a, c) = (ident(5), ident(6));
        let ia = w.render(&a, &CaptureParams::document(), &mut rng).unwrap();
        let ic = w.render(&c, &CaptureParams::document(), &mut rng).unwrap();
        assert_eq!(morph_blend(&ia, &ic, 1.0).unwrap(), ia);
        assert_eq!(morph_blend(&ia, &ic, 0.0).unwrap(), ic);
        let m = morph_blend(&ia, &ic, 0.5).unwrap();
        let (_, fm) = w.backends.encoder.encode(&m).unwrap();
        let (fa, fc) = (w.features(&a).unwrap(), w.features(&c).unwrap());
        let expect = fa.tensor().zip_map(fc.tensor(), |x, y| 0.5 * x + 0.5 * y);
        assert!(fm.tensor().max_abs_diff(&expect) < 1e-5);
        let rec = analytic_demorph_oracle(&fm, &fc, 0.5).unwrap();
        assert!(rec.tensor().max_abs_diff(fa.tensor()) < 1e-6);
        assert!(matches!(analytic_demorph_oracle(&fm, &fc, 0.0), Err(Error::DivisionDomain)));
        let restored = w.backends.generator.synthesize(&rec, w.style()).unwrap();
        let frs = &w.backends.frs;
        assert!(similarity(&frs.embed(&restored).unwrap(), &frs.embed(&ia).unwrap()) > 0.999);
    }

    #[test]
    fn splice_keeps_outer_region() {
        let w = world();
        let mut rng = rng_for(0, "r", 0);
        let ia = w.render(&ident(7), &CaptureParams::document(), &mut rng).unwrap();
        let ic = w.render(&ident(8), &CaptureParams::document(), &mut rng).unwrap();
        let mask = centered_square_mask(16, 16, 0.5);
        let count = mask.iter().filter(|&&m| m).count();
        assert!((count as f64 / 256.0 - 0.5).abs() < 0.1);
        let s = morph_splice(&ia, &ic, 0.5, &mask).unwrap();
        for i in 0..768 {
            if !mask[i % 256] {
                assert_eq!(s.data()[i], ia.data()[i]);
            }
        }
        assert_eq!(morph_splice(&ia, &ic, 0.5, &[true; 256]).unwrap(), morph_blend(&ia, &ic, 0.5).unwrap());
        assert_eq!(morph_splice(&ia, &ic, 0.5, &[false; 256]).unwrap(), ia);
        assert!(matches!(morph_splice(&ia, &ic, 0.5, &[true; 10]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corruptions() {
        let img = ImageTensor::new(3, 16, 16, (0..768).map(|i| ((i % 37) as f64 / 37.0 - 0.5) * 0.8).collect()).unwrap();
        for kind in [CorruptionKind::Brightness, CorruptionKind::GaussianNoise, CorruptionKind::Downsample] {
            assert_eq!(corrupt(&img, kind, 0, 1).unwrap(), img);
            assert_eq!(corrupt(&img, kind, 2, 1).unwrap(), corrupt(&img, kind, 2, 1).unwrap());
        }
        let b = corrupt(&img, CorruptionKind::Brightness, 1, 0).unwrap();
        let shift = (b.tensor().sum() - img.tensor().sum()) / 768.0;
        assert!((shift - BRIGHTNESS_STEP).abs() < 1e-12);
        assert_eq!(corrupt(&img, CorruptionKind::Downsample, 1, 0).unwrap().shape(), img.shape());
        assert!(matches!("jpeg".parse::<CorruptionKind>(), Err(Error::UnknownKind(_))));
    }
}
