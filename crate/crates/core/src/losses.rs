//! Training objectives. Every term is a per-sample value averaged over the
//! batch. The recorded (`*_tape`) forms take batched vars `[N, ...]`; the
//! plain forms evaluate a single sample through the same code.

use crate::autodiff::{softplus, Tape, Var};
use crate::backends::{Discriminator, FaceRecognizer, PerceptualNet};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, ImageTensor, LossWeights};

/// Standard five-scale MS-SSIM exponents, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Pixel range of `[-1, 1]` images.
const DATA_RANGE: f64 = 2.0;
const SSIM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsimParams {
    pub scales: usize,
    pub window: usize,
    pub sigma: f64,
}

impl MsSsimParams {
    pub fn from_config(cfg: &LossConfig) -> Self {
        Self { scales: cfg.ms_ssim_scales, window: cfg.ms_ssim_window, sigma: cfg.ms_ssim_sigma }
    }

    /// The first `scales` standard exponents, renormalised to sum to one.
    pub fn weights(&self) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..self.scales.min(5)];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }

    pub fn check(&self, size: usize) -> Result<()> {
        if self.scales == 0 || self.scales > MS_SSIM_WEIGHTS.len() || size < self.window << (self.scales - 1) {
            return Err(Error::TooSmallForScales { size, window: self.window, scales: self.scales });
        }
        Ok(())
    }

    /// Normalised 2-D Gaussian window `[window, window]`.
    pub fn kernel(&self) -> Tensor {
        let k = self.window;
        let c = (k as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = g.iter().sum();
        Tensor::from_fn(&[k, k], |i| g[i / k] * g[i % k] / (s * s))
    }
}

/// Values of every term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l2: f64,
    pub ms_ssim: f64,
    pub lpips: f64,
    pub id: f64,
    pub inv_id: f64,
    pub feat: f64,
    pub adv: f64,
    /// Weighted image-level composite.
    pub im: f64,
    pub total: f64,
    pub disc: f64,
}

impl LossReport {
    /// Fills `im` and `total` from the sub-terms and the pass weights.
    pub fn compose(mut self, w: &LossWeights) -> Self {
        self.im = w.lambda_l2 * self.l2 + w.lambda_lpips * self.lpips + w.lambda_ms_ssim * self.ms_ssim + w.lambda_id * self.id;
        self.total = self.im + w.lambda_inv_id * self.inv_id + w.lambda_feat * self.feat + w.lambda_adv * self.adv;
        self
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

fn batch_of(img: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(img.shape());
    img.clone().reshape(&s)
}

/// Mean squared difference, `[N, ...] -> scalar`.
pub fn l2_tape(tape: &mut Tape, out: Var, gt: Var) -> Result<Var> {
    same_shape(tape, out, gt)?;
    let d = tape.sub(out, gt);
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// `1 - MS-SSIM`, averaged over channels and batch.
pub fn ms_ssim_loss_tape(tape: &mut Tape, out: Var, gt: Var, p: &MsSsimParams) -> Result<Var> {
    same_shape(tape, out, gt)?;
    let shape = tape.shape(out).to_vec();
    p.check(shape[2].min(shape[3]))?;
    let kernel = p.kernel();
    let weights = p.weights();
    let c1 = (0.01 * DATA_RANGE).powi(2);
    let c2 = (0.03 * DATA_RANGE).powi(2);
    let (mut x, mut y) = (out, gt);
    let mut acc: Option<Var> = None;
    for (s, &w) in weights.iter().enumerate() {
        let mu_x = tape.depthwise_fixed(x, &kernel);
        let mu_y = tape.depthwise_fixed(y, &kernel);
        let xx = tape.square(x);
        let yy = tape.square(y);
        let xy = tape.mul(x, y);
        let e_xx = tape.depthwise_fixed(xx, &kernel);
        let e_yy = tape.depthwise_fixed(yy, &kernel);
        let e_xy = tape.depthwise_fixed(xy, &kernel);
        let mu_xx = tape.square(mu_x);
        let mu_yy = tape.square(mu_y);
        let mu_xy = tape.mul(mu_x, mu_y);
        let var_x = tape.sub(e_xx, mu_xx);
        let var_y = tape.sub(e_yy, mu_yy);
        let cov = tape.sub(e_xy, mu_xy);
        let cs_num = tape.scale(cov, 2.0);
        let cs_num = tape.add_scalar(cs_num, c2);
        let cs_den = tape.add(var_x, var_y);
        let cs_den = tape.add_scalar(cs_den, c2);
        let cs_map = tape.div(cs_num, cs_den);
        let term_map = if s + 1 == weights.len() {
            let l_num = tape.scale(mu_xy, 2.0);
            let l_num = tape.add_scalar(l_num, c1);
            let l_den = tape.add(mu_xx, mu_yy);
            let l_den = tape.add_scalar(l_den, c1);
            let lum = tape.div(l_num, l_den);
            tape.mul(lum, cs_map)
        } else {
            cs_map
        };
        let ms = tape.shape(term_map).to_vec();
        let flat = tape.reshape(term_map, &[ms[0] * ms[1], ms[2] * ms[3]]);
        let per_channel = tape.mean_rows(flat);
        let floored = tape.clamp_min(per_channel, SSIM_FLOOR);
        let powed = tape.powf(floored, w);
        acc = Some(match acc {
            None => powed,
            Some(a) => tape.mul(a, powed),
        });
        if s + 1 < weights.len() {
            x = tape.avg_pool2(x);
            y = tape.avg_pool2(y);
        }
    }
    let m = tape.mean_all(acc.expect("at least one scale"));
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Sum over perceptual stages of the mean squared feature difference.
pub fn lpips_tape(tape: &mut Tape, out: Var, gt: Var, net: &dyn PerceptualNet) -> Result<Var> {
    same_shape(tape, out, gt)?;
    let fo = net.features_tape(tape, out);
    let fg = net.features_tape(tape, gt);
    let mut acc: Option<Var> = None;
    for (a, b) in fo.into_iter().zip(fg) {
        let d = tape.sub(a, b);
        let sq = tape.square(d);
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            None => m,
            Some(s) => tape.add(s, m),
        });
    }
    acc.ok_or_else(|| Error::ShapeMismatch("perceptual net produced no stages".into()))
}

/// Per-sample similarities `[N]` between two image batches.
pub fn similarity_tape(tape: &mut Tape, a: Var, b: Var, frs: &dyn FaceRecognizer) -> Var {
    let ea = frs.embed_tape(tape, a);
    let eb = frs.embed_tape(tape, b);
    tape.row_dot(ea, eb)
}

/// `1 - S(out, gt)`.
pub fn id_tape(tape: &mut Tape, out: Var, gt: Var, frs: &dyn FaceRecognizer) -> Result<Var> {
    same_shape(tape, out, gt)?;
    let s = similarity_tape(tape, out, gt, frs);
    let m = tape.mean_all(s);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `max(0, S(out, ref) - m)`.
pub fn inverse_id_tape(tape: &mut Tape, out: Var, reference: Var, margin: f64, frs: &dyn FaceRecognizer) -> Result<Var> {
    same_shape(tape, out, reference)?;
    let s = similarity_tape(tape, out, reference, frs);
    let shifted = tape.add_scalar(s, -margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean_all(hinge))
}

/// Mean squared difference between feature maps.
pub fn feature_tape(tape: &mut Tape, f_out: Var, f_gt: Var) -> Result<Var> {
    l2_tape(tape, f_out, f_gt)
}

/// Non-saturating generator loss `softplus(-D(out))`.
pub fn adversarial_tape(tape: &mut Tape, out: Var, disc: &Discriminator) -> Var {
    let logits = disc.logit_tape(tape, out);
    let neg = tape.scale(logits, -1.0);
    let sp = tape.softplus(neg);
    tape.mean_all(sp)
}

fn eval_pair(out: &Tensor, gt: &Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    if out.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", out.shape(), gt.shape())));
    }
    let mut tape = Tape::new();
    let o = tape.constant(batch_of(out));
    let g = tape.constant(batch_of(gt));
    let v = f(&mut tape, o, g)?;
    Ok(tape.value(v).item())
}

pub fn l2_loss(out: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    eval_pair(out.tensor(), gt.tensor(), l2_tape)
}

pub fn ms_ssim_loss(out: &ImageTensor, gt: &ImageTensor, p: &MsSsimParams) -> Result<f64> {
    eval_pair(out.tensor(), gt.tensor(), |t, a, b| ms_ssim_loss_tape(t, a, b, p))
}

pub fn lpips_loss(out: &ImageTensor, gt: &ImageTensor, net: &dyn PerceptualNet) -> Result<f64> {
    eval_pair(out.tensor(), gt.tensor(), |t, a, b| lpips_tape(t, a, b, net))
}

pub fn id_loss(out: &ImageTensor, gt: &ImageTensor, frs: &dyn FaceRecognizer) -> Result<f64> {
    eval_pair(out.tensor(), gt.tensor(), |t, a, b| id_tape(t, a, b, frs))
}

pub fn inverse_id_loss(out: &ImageTensor, reference: &ImageTensor, margin: f64, frs: &dyn FaceRecognizer) -> Result<f64> {
    eval_pair(out.tensor(), reference.tensor(), |t, a, b| inverse_id_tape(t, a, b, margin, frs))
}

pub fn feature_loss(f_out: &FeatureMap, f_gt: &FeatureMap) -> Result<f64> {
    eval_pair(f_out.tensor(), f_gt.tensor(), feature_tape)
}

pub fn adversarial_generator_loss(out: &ImageTensor, disc: &Discriminator) -> f64 {
    softplus(-disc.logit(out))
}

/// `softplus(-D(gt)) + softplus(D(out)) + γ/2 ‖∇D(gt)‖²` for one sample.
pub fn discriminator_loss(gt: &ImageTensor, out: &ImageTensor, gamma: f64, disc: &Discriminator) -> f64 {
    disc.loss_and_grads(&[gt.tensor()], &[out.tensor()], gamma).0.total
}

/// Batched inputs of the generator objective. Images are `[N,3,H,W]`,
/// `f_gt` is the frozen encoder's feature map of each ground truth.
pub struct LossInputs {
    pub out: Var,
    pub f_out: Var,
    pub gt: Var,
    pub reference: Var,
    pub f_gt: Var,
}

/// Weighted objective of one pass; returns the scalar var to differentiate
/// and the report (with `disc` left at zero).
pub fn total_loss_tape(
    tape: &mut Tape,
    inputs: &LossInputs,
    weights: &LossWeights,
    loss_cfg: &LossConfig,
    frs: &dyn FaceRecognizer,
    perceptual: &dyn PerceptualNet,
    disc: &Discriminator,
) -> Result<(Var, LossReport)> {
    let p = MsSsimParams::from_config(loss_cfg);
    let terms = [
        l2_tape(tape, inputs.out, inputs.gt)?,
        ms_ssim_loss_tape(tape, inputs.out, inputs.gt, &p)?,
        lpips_tape(tape, inputs.out, inputs.gt, perceptual)?,
        id_tape(tape, inputs.out, inputs.gt, frs)?,
        inverse_id_tape(tape, inputs.out, inputs.reference, weights.margin_m, frs)?,
        feature_tape(tape, inputs.f_out, inputs.f_gt)?,
        adversarial_tape(tape, inputs.out, disc),
    ];
    let w = weights;
    let lambdas = [w.lambda_l2, w.lambda_ms_ssim, w.lambda_lpips, w.lambda_id, w.lambda_inv_id, w.lambda_feat, w.lambda_adv];
    let mut total: Option<Var> = None;
    for (&t, &l) in terms.iter().zip(&lambdas) {
        if l == 0.0 {
            continue;
        }
        let s = tape.scale(t, l);
        total = Some(match total {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.scale(terms[0], 0.0),
    };
    let v = |i: usize| tape.value(terms[i]).item();
    let report = LossReport { l2: v(0), ms_ssim: v(1), lpips: v(2), id: v(3), inv_id: v(4), feat: v(5), adv: v(6), ..Default::default() }
        .compose(weights);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Backends, ToyFrs};
    use crate::config::BackendConfig;
    use crate::util::{normal_tensor, rng_for};

    fn img(seed: u64, std: f64) -> ImageTensor {
        ImageTensor::from_tensor(normal_tensor(&mut rng_for(seed, "img", 0), &[3, 16, 16], std).map(|v| v.clamp(-1.0, 1.0)))
            .unwrap()
    }

    fn toy_params() -> MsSsimParams {
        MsSsimParams { scales: 3, window: 3, sigma: 0.5 }
    }

    #[test]
    fn worked_totals() {
        let ones = LossReport { l2: 1.0, ms_ssim: 1.0, lpips: 1.0, id: 1.0, inv_id: 1.0, feat: 1.0, adv: 1.0, ..Default::default() };
        let m = ones.compose(&LossWeights::morphed_pass());
        assert!((m.im - 3.2).abs() < 1e-12 && (m.total - 3.91).abs() < 1e-12);
        let b = ones.compose(&LossWeights::bona_fide_pass());
        assert!((b.im - 0.32).abs() < 1e-12 && (b.total - 0.34).abs() < 1e-12);
    }

    #[test]
    fn simple_values() {
        let x = img(1, 0.3);
        let shifted = ImageTensor::from_tensor(x.tensor().map(|v| v + 0.1)).unwrap();
        assert!((l2_loss(&x, &shifted).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(l2_loss(&x, &x).unwrap(), 0.0);
        assert!(ms_ssim_loss(&x, &x, &toy_params()).unwrap().abs() < 1e-12);
        let too_many = MsSsimParams { scales: 5, window: 3, sigma: 0.5 };
        assert!(matches!(ms_ssim_loss(&x, &x, &too_many), Err(Error::TooSmallForScales { .. })));
        let frs = ToyFrs::new(&BackendConfig::toy(), 0);
        assert!(id_loss(&x, &x, &frs).unwrap().abs() < 1e-12);
        let neg = ImageTensor::from_tensor(x.tensor().map(|v| -v)).unwrap();
        assert!((id_loss(&x, &neg, &frs).unwrap() - 2.0).abs() < 1e-9);
        assert!((inverse_id_loss(&x, &x, -0.5, &frs).unwrap() - 1.5).abs() < 1e-12);
        assert!(inverse_id_loss(&x, &neg, -0.5, &frs).unwrap().abs() < 1e-12);
    }

    #[test]
    fn adversarial_values() {
        let cfg = BackendConfig::toy();
        let mut disc = Discriminator::new(&cfg);
        for p in disc.params_mut() {
            *p = Tensor::zeros(p.shape());
        }
        let x = img(2, 0.3);
        assert!((adversarial_generator_loss(&x, &disc) - 2f64.ln()).abs() < 1e-12);
        assert!((discriminator_loss(&x, &x, 0.0, &disc) - 2.0 * 2f64.ln()).abs() < 1e-12);
        disc.params_mut()[3] = Tensor::new(vec![1], vec![-30.0]);
        let v = adversarial_generator_loss(&x, &disc);
        assert!((v - (30.0 + (-30f64).exp().ln_1p())).abs() < 1e-12 && v.is_finite());
    }

    #[test]
    fn lpips_grows_with_noise() {
        let backends = Backends::toy(&BackendConfig::toy()).unwrap();
        let x = img(3, 0.3);
        let noise = normal_tensor(&mut rng_for(4, "n", 0), &[3, 16, 16], 1.0);
        let mut last = -1.0;
        for k in 0..10 {
            let y = ImageTensor::from_tensor(x.tensor().zip_map(&noise, |a, n| a + 0.01 * k as f64 * n)).unwrap();
            let v = lpips_loss(&x, &y, backends.perceptual.as_ref()).unwrap();
            assert!(v > last || (k == 0 && v == 0.0));
            last = v;
        }
    }
}
