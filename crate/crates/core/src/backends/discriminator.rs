use crate::autodiff::{softplus, sigmoid, Tape, Var};
use crate::config::BackendConfig;
use crate::tensor::Tensor;
use crate::types::ImageTensor;
use crate::util::{normal_tensor, rng_for, tensor_digest};

/// One-hidden-layer discriminator `logit = v · tanh(W x + b) + c` over the
/// flattened image. Gradients, including those of the R1 penalty, are
/// written out by hand.
#[derive(Clone, Debug)]
pub struct Discriminator {
    /// `[W (hidden x d), b (hidden), v (hidden), c (1)]`
    params: Vec<Tensor>,
}

/// Batch-mean components of the discriminator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscLoss {
    pub real: f64,
    pub fake: f64,
    pub r1: f64,
    pub total: f64,
}

struct Forward {
    h: Vec<f64>,
    logit: f64,
}

impl Discriminator {
    pub fn new(config: &BackendConfig) -> Self {
        let [c, h, w] = config.image_shape();
        let d = c * h * w;
        let hidden = config.disc_hidden;
        let mut rng = rng_for(config.seed, "toy-discriminator", 0);
        let params = vec![
            normal_tensor(&mut rng, &[hidden, d], 1.0 / (d as f64).sqrt()),
            Tensor::zeros(&[hidden]),
            normal_tensor(&mut rng, &[hidden], 1.0 / (hidden as f64).sqrt()),
            Tensor::zeros(&[1]),
        ];
        Self { params }
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].shape()[1]
    }

    fn hidden(&self) -> usize {
        self.params[1].len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn digest(&self) -> String {
        tensor_digest(&self.params)
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let d = self.input_dim();
        let w = self.params[0].data();
        let (b, v, c) = (self.params[1].data(), self.params[2].data(), self.params[3].data()[0]);
        let h: Vec<f64> = (0..self.hidden())
            .map(|i| (w[i * d..(i + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[i]).tanh())
            .collect();
        let logit = h.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + c;
        Forward { h, logit }
    }

    /// `u = v ⊙ (1 - h²)`, the derivative of the logit w.r.t. pre-activations.
    fn pre_grad(&self, f: &Forward) -> Vec<f64> {
        f.h.iter().zip(self.params[2].data()).map(|(h, v)| v * (1.0 - h * h)).collect()
    }

    /// `Wᵀ u`
    fn back_to_input(&self, u: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let w = self.params[0].data();
        let mut g = vec![0.0; d];
        for (i, ui) in u.iter().enumerate() {
            for (gj, wij) in g.iter_mut().zip(&w[i * d..(i + 1) * d]) {
                *gj += ui * wij;
            }
        }
        g
    }

    pub fn logit(&self, image: &ImageTensor) -> f64 {
        self.forward(image.data()).logit
    }

    /// Gradient of the logit w.r.t. the input pixels.
    pub fn input_grad(&self, image: &ImageTensor) -> Tensor {
        let f = self.forward(image.data());
        Tensor::new(image.shape().to_vec(), self.back_to_input(&self.pre_grad(&f)))
    }

    /// Logits of a recorded batch `[N, ...] -> [N]`, differentiable w.r.t.
    /// the images only.
    pub fn logit_tape(&self, tape: &mut Tape, images: Var) -> Var {
        let n = tape.shape(images)[0];
        let d = self.input_dim();
        assert_eq!(tape.value(images).len(), n * d, "discriminator input size");
        let mut logits = Vec::with_capacity(n);
        let mut input_grads = Vec::with_capacity(n * d);
        for x in tape.value(images).data().chunks(d) {
            let f = self.forward(x);
            input_grads.extend(self.back_to_input(&self.pre_grad(&f)));
            logits.push(f.logit);
        }
        tape.custom(&[images], Tensor::new(vec![n], logits), move |g, p, _| {
            let mut gx = input_grads.clone();
            for (row, gi) in gx.chunks_mut(d).zip(g.data()) {
                row.iter_mut().for_each(|v| *v *= gi);
            }
            vec![Tensor::new(p[0].shape().to_vec(), gx)]
        })
    }

    /// Non-saturating discriminator loss with R1 on the real batch,
    /// `mean softplus(-D(real)) + mean softplus(D(fake)) + γ/2 · mean ‖∇D(real)‖²`,
    /// and its parameter gradients in [`Self::params`] order.
    pub fn loss_and_grads(&self, real: &[&Tensor], fake: &[&Tensor], gamma: f64) -> (DiscLoss, Vec<Tensor>) {
        let d = self.input_dim();
        let hidden = self.hidden();
        let mut gw = vec![0.0; hidden * d];
        let mut gb = vec![0.0; hidden];
        let mut gv = vec![0.0; hidden];
        let mut gc = 0.0;
        let mut out = DiscLoss::default();
        let w = self.params[0].data();
        let v = self.params[2].data();

        let nr = real.len().max(1) as f64;
        let nf = fake.len().max(1) as f64;
        let samples = real.iter().map(|x| (x, true)).chain(fake.iter().map(|x| (x, false)));
        for (x, is_real) in samples {
            let x = x.data();
            let f = self.forward(x);
            let u = self.pre_grad(&f);
            let dl = if is_real {
                out.real += softplus(-f.logit) / nr;
                -sigmoid(-f.logit) / nr
            } else {
                out.fake += softplus(f.logit) / nf;
                sigmoid(f.logit) / nf
            };
            for i in 0..hidden {
                let s = dl * u[i];
                gb[i] += s;
                gv[i] += dl * f.h[i];
                for (g, xj) in gw[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *g += s * xj;
                }
            }
            gc += dl;
            if !is_real {
                continue;
            }

            let g = self.back_to_input(&u);
            out.r1 += 0.5 * gamma * g.iter().map(|v| v * v).sum::<f64>() / nr;
            let scale = 0.5 * gamma / nr;
            // (W g)_i
            let wg: Vec<f64> =
                (0..hidden).map(|i| w[i * d..(i + 1) * d].iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
            for i in 0..hidden {
                let h = f.h[i];
                let da = 2.0 * wg[i] * v[i] * (-2.0 * h) * (1.0 - h * h) * scale;
                gb[i] += da;
                gv[i] += 2.0 * wg[i] * (1.0 - h * h) * scale;
                let direct = 2.0 * u[i] * scale;
                for ((gwij, gj), xj) in gw[i * d..(i + 1) * d].iter_mut().zip(&g).zip(x) {
                    *gwij += direct * gj + da * xj;
                }
            }
        }
        out.total = out.real + out.fake + out.r1;
        let grads = vec![
            Tensor::new(vec![hidden, d], gw),
            Tensor::new(vec![hidden], gb),
            Tensor::new(vec![hidden], gv),
            Tensor::new(vec![1], vec![gc]),
        ];
        (out, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Discriminator, Vec<Tensor>) {
        let cfg = BackendConfig { disc_hidden: 6, ..BackendConfig::toy() };
        let mut disc = Discriminator::new(&cfg);
        let mut rng = rng_for(9, "bias", 0);
        disc.params_mut()[1] = normal_tensor(&mut rng, &[6], 0.5);
        disc.params_mut()[3] = Tensor::new(vec![1], vec![0.2]);
        let imgs = (0..4).map(|s| normal_tensor(&mut rng_for(s, "x", 0), &[3, 16, 16], 0.5)).collect();
        (disc, imgs)
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let (disc, imgs) = setup();
        let x = ImageTensor::from_tensor(imgs[0].clone()).unwrap();
        let g = disc.input_grad(&x);
        for idx in [0, 100, 500, 767] {
            let h = 1e-5;
            let mut p = x.tensor().clone();
            p.data_mut()[idx] += h;
            let mut m = x.tensor().clone();
            m.data_mut()[idx] -= h;
            let fd = (disc.logit(&ImageTensor::from_tensor(p).unwrap())
                - disc.logit(&ImageTensor::from_tensor(m).unwrap()))
                / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {}", g.data()[idx]);
        }
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let (disc, imgs) = setup();
        let real = [&imgs[0], &imgs[1]];
        let fake = [&imgs[2], &imgs[3]];
        let (_, grads) = disc.loss_and_grads(&real, &fake, 10.0);
        for (pi, probes) in [(0usize, vec![0, 37, 2000, 4000]), (1, vec![0, 5]), (2, vec![1, 4]), (3, vec![0])] {
            for idx in probes {
                let h = 1e-6;
                let mut p = disc.clone();
                p.params_mut()[pi].data_mut()[idx] += h;
                let mut m = disc.clone();
                m.params_mut()[pi].data_mut()[idx] -= h;
                let fd = (p.loss_and_grads(&real, &fake, 10.0).0.total - m.loss_and_grads(&real, &fake, 10.0).0.total)
                    / (2.0 * h);
                let an = grads[pi].data()[idx];
                assert!((fd - an).abs() < 1e-6 + 1e-4 * fd.abs(), "param {pi}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn tape_logits_match() {
        let (disc, imgs) = setup();
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::stack(&[&imgs[0], &imgs[1]]));
        let l = disc.logit_tape(&mut tape, v);
        let s = tape.sum_all(l);
        let g = tape.backward(s).get(v);
        let x0 = ImageTensor::from_tensor(imgs[0].clone()).unwrap();
        assert!((tape.value(l).data()[0] - disc.logit(&x0)).abs() < 1e-12);
        let direct = disc.input_grad(&x0);
        assert!(g.data()[..768].iter().zip(direct.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn learns_to_separate_two_classes() {
        let cfg = BackendConfig::toy();
        let mut disc = Discriminator::new(&cfg);
        let real: Vec<Tensor> = (0..8).map(|s| normal_tensor(&mut rng_for(s, "r", 0), &[3, 16, 16], 0.1).map(|v| v + 0.3)).collect();
        let fake: Vec<Tensor> = (0..8).map(|s| normal_tensor(&mut rng_for(s, "f", 0), &[3, 16, 16], 0.1).map(|v| v - 0.3)).collect();
        let rr: Vec<&Tensor> = real.iter().collect();
        let ff: Vec<&Tensor> = fake.iter().collect();
        for _ in 0..50 {
            let (_, grads) = disc.loss_and_grads(&rr, &ff, 1.0);
            for (p, g) in disc.params_mut().iter_mut().zip(&grads) {
                p.add_scaled(g, -0.05);
            }
        }
        let mean = |xs: &[Tensor]| {
            xs.iter().map(|x| disc.logit(&ImageTensor::from_tensor(x.clone()).unwrap())).sum::<f64>() / xs.len() as f64
        };
        assert!(mean(&real) > mean(&fake));
    }
}
