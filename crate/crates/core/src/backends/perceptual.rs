use super::PerceptualNet;
use crate::autodiff::{Tape, Var};
use crate::config::BackendConfig;
use crate::tensor::{conv2d_direct, Tensor};
use crate::types::ImageTensor;
use crate::util::{normal_tensor, rng_for, tensor_digest};

const WIDTHS: [usize; 4] = [3, 8, 16, 16];
const SLOPE: f64 = 0.2;

/// Three stride-2 random convolutions with leaky ReLU; each stage's output
/// is normalised to unit length across channels at every location.
pub struct ToyPerceptual {
    kernels: Vec<Tensor>,
}

impl ToyPerceptual {
    pub fn new(config: &BackendConfig) -> Self {
        let mut rng = rng_for(config.seed, "toy-perceptual", 0);
        let kernels = WIDTHS
            .windows(2)
            .map(|w| normal_tensor(&mut rng, &[w[1], w[0], 3, 3], (2.0 / (9.0 * w[0] as f64)).sqrt()))
            .collect();
        Self { kernels }
    }
}

/// Unit-normalises `x[C, H*W]` (per batch item) across `C` at each location.
fn channel_normalize(data: &mut [f64], c: usize, hw: usize) -> Vec<f64> {
    let mut norms = vec![0.0; hw];
    for (p, norm) in norms.iter_mut().enumerate() {
        let s: f64 = (0..c).map(|ch| data[ch * hw + p].powi(2)).sum();
        *norm = s.sqrt() + 1e-10;
        for ch in 0..c {
            data[ch * hw + p] /= *norm;
        }
    }
    norms
}

fn normalize_tape(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = tape.value(x).clone();
    let mut norms = Vec::with_capacity(n);
    for item in out.data_mut().chunks_mut(c * hw) {
        norms.push(channel_normalize(item, c, hw));
    }
    tape.custom(&[x], out, move |g, _, y| {
        let mut gx = g.clone();
        for (i, item) in gx.data_mut().chunks_mut(c * hw).enumerate() {
            let yi = &y.data()[i * c * hw..(i + 1) * c * hw];
            for p in 0..hw {
                let proj: f64 = (0..c).map(|ch| item[ch * hw + p] * yi[ch * hw + p]).sum();
                for ch in 0..c {
                    let k = ch * hw + p;
                    item[k] = (item[k] - proj * yi[k]) / norms[i][p];
                }
            }
        }
        vec![gx]
    })
}

impl PerceptualNet for ToyPerceptual {
    fn features(&self, image: &ImageTensor) -> Vec<Tensor> {
        let mut x = image.tensor().clone();
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            x = conv2d_direct(&x, k, None, 2, 1).map(|v| if v > 0.0 { v } else { SLOPE * v });
            let mut f = x.clone();
            let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
            channel_normalize(f.data_mut(), c, hw);
            out.push(f);
        }
        out
    }

    fn features_tape(&self, tape: &mut Tape, images: Var) -> Vec<Var> {
        let mut x = images;
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let w = tape.constant(k.clone());
            let y = tape.conv2d(x, w, None, 2, 1);
            x = tape.leaky_relu(y, SLOPE);
            out.push(normalize_tape(tape, x));
        }
        out
    }

    fn parameter_digest(&self) -> String {
        tensor_digest(&self.kernels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, scale: f64) -> ImageTensor {
        let mut rng = rng_for(seed, "img", 0);
        ImageTensor::from_tensor(normal_tensor(&mut rng, &[3, 16, 16], scale)).unwrap()
    }

    #[test]
    fn stack_shapes_depend_only_on_config() {
        let net = ToyPerceptual::new(&BackendConfig::toy());
        let shapes = |x: &ImageTensor| net.features(x).iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        assert_eq!(shapes(&img(1, 0.3)), vec![vec![8, 8, 8], vec![16, 4, 4], vec![16, 2, 2]]);
        assert_eq!(shapes(&img(1, 0.3)), shapes(&img(2, 0.01)));
    }

    #[test]
    fn small_perturbation_small_change() {
        let net = ToyPerceptual::new(&BackendConfig::toy());
        let x = img(3, 0.4);
        let base = net.features(&x);
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-3, 1e-4] {
            let y = ImageTensor::from_tensor(x.tensor().zip_map(img(4, 1.0).tensor(), |a, b| a + eps * b)).unwrap();
            let d: f64 = net.features(&y).iter().zip(&base).map(|(a, b)| a.zip_map(b, |p, q| p - q).sq_norm()).sum();
            let d = d.sqrt();
            assert!(d < last);
            assert!(d / eps < 200.0, "ratio {}", d / eps);
            last = d;
        }
    }

    #[test]
    fn tape_matches_direct_and_gradient() {
        let net = ToyPerceptual::new(&BackendConfig::toy());
        let x = img(5, 0.4);
        let mut tape = Tape::new();
        let v = tape.leaf(x.tensor().clone().reshape(&[1, 3, 16, 16]));
        let feats = net.features_tape(&mut tape, v);
        for (a, b) in feats.iter().zip(net.features(&x)) {
            assert!(tape.value(*a).data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-10));
        }
        let r = img(6, 0.4);
        let loss_of = |t: &Tensor| -> f64 {
            let f = net.features(&ImageTensor::from_tensor(t.clone()).unwrap());
            let g = net.features(&r);
            f.iter().zip(&g).map(|(a, b)| a.zip_map(b, |p, q| p - q).sq_norm()).sum()
        };
        let targets: Vec<Var> = net.features(&r).into_iter().map(|t| {
            let s = t.shape().to_vec();
            tape.constant(t.reshape(&[1, s[0], s[1], s[2]]))
        }).collect();
        let mut total = None;
        for (f, t) in feats.iter().zip(targets) {
            let d = tape.sub(*f, t);
            let sq = tape.square(d);
            let s = tape.sum_all(sq);
            total = Some(match total { None => s, Some(acc) => tape.add(acc, s) });
        }
        let grads = tape.backward(total.unwrap());
        let g = grads.get(v);
        for idx in [0, 77, 300, 700] {
            let h = 1e-6;
            let mut p = x.tensor().clone();
            p.data_mut()[idx] += h;
            let mut m = x.tensor().clone();
            m.data_mut()[idx] -= h;
            let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
            assert!((fd - g.data()[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "{fd} vs {}", g.data()[idx]);
        }
    }
}
