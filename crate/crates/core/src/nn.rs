//! Parameter storage and the handful of layers the demorpher is built from.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{normal_tensor, tensor_digest};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        self.buffers.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor] {
        &mut self.buffers
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn digest(&self) -> String {
        tensor_digest(self.values.iter().chain(&self.buffers))
    }

    /// Puts every parameter on the tape, as a leaf when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect()
    }

    /// Replaces values and buffers, checking names and shapes.
    pub fn load(&mut self, other: &ParamSet) -> Result<()> {
        let same = |a: &[String], b: &[String], x: &[Tensor], y: &[Tensor]| {
            a == b && x.iter().zip(y).all(|(p, q)| p.shape() == q.shape())
        };
        if !same(&self.names, &other.names, &self.values, &other.values)
            || !same(&self.buffer_names, &other.buffer_names, &self.buffers, &other.buffers)
        {
            return Err(Error::StateMismatch("parameter layout differs".into()));
        }
        self.values.clone_from(&other.values);
        self.buffers.clone_from(&other.buffers);
        Ok(())
    }
}

/// Per-forward state: the tape, the registered parameter vars, and the
/// batch statistics collected by training-mode normalisation.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    pub params: &'a ParamSet,
    pub train: bool,
    pub stats: Vec<(usize, usize, BatchStats)>,
}

impl Ctx<'_> {
    fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Folds collected batch statistics into the running buffers.
pub fn update_running_stats(params: &mut ParamSet, stats: &[(usize, usize, BatchStats)]) {
    for (mean_buf, var_buf, s) in stats {
        for (r, b) in params.buffers[*mean_buf].data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in params.buffers[*var_buf].data_mut().iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: usize,
    b: Option<usize>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), normal_tensor(rng, &[out_c, in_c, k, k], std));
        let b = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_c])));
        Self { w, b, in_c, out_c, k, stride, pad: k / 2 }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let (w, b) = (cx.var(self.w), self.b.map(|b| cx.var(b)));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, c: usize, gamma_init: f64) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[c], gamma_init)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        if cx.train {
            let (y, stats) = cx.tape.batch_norm_train(x, g, b, BN_EPS);
            cx.stats.push((self.mean, self.var, stats));
            y
        } else {
            let rm = cx.params.buffers[self.mean].data().to_vec();
            let rv = cx.params.buffers[self.var].data().to_vec();
            cx.tape.batch_norm_eval(x, g, b, &rm, &rv, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    alpha: usize,
}

impl PRelu {
    pub fn new(ps: &mut ParamSet, name: &str, c: usize) -> Self {
        Self { alpha: ps.add(format!("{name}.alpha"), Tensor::full(&[c], 0.25)) }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let a = cx.var(self.alpha);
        cx.tape.prelu(x, a)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize, std: f64) -> Self {
        Self {
            w: ps.add(format!("{name}.weight"), normal_tensor(rng, &[dout, din], std)),
            b: ps.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let (w, b) = (cx.var(self.w), cx.var(self.b));
        cx.tape.linear(x, w, Some(b))
    }
}

/// Improved residual unit:
/// `BN -> conv3x3 -> BN -> PReLU -> conv3x3(stride) -> BN`, plus a shortcut
/// that is the identity when shape is preserved and a learned 1x1
/// projection otherwise. The last normalisation starts with zero scale, so
/// a fresh block computes its shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    act: PRelu,
    conv2: Conv,
    bn3: BatchNorm,
    shortcut: Option<Conv>,
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
}

impl ResBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        // Projection shortcuts start as a pass-through of the leading channels.
        let shortcut = (in_c != out_c || stride != 1).then(|| {
            let conv = Conv::new(ps, rng, &format!("{name}.shortcut"), in_c, out_c, 1, stride, false);
            ps.values_mut()[conv.w] = Tensor::from_fn(&[out_c, in_c, 1, 1], |i| f64::from(i / in_c == i % in_c));
            conv
        });
        Self {
            bn1: BatchNorm::new(ps, &format!("{name}.bn1"), in_c, 1.0),
            conv1: Conv::new(ps, rng, &format!("{name}.conv1"), in_c, out_c, 3, 1, false),
            bn2: BatchNorm::new(ps, &format!("{name}.bn2"), out_c, 1.0),
            act: PRelu::new(ps, &format!("{name}.prelu"), out_c),
            conv2: Conv::new(ps, rng, &format!("{name}.conv2"), out_c, out_c, 3, stride, false),
            bn3: BatchNorm::new(ps, &format!("{name}.bn3"), out_c, 0.0),
            shortcut,
            in_c,
            out_c,
            stride,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let r = self.bn1.forward(cx, x);
        let r = self.conv1.forward(cx, r);
        let r = self.bn2.forward(cx, r);
        let r = self.act.forward(cx, r);
        let r = self.conv2.forward(cx, r);
        let r = self.bn3.forward(cx, r);
        let s = match &self.shortcut {
            Some(conv) => conv.forward(cx, x),
            None => x,
        };
        cx.tape.add(r, s)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv2.out_hw(h, w)
    }
}
