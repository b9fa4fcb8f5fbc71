//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value and a closure mapping
//! the upstream gradient to one gradient per parent. Frozen networks enter
//! the tape as constants; only leaves created with [`Tape::leaf`] are
//! reported by [`Tape::backward`].

use std::sync::Arc;

use crate::tensor::{conv2d_backward, conv2d_forward, gemm, ConvGeom, Tensor};

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; zeros when `v` did not influence it.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Per-batch statistics produced by a training-mode batch normalisation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var_unbiased: Vec<f64>,
}

fn leading_and_rest(shape: &[usize]) -> (usize, usize, usize) {
    // (N, C, inner) for [N, C, ...]
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = shape.iter().skip(2).product::<usize>();
    (n, c, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable input whose gradient is reported.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], backward: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records an op with an explicit backward rule. `backward` receives
    /// `(upstream, parent_values, output_value)` and returns one gradient per
    /// parent, in order.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs the reverse sweep from a one-element root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].as_ref() else { continue };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = bw(g, &parent_vals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_scaled(&pg, 1.0),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() }
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], v, |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], v, |g, _, _| vec![g.clone(), g.map(|x| -x)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], v, |g, p, _| vec![g.zip_map(p[1], |g, y| g * y), g.zip_map(p[0], |g, x| g * x)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.custom(&[a, b], v, |g, p, out| {
            let ga = g.zip_map(p[1], |g, y| g / y);
            let gb = Tensor::from_fn(g.shape(), |i| -g.data()[i] * out.data()[i] / p[1].data()[i]);
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.custom(&[a], v, move |g, _, _| vec![g.map(|x| x * s)])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.custom(&[a], v, |g, _, _| vec![g.clone()])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.custom(&[a], v, |g, p, _| vec![g.zip_map(p[0], |g, x| 2.0 * g * x)])
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor));
        self.custom(&[a], v, move |g, p, _| vec![g.zip_map(p[0], |g, x| if x > floor { g } else { 0.0 })])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clamp_min(a, 0.0)
    }

    /// `x^e` for positive `x`.
    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(e));
        self.custom(&[a], v, move |g, p, _| vec![g.zip_map(p[0], |g, x| g * e * x.powf(e - 1.0))])
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.custom(&[a], v, |g, p, _| vec![g.zip_map(p[0], |g, x| g * sigmoid(x))])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.custom(&[a], v, move |g, p, _| vec![g.zip_map(p[0], |g, x| if x > 0.0 { g } else { slope * g })])
    }

    /// Channel-wise parametric ReLU; `alpha` has one slope per channel of `x[N,C,...]`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Var {
        let (n, c, inner) = leading_and_rest(self.shape(x));
        assert_eq!(self.value(alpha).len(), c, "prelu slope count");
        let xv = self.value(x);
        let av = self.value(alpha);
        let mut out = xv.clone();
        for s in 0..n {
            for ch in 0..c {
                let a = av.data()[ch];
                for v in &mut out.data_mut()[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                    if *v < 0.0 {
                        *v *= a;
                    }
                }
            }
        }
        self.custom(&[x, alpha], out, move |g, p, _| {
            let mut gx = g.clone();
            let mut ga = Tensor::zeros(p[1].shape());
            for s in 0..n {
                for ch in 0..c {
                    let a = p[1].data()[ch];
                    for i in (s * c + ch) * inner..(s * c + ch + 1) * inner {
                        let xv = p[0].data()[i];
                        if xv < 0.0 {
                            gx.data_mut()[i] *= a;
                            ga.data_mut()[ch] += g.data()[i] * xv;
                        }
                    }
                }
            }
            vec![gx, ga]
        })
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(a).to_vec();
        let v = self.value(a).clone().reshape(shape);
        self.custom(&[a], v, move |g, _, _| vec![g.clone().reshape(&src_shape)])
    }

    /// Concatenates `[N, Ca, ...]` and `[N, Cb, ...]` along axis 1.
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, inner) = leading_and_rest(self.shape(a));
        let (nb, cb, inner_b) = leading_and_rest(self.shape(b));
        assert!(n == nb && inner == inner_b, "concat1 shape mismatch");
        let mut shape = self.shape(a).to_vec();
        shape[1] = ca + cb;
        let (la, lb) = (ca * inner, cb * inner);
        let mut data = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        self.custom(&[a, b], Tensor::new(shape, data), move |g, p, _| {
            let mut ga = Vec::with_capacity(n * la);
            let mut gb = Vec::with_capacity(n * lb);
            for s in 0..n {
                let row = &g.data()[s * (la + lb)..(s + 1) * (la + lb)];
                ga.extend_from_slice(&row[..la]);
                gb.extend_from_slice(&row[la..]);
            }
            vec![Tensor::new(p[0].shape().to_vec(), ga), Tensor::new(p[1].shape().to_vec(), gb)]
        })
    }

    /// Selects `[start, end)` along axis 1 of `[N, C, ...]`.
    pub fn slice1(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (n, c, inner) = leading_and_rest(self.shape(a));
        assert!(start < end && end <= c, "slice1 bounds");
        let mut shape = self.shape(a).to_vec();
        shape[1] = end - start;
        let mut data = Vec::with_capacity(n * (end - start) * inner);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[(s * c + start) * inner..(s * c + end) * inner]);
        }
        self.custom(&[a], Tensor::new(shape, data), move |g, p, _| {
            let mut ga = Tensor::zeros(p[0].shape());
            let w = (end - start) * inner;
            for s in 0..n {
                ga.data_mut()[(s * c + start) * inner..(s * c + end) * inner]
                    .copy_from_slice(&g.data()[s * w..(s + 1) * w]);
            }
            vec![ga]
        })
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.custom(&[a], v, |g, p, _| vec![Tensor::full(p[0].shape(), g.item())])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over everything but the leading axis: `[N, ...] -> [N]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a)[0];
        let inner = self.value(a).len() / n;
        let v = Tensor::from_fn(&[n], |i| {
            self.value(a).data()[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64
        });
        self.custom(&[a], v, move |g, p, _| {
            vec![Tensor::from_fn(p[0].shape(), |i| g.data()[i / inner] / inner as f64)]
        })
    }

    /// Sum over everything but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a)[0];
        let inner = self.value(a).len() / n;
        let m = self.mean_rows(a);
        self.scale(m, inner as f64)
    }

    /// Spatial mean `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, _) = leading_and_rest(self.shape(a));
        let flat = self.reshape(a, &[n * c, self.value(a).len() / (n * c)]);
        let m = self.mean_rows(flat);
        self.reshape(m, &[n, c])
    }

    // ---- linear algebra ----------------------------------------------------

    /// `x[N, in] · w[out, in]^T (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = (self.shape(x)[0], self.value(x).len() / self.shape(x)[0]);
        let dout = self.shape(w)[0];
        assert_eq!(self.value(w).len(), dout * din, "linear weight shape");
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.custom(&parents, Tensor::new(vec![n, dout], out), move |g, p, _| {
            let mut gx = vec![0.0; n * din];
            gemm(n, dout, din, g.data(), false, p[1].data(), false, &mut gx, false);
            let mut gw = vec![0.0; dout * din];
            gemm(dout, n, din, g.data(), true, p[0].data(), false, &mut gw, false);
            let mut res = vec![Tensor::new(p[0].shape().to_vec(), gx), Tensor::new(p[1].shape().to_vec(), gw)];
            if has_bias {
                let mut gb = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                res.push(Tensor::new(vec![dout], gb));
            }
            res
        })
    }

    /// `x[N, in] · w[out, in]^T` for a frozen shared weight; no weight gradient.
    pub fn matmul_fixed(&mut self, x: Var, w: Arc<Tensor>) -> Var {
        let n = self.shape(x)[0];
        let din = self.value(x).len() / n;
        let dout = w.shape()[0];
        assert_eq!(w.len(), dout * din, "matmul_fixed weight shape");
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, self.value(x).data(), false, w.data(), true, &mut out, false);
        self.custom(&[x], Tensor::new(vec![n, dout], out), move |g, p, _| {
            let mut gx = vec![0.0; n * din];
            gemm(n, dout, din, g.data(), false, w.data(), false, &mut gx, false);
            vec![Tensor::new(p[0].shape().to_vec(), gx)]
        })
    }

    /// Row-wise dot product `[N, D] x [N, D] -> [N]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_rows(m)
    }

    /// Subtracts each row's mean: `[N, D] -> [N, D]`.
    pub fn center_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a)[0];
        let d = self.value(a).len() / n;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().sum::<f64>() / d as f64;
            row.iter_mut().for_each(|v| *v -= m);
        }
        self.custom(&[a], out, move |g, _, _| {
            let mut gx = g.clone();
            for row in gx.data_mut().chunks_mut(d) {
                let m = row.iter().sum::<f64>() / d as f64;
                row.iter_mut().for_each(|v| *v -= m);
            }
            vec![gx]
        })
    }

    /// Scales each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a)[0];
        let d = self.value(a).len() / n;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(n);
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.custom(&[a], out, move |g, _, y| {
            let mut gx = g.clone();
            for (s, row) in gx.data_mut().chunks_mut(d).enumerate() {
                let yr = &y.data()[s * d..(s + 1) * d];
                let proj: f64 = row.iter().zip(yr).map(|(g, y)| g * y).sum();
                for (gv, yv) in row.iter_mut().zip(yr) {
                    *gv = (*gv - proj * yv) / norms[s];
                }
            }
            vec![gx]
        })
    }

    // ---- convolutional -----------------------------------------------------

    /// 2-D convolution of `x[N,Cin,H,W]` with `w[Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects NCHW input");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        let g = ConvGeom { in_c: xs[1], in_h: xs[2], in_w: xs[3], out_c: ws[0], k: ws[2], stride, pad };
        let n = xs[0];
        let out = conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &g,
        );
        let shape = vec![n, g.out_c, g.out_h(), g.out_w()];
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.custom(&parents, Tensor::new(shape, out), move |gr, p, _| {
            let (dx, dw, db) = conv2d_backward(p[0].data(), n, p[1].data(), gr.data(), &g);
            let mut res = vec![Tensor::new(p[0].shape().to_vec(), dx), Tensor::new(p[1].shape().to_vec(), dw)];
            if has_bias {
                res.push(Tensor::new(vec![g.out_c], db));
            }
            res
        })
    }

    /// Depthwise convolution with one shared single-channel kernel, no padding.
    pub fn depthwise_fixed(&mut self, x: Var, kernel: &Tensor) -> Var {
        let xs = self.shape(x).to_vec();
        let k = kernel.shape()[0];
        let flat = self.reshape(x, &[xs[0] * xs[1], 1, xs[2], xs[3]]);
        let w = self.constant(kernel.clone().reshape(&[1, 1, k, k]));
        let y = self.conv2d(flat, w, None, 1, 0);
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[xs[0], xs[1], ys[2], ys[3]])
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; nc * oh * ow];
        for p in 0..nc {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w;
                    out[(p * oh + y) * ow + xx] = 0.25
                        * (xv[base + 2 * y * w + 2 * xx]
                            + xv[base + 2 * y * w + 2 * xx + 1]
                            + xv[base + (2 * y + 1) * w + 2 * xx]
                            + xv[base + (2 * y + 1) * w + 2 * xx + 1]);
                }
            }
        }
        self.custom(&[x], Tensor::new(vec![xs[0], xs[1], oh, ow], out), move |g, p, _| {
            let mut gx = Tensor::zeros(p[0].shape());
            let d = gx.data_mut();
            for pl in 0..nc {
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * g.data()[(pl * oh + y) * ow + xx];
                        let base = pl * h * w;
                        d[base + 2 * y * w + 2 * xx] += v;
                        d[base + 2 * y * w + 2 * xx + 1] += v;
                        d[base + (2 * y + 1) * w + 2 * xx] += v;
                        d[base + (2 * y + 1) * w + 2 * xx + 1] += v;
                    }
                }
            }
            vec![gx]
        })
    }

    /// Batch normalisation with batch statistics over `N x spatial`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let (n, c, inner) = leading_and_rest(self.shape(x));
        let m = (n * inner) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                s += xv[(smp * c + ch) * inner..(smp * c + ch + 1) * inner].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut q = 0.0;
            for smp in 0..n {
                q += xv[(smp * c + ch) * inner..(smp * c + ch + 1) * inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
            var[ch] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                for i in (smp * c + ch) * inner..(smp * c + ch + 1) * inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased: var.iter().map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v }).collect(),
        };
        let shape = self.shape(x).to_vec();
        let y = self.custom(&[x, gamma, beta], Tensor::new(shape, out), move |g, p, _| {
            let gd = g.data();
            let mut gx = Tensor::zeros(p[0].shape());
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for smp in 0..n {
                    for i in (smp * c + ch) * inner..(smp * c + ch + 1) * inner {
                        sum_g += gd[i];
                        sum_gx += gd[i] * xhat[i];
                    }
                }
                gg[ch] = sum_gx;
                gb[ch] = sum_g;
                let scale = p[1].data()[ch] * inv_std[ch];
                for smp in 0..n {
                    for i in (smp * c + ch) * inner..(smp * c + ch + 1) * inner {
                        gx.data_mut()[i] = scale * (gd[i] - sum_g / m - xhat[i] * sum_gx / m);
                    }
                }
            }
            vec![gx, Tensor::new(vec![c], gg), Tensor::new(vec![c], gb)]
        });
        (y, stats)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let (n, c, inner) = leading_and_rest(self.shape(x));
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                for i in (smp * c + ch) * inner..(smp * c + ch + 1) * inner {
                    out[i] = gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.custom(&[x, gamma, beta], Tensor::new(shape, out), move |g, p, _| {
            let mut gx = Tensor::zeros(p[0].shape());
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for smp in 0..n {
                for ch in 0..c {
                    for i in (smp * c + ch) * inner..(smp * c + ch + 1) * inner {
                        let gi = g.data()[i];
                        gx.data_mut()[i] = gi * p[1].data()[ch] * inv_std[ch];
                        gg[ch] += gi * (p[0].data()[i] - mean[ch]) * inv_std[ch];
                        gb[ch] += gi;
                    }
                }
            }
            vec![gx, Tensor::new(vec![c], gg), Tensor::new(vec![c], gb)]
        })
    }
}

/// Numerically stable `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
