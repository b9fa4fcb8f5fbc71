//! Dense row-major `f64` tensors and the small set of kernels shared by the
//! tape and the direct (non-recording) forward paths.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape volume.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor data length does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} into {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled length mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Splits the leading axis into `shape[0]` tensors of the remaining shape.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let stride = self.data.len() / n.max(1);
        (0..n)
            .map(|i| Tensor::new(inner.clone(), self.data[i * stride..(i + 1) * stride].to_vec()))
            .collect()
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, with optional transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents computed above, which the
    // callers guarantee by construction of m, k, n.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            x[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        dx[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x[N,Cin,H,W] * w[Cout,Cin,k,k] (+ b)`.
pub(crate) fn conv2d_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_hw = g.col_cols();
    let mut out = vec![0.0; n * g.out_c * out_hw];
    let mut cols = vec![0.0; g.col_rows() * out_hw];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        let o = &mut out[s * g.out_c * out_hw..(s + 1) * g.out_c * out_hw];
        gemm(g.out_c, g.col_rows(), out_hw, w, false, &cols, false, o, false);
        if let Some(b) = b {
            for (oc, bias) in b.iter().enumerate() {
                for v in &mut o[oc * out_hw..(oc + 1) * out_hw] {
                    *v += bias;
                }
            }
        }
    }
    out
}

/// Gradients of the batched convolution: `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_len = g.in_c * g.in_h * g.in_w;
    let out_hw = g.col_cols();
    let mut dx = vec![0.0; n * in_len];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    let mut cols = vec![0.0; g.col_rows() * out_hw];
    let mut dcols = vec![0.0; g.col_rows() * out_hw];
    for s in 0..n {
        let d = &dout[s * g.out_c * out_hw..(s + 1) * g.out_c * out_hw];
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        gemm(g.out_c, out_hw, g.col_rows(), d, false, &cols, true, &mut dw, true);
        gemm(g.col_rows(), g.out_c, out_hw, w, true, d, false, &mut dcols, false);
        col2im(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        for oc in 0..g.out_c {
            db[oc] += d[oc * out_hw..(oc + 1) * out_hw].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// Direct nested-loop convolution of one sample; used by frozen networks on
/// their non-recording path.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor {
    let [in_c, in_h, in_w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [out_c, w_in, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    assert_eq!(in_c, w_in, "conv2d_direct channel mismatch");
    let g = ConvGeom { in_c, in_h, in_w, out_c, k, stride, pad };
    let (oh, ow) = (g.out_h(), g.out_w());
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; out_c * oh * ow];
    for oc in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[oc]);
                for ic in 0..in_c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= in_h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= in_w {
                                continue;
                            }
                            acc += wd[((oc * in_c + ic) * k + ky) * k + kx]
                                * xd[(ic * in_h + iy as usize) * in_w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![out_c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batched_conv_matches_direct_loops() {
        let x = Tensor::from_fn(&[2, 3, 5, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        let b = [0.1, -0.2, 0.3, 0.0];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let g = ConvGeom { in_c: 3, in_h: 5, in_w: 5, out_c: 4, k: 3, stride, pad };
            let out = conv2d_forward(x.data(), 2, w.data(), Some(&b), &g);
            for (s, sample) in x.unstack().iter().enumerate() {
                let direct = conv2d_direct(sample, &w, Some(&b), stride, pad);
                let len = direct.len();
                for (a, d) in out[s * len..(s + 1) * len].iter().zip(direct.data()) {
                    assert!((a - d).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
