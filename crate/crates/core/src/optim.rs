//! First-order optimizers over flat lists of parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Serialisable optimizer state: step counters and moment tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub counters: Vec<u64>,
    pub tensors: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct Moments {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Moments {
    fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    fn update(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::StateMismatch(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            if m.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!("gradient {:?} for parameter {:?}", g.shape(), m.shape())));
            }
            for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
        }
        Ok(())
    }

    fn export(&self, st: &mut OptimState) {
        st.counters.push(self.t);
        st.tensors.extend(self.m.iter().cloned());
        st.tensors.extend(self.v.iter().cloned());
    }

    fn import(&mut self, counters: &mut impl Iterator<Item = u64>, tensors: &mut impl Iterator<Item = Tensor>) -> Result<()> {
        self.t = counters.next().ok_or_else(|| Error::StateMismatch("missing step counter".into()))?;
        for slot in self.m.iter_mut().chain(self.v.iter_mut()) {
            let t = tensors.next().ok_or_else(|| Error::StateMismatch("missing moment tensor".into()))?;
            if t.shape() != slot.shape() {
                return Err(Error::StateMismatch(format!("moment {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(())
    }
}

fn check_params(params: &[&mut Tensor], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::StateMismatch(format!("{} parameters, optimizer built for {n}", params.len())));
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    mom: Moments,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        Self::with_betas(shapes, lr, 0.9, 0.999)
    }

    pub fn with_betas(shapes: &[Vec<usize>], lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, mom: Moments::new(shapes, beta1, beta2) }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_params(params, self.mom.m.len())?;
        self.mom.update(grads)?;
        let t = self.mom.t as i32;
        let c1 = 1.0 - self.mom.beta1.powi(t);
        let c2 = 1.0 - self.mom.beta2.powi(t);
        let eps = self.mom.eps;
        for ((p, m), v) in params.iter_mut().zip(&self.mom.m).zip(&self.mom.v) {
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rectified Adam: plain momentum steps until the variance estimate is
/// trustworthy, then adaptive steps scaled by the rectification term.
#[derive(Clone, Debug)]
pub struct RAdam {
    pub lr: f64,
    mom: Moments,
}

/// Length of the approximated simple moving average above which the
/// adaptive step is used.
const RADAM_THRESHOLD: f64 = 5.0;

impl RAdam {
    pub fn new(shapes: &[Vec<usize>], lr: f64) -> Self {
        Self { lr, mom: Moments::new(shapes, 0.95, 0.999) }
    }

    /// `Some(r)` for a rectified adaptive step at step `t`, `None` for a
    /// momentum-only step.
    pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho > RADAM_THRESHOLD)
            .then(|| ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_params(params, self.mom.m.len())?;
        self.mom.update(grads)?;
        let t = self.mom.t;
        let c1 = 1.0 - self.mom.beta1.powi(t as i32);
        let c2 = 1.0 - self.mom.beta2.powi(t as i32);
        let r = Self::rectification(self.mom.beta2, t);
        let eps = self.mom.eps;
        for ((p, m), v) in params.iter_mut().zip(&self.mom.m).zip(&self.mom.v) {
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mi / c1;
                *pi -= match r {
                    Some(r) => self.lr * r * m_hat / ((vi / c2).sqrt() + eps),
                    None => self.lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

/// Lookahead around RAdam: every `k` inner steps the slow weights move a
/// fraction `alpha` toward the fast ones and the fast weights reset to them.
#[derive(Clone, Debug)]
pub struct Ranger {
    inner: RAdam,
    pub k: u64,
    pub alpha: f64,
    slow: Vec<Tensor>,
}

impl Ranger {
    pub fn new(initial: &[&Tensor], lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = initial.iter().map(|t| t.shape().to_vec()).collect();
        Self { inner: RAdam::new(&shapes, lr), k: 6, alpha: 0.5, slow: initial.iter().map(|t| (*t).clone()).collect() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        self.inner.step(params, grads)?;
        if self.inner.mom.t.is_multiple_of(self.k) {
            for (p, s) in params.iter_mut().zip(&mut self.slow) {
                for (pi, si) in p.data_mut().iter_mut().zip(s.data_mut()) {
                    *si += self.alpha * (*pi - *si);
                    *pi = *si;
                }
            }
        }
        Ok(())
    }
}

/// Optimizer of the demorpher modules.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Ranger(Ranger),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(params, grads),
            Optimizer::Ranger(o) => o.step(params, grads),
        }
    }

    pub fn export(&self) -> OptimState {
        let mut st = OptimState::default();
        match self {
            Optimizer::Adam(o) => o.mom.export(&mut st),
            Optimizer::Ranger(o) => {
                o.inner.mom.export(&mut st);
                st.tensors.extend(o.slow.iter().cloned());
            }
        }
        st
    }

    pub fn import(&mut self, st: OptimState) -> Result<()> {
        let mut counters = st.counters.into_iter();
        let mut tensors = st.tensors.into_iter();
        match self {
            Optimizer::Adam(o) => o.mom.import(&mut counters, &mut tensors)?,
            Optimizer::Ranger(o) => {
                o.inner.mom.import(&mut counters, &mut tensors)?;
                for slot in &mut o.slow {
                    let t = tensors.next().ok_or_else(|| Error::StateMismatch("missing slow weights".into()))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::StateMismatch("slow weight shape".into()));
                    }
                    *slot = t;
                }
            }
        }
        if counters.next().is_some() || tensors.next().is_some() {
            return Err(Error::StateMismatch("trailing optimizer state".into()));
        }
        Ok(())
    }
}

impl Adam {
    pub fn export(&self) -> OptimState {
        let mut st = OptimState::default();
        self.mom.export(&mut st);
        st
    }

    pub fn import(&mut self, st: OptimState) -> Result<()> {
        let mut c = st.counters.into_iter();
        let mut t = st.tensors.into_iter();
        self.mom.import(&mut c, &mut t)?;
        if c.next().is_some() || t.next().is_some() {
            return Err(Error::StateMismatch("trailing optimizer state".into()));
        }
        Ok(())
    }
}
