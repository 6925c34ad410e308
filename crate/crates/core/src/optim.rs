//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{shape, Result};
use crate::tensor::{ParamSet, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Tensor::zeros(p.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Checks that the moment buffers line up with `params`.
    pub fn matches(&self, params: &ParamSet<F>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape())
    }

    /// One update from the accumulated gradients, which are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamSet<F>, lr: f64) -> Result<()> {
        if !self.matches(params) {
            return Err(shape("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, m), v) in params.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let ms = m.data_mut();
            let vs = v.data_mut();
            let grads = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].as_f64();
                let mi = BETA1 * ms[i].as_f64() + (1.0 - BETA1) * g;
                let vi = BETA2 * vs[i].as_f64() + (1.0 - BETA2) * g * g;
                ms[i] = F::of(mi);
                vs[i] = F::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + EPSILON);
                *x = F::of(x.as_f64() - update);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// L2 norm over every gradient element.
pub fn grad_norm<F: Real>(params: &ParamSet<F>) -> f64 {
    params
        .iter()
        .map(|(_, _, p)| p.grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for p in params.params_mut() {
            for g in p.grad.data_mut() {
                *g = F::of(g.as_f64() * k);
            }
        }
    }
    norm
}
