//! Adam with bias correction and gradient-side L2 weight decay.

use std::collections::BTreeMap;

use super::{GradMap, ParamStore, Real};
use crate::error::{Result, SgcnError};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; the term l2 * theta is added to each gradient before
    /// the moment updates (classic Adam-with-L2, not decoupled decay).
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[F], &[F])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Restore moment buffers (checkpoint resume).
    pub fn set_moments(&mut self, name: &str, m: Vec<F>, v: Vec<F>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }

    /// One Adam update over every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradMap<F>) -> Result<()> {
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = F::from_f64(c.lr);
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one_m_b1 = F::from_f64(1.0 - c.beta1);
        let one_m_b2 = F::from_f64(1.0 - c.beta2);
        let eps = F::from_f64(c.eps);
        let l2 = F::from_f64(c.l2);
        let ibc1 = F::from_f64(1.0 / bc1);
        let ibc2 = F::from_f64(1.0 / bc2);

        for (name, p) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if g.len() != p.data.len() {
                return Err(SgcnError::Numeric(format!(
                    "optimizer state corruption: gradient for {name} has {} elements, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![F::zero(); g.len()]);
            for i in 0..g.len() {
                let gi = g[i] + l2 * p.data[i];
                m[i] = b1 * m[i] + one_m_b1 * gi;
                v[i] = b2 * v[i] + one_m_b2 * gi * gi;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
