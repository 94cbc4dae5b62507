//! Inner- and outer-loop optimizers plus a per-domain split of Adam's first
//! moment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, GradVector, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self { learning_rate })
    }
}

/// Momentum-free SGD: `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &GradVector, cfg: &SgdConfig) -> ParamVector {
    let mut out = params.clone();
    out.axpy(-cfg.learning_rate, grad);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0)
        {
            return Err(Error::InvalidConfig(format!("invalid Adam config {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
        })
    }

    /// One bias-corrected Adam update; mutates the moments in place.
    pub fn step(&mut self, params: &ParamVector, grad: &GradVector) -> Result<ParamVector> {
        params.check_len(grad, "adam step")?;
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam state has {} entries, parameters have {}",
                self.m.len(),
                params.len()
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = params.clone();
        for (i, g) in grad.iter().enumerate() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            out[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(out)
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    params: &ParamVector,
    grad: &GradVector,
    state: &AdamState,
) -> Result<(ParamVector, AdamState)> {
    let mut next = state.clone();
    let out = next.step(params, grad)?;
    Ok((out, next))
}

/// Optimizer used for steps that need persistent state across calls.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdConfig),
    Adam(AdamState),
}

impl Optimizer {
    pub fn step(&mut self, params: &ParamVector, grad: &GradVector) -> Result<ParamVector> {
        match self {
            Optimizer::Sgd(cfg) => {
                params.check_len(grad, "sgd step")?;
                Ok(sgd_step(params, grad, cfg))
            }
            Optimizer::Adam(state) => state.step(params, grad),
        }
    }
}

/// Splits the first-moment accumulator `m` by the domain each gradient came
/// from: after every update, `sum_d c_d == m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumLedger {
    components: BTreeMap<usize, Vec<f64>>,
    updates: u64,
}

impl MomentumLedger {
    pub fn new(domain_ids: impl IntoIterator<Item = usize>, len: usize) -> Self {
        Self {
            components: domain_ids.into_iter().map(|d| (d, vec![0.0; len])).collect(),
            updates: 0,
        }
    }

    pub fn component(&self, domain_id: usize) -> Option<&[f64]> {
        self.components.get(&domain_id).map(|c| c.as_slice())
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.components.keys().copied()
    }

    /// `c_d <- beta1 * c_d` for all d, then `c_domain += (1 - beta1) * grad`.
    pub fn update(&mut self, grad: &GradVector, domain_id: usize, beta1: f64) -> Result<()> {
        let len = self.components.values().next().map_or(0, |c| c.len());
        if grad.len() != len {
            return Err(Error::Shape(format!(
                "ledger tracks {len} entries, gradient has {}",
                grad.len()
            )));
        }
        if !self.components.contains_key(&domain_id) {
            return Err(Error::UnknownDomain(domain_id));
        }
        for c in self.components.values_mut() {
            c.iter_mut().for_each(|v| *v *= beta1);
        }
        let c = self.components.get_mut(&domain_id).expect("checked");
        for (v, g) in c.iter_mut().zip(grad.iter()) {
            *v += (1.0 - beta1) * g;
        }
        self.updates += 1;
        Ok(())
    }

    /// Sum over domains, i.e. the reconstructed first moment.
    pub fn total(&self) -> Vec<f64> {
        let len = self.components.values().next().map_or(0, |c| c.len());
        let mut total = vec![0.0; len];
        for c in self.components.values() {
            for (t, v) in total.iter_mut().zip(c) {
                *t += v;
            }
        }
        total
    }

    /// L1 share of each domain's component.
    pub fn fractions(&self) -> Result<BTreeMap<usize, f64>> {
        let norms: BTreeMap<usize, f64> = self
            .components
            .iter()
            .map(|(&d, c)| (d, c.iter().map(|v| v.abs()).sum::<f64>()))
            .collect();
        let total: f64 = norms.values().sum();
        if self.updates == 0 || total == 0.0 {
            return Err(Error::ZeroLedger);
        }
        Ok(norms.into_iter().map(|(d, n)| (d, n / total)).collect())
    }
}

/// Steady-state L1 shares under round-robin updates with identical gradient
/// magnitudes: the domain updated `r` steps ago holds
/// `beta^r (1 - beta) / (1 - beta^n)` of the momentum. Ordered by recency.
pub fn round_robin_fractions(beta1: f64, n_domains: usize) -> Vec<f64> {
    let norm: f64 = (0..n_domains).map(|r| beta1.powi(r as i32)).sum();
    (0..n_domains)
        .map(|r| beta1.powi(r as i32) / norm)
        .collect()
}
