//! Plain SGD and Adam, both taking a per-step gradient scale.
//!
//! The scale multiplies the gradient before anything else happens, which is
//! the same as scaling the loss. Under Adam this means the moments see the
//! scaled gradient.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{MlpParams, ParamGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub kind: OptKind,
    pub eta_theta: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptConfig {
    pub fn sgd(eta_theta: f64) -> Self {
        Self { kind: OptKind::Sgd, eta_theta, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn adam(eta_theta: f64) -> Self {
        Self { kind: OptKind::Adam, ..Self::sgd(eta_theta) }
    }

    /// A zero learning rate is accepted and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_theta >= 0.0 && self.eta_theta.is_finite()) {
            return Err(config_err!("eta_theta must be finite and nonnegative, got {}", self.eta_theta));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(config_err!("adam eps must be nonnegative, got {}", self.eps));
        }
        Ok(())
    }
}

impl Default for OptConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// Adam moment estimates; empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd,
    Adam { first: ParamGrads, second: ParamGrads, step: u64 },
}

impl OptState {
    pub fn new(cfg: &OptConfig, params: &MlpParams) -> Self {
        match cfg.kind {
            OptKind::Sgd => OptState::Sgd,
            OptKind::Adam => OptState::Adam {
                first: ParamGrads::zeros_like(params),
                second: ParamGrads::zeros_like(params),
                step: 0,
            },
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            OptState::Sgd => 0,
            OptState::Adam { step, .. } => *step,
        }
    }
}

fn check(params: &MlpParams, grads: &ParamGrads, scale: f64, cfg: &OptConfig) -> Result<()> {
    cfg.validate()?;
    if !grads.matches(params) {
        return Err(Error::Shape("gradient shapes do not mirror the parameters".into()));
    }
    if !(0.0..=1.0).contains(&scale) {
        return Err(config_err!("gradient scale must lie in [0, 1], got {scale}"));
    }
    Ok(())
}

fn for_each_pair(params: &mut MlpParams, grads: &ParamGrads, mut f: impl FnMut(&mut Matrix, &Matrix, usize)) {
    for (k, (p, g)) in params.layers_mut().iter_mut().zip(grads.layers()).enumerate() {
        f(&mut p.weight, &g.weight, 2 * k);
        f(&mut p.bias, &g.bias, 2 * k + 1);
    }
}

/// `θ ← θ - η · scale · ∇`.
pub fn sgd_step(params: &MlpParams, grads: &ParamGrads, scale: f64, cfg: &OptConfig) -> Result<MlpParams> {
    check(params, grads, scale, cfg)?;
    let mut next = params.clone();
    let lr = cfg.eta_theta;
    for_each_pair(&mut next, grads, |p, g, _| {
        for (pv, gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *pv -= lr * (scale * gv);
        }
    });
    finite(next)
}

/// One bias-corrected Adam step on the gradient `scale · ∇`.
pub fn adam_step(
    params: &MlpParams,
    grads: &ParamGrads,
    scale: f64,
    state: &OptState,
    cfg: &OptConfig,
) -> Result<(MlpParams, OptState)> {
    check(params, grads, scale, cfg)?;
    let OptState::Adam { first, second, step } = state else {
        return Err(Error::Contract("adam_step needs adam state".into()));
    };
    if !first.matches(params) || !second.matches(params) {
        return Err(Error::Shape("adam moments do not mirror the parameters".into()));
    }
    let mut first = first.clone();
    let mut second = second.clone();
    let step = step + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    let mut next = params.clone();
    let mut moments: Vec<(&mut Matrix, &mut Matrix)> = first
        .layers_mut()
        .iter_mut()
        .zip(second.layers_mut().iter_mut())
        .flat_map(|(m, v)| [(&mut m.weight, &mut v.weight), (&mut m.bias, &mut v.bias)])
        .collect();
    for_each_pair(&mut next, grads, |p, g, slot| {
        let (m, v) = &mut moments[slot];
        let iter = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
        for (((pv, &gv), mv), vv) in iter {
            let g = scale * gv;
            *mv = b1 * *mv + (1.0 - b1) * g;
            *vv = b2 * *vv + (1.0 - b2) * g * g;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            let denom = v_hat.sqrt() + cfg.eps;
            if denom > 0.0 {
                *pv -= cfg.eta_theta * m_hat / denom;
            }
        }
    });
    Ok((finite(next)?, OptState::Adam { first, second, step }))
}

fn finite(params: MlpParams) -> Result<MlpParams> {
    if params.layers().iter().all(|l| l.weight.is_finite() && l.bias.is_finite()) {
        Ok(params)
    } else {
        Err(Error::Numeric("optimizer step produced non-finite parameters".into()))
    }
}

/// Owns the optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptConfig,
    state: OptState,
}

impl Optimizer {
    pub fn new(cfg: OptConfig, params: &MlpParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { state: OptState::new(&cfg, params), cfg })
    }

    pub fn step(&mut self, params: &MlpParams, grads: &ParamGrads, scale: f64) -> Result<MlpParams> {
        match self.cfg.kind {
            OptKind::Sgd => sgd_step(params, grads, scale, &self.cfg),
            OptKind::Adam => {
                let (next, state) = adam_step(params, grads, scale, &self.state, &self.cfg)?;
                self.state = state;
                Ok(next)
            }
        }
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }
}
