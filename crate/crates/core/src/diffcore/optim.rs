use std::collections::HashMap;

use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// First and second moment buffers keyed by fully scoped parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    moments: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self, full_name: &str) -> u64 {
        self.moments.get(full_name).map_or(0, |m| m.step)
    }
}

/// One bias-corrected Adam update of every entry in `params`. Every entry
/// must carry a gradient.
pub fn adam_step(params: &mut ParameterSet, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {} must be positive", cfg.lr)));
    }
    let scope = params.scope().to_string();
    if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGrad(format!("{scope}.{name}")));
    }
    let (b1, b2) = cfg.betas;
    for (name, p) in params.iter_mut() {
        let key = format!("{scope}.{name}");
        let grad = p.grad.as_ref().expect("checked above");
        let mom = state.moments.entry(key.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
            step: 0,
        });
        if mom.m.shape() != p.value.shape() || grad.shape() != p.value.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                shapes: vec![p.value.shape().to_vec(), mom.m.shape().to_vec(), grad.shape().to_vec()],
            });
        }
        mom.step += 1;
        let bc1 = 1.0 - b1.powi(mom.step as i32);
        let bc2 = 1.0 - b2.powi(mom.step as i32);
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Adam configuration plus its state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { config: AdamConfig::with_lr(lr), state: AdamState::new() }
    }

    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        adam_step(params, &self.config, &mut self.state)
    }
}
