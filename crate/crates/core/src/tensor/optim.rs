use crate::error::{FusionError, Result};
use crate::tensor::Tensor;

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(FusionError::Domain(format!("learning rate {lr}")))
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_lr(lr)?;
    if params.len() != grads.len() {
        return Err(FusionError::Dimension(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check_lr(lr)?;
    if params.len() != grads.len() {
        return Err(FusionError::Dimension(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer over a fixed list of tensors; Adam keeps one state per tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        config: AdamConfig,
        states: Vec<AdamState>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            config: AdamConfig::default(),
            states: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Vec<f64>],
    ) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => {
                let mut count = 0;
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_step(p.data_mut(), g, *lr)?;
                    count += 1;
                }
                debug_assert_eq!(count, grads.len());
                Ok(())
            }
            Optimizer::Adam { lr, config, states } => {
                if states.len() != grads.len() {
                    *states = vec![AdamState::default(); grads.len()];
                }
                for ((p, g), s) in params.into_iter().zip(grads).zip(states.iter_mut()) {
                    adam_step(p.data_mut(), g, s, *lr, *config)?;
                }
                Ok(())
            }
        }
    }
}
