use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated at a zero-based step index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant {
        rate: f64,
    },
    /// `initial * ((1 - final_fraction) * (1 + cos(pi * t / decay_steps)) / 2 + final_fraction)`,
    /// with `t` clamped to `decay_steps`.
    CosineDecay {
        initial: f64,
        decay_steps: usize,
        #[serde(default)]
        final_fraction: f64,
    },
    /// `values[i]` applies while `step <= boundaries[i]`; the last value
    /// applies past the final boundary.
    PiecewiseConstant {
        boundaries: Vec<usize>,
        values: Vec<f64>,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("learning-rate schedule: {msg}")));
        match self {
            LrSchedule::Constant { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                bad("rate must be positive")
            }
            LrSchedule::CosineDecay {
                initial,
                decay_steps,
                final_fraction,
            } => {
                if !(*initial > 0.0 && initial.is_finite()) {
                    bad("initial rate must be positive")
                } else if *decay_steps == 0 {
                    bad("decay_steps must be positive")
                } else if !(0.0..=1.0).contains(final_fraction) {
                    bad("final_fraction must lie in [0, 1]")
                } else {
                    Ok(())
                }
            }
            LrSchedule::PiecewiseConstant { boundaries, values } => {
                if values.len() != boundaries.len() + 1 {
                    bad("needs exactly one more value than boundaries")
                } else if boundaries.windows(2).any(|w| w[0] >= w[1]) {
                    bad("boundaries must be strictly increasing")
                } else if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    bad("values must be positive")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { rate } => *rate,
            LrSchedule::CosineDecay {
                initial,
                decay_steps,
                final_fraction,
            } => {
                let t = step.min(*decay_steps) as f64 / *decay_steps as f64;
                let cosine = 0.5 * (1.0 + (PI * t).cos());
                initial * ((1.0 - final_fraction) * cosine + final_fraction)
            }
            LrSchedule::PiecewiseConstant { boundaries, values } => {
                let i = boundaries.iter().take_while(|&&b| step > b).count();
                values[i]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
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

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam moment accumulators for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect();
        AdamState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Applies one bias-corrected Adam update. Update `t` (one-based) uses
    /// the schedule rate at index `t - 1`.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        schedule: &LrSchedule,
    ) -> Result<()> {
        if grads.len() != store.len() || grads.len() != self.first.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "gradient {:?} for `{}` of shape {:?}",
                        g.shape(),
                        store.name(id),
                        store.get(id).shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let lr = schedule.rate(self.step - 1);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, id) in store.ids().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (j, &gj) in grads[i].data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
