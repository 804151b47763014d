use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Optimizer state, one moment buffer per parameter for Adam.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = store
                    .iter()
                    .map(|(_, t)| vec![0.0; t.numel()])
                    .collect();
                Self::Adam {
                    lr,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd { .. } => OptimizerKind::Sgd,
            Self::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one update from the gradients stored on each parameter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        match self {
            Self::Sgd { lr } => {
                for id in ids {
                    let t = store.get_mut(id);
                    let g = t
                        .grad()
                        .ok_or_else(|| Error::Contract("parameter without gradient".into()))?
                        .to_vec();
                    for (w, g) in t.data_mut().iter_mut().zip(g) {
                        *w -= *lr * g;
                    }
                }
            }
            Self::Adam { lr, step, m, v } => {
                if m.len() != ids.len() {
                    return Err(Error::Contract(
                        "optimizer state does not match the parameter set".into(),
                    ));
                }
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (k, id) in ids.into_iter().enumerate() {
                    let t = store.get_mut(id);
                    let g = t
                        .grad()
                        .ok_or_else(|| Error::Contract("parameter without gradient".into()))?
                        .to_vec();
                    let (mk, vk) = (&mut m[k], &mut v[k]);
                    for (i, w) in t.data_mut().iter_mut().enumerate() {
                        mk[i] = ADAM_BETA1 * mk[i] + (1.0 - ADAM_BETA1) * g[i];
                        vk[i] = ADAM_BETA2 * vk[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mhat = mk[i] / bc1;
                        let vhat = vk[i] / bc2;
                        *w -= *lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
