//! Parameter update rules consuming the summed (possibly balanced) gradient.
//!
//! The rules are fully decoupled from balancing: an optimizer only ever sees
//! the total gradient and its own moment state.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grads::GradientSet;
use crate::params::ParameterGroup;
use crate::scalar::Scalar;

/// Update rule and its hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// `theta <- theta - lr * g`
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Adagrad { lr: f64, epsilon: f64 },
    RmsProp { lr: f64, decay: f64, epsilon: f64 },
}

impl Rule {
    pub fn adam(lr: f64) -> Self {
        Rule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adagrad(lr: f64) -> Self {
        Rule::Adagrad { lr, epsilon: 1e-10 }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Rule::RmsProp {
            lr,
            decay: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Sgd { .. } => "sgd",
            Rule::Adam { .. } => "adam",
            Rule::Adagrad { .. } => "adagrad",
            Rule::RmsProp { .. } => "rmsprop",
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot<F> {
    m: Vec<F>,
    v: Vec<F>,
}

/// Optimizer state: per-group moment accumulators plus a step counter.
#[derive(Clone, Debug)]
pub struct Optimizer<F> {
    rule: Rule,
    slots: IndexMap<String, Slot<F>>,
    step: u64,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            slots: IndexMap::new(),
            step: 0,
        }
    }

    pub fn rule(&self) -> &Rule {
        &self.rule
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter group from the total gradient.
    pub fn apply_update(
        &mut self,
        groups: &mut [ParameterGroup<F>],
        total: &GradientSet<F>,
    ) -> Result<()> {
        self.step += 1;
        for group in groups.iter_mut() {
            let grad = total.get(group.name()).ok_or_else(|| {
                Error::Contract(format!(
                    "total gradient lacks parameter group `{}`",
                    group.name()
                ))
            })?;
            if grad.len() != group.len() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match group `{}` length {}",
                    grad.len(),
                    group.name(),
                    group.len()
                )));
            }
            let slot = self
                .slots
                .entry(group.name().to_string())
                .or_insert_with(|| match self.rule {
                    Rule::Sgd { .. } => Slot::default(),
                    Rule::Adam { .. } => Slot {
                        m: vec![F::zero(); grad.len()],
                        v: vec![F::zero(); grad.len()],
                    },
                    Rule::Adagrad { .. } | Rule::RmsProp { .. } => Slot {
                        m: Vec::new(),
                        v: vec![F::zero(); grad.len()],
                    },
                });
            let theta = group.tensor_mut().data_mut();
            match self.rule {
                Rule::Sgd { lr } => {
                    let lr = F::real(lr);
                    for (t, &g) in theta.iter_mut().zip(grad) {
                        *t = *t - lr * g;
                    }
                }
                Rule::Adam {
                    lr,
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let lr = F::real(lr);
                    let b1 = F::real(beta1);
                    let b2 = F::real(beta2);
                    let eps = F::real(epsilon);
                    let bc1 = F::one() - F::real(beta1.powi(self.step as i32));
                    let bc2 = F::one() - F::real(beta2.powi(self.step as i32));
                    for (k, (t, &g)) in theta.iter_mut().zip(grad).enumerate() {
                        slot.m[k] = b1 * slot.m[k] + (F::one() - b1) * g;
                        slot.v[k] = b2 * slot.v[k] + (F::one() - b2) * g * g;
                        let m_hat = slot.m[k] / bc1;
                        let v_hat = slot.v[k] / bc2;
                        *t = *t - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                Rule::Adagrad { lr, epsilon } => {
                    let lr = F::real(lr);
                    let eps = F::real(epsilon);
                    for (k, (t, &g)) in theta.iter_mut().zip(grad).enumerate() {
                        slot.v[k] += g * g;
                        *t = *t - lr * g / (slot.v[k].sqrt() + eps);
                    }
                }
                Rule::RmsProp { lr, decay, epsilon } => {
                    let lr = F::real(lr);
                    let rho = F::real(decay);
                    let eps = F::real(epsilon);
                    for (k, (t, &g)) in theta.iter_mut().zip(grad).enumerate() {
                        slot.v[k] = rho * slot.v[k] + (F::one() - rho) * g * g;
                        *t = *t - lr * g / (slot.v[k].sqrt() + eps);
                    }
                }
            }
            if !group.tensor().all_finite() {
                return Err(Error::Training(format!(
                    "non-finite parameters after updating group `{}`",
                    group.name()
                )));
            }
        }
        Ok(())
    }
}
