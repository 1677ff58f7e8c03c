//! Gradient balancing methods behind one common interface.
//!
//! Every method — MetaBalance and each baseline — rewrites the per-task
//! gradient sets in place given the same inputs, so the training loop can
//! swap methods through configuration alone.

mod direction;
mod meta;
mod weights;

pub use direction::{grad_similarity_filter, grad_surgery_project, GradSimilarity, GradSurgery, OlAux};
pub use meta::{
    balance_step, compute_weight, strategy_gate, update_ema, BalancerConfig, MagnitudeState,
    MetaBalance, Strategy,
};
pub use weights::{
    uncertainty_total_loss, weights_from_ratios, Dwa, FixedWeights, GradNorm, GradNormState,
    Uncertainty,
};

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grads::GradientSet;
use crate::scalar::Scalar;

/// Per-iteration inputs shared by every balancing method.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a, F> {
    /// 1-based training iteration.
    pub iteration: u64,
    /// Per-task losses for the current mini-batch, target first.
    pub losses: &'a [F],
}

/// Common balancing interface: may rescale or rewrite the gradient sets.
pub trait Balancer<F: Scalar>: Send {
    fn name(&self) -> &'static str;

    fn balance(
        &mut self,
        target: &mut GradientSet<F>,
        aux: &mut [GradientSet<F>],
        ctx: &StepContext<'_, F>,
    ) -> Result<BalanceReport<F>>;

    /// Rough in-memory footprint of the method's internal state.
    fn state_bytes(&self) -> usize {
        0
    }
}

/// One balancing decision: a group/task pair with its pre/post magnitudes.
#[derive(Clone, Debug, Serialize)]
pub struct BalanceRow<F> {
    pub iteration: u64,
    pub group: String,
    pub task: String,
    pub pre_norm: F,
    pub post_norm: F,
    pub weight: F,
    pub gated: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BalanceReport<F> {
    pub rows: Vec<BalanceRow<F>>,
}

impl<F: Scalar> BalanceReport<F> {
    pub fn empty() -> Self {
        Self { rows: Vec::new() }
    }

    /// Streams rows as CSV: `iteration,group,task,pre_norm,post_norm,weight,gated`.
    pub fn write_csv<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "iteration,group,task,pre_norm,post_norm,weight,gated")?;
        }
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.group,
                r.task,
                r.pre_norm.as_f64(),
                r.post_norm.as_f64(),
                r.weight.as_f64(),
                r.gated
            )?;
        }
        Ok(())
    }
}

/// Elementwise sum of the target gradient and every auxiliary gradient.
pub fn sum_gradients<F: Scalar>(
    target: &GradientSet<F>,
    aux: &[GradientSet<F>],
) -> Result<GradientSet<F>> {
    let mut total = target.clone();
    total.set_task("total");
    for a in aux {
        if !total.same_keys(a) {
            return Err(Error::Contract(format!(
                "gradient set `{}` has different group keys than the target",
                a.task()
            )));
        }
        total.add_assign(a)?;
    }
    Ok(total)
}
