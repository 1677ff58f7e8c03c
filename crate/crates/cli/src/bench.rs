//! Wall-clock breakdown of the training step phases.

use serde::{Deserialize, Serialize};

use metabalance::Result;

use crate::config::ExperimentConfig;
use crate::run::{prepare_dataset, PhaseSeconds, Trainer};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub steps: usize,
    pub phase_seconds: PhaseSeconds,
    /// Balance-phase share of the total step time.
    pub balance_share: f64,
    pub balancer_state_bytes: usize,
    pub mean_step_ms: f64,
}

/// Runs `steps` training iterations on the configured workload (no
/// evaluation) and reports the per-phase split.
pub fn benchmark_overhead(cfg: &ExperimentConfig, steps: usize) -> Result<BenchReport> {
    let data = prepare_dataset(cfg)?;
    let seed = cfg.training.seeds.first().copied().unwrap_or(7);
    let mut trainer = Trainer::new(cfg, &data, seed)?;
    let iters = trainer.iterations_per_epoch();
    for step in 0..steps {
        trainer.step(step / iters, step % iters, &mut |_| {})?;
    }
    let phase_seconds = trainer.phase_seconds;
    let total = phase_seconds.step_total();
    Ok(BenchReport {
        method: cfg.method.label(),
        steps,
        phase_seconds,
        balance_share: if total > 0.0 {
            phase_seconds.balance / total
        } else {
            0.0
        },
        balancer_state_bytes: trainer.balancer_state_bytes(),
        mean_step_ms: if steps > 0 {
            1000.0 * total / steps as f64
        } else {
            0.0
        },
    })
}
