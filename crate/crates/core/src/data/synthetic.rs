//! Seeded multi-behavior dataset generator with a planted preference model.
//!
//! Every behavior draws from one latent user-item affinity, so auxiliary
//! behaviors carry signal about the target behavior and transfer is
//! possible. A per-task signal level controls how noisy each behavior's
//! labels are, and the imbalance knob inflates one auxiliary task's label
//! frequency and loss weight until its gradient dominates training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Interaction, InteractionTable};

/// Makes one auxiliary task dominant: its record count is multiplied by
/// `frequency_mult` and its loss is scaled by `loss_scale` during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceKnob {
    pub task: String,
    pub frequency_mult: f64,
    pub loss_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    /// Task order; index 0 is the target behavior.
    pub tasks: Vec<String>,
    /// Fraction of the user-item matrix carrying each behavior.
    pub densities: Vec<f64>,
    /// How strongly each behavior follows the planted preference; near zero
    /// means nearly random labels.
    pub signal: Vec<f64>,
    pub imbalance: Option<ImbalanceKnob>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 96,
            num_items: 160,
            latent_dim: 4,
            tasks: vec![
                "purchase".to_string(),
                "click".to_string(),
                "add-to-cart".to_string(),
                "add-to-favorite".to_string(),
            ],
            densities: vec![0.06, 0.10, 0.06, 0.04],
            signal: vec![3.0, 3.0, 2.5, 0.6],
            imbalance: Some(ImbalanceKnob {
                task: "click".to_string(),
                frequency_mult: 1.5,
                loss_scale: 12.0,
            }),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim == 0 {
            return Err(Error::Config("synthetic spec sizes must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("synthetic spec lists no tasks".into()));
        }
        if self.densities.len() != self.tasks.len() || self.signal.len() != self.tasks.len() {
            return Err(Error::Config(
                "densities and signal must have one entry per task".into(),
            ));
        }
        if self.densities.iter().any(|&d| d <= 0.0 || d > 1.0) {
            return Err(Error::Config("densities must lie in (0, 1]".into()));
        }
        if let Some(knob) = &self.imbalance {
            if !self.tasks.contains(&knob.task) {
                return Err(Error::Config(format!(
                    "imbalance knob names unknown task `{}`",
                    knob.task
                )));
            }
            if knob.frequency_mult <= 0.0 || knob.loss_scale <= 0.0 {
                return Err(Error::Config("imbalance knob factors must be positive".into()));
            }
        }
        Ok(())
    }

    /// Per-task loss multipliers implied by the imbalance knob.
    pub fn task_loss_scales(&self) -> Vec<f64> {
        let mut scales = vec![1.0; self.tasks.len()];
        if let Some(knob) = &self.imbalance {
            if let Some(t) = self.tasks.iter().position(|n| n == &knob.task) {
                scales[t] = knob.loss_scale;
            }
        }
        scales
    }
}

/// Generates the interaction table: per task, the `n_t` highest-affinity
/// pairs (affinity = planted preference scaled by the task's signal level
/// plus unit noise) become that behavior's records.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<InteractionTable> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.latent_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    };
    let user_factors = draw(spec.num_users * d);
    let item_factors = draw(spec.num_items * d);

    let num_pairs = spec.num_users * spec.num_items;
    let mut affinity = vec![0.0_f64; num_pairs];
    for u in 0..spec.num_users {
        for i in 0..spec.num_items {
            let mut a = 0.0;
            for k in 0..d {
                a += user_factors[u * d + k] * item_factors[i * d + k];
            }
            affinity[u * spec.num_items + i] = a;
        }
    }

    let mut interactions = Vec::new();
    for (t, task) in spec.tasks.iter().enumerate() {
        let mult = spec
            .imbalance
            .as_ref()
            .filter(|k| &k.task == task)
            .map_or(1.0, |k| k.frequency_mult);
        let count = ((spec.densities[t] * mult * num_pairs as f64).round() as usize)
            .clamp(1, num_pairs);
        let mut keyed: Vec<(f64, usize)> = affinity
            .iter()
            .enumerate()
            .map(|(pair, &a)| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (spec.signal[t] * a + noise, pair)
            })
            .collect();
        keyed.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, pair) in keyed.iter().take(count) {
            interactions.push(Interaction {
                user: pair / spec.num_items,
                item: pair % spec.num_items,
                task: t,
                timestamp: None,
            });
        }
    }

    InteractionTable::new(
        interactions,
        spec.num_users,
        spec.num_items,
        spec.tasks.clone(),
    )
}
