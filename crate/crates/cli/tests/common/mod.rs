//! Shared helpers for harness and acceptance tests: the calibrated
//! synthetic experiment configs and trace-ratio summaries.

use metabalance::data::{ImbalanceKnob, SyntheticSpec};
use metabalance::Strategy;
use metabalance_cli::config::{DatasetConfig, ExperimentConfig, MethodConfig, OptimizerConfig};
use metabalance_cli::run::TraceRow;

/// Desk-scale synthetic dataset with one dominant auxiliary task: click
/// carries 1.5x the base frequency and a 35x loss scale, which drives its
/// gradient magnitude well past 10x the target's under unbalanced training.
/// Add-to-cart is clean but sparse, so its per-batch gradient norms are
/// noisy estimates; add-to-favorite is sparse and nearly random, so
/// inflating it to full target magnitude (relax factor 1) injects noise.
pub fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_users: 192,
        num_items: 256,
        latent_dim: 4,
        tasks: vec![
            "purchase".into(),
            "click".into(),
            "add-to-cart".into(),
            "add-to-favorite".into(),
        ],
        densities: vec![0.05, 0.14, 0.025, 0.04],
        signal: vec![3.0, 3.5, 3.0, 0.4],
        imbalance: Some(ImbalanceKnob {
            task: "click".into(),
            frequency_mult: 1.5,
            loss_scale: 35.0,
        }),
    }
}

/// The experiment configuration the synthetic studies are frozen to.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Synthetic { spec: desk_spec() };
    cfg.model.embedding_dim = 16;
    cfg.model.shared_layers = vec![16, 8];
    cfg.model.tower_layers = vec![16];
    cfg.model.dropout = 0.1;
    cfg.model.weight_decay = 1e-7;
    cfg.optimizer = OptimizerConfig::Adam {
        lr: 0.001,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
    cfg.training.batch_size = 128;
    cfg.training.negatives_per_positive = 4;
    cfg.training.max_epochs = 24;
    cfg.training.patience = 8;
    cfg.training.seeds = vec![7, 11, 13];
    cfg.training.split_seed = 42;
    cfg.method = MethodConfig::metabalance(Strategy::C, 0.9, 0.9);
    cfg
}

/// A small, fast variant for loop-mechanics tests.
#[allow(dead_code)]
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.dataset = DatasetConfig::Synthetic {
        spec: SyntheticSpec {
            num_users: 48,
            num_items: 80,
            densities: vec![0.08, 0.12, 0.08, 0.06],
            signal: vec![3.0, 3.0, 2.5, 0.5],
            imbalance: Some(ImbalanceKnob {
                task: "click".into(),
                frequency_mult: 1.5,
                loss_scale: 10.0,
            }),
            ..desk_spec()
        },
    };
    cfg.model.embedding_dim = 8;
    cfg.model.shared_layers = vec![8, 4];
    cfg.model.tower_layers = vec![8];
    cfg.training.batch_size = 64;
    cfg.training.max_epochs = 2;
    cfg.training.patience = 2;
    cfg
}

pub fn is_shared_group(name: &str) -> bool {
    name.starts_with("shared.") || name.ends_with("_embedding")
}

fn mean_over_shared(rows: &[TraceRow], epoch: usize, task: &str, post: bool) -> f64 {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.epoch == epoch && r.task == task && is_shared_group(&r.group))
        .map(|r| if post { r.post_mean } else { r.pre_mean })
        .collect();
    assert!(!values.is_empty(), "no trace rows for task {task}");
    values.iter().sum::<f64>() / values.len() as f64
}

/// `task`'s epoch-mean magnitude over shared groups, relative to the
/// target's, before balancing.
pub fn pre_ratio(rows: &[TraceRow], epoch: usize, task: &str, target: &str) -> f64 {
    mean_over_shared(rows, epoch, task, false) / mean_over_shared(rows, epoch, target, false)
}

/// Mean post-balance magnitude over all auxiliary tasks and shared groups,
/// relative to the target's post-balance magnitude.
pub fn aux_post_ratio(rows: &[TraceRow], epoch: usize, tasks: &[String]) -> f64 {
    let target = &tasks[0];
    let aux_mean = tasks[1..]
        .iter()
        .map(|t| mean_over_shared(rows, epoch, t, true))
        .sum::<f64>()
        / (tasks.len() - 1) as f64;
    aux_mean / mean_over_shared(rows, epoch, target, true)
}

pub fn last_epoch(rows: &[TraceRow]) -> usize {
    rows.iter().map(|r| r.epoch).max().expect("non-empty trace")
}

#[allow(dead_code)]
pub fn epochs_of(rows: &[TraceRow]) -> Vec<usize> {
    let mut es: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
    es.sort_unstable();
    es.dedup();
    es
}
