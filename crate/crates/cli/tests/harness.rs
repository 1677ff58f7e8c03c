//! Training-loop behavior: smoke runs, determinism, loop ordering, tracing,
//! sweep mechanics, and the synthetic imbalance oracle.

mod common;

use common::*;

use metabalance::data::ImbalanceKnob;
use metabalance::Strategy;
use metabalance_cli::bench::benchmark_overhead;
use metabalance_cli::config::{DatasetConfig, MethodConfig};
use metabalance_cli::run::{train, train_instrumented, TrainPhase};
use metabalance_cli::sweep::{median, sweep};

fn quick_config() -> metabalance_cli::ExperimentConfig {
    let mut cfg = tiny_config();
    cfg.method = MethodConfig::VanillaMulti;
    cfg
}

#[test]
fn vanilla_smoke_run_records_every_epoch() {
    let cfg = quick_config();
    let outcome = train(&cfg, 7).unwrap();
    assert_eq!(outcome.record.epochs.len(), 2);
    for epoch in &outcome.record.epochs {
        assert_eq!(epoch.task_losses.len(), 4);
        assert!(epoch.task_losses.iter().all(|l| l.is_finite() && *l > 0.0));
        assert!(epoch.val.contains_key("ndcg@10"));
    }
}

#[test]
fn single_loss_zeroes_auxiliary_gradients_in_the_trace() {
    let mut cfg = quick_config();
    cfg.method = MethodConfig::SingleLoss;
    cfg.trace.enabled = true;
    let outcome = train(&cfg, 7).unwrap();
    let rows = outcome.record.trace.as_ref().unwrap();
    for row in rows {
        if row.task != "purchase" {
            assert_eq!(row.post_mean, 0.0, "{row:?}");
        }
    }
}

#[test]
fn same_config_and_seed_reproduce_the_run_record() {
    let mut cfg = quick_config();
    cfg.trace.enabled = true;
    let a = train(&cfg, 11).unwrap();
    let b = train(&cfg, 11).unwrap();
    assert_eq!(a.record.without_timings(), b.record.without_timings());
    let c = train(&cfg, 12).unwrap();
    assert_ne!(a.record.without_timings(), c.record.without_timings());
}

/// The loop must run forward, then one backward per task, then balance,
/// then summation, then the update, every iteration.
#[test]
fn loop_phases_follow_the_prescribed_order() {
    let mut cfg = quick_config();
    cfg.training.max_epochs = 1;
    cfg.method = MethodConfig::metabalance(Strategy::C, 0.7, 0.9);
    let mut phases = Vec::new();
    train_instrumented(&cfg, 7, &mut |p| phases.push(p)).unwrap();

    let mut iter_blocks = Vec::new();
    let mut current = Vec::new();
    for p in &phases {
        match p {
            TrainPhase::EpochEnd(_) => {}
            TrainPhase::Update => {
                current.push(*p);
                iter_blocks.push(std::mem::take(&mut current));
            }
            other => current.push(*other),
        }
    }
    assert!(!iter_blocks.is_empty());
    for block in &iter_blocks {
        let expected: Vec<TrainPhase> = std::iter::once(TrainPhase::Forward)
            .chain((0..4).map(TrainPhase::Backward))
            .chain([TrainPhase::Balance, TrainPhase::Sum, TrainPhase::Update])
            .collect();
        assert_eq!(block, &expected);
    }
}

#[test]
fn early_stopping_selects_the_validation_argmax() {
    let mut cfg = quick_config();
    cfg.training.max_epochs = 10;
    cfg.training.patience = 3;
    let outcome = train(&cfg, 7).unwrap();
    let record = &outcome.record;
    let scores: Vec<f64> = record.epochs.iter().map(|e| e.val["ndcg@10"]).collect();
    let argmax = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    assert_eq!(record.best_epoch, argmax);
    assert!((record.best_val - scores[argmax]).abs() < 1e-15);
    // Ran no further than patience epochs past the last improvement.
    assert!(record.epochs.len() <= argmax + cfg.training.patience + 1);
}

#[test]
fn sweep_of_one_point_matches_plain_training() {
    let mut cfg = quick_config();
    cfg.method = MethodConfig::metabalance(Strategy::C, 0.7, 0.9);
    cfg.sweep.strategies = vec![Strategy::C];
    cfg.sweep.relax_factors = vec![0.7];
    cfg.training.seeds = vec![7];
    let outcome = sweep(&cfg).unwrap();
    assert_eq!(outcome.points.len(), 1);
    let direct = train(&cfg, 7).unwrap();
    assert_eq!(
        outcome.points[0].runs[0].without_timings(),
        direct.record.without_timings()
    );
}

#[test]
fn sweep_lists_every_grid_point_exactly_once() {
    let mut cfg = quick_config();
    cfg.training.seeds = vec![7];
    cfg.sweep.strategies = vec![Strategy::A, Strategy::C];
    cfg.sweep.relax_factors = vec![0.2, 0.8];
    let outcome = sweep(&cfg).unwrap();
    let mut points: Vec<(String, String)> = outcome
        .points
        .iter()
        .map(|p| (p.strategy.to_string(), format!("{}", p.relax_factor)))
        .collect();
    points.sort();
    points.dedup();
    assert_eq!(points.len(), 4);
    for p in &outcome.points {
        assert_eq!(p.runs.len(), 1);
    }
}

#[test]
fn empty_sweep_grid_is_a_contract_violation() {
    let mut cfg = quick_config();
    cfg.sweep.relax_factors = vec![];
    assert_eq!(sweep(&cfg).unwrap_err().category(), "contract");
}

#[test]
fn median_handles_odd_and_even_samples() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

/// With the knob at 50, the dominant auxiliary's gradient magnitude
/// overtakes the target's within the first epoch of unbalanced training.
#[test]
fn imbalance_knob_dominates_within_the_first_epoch() {
    let mut cfg = quick_config();
    cfg.training.max_epochs = 1;
    cfg.trace.enabled = true;
    if let DatasetConfig::Synthetic { spec } = &mut cfg.dataset {
        spec.imbalance = Some(ImbalanceKnob {
            task: "click".into(),
            frequency_mult: 1.5,
            loss_scale: 50.0,
        });
    }
    let outcome = train(&cfg, 7).unwrap();
    let rows = outcome.record.trace.as_ref().unwrap();
    let ratio = pre_ratio(rows, 0, "click", "purchase");
    assert!(ratio > 1.0, "click/target ratio {ratio} not dominant");
}

#[test]
fn trace_rows_with_vanilla_method_show_no_balancing() {
    let mut cfg = quick_config();
    cfg.trace.enabled = true;
    let outcome = train(&cfg, 7).unwrap();
    for row in outcome.record.trace.as_ref().unwrap() {
        assert_eq!(row.pre_mean, row.post_mean, "{row:?}");
    }
}

/// Exact-match balancing (r=1, no smoothing) pins every auxiliary's
/// post-balance epoch mean to the target's on every shared group.
#[test]
fn exact_match_balancing_collapses_the_trace_means() {
    let mut cfg = tiny_config();
    cfg.training.batch_size = 256;
    cfg.method = MethodConfig::metabalance(Strategy::C, 1.0, 0.0);
    cfg.trace.enabled = true;
    let outcome = train(&cfg, 7).unwrap();
    let rows = outcome.record.trace.as_ref().unwrap();
    let last = last_epoch(rows);
    let target_by_group: std::collections::HashMap<&str, f64> = rows
        .iter()
        .filter(|r| r.epoch == last && r.task == "purchase")
        .map(|r| (r.group.as_str(), r.post_mean))
        .collect();
    for row in rows.iter().filter(|r| r.epoch == last) {
        if row.task != "purchase" && is_shared_group(&row.group) {
            let target = target_by_group[row.group.as_str()];
            let rel = (row.post_mean - target).abs() / target.max(1e-12);
            assert!(rel < 0.02, "group {} task {}: {rel}", row.group, row.task);
        }
    }
}

/// A larger relax factor closes the auxiliary-to-target magnitude gap.
#[test]
fn higher_relax_factor_tightens_magnitudes() {
    let gap_at = |r: f64| -> f64 {
        let mut cfg = tiny_config();
        cfg.training.max_epochs = 3;
        cfg.training.patience = 3;
        cfg.method = MethodConfig::metabalance(Strategy::C, r, 0.9);
        cfg.trace.enabled = true;
        let outcome = train(&cfg, 7).unwrap();
        let rows = outcome.record.trace.as_ref().unwrap();
        let tasks = ["purchase", "click", "add-to-cart", "add-to-favorite"]
            .map(String::from)
            .to_vec();
        (aux_post_ratio(rows, last_epoch(rows), &tasks) - 1.0).abs()
    };
    let wide = gap_at(0.2);
    let tight = gap_at(0.7);
    assert!(
        tight < wide,
        "gap at r=0.7 ({tight}) not below gap at r=0.2 ({wide})"
    );
}

#[test]
fn vanilla_bench_spends_nothing_on_balancing() {
    let mut cfg = quick_config();
    cfg.training.max_epochs = 1;
    let report = benchmark_overhead(&cfg, 20).unwrap();
    assert!(
        report.balance_share < 0.05,
        "balance share {} for the null method",
        report.balance_share
    );
}

/// Backward work scales with the task count; doubling the auxiliary count
/// roughly doubles backward time.
#[test]
fn backward_time_scales_with_task_count() {
    let bench_tasks = |tasks: usize| {
        let mut cfg = tiny_config();
        if let DatasetConfig::Synthetic { spec } = &mut cfg.dataset {
            spec.tasks.truncate(tasks);
            spec.densities.truncate(tasks);
            spec.signal.truncate(tasks);
            if tasks < 2 {
                spec.imbalance = None;
            }
        }
        let reports: Vec<f64> = (0..3)
            .map(|_| {
                benchmark_overhead(&cfg, 30)
                    .unwrap()
                    .phase_seconds
                    .backward
            })
            .collect();
        median(&reports)
    };
    let two_tasks = bench_tasks(2);
    let four_tasks = bench_tasks(4);
    let ratio = four_tasks / two_tasks;
    assert!(
        (1.2..=4.0).contains(&ratio),
        "backward time ratio {ratio} far from the expected ~2x"
    );
}
