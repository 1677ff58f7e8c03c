//! Grid sweep over (strategy, relax factor): one run per grid point and
//! seed, selection by median validation NDCG, test metrics reported for the
//! winner only.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use metabalance::{Error, Result, Strategy};

use crate::config::{ExperimentConfig, MethodConfig};
use crate::run::{prepare_dataset, train_on, RunRecord};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strategy: Strategy,
    pub relax_factor: f64,
    /// Median best-epoch validation NDCG over the seeds.
    pub score: f64,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub winner: usize,
    /// Per-metric median over the winning point's runs.
    pub winner_test: BTreeMap<String, f64>,
}

impl SweepOutcome {
    pub fn winning_point(&self) -> &SweepPoint {
        &self.points[self.winner]
    }
}

/// Median of an unordered sample (mean of the middle two when even).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs the full grid. Every grid point trains from scratch on the shared
/// dataset, once per seed; points and seeds run in parallel as isolated
/// runs.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    if cfg.sweep.strategies.is_empty() || cfg.sweep.relax_factors.is_empty() {
        return Err(Error::Contract("sweep grids must be non-empty".into()));
    }
    let data = prepare_dataset(cfg)?;
    let seeds = &cfg.training.seeds;

    let grid: Vec<(Strategy, f64)> = cfg
        .sweep
        .strategies
        .iter()
        .flat_map(|&s| cfg.sweep.relax_factors.iter().map(move |&r| (s, r)))
        .collect();

    let beta = match cfg.method {
        MethodConfig::Metabalance { beta, .. } => beta,
        _ => 0.9,
    };

    let jobs: Vec<(usize, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| seeds.iter().map(move |&s| (pi, s)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(pi, seed)| {
            let (strategy, r) = grid[pi];
            let mut point_cfg = cfg.clone();
            point_cfg.method = MethodConfig::metabalance(strategy, r, beta);
            train_on(&data, &point_cfg, seed, &mut |_| {}).map(|outcome| outcome.record)
        })
        .collect::<Result<_>>()?;

    let mut points: Vec<SweepPoint> = grid
        .iter()
        .map(|&(strategy, relax_factor)| SweepPoint {
            strategy,
            relax_factor,
            score: 0.0,
            runs: Vec::new(),
        })
        .collect();
    for (&(pi, _), record) in jobs.iter().zip(records) {
        points[pi].runs.push(record);
    }
    for p in &mut points {
        let vals: Vec<f64> = p.runs.iter().map(|r| r.best_val).collect();
        p.score = median(&vals);
    }

    let winner = points
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.score
                .total_cmp(&b.score)
                .then(ib.cmp(ia)) // ties: earliest grid point
        })
        .map(|(i, _)| i)
        .expect("non-empty grid");

    let mut winner_test = BTreeMap::new();
    if let Some(first) = points[winner].runs.first() {
        for key in first.test.keys() {
            let vals: Vec<f64> = points[winner]
                .runs
                .iter()
                .filter_map(|r| r.test.get(key).copied())
                .collect();
            winner_test.insert(key.clone(), median(&vals));
        }
    }

    Ok(SweepOutcome {
        points,
        winner,
        winner_test,
    })
}
