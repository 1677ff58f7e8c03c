//! The training loop: one forward pass per iteration, one backward pass per
//! task, the configured balancing method, gradient summation, and the
//! optimizer update — with per-epoch validation, early stopping, magnitude
//! tracing, and phase timing.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use metabalance::balance::sum_gradients;
use metabalance::data::{
    filter_by_count, generate_synthetic, load_interactions, sample_batch, split, FilterMode,
    FormatDescriptor, SplitBundle,
};
use metabalance::eval::evaluate;
use metabalance::grads::l2_norm;
use metabalance::model::{Mode, ModelConfig};
use metabalance::{
    Balancer, Error, GradientSet, MultiTaskModel, Optimizer, Real, Result, StepContext,
};

use crate::config::{DatasetConfig, ExperimentConfig};

/// Deterministic per-(epoch, iteration) seed derivation.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    splitmix64(base ^ splitmix64(a ^ splitmix64(b)))
}

/// Split data plus the per-task loss scales the dataset prescribes.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub bundle: SplitBundle,
    pub base_loss_scales: Vec<f64>,
}

/// Materializes the configured dataset: synthetic generation or file
/// ingestion with count filtering, then the target split.
pub fn prepare_dataset(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let seed = cfg.training.split_seed;
    match &cfg.dataset {
        DatasetConfig::Synthetic { spec } => {
            let table = generate_synthetic(spec, seed)?;
            let bundle = split(&table, cfg.training.ratios, seed)?;
            Ok(PreparedData {
                bundle,
                base_loss_scales: spec.task_loss_scales(),
            })
        }
        DatasetConfig::Files {
            path,
            format,
            min_user_purchases,
            min_item_purchasers,
            single_pass_filter,
        } => {
            let desc = FormatDescriptor::from_toml_file(format)?;
            let (table, _maps) = load_interactions(path, &desc)?;
            let mode = if *single_pass_filter {
                FilterMode::SinglePass
            } else {
                FilterMode::Fixpoint
            };
            let filtered = filter_by_count(&table, *min_user_purchases, *min_item_purchasers, mode)?;
            let scales = vec![1.0; filtered.table.task_names.len()];
            let bundle = split(&filtered.table, cfg.training.ratios, seed)?;
            Ok(PreparedData {
                bundle,
                base_loss_scales: scales,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSeconds {
    pub forward: f64,
    pub backward: f64,
    pub balance: f64,
    pub sum: f64,
    pub update: f64,
    pub eval: f64,
}

impl PhaseSeconds {
    /// Wall-clock of one training step's phases, evaluation excluded.
    pub fn step_total(&self) -> f64 {
        self.forward + self.backward + self.balance + self.sum + self.update
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-task losses over the epoch's iterations, target first.
    pub task_losses: Vec<f64>,
    /// Validation metrics keyed `metric@K`.
    pub val: BTreeMap<String, f64>,
}

/// Epoch-mean gradient magnitudes per (group, task), before and after
/// balancing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub group: String,
    pub task: String,
    pub pre_mean: f64,
    pub post_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub method: String,
    pub optimizer: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Test metrics of the checkpoint taken at the best validation epoch.
    pub test: BTreeMap<String, f64>,
    pub phase_seconds: PhaseSeconds,
    pub trace: Option<Vec<TraceRow>>,
    /// Full resolved configuration, echoed for provenance.
    pub config: ExperimentConfig,
}

impl RunRecord {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            phase_seconds: PhaseSeconds::default(),
            ..self.clone()
        }
    }

    pub fn val_metric(&self, epoch: usize, metric: &str, k: usize) -> Option<f64> {
        self.epochs
            .get(epoch)?
            .val
            .get(&format!("{metric}@{k}"))
            .copied()
    }
}

/// Training produced both the run record and the best-epoch model.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best_model: MultiTaskModel,
}

/// Observable checkpoints of the training loop, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainPhase {
    Forward,
    Backward(usize),
    Balance,
    Sum,
    Update,
    EpochEnd(usize),
}

#[derive(Default)]
struct TraceAccumulator {
    pre: BTreeMap<(String, String), f64>,
    post: BTreeMap<(String, String), f64>,
    count: usize,
    rows: Vec<TraceRow>,
}

impl TraceAccumulator {
    fn record(
        &mut self,
        into_post: bool,
        target: &GradientSet,
        aux: &[GradientSet],
    ) {
        let sums = if into_post { &mut self.post } else { &mut self.pre };
        for set in std::iter::once(target).chain(aux.iter()) {
            for (group, grad) in set.iter() {
                *sums
                    .entry((group.to_string(), set.task().to_string()))
                    .or_insert(0.0) += l2_norm(grad);
            }
        }
        if into_post {
            self.count += 1;
        }
    }

    fn finish_epoch(&mut self, epoch: usize) {
        let n = self.count.max(1) as f64;
        for ((group, task), pre_sum) in std::mem::take(&mut self.pre) {
            let post_sum = self
                .post
                .get(&(group.clone(), task.clone()))
                .copied()
                .unwrap_or(0.0);
            self.rows.push(TraceRow {
                epoch,
                group,
                task,
                pre_mean: pre_sum / n,
                post_mean: post_sum / n,
            });
        }
        self.post.clear();
        self.count = 0;
    }
}

/// One training run's mutable state; drives both full runs and benchmark
/// step loops.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    pub model: MultiTaskModel,
    balancer: Box<dyn Balancer<Real>>,
    optimizer: Optimizer,
    task_names: Vec<String>,
    seed: u64,
    iteration: u64,
    pub phase_seconds: PhaseSeconds,
    trace: Option<TraceAccumulator>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a PreparedData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bundle = &data.bundle;
        let num_tasks = bundle.num_tasks();
        if num_tasks < 1 {
            return Err(Error::Config("dataset defines no tasks".into()));
        }
        let model_cfg = ModelConfig {
            num_users: bundle.num_users,
            num_items: bundle.num_items,
            num_tasks,
            embedding_dim: cfg.model.embedding_dim,
            shared_layers: cfg.model.shared_layers.clone(),
            tower_layers: cfg.model.tower_layers.clone(),
            dropout: cfg.model.dropout,
            weight_decay: cfg.model.weight_decay,
        };
        let model = MultiTaskModel::init(model_cfg, seed)?;
        let balancer = cfg.method.build(model.parameter_groups(), num_tasks)?;
        let optimizer = Optimizer::new(cfg.optimizer.rule());
        Ok(Self {
            cfg,
            data,
            model,
            balancer,
            optimizer,
            task_names: bundle.task_names.clone(),
            seed,
            iteration: 0,
            phase_seconds: PhaseSeconds::default(),
            trace: cfg.trace.enabled.then(TraceAccumulator::default),
        })
    }

    pub fn iterations_per_epoch(&self) -> usize {
        (self.data.bundle.train.len() / self.cfg.training.batch_size).max(1)
    }

    pub fn balancer_state_bytes(&self) -> usize {
        self.balancer.state_bytes()
    }

    fn loss_scales_for(&self, batch_seed: u64) -> Vec<Real> {
        let jitter = self.cfg.training.loss_jitter;
        if jitter <= 0.0 {
            return self.data.base_loss_scales.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(batch_seed, 0xA5A5_5A5A, 1));
        self.data
            .base_loss_scales
            .iter()
            .map(|&s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * (jitter * z).exp()
            })
            .collect()
    }

    /// Runs one iteration: sample, forward, per-task backward, balance,
    /// sum, update. Returns the per-task losses.
    pub fn step(
        &mut self,
        epoch: usize,
        iter: usize,
        on_phase: &mut dyn FnMut(TrainPhase),
    ) -> Result<Vec<f64>> {
        let t = &self.cfg.training;
        let batch_seed = derive_seed(self.seed, epoch as u64, iter as u64);
        let mut batch = sample_batch::<Real>(
            &self.data.bundle,
            t.batch_size,
            t.negatives_per_positive,
            batch_seed,
        )?;
        batch.set_loss_scales(self.loss_scales_for(batch_seed))?;

        let clock = Instant::now();
        let (losses, tape, loss_ids) = self
            .model
            .batch_losses(&batch, Mode::Train, batch_seed)
            .map_err(|e| at_iteration(e, epoch, iter))?;
        self.phase_seconds.forward += clock.elapsed().as_secs_f64();
        on_phase(TrainPhase::Forward);

        let clock = Instant::now();
        let mut sets: Vec<GradientSet> = Vec::with_capacity(loss_ids.len());
        for (task, &id) in loss_ids.iter().enumerate() {
            sets.push(
                tape.backward(id, self.task_names[task].clone())
                    .map_err(|e| at_iteration(e, epoch, iter))?,
            );
            on_phase(TrainPhase::Backward(task));
        }
        self.phase_seconds.backward += clock.elapsed().as_secs_f64();

        let (target, aux) = sets.split_at_mut(1);
        let target = &mut target[0];
        if let Some(trace) = self.trace.as_mut() {
            trace.record(false, target, aux);
        }

        self.iteration += 1;
        let clock = Instant::now();
        let ctx = StepContext {
            iteration: self.iteration,
            losses: losses.values(),
        };
        self.balancer
            .balance(target, aux, &ctx)
            .map_err(|e| at_iteration(e, epoch, iter))?;
        self.phase_seconds.balance += clock.elapsed().as_secs_f64();
        on_phase(TrainPhase::Balance);

        if let Some(trace) = self.trace.as_mut() {
            trace.record(true, target, aux);
        }

        let clock = Instant::now();
        let total = sum_gradients(target, aux).map_err(|e| at_iteration(e, epoch, iter))?;
        self.phase_seconds.sum += clock.elapsed().as_secs_f64();
        on_phase(TrainPhase::Sum);

        let clock = Instant::now();
        self.optimizer
            .apply_update(self.model.parameter_groups_mut(), &total)
            .map_err(|e| at_iteration(e, epoch, iter))?;
        self.phase_seconds.update += clock.elapsed().as_secs_f64();
        on_phase(TrainPhase::Update);

        Ok(losses.values().to_vec())
    }

    fn validate_epoch(&mut self) -> Result<(f64, BTreeMap<String, f64>)> {
        let clock = Instant::now();
        let metrics = evaluate(
            &self.model,
            &self.data.bundle.val_truth,
            &self.cfg.metric_ks(),
            self.cfg.training.candidate_policy,
            Some(&self.data.bundle.train_target_by_user),
        )?;
        self.phase_seconds.eval += clock.elapsed().as_secs_f64();
        let score = metrics
            .get("ndcg", self.cfg.training.eval_k)
            .unwrap_or(0.0);
        Ok((score, metrics.to_map()))
    }
}

fn at_iteration(e: Error, epoch: usize, iter: usize) -> Error {
    match e {
        Error::Training(msg) => {
            Error::Training(format!("{msg} (epoch {epoch}, iteration {iter})"))
        }
        other => other,
    }
}

/// Trains one run under the given seed.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let data = prepare_dataset(cfg)?;
    train_on(&data, cfg, seed, &mut |_| {})
}

/// Like [`train`], invoking `on_phase` at every loop checkpoint.
pub fn train_instrumented(
    cfg: &ExperimentConfig,
    seed: u64,
    on_phase: &mut dyn FnMut(TrainPhase),
) -> Result<TrainOutcome> {
    let data = prepare_dataset(cfg)?;
    train_on(&data, cfg, seed, on_phase)
}

/// Trains on an already-prepared dataset (shared across sweep points).
pub fn train_on(
    data: &PreparedData,
    cfg: &ExperimentConfig,
    seed: u64,
    on_phase: &mut dyn FnMut(TrainPhase),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, data, seed)?;
    let iters = trainer.iterations_per_epoch();
    let num_tasks = data.bundle.num_tasks();
    let patience = cfg.training.patience;

    let mut epochs = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = trainer.model.parameter_groups().to_vec();

    for epoch in 0..cfg.training.max_epochs {
        let mut loss_sums = vec![0.0; num_tasks];
        for iter in 0..iters {
            let losses = trainer.step(epoch, iter, on_phase)?;
            for (sum, l) in loss_sums.iter_mut().zip(&losses) {
                *sum += l;
            }
        }
        let (score, val) = trainer.validate_epoch()?;
        if let Some(trace) = trainer.trace.as_mut() {
            trace.finish_epoch(epoch);
        }
        epochs.push(EpochRecord {
            epoch,
            task_losses: loss_sums.into_iter().map(|s| s / iters as f64).collect(),
            val,
        });
        if score > best_val {
            best_val = score;
            best_epoch = epoch;
            best_params = trainer.model.parameter_groups().to_vec();
        }
        on_phase(TrainPhase::EpochEnd(epoch));
        if epoch - best_epoch >= patience {
            break;
        }
    }

    let best_model = trainer.model.with_parameters(&best_params)?;
    let clock = Instant::now();
    let test = evaluate(
        &best_model,
        &data.bundle.test_truth,
        &cfg.metric_ks(),
        cfg.training.candidate_policy,
        Some(&data.bundle.train_target_by_user),
    )?;
    trainer.phase_seconds.eval += clock.elapsed().as_secs_f64();

    Ok(TrainOutcome {
        record: RunRecord {
            seed,
            method: cfg.method.label(),
            optimizer: cfg.optimizer.rule().name().to_string(),
            epochs,
            best_epoch,
            best_val,
            test: test.to_map(),
            phase_seconds: trainer.phase_seconds,
            trace: trainer.trace.map(|t| t.rows),
            config: cfg.clone(),
        },
        best_model,
    })
}

/// Writes epoch-level trace rows as CSV:
/// `epoch,group,task,pre_mean,post_mean`.
pub fn write_trace_csv<W: std::io::Write>(rows: &[TraceRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "epoch,group,task,pre_mean,post_mean")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.group, r.task, r.pre_mean, r.post_mean
        )?;
    }
    Ok(())
}

/// Writes per-epoch validation metrics plus the final test metrics as CSV.
pub fn write_metrics_csv<W: std::io::Write>(
    record: &RunRecord,
    out: &mut W,
) -> std::io::Result<()> {
    writeln!(out, "run_id,epoch,split,metric,k,value")?;
    let run_id = format!("seed{}", record.seed);
    for epoch in &record.epochs {
        for (key, value) in &epoch.val {
            let (metric, k) = key.split_once('@').unwrap_or((key.as_str(), "0"));
            writeln!(
                out,
                "{run_id},{},validation,{metric},{k},{value}",
                epoch.epoch
            )?;
        }
    }
    for (key, value) in &record.test {
        let (metric, k) = key.split_once('@').unwrap_or((key.as_str(), "0"));
        writeln!(out, "{run_id},{},test,{metric},{k},{value}", record.best_epoch)?;
    }
    Ok(())
}
