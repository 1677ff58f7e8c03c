//! Shared-bottom multi-task recommendation network.
//!
//! User and item embeddings feed two shared branches: an elementwise-product
//! matrix-factorization branch and an MLP over the concatenated embeddings.
//! Their concatenation feeds one tower per task, each producing a logit for
//! its behavior. Embeddings and both branches are shared scope; towers are
//! task-specific.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::params::{check_unique_names, ParameterGroup, Scope};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether dropout is live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Task count including the target task (index 0).
    pub num_tasks: usize,
    pub embedding_dim: usize,
    pub shared_layers: Vec<usize>,
    pub tower_layers: Vec<usize>,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl ModelConfig {
    /// Default architecture: 64-d embeddings, shared MLP {32, 16, 8},
    /// towers {64, 32} with a 1-unit head.
    pub fn new(num_users: usize, num_items: usize, num_tasks: usize) -> Self {
        Self {
            num_users,
            num_items,
            num_tasks,
            embedding_dim: 64,
            shared_layers: vec![32, 16, 8],
            tower_layers: vec![64, 32],
            dropout: 0.5,
            weight_decay: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.num_items == 0 {
            return Err(Error::Config("model needs at least one user and item".into()));
        }
        if self.num_tasks == 0 {
            return Err(Error::Config("model needs at least one task".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.shared_layers.is_empty() || self.shared_layers.contains(&0) {
            return Err(Error::Config(
                "shared MLP needs at least one layer of positive width".into(),
            ));
        }
        if self.tower_layers.contains(&0) {
            return Err(Error::Config("tower layers must have positive width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate {} must lie in [0, 1)",
                self.dropout
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of each tower's input: MF output plus the last shared layer.
    pub fn tower_input(&self) -> usize {
        self.embedding_dim + *self.shared_layers.last().expect("validated non-empty")
    }
}

/// Per-task scalar losses for one mini-batch; index 0 is the target task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLosses<F>(Vec<F>);

impl<F: Scalar> TaskLosses<F> {
    pub fn new(values: Vec<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite task loss".into()));
        }
        Ok(Self(values))
    }

    pub fn target(&self) -> F {
        self.0[0]
    }

    pub fn values(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile<F> {
    version: u32,
    config: ModelConfig,
    groups: Vec<ParameterGroup<F>>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct MultiTaskModel<F> {
    config: ModelConfig,
    groups: Vec<ParameterGroup<F>>,
}

impl<F: Scalar> MultiTaskModel<F> {
    /// Initializes all parameter groups from the seed: embeddings from
    /// N(0, 0.1), affine weights from the fan-in-scaled normal, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<F> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::real(z * std)
                })
                .collect()
        };

        let d = config.embedding_dim;
        let mut groups = Vec::new();
        groups.push(ParameterGroup::new(
            "user_embedding",
            Tensor::new(vec![config.num_users, d], normal(config.num_users * d, 0.1))?,
            Scope::Shared,
        ));
        groups.push(ParameterGroup::new(
            "item_embedding",
            Tensor::new(vec![config.num_items, d], normal(config.num_items * d, 0.1))?,
            Scope::Shared,
        ));

        let push_affine = |groups: &mut Vec<ParameterGroup<F>>,
                               name: String,
                               fan_in: usize,
                               fan_out: usize,
                               scope: Scope,
                               normal: &mut dyn FnMut(usize, f64) -> Vec<F>|
         -> Result<()> {
            let std = (2.0 / fan_in as f64).sqrt();
            groups.push(ParameterGroup::new(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], normal(fan_in * fan_out, std))?,
                scope,
            ));
            groups.push(ParameterGroup::new(
                format!("{name}.bias"),
                Tensor::zeros(vec![fan_out])?,
                scope,
            ));
            Ok(())
        };

        let mut width = 2 * d;
        for (l, &out) in config.shared_layers.iter().enumerate() {
            push_affine(
                &mut groups,
                format!("shared.{l}"),
                width,
                out,
                Scope::Shared,
                &mut normal,
            )?;
            width = out;
        }

        for task in 0..config.num_tasks {
            let mut width = config.tower_input();
            for (l, &out) in config.tower_layers.iter().enumerate() {
                push_affine(
                    &mut groups,
                    format!("tower.{task}.{l}"),
                    width,
                    out,
                    Scope::TaskSpecific(task),
                    &mut normal,
                )?;
                width = out;
            }
            push_affine(
                &mut groups,
                format!("tower.{task}.head"),
                width,
                1,
                Scope::TaskSpecific(task),
                &mut normal,
            )?;
        }

        check_unique_names(&groups)?;
        Ok(Self { config, groups })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor of the model as its own named group, in a stable order.
    pub fn parameter_groups(&self) -> &[ParameterGroup<F>] {
        &self.groups
    }

    pub fn parameter_groups_mut(&mut self) -> &mut [ParameterGroup<F>] {
        &mut self.groups
    }

    fn group(&self, name: &str) -> &ParameterGroup<F> {
        self.groups
            .iter()
            .find(|g| g.name() == name)
            .expect("group names are fixed at construction")
    }

    fn check_ids(&self, users: &[usize], items: &[usize]) -> Result<()> {
        for (row, (&u, &i)) in users.iter().zip(items).enumerate() {
            if u >= self.config.num_users {
                return Err(Error::Data(format!(
                    "record {row}: user id {u} out of range ({} users)",
                    self.config.num_users
                )));
            }
            if i >= self.config.num_items {
                return Err(Error::Data(format!(
                    "record {row}: item id {i} out of range ({} items)",
                    self.config.num_items
                )));
            }
        }
        Ok(())
    }

    /// Builds logits for the requested tasks over a batch of (user, item)
    /// rows, registering every touched parameter group on the tape.
    fn build_logits(
        &self,
        tape: &mut Tape<F>,
        users: &[usize],
        items: &[usize],
        tasks: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        let user_table = tape.param(self.group("user_embedding"))?;
        let item_table = tape.param(self.group("item_embedding"))?;
        let u = tape.gather(user_table, users)?;
        let v = tape.gather(item_table, items)?;

        let mf = tape.mul(u, v)?;
        let mut h = tape.concat(&[u, v])?;
        for l in 0..self.config.shared_layers.len() {
            let w = tape.param(self.group(&format!("shared.{l}.weight")))?;
            let b = tape.param(self.group(&format!("shared.{l}.bias")))?;
            h = tape.affine(h, w, b)?;
            h = tape.relu(h)?;
            h = self.maybe_dropout(tape, h, mode, rng)?;
        }
        let fused = tape.concat(&[mf, h])?;

        let mut logits = Vec::with_capacity(tasks.len());
        for &task in tasks {
            if task >= self.config.num_tasks {
                return Err(Error::Contract(format!(
                    "task {task} out of range ({} tasks)",
                    self.config.num_tasks
                )));
            }
            let mut t = fused;
            for l in 0..self.config.tower_layers.len() {
                let w = tape.param(self.group(&format!("tower.{task}.{l}.weight")))?;
                let b = tape.param(self.group(&format!("tower.{task}.{l}.bias")))?;
                t = tape.affine(t, w, b)?;
                t = tape.relu(t)?;
                t = self.maybe_dropout(tape, t, mode, rng)?;
            }
            let w = tape.param(self.group(&format!("tower.{task}.head.weight")))?;
            let b = tape.param(self.group(&format!("tower.{task}.head.bias")))?;
            logits.push(tape.affine(t, w, b)?);
        }
        Ok(logits)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape<F>,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if mode == Mode::Train && self.config.dropout > 0.0 {
            tape.dropout(x, self.config.dropout, rng)
        } else {
            Ok(x)
        }
    }

    /// Per-task logits for one (user, item) pair.
    pub fn predict(&self, user: usize, item: usize, mode: Mode, seed: u64) -> Result<Vec<F>> {
        self.check_ids(&[user], &[item])?;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<usize> = (0..self.config.num_tasks).collect();
        let logits = self.build_logits(&mut tape, &[user], &[item], &tasks, mode, &mut rng)?;
        logits.iter().map(|&id| tape.scalar_value(id)).collect()
    }

    /// Target-task probabilities for one user over a list of candidate
    /// items, in eval mode.
    pub fn score_target_items(&self, user: usize, items: &[usize]) -> Result<Vec<F>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let users = vec![user; items.len()];
        self.check_ids(&users, items)?;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.build_logits(&mut tape, &users, items, &[0], Mode::Eval, &mut rng)?;
        Ok(tape
            .data(logits[0])
            .iter()
            .map(|&z| crate::autodiff::sigmoid(z))
            .collect())
    }

    /// Builds every task's masked-mean cross-entropy loss into `tape`.
    ///
    /// The weight-decay penalty over all parameter groups is added to the
    /// target task's loss, so its gradient is attributed to the target.
    pub fn build_losses(
        &self,
        tape: &mut Tape<F>,
        batch: &Batch<F>,
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<NodeId>> {
        batch.validate(self.config.num_tasks)?;
        self.check_ids(&batch.users, &batch.items)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tasks: Vec<usize> = (0..self.config.num_tasks).collect();
        let logits =
            self.build_logits(tape, &batch.users, &batch.items, &tasks, mode, &mut rng)?;

        let mut loss_ids = Vec::with_capacity(self.config.num_tasks);
        for task in 0..self.config.num_tasks {
            let mut loss = tape.bce_mean(logits[task], &batch.labels[task], &batch.masks[task])?;
            let scale = batch.loss_scales[task];
            if scale != F::one() {
                loss = tape.scale(loss, scale)?;
            }
            loss_ids.push(loss);
        }

        if self.config.weight_decay > 0.0 {
            let mut penalty: Option<NodeId> = None;
            for group in &self.groups {
                // Registered by build_logits in group order.
                let node = tape.param_node(group.name()).ok_or_else(|| {
                    Error::Contract(format!(
                        "group `{}` was not registered on the tape",
                        group.name()
                    ))
                })?;
                let sq = tape.sum_squares(node)?;
                penalty = Some(match penalty {
                    Some(acc) => tape.add(acc, sq)?,
                    None => sq,
                });
            }
            let penalty = tape.scale(
                penalty.expect("model has parameters"),
                F::real(0.5 * self.config.weight_decay),
            )?;
            loss_ids[0] = tape.add(loss_ids[0], penalty)?;
        }
        Ok(loss_ids)
    }

    /// One shared forward pass over a mini-batch producing every task's
    /// loss. Returns the tape and the per-task scalar loss nodes so the
    /// caller can run one backward pass per task.
    pub fn batch_losses(
        &self,
        batch: &Batch<F>,
        mode: Mode,
        seed: u64,
    ) -> Result<(TaskLosses<F>, Tape<F>, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let loss_ids = self.build_losses(&mut tape, batch, mode, seed)?;
        let values: Vec<F> = loss_ids
            .iter()
            .map(|&id| tape.scalar_value(id))
            .collect::<Result<_>>()?;
        Ok((TaskLosses::new(values)?, tape, loss_ids))
    }

    /// A copy of this model with its parameter values replaced; names and
    /// shapes must match the architecture.
    pub fn with_parameters(&self, params: &[ParameterGroup<F>]) -> Result<Self> {
        if params.len() != self.groups.len()
            || self
                .groups
                .iter()
                .zip(params)
                .any(|(a, b)| a.name() != b.name() || a.tensor().shape() != b.tensor().shape())
        {
            return Err(Error::Contract(
                "replacement parameters do not match the architecture".into(),
            ));
        }
        Ok(Self {
            config: self.config.clone(),
            groups: params.to_vec(),
        })
    }

    /// Writes a versioned checkpoint with every group's name, shape, scope,
    /// and exact values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            groups: self.groups.clone(),
        };
        let out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(out, &file).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Loads a checkpoint; values round-trip bit-exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let file: CheckpointFile<F> =
            serde_json::from_reader(reader).map_err(|e| Error::Serde(e.to_string()))?;
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        file.config.validate()?;
        check_unique_names(&file.groups)?;
        let expected = MultiTaskModel::<F>::init(file.config.clone(), 0)?;
        if expected.groups.len() != file.groups.len()
            || expected
                .groups
                .iter()
                .zip(&file.groups)
                .any(|(a, b)| a.name() != b.name() || a.tensor().shape() != b.tensor().shape())
        {
            return Err(Error::Data(
                "checkpoint groups do not match the stored architecture".into(),
            ));
        }
        Ok(Self {
            config: file.config,
            groups: file.groups,
        })
    }
}
