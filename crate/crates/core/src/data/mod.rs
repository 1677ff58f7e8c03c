//! Implicit-feedback ingestion and the preprocessing pipeline: count
//! filtering to a fixpoint, target-task splitting with auxiliary merge and
//! leakage removal, and negative-sampled batch construction.

mod synthetic;

pub use synthetic::{generate_synthetic, ImbalanceKnob, SyntheticSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One (user, item, behavior) record. `task` indexes the table's task list;
/// task 0 is the target behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub task: usize,
    pub timestamp: Option<i64>,
}

/// Deduplicated interaction records over dense user/item ids.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionTable {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    pub task_names: Vec<String>,
}

impl InteractionTable {
    /// Builds a table, dropping duplicate (user, item, behavior) records
    /// (first occurrence wins) and validating id bounds.
    pub fn new(
        interactions: Vec<Interaction>,
        num_users: usize,
        num_items: usize,
        task_names: Vec<String>,
    ) -> Result<Self> {
        if task_names.is_empty() {
            return Err(Error::Config("interaction table needs at least one task".into()));
        }
        let mut seen = HashSet::new();
        let mut unique = Vec::with_capacity(interactions.len());
        for rec in interactions {
            if rec.user >= num_users || rec.item >= num_items || rec.task >= task_names.len() {
                return Err(Error::Data(format!(
                    "interaction ({}, {}, task {}) out of range",
                    rec.user, rec.item, rec.task
                )));
            }
            if seen.insert((rec.user, rec.item, rec.task)) {
                unique.push(rec);
            }
        }
        Ok(Self {
            interactions: unique,
            num_users,
            num_items,
            task_names,
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn count_for_task(&self, task: usize) -> usize {
        self.interactions.iter().filter(|r| r.task == task).count()
    }
}

/// Column layout and behavior vocabulary of a delimiter-separated input
/// file. Task order fixes task indices; index 0 is the target behavior.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FormatDescriptor {
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default)]
    pub has_header: bool,
    #[serde(default)]
    pub user_column: usize,
    #[serde(default = "default_item_column")]
    pub item_column: usize,
    #[serde(default = "default_behavior_column")]
    pub behavior_column: usize,
    #[serde(default)]
    pub timestamp_column: Option<usize>,
    pub tasks: Vec<String>,
    /// Raw behavior token -> canonical task name.
    pub behaviors: BTreeMap<String, String>,
    /// Raw behavior tokens whose rows are dropped at ingestion.
    #[serde(default)]
    pub ignore: Vec<String>,
}

fn default_delimiter() -> String {
    ",".to_string()
}

fn default_item_column() -> usize {
    1
}

fn default_behavior_column() -> usize {
    2
}

impl FormatDescriptor {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let desc: FormatDescriptor =
            toml::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("format descriptor lists no tasks".into()));
        }
        if self.delimiter.chars().count() != 1 {
            return Err(Error::Config(format!(
                "delimiter `{}` must be a single character",
                self.delimiter
            )));
        }
        for (raw, task) in &self.behaviors {
            if !self.tasks.contains(task) {
                return Err(Error::Config(format!(
                    "behavior `{raw}` maps to unknown task `{task}`"
                )));
            }
        }
        Ok(())
    }

    fn delimiter_char(&self) -> char {
        self.delimiter.chars().next().expect("validated")
    }

    fn task_of(&self, raw: &str) -> Option<usize> {
        let name = self.behaviors.get(raw)?;
        self.tasks.iter().position(|t| t == name)
    }
}

/// Dense-id-to-original-token dictionaries produced by reindexing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl IdMaps {
    /// `dense_id,original` CSV for one dictionary.
    pub fn to_csv(ids: &[String]) -> String {
        let mut out = String::from("dense_id,original\n");
        for (i, tok) in ids.iter().enumerate() {
            let _ = writeln!(out, "{i},{tok}");
        }
        out
    }
}

/// Parses a delimiter-separated interaction file, mapping raw user/item
/// tokens to dense ids in order of first appearance.
pub fn load_interactions(
    path: &Path,
    desc: &FormatDescriptor,
) -> Result<(InteractionTable, IdMaps)> {
    desc.validate()?;
    let text = std::fs::read_to_string(path)?;
    let delim = desc.delimiter_char();
    let mut users: IndexMap<String, usize> = IndexMap::new();
    let mut items: IndexMap<String, usize> = IndexMap::new();
    let mut interactions = Vec::new();

    let needed = desc
        .user_column
        .max(desc.item_column)
        .max(desc.behavior_column)
        .max(desc.timestamp_column.unwrap_or(0))
        + 1;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if lineno == 1 && desc.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        if fields.len() < needed {
            return Err(Error::Data(format!(
                "line {lineno}: expected at least {needed} columns, found {}",
                fields.len()
            )));
        }
        if desc.ignore.iter().any(|t| t == fields[desc.behavior_column]) {
            continue;
        }
        let task = desc.task_of(fields[desc.behavior_column]).ok_or_else(|| {
            Error::Data(format!(
                "line {lineno}: unknown behavior label `{}`",
                fields[desc.behavior_column]
            ))
        })?;
        let timestamp = match desc.timestamp_column {
            Some(col) => Some(fields[col].parse::<i64>().map_err(|_| {
                Error::Data(format!(
                    "line {lineno}: timestamp `{}` is not an integer",
                    fields[col]
                ))
            })?),
            None => None,
        };
        let next_user = users.len();
        let user = *users
            .entry(fields[desc.user_column].to_string())
            .or_insert(next_user);
        let next_item = items.len();
        let item = *items
            .entry(fields[desc.item_column].to_string())
            .or_insert(next_item);
        interactions.push(Interaction {
            user,
            item,
            task,
            timestamp,
        });
    }

    let maps = IdMaps {
        users: users.into_keys().collect(),
        items: items.into_keys().collect(),
    };
    let table = InteractionTable::new(
        interactions,
        maps.users.len().max(1),
        maps.items.len().max(1),
        desc.tasks.clone(),
    )?;
    Ok((table, maps))
}

/// Whether count filtering iterates to a fixpoint or stops after one pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    Fixpoint,
    SinglePass,
}

/// A filtered, reindexed table plus the surviving original ids.
#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub table: InteractionTable,
    /// Old user ids that survived, ascending; position = new id.
    pub kept_users: Vec<usize>,
    pub kept_items: Vec<usize>,
}

/// Removes users purchasing fewer than `min_user_purchases` unique items and
/// items purchased by fewer than `min_item_purchasers` unique users,
/// counting the target behavior only. Under `Fixpoint` the two removals are
/// iterated jointly until stable; dropped users and items take all their
/// interactions (every behavior) with them.
pub fn filter_by_count(
    table: &InteractionTable,
    min_user_purchases: usize,
    min_item_purchasers: usize,
    mode: FilterMode,
) -> Result<FilterOutcome> {
    let mut user_alive = vec![true; table.num_users];
    let mut item_alive = vec![true; table.num_items];

    loop {
        let mut user_items: Vec<HashSet<usize>> = vec![HashSet::new(); table.num_users];
        let mut item_users: Vec<HashSet<usize>> = vec![HashSet::new(); table.num_items];
        for rec in &table.interactions {
            if rec.task == 0 && user_alive[rec.user] && item_alive[rec.item] {
                user_items[rec.user].insert(rec.item);
                item_users[rec.item].insert(rec.user);
            }
        }
        let mut changed = false;
        for (u, alive) in user_alive.iter_mut().enumerate() {
            if *alive && user_items[u].len() < min_user_purchases {
                *alive = false;
                changed = true;
            }
        }
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && item_users[i].len() < min_item_purchasers {
                *alive = false;
                changed = true;
            }
        }
        if !changed || mode == FilterMode::SinglePass {
            break;
        }
    }

    let kept_users: Vec<usize> = (0..table.num_users).filter(|&u| user_alive[u]).collect();
    let kept_items: Vec<usize> = (0..table.num_items).filter(|&i| item_alive[i]).collect();
    let user_remap: HashMap<usize, usize> = kept_users
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let item_remap: HashMap<usize, usize> = kept_items
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();

    let interactions: Vec<Interaction> = table
        .interactions
        .iter()
        .filter(|r| user_alive[r.user] && item_alive[r.item])
        .map(|r| Interaction {
            user: user_remap[&r.user],
            item: item_remap[&r.item],
            task: r.task,
            timestamp: r.timestamp,
        })
        .collect();
    if interactions.is_empty() {
        return Err(Error::Data(
            "count filtering removed every interaction".into(),
        ));
    }
    let table = InteractionTable::new(
        interactions,
        kept_users.len(),
        kept_items.len(),
        table.task_names.clone(),
    )?;
    Ok(FilterOutcome {
        table,
        kept_users,
        kept_items,
    })
}

/// Train/validation/test materialization: target pairs split by ratio, every
/// auxiliary record merged into train, and leakage removed.
#[derive(Clone, Debug)]
pub struct SplitBundle {
    /// Target-task train records plus surviving auxiliary records.
    pub train: Vec<Interaction>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub val_truth: HashMap<usize, HashSet<usize>>,
    pub test_truth: HashMap<usize, HashSet<usize>>,
    /// Target-task train pairs per user (for candidate masking at eval).
    pub train_target_by_user: HashMap<usize, HashSet<usize>>,
    /// Per task: user -> positive items in train (for negative sampling).
    pub train_positives: Vec<HashMap<usize, HashSet<usize>>>,
    pub num_users: usize,
    pub num_items: usize,
    pub task_names: Vec<String>,
}

impl SplitBundle {
    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    /// Counts train records per task.
    pub fn train_count_for_task(&self, task: usize) -> usize {
        self.train.iter().filter(|r| r.task == task).count()
    }
}

/// Splits target-task pairs into train/validation/test by the given ratios
/// (counts are `floor(r_train * n)` and `floor(r_val * n)`, the remainder
/// testing), merges every auxiliary record into train, then deletes any
/// auxiliary record whose (user, item) pair appears in the validation or
/// test target sets.
pub fn split(table: &InteractionTable, ratios: [f64; 3], seed: u64) -> Result<SplitBundle> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }

    let mut target_pairs: Vec<(usize, usize)> = table
        .interactions
        .iter()
        .filter(|r| r.task == 0)
        .map(|r| (r.user, r.item))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    target_pairs.shuffle(&mut rng);

    let n = target_pairs.len();
    let n_train = (ratios[0] * n as f64).floor() as usize;
    let n_val = (ratios[1] * n as f64).floor() as usize;
    let train_pairs = &target_pairs[..n_train];
    let validation = target_pairs[n_train..n_train + n_val].to_vec();
    let test = target_pairs[n_train + n_val..].to_vec();

    let held: HashSet<(usize, usize)> = validation.iter().chain(&test).copied().collect();

    let mut train: Vec<Interaction> = train_pairs
        .iter()
        .map(|&(user, item)| Interaction {
            user,
            item,
            task: 0,
            timestamp: None,
        })
        .collect();
    for rec in &table.interactions {
        if rec.task != 0 && !held.contains(&(rec.user, rec.item)) {
            train.push(*rec);
        }
    }

    let mut val_truth: HashMap<usize, HashSet<usize>> = HashMap::new();
    for &(u, i) in &validation {
        val_truth.entry(u).or_default().insert(i);
    }
    let mut test_truth: HashMap<usize, HashSet<usize>> = HashMap::new();
    for &(u, i) in &test {
        test_truth.entry(u).or_default().insert(i);
    }
    let mut train_target_by_user: HashMap<usize, HashSet<usize>> = HashMap::new();
    for &(u, i) in train_pairs {
        train_target_by_user.entry(u).or_default().insert(i);
    }
    let mut train_positives: Vec<HashMap<usize, HashSet<usize>>> =
        vec![HashMap::new(); table.task_names.len()];
    for rec in &train {
        train_positives[rec.task]
            .entry(rec.user)
            .or_default()
            .insert(rec.item);
    }

    Ok(SplitBundle {
        train,
        validation,
        test,
        val_truth,
        test_truth,
        train_target_by_user,
        train_positives,
        num_users: table.num_users,
        num_items: table.num_items,
        task_names: table.task_names.clone(),
    })
}

/// A mini-batch of (user, item) rows with per-task labels and masks.
/// Exactly one task is masked in per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    /// `labels[task][row]`, meaningful only where the mask is set.
    pub labels: Vec<Vec<F>>,
    pub masks: Vec<Vec<bool>>,
    /// Per-task loss multipliers, all ones unless configured otherwise.
    pub loss_scales: Vec<F>,
}

impl<F: Scalar> Batch<F> {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn num_tasks(&self) -> usize {
        self.labels.len()
    }

    pub fn set_loss_scales(&mut self, scales: Vec<F>) -> Result<()> {
        if scales.len() != self.num_tasks() {
            return Err(Error::Contract(format!(
                "{} loss scales for {} tasks",
                scales.len(),
                self.num_tasks()
            )));
        }
        self.loss_scales = scales;
        Ok(())
    }

    pub fn validate(&self, num_tasks: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if self.users.len() != self.items.len() {
            return Err(Error::Contract("user/item column lengths differ".into()));
        }
        if self.labels.len() != num_tasks
            || self.masks.len() != num_tasks
            || self.loss_scales.len() != num_tasks
        {
            return Err(Error::Contract(format!(
                "batch carries {} tasks, model expects {num_tasks}",
                self.labels.len()
            )));
        }
        let n = self.len();
        for t in 0..num_tasks {
            if self.labels[t].len() != n || self.masks[t].len() != n {
                return Err(Error::Contract(format!(
                    "task {t} rows do not match batch size {n}"
                )));
            }
            for (row, (&y, &m)) in self.labels[t].iter().zip(&self.masks[t]).enumerate() {
                if m && y != F::zero() && y != F::one() {
                    return Err(Error::Contract(format!(
                        "record {row}: label {y} for task {t} is not binary"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Negative-draw attempts per requested negative before giving up.
const NEGATIVE_REJECTION_CAP: usize = 100;

/// Draws `batch_size` positive records uniformly from the train split (with
/// replacement) and appends `negatives_per_positive` uniformly sampled
/// non-interacted items per positive, each labeled 0 under the same task.
pub fn sample_batch<F: Scalar>(
    bundle: &SplitBundle,
    batch_size: usize,
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Batch<F>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    if bundle.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    let num_tasks = bundle.num_tasks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(usize, usize, usize, F)> = Vec::new();

    for _ in 0..batch_size {
        let rec = bundle.train[rng.random_range(0..bundle.train.len())];
        rows.push((rec.user, rec.item, rec.task, F::one()));
        let positives = bundle.train_positives[rec.task].get(&rec.user);
        for _ in 0..negatives_per_positive {
            let mut drawn = None;
            for _ in 0..NEGATIVE_REJECTION_CAP {
                let candidate = rng.random_range(0..bundle.num_items);
                let is_positive = positives.is_some_and(|s| s.contains(&candidate));
                if !is_positive {
                    drawn = Some(candidate);
                    break;
                }
            }
            match drawn {
                Some(item) => rows.push((rec.user, item, rec.task, F::zero())),
                None => log::warn!(
                    "negative sampling gave up for user {} under task {} after {} attempts",
                    rec.user,
                    rec.task,
                    NEGATIVE_REJECTION_CAP
                ),
            }
        }
    }

    let n = rows.len();
    let mut batch = Batch {
        users: Vec::with_capacity(n),
        items: Vec::with_capacity(n),
        labels: vec![vec![F::zero(); n]; num_tasks],
        masks: vec![vec![false; n]; num_tasks],
        loss_scales: vec![F::one(); num_tasks],
    };
    for (row, (user, item, task, label)) in rows.into_iter().enumerate() {
        batch.users.push(user);
        batch.items.push(item);
        batch.labels[task][row] = label;
        batch.masks[task][row] = true;
    }
    Ok(batch)
}
