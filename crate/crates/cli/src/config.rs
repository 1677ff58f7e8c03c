//! Experiment configuration: one structured document, CLI flags override
//! file values, and the resolved config is echoed into every run record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use metabalance::balance::{
    Dwa, FixedWeights, GradNorm, GradSimilarity, GradSurgery, MetaBalance, OlAux, Uncertainty,
};
use metabalance::data::SyntheticSpec;
use metabalance::eval::CandidatePolicy;
use metabalance::{
    Balancer, BalancerConfig, Error, ParameterGroup, Real, Result, Rule, Strategy,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub method: MethodConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingSection,
    pub sweep: SweepSection,
    pub trace: TraceSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic { spec } = &self.dataset {
            spec.validate()?;
        }
        self.method.validate()?;
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if t.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if t.eval_k == 0 {
            return Err(Error::Config("eval K must be at least 1".into()));
        }
        if t.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        if t.loss_jitter < 0.0 {
            return Err(Error::Config("loss jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// All Ks evaluated each epoch (the selection K is always included).
    pub fn metric_ks(&self) -> Vec<usize> {
        let mut ks = self.training.metric_ks.clone();
        ks.push(self.training.eval_k);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    Files {
        path: PathBuf,
        format: PathBuf,
        #[serde(default = "default_min_user_purchases")]
        min_user_purchases: usize,
        #[serde(default = "default_min_item_purchasers")]
        min_item_purchasers: usize,
        #[serde(default)]
        single_pass_filter: bool,
    },
}

fn default_min_user_purchases() -> usize {
    20
}

fn default_min_item_purchasers() -> usize {
    10
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub shared_layers: Vec<usize>,
    pub tower_layers: Vec<usize>,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            shared_layers: vec![32, 16, 8],
            tower_layers: vec![64, 32],
            dropout: 0.5,
            weight_decay: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum MethodConfig {
    Metabalance {
        #[serde(default = "default_strategy")]
        strategy: Strategy,
        #[serde(default = "default_relax_factor")]
        relax_factor: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_max_weight")]
        max_weight: f64,
    },
    VanillaMulti,
    SingleLoss,
    WeightsTuning {
        weights: Vec<f64>,
    },
    GradSimilarity,
    GradSurgery,
    OlAux {
        #[serde(default = "default_olaux_lr")]
        weight_lr: f64,
        #[serde(default = "default_olaux_window")]
        window: usize,
    },
    Dwa {
        #[serde(default = "default_dwa_temperature")]
        temperature: f64,
        #[serde(default = "default_dwa_window")]
        window: usize,
    },
    Uncertainty {
        #[serde(default = "default_uncertainty_lr")]
        lr: f64,
    },
    GradNorm {
        #[serde(default = "default_gradnorm_alpha")]
        alpha: f64,
        #[serde(default = "default_gradnorm_lr")]
        weight_lr: f64,
    },
}

fn default_strategy() -> Strategy {
    Strategy::C
}

fn default_relax_factor() -> f64 {
    0.7
}

fn default_beta() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-12
}

fn default_max_weight() -> f64 {
    1e6
}

fn default_olaux_lr() -> f64 {
    0.1
}

fn default_olaux_window() -> usize {
    5
}

fn default_dwa_temperature() -> f64 {
    2.0
}

fn default_dwa_window() -> usize {
    10
}

fn default_uncertainty_lr() -> f64 {
    0.001
}

fn default_gradnorm_alpha() -> f64 {
    0.75
}

fn default_gradnorm_lr() -> f64 {
    0.025
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig::Metabalance {
            strategy: default_strategy(),
            relax_factor: default_relax_factor(),
            beta: default_beta(),
            epsilon: default_epsilon(),
            max_weight: default_max_weight(),
        }
    }
}

impl MethodConfig {
    pub fn metabalance(strategy: Strategy, relax_factor: f64, beta: f64) -> Self {
        MethodConfig::Metabalance {
            strategy,
            relax_factor,
            beta,
            epsilon: default_epsilon(),
            max_weight: default_max_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Metabalance {
                strategy,
                relax_factor,
                beta,
                epsilon,
                max_weight,
            } => self.balancer_config(*strategy, *relax_factor, *beta, *epsilon, *max_weight)
                .validate(),
            MethodConfig::WeightsTuning { weights } => {
                if weights.iter().any(|&w| w < 0.0) {
                    return Err(Error::Config("task weights must be non-negative".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn balancer_config(
        &self,
        strategy: Strategy,
        relax_factor: f64,
        beta: f64,
        epsilon: f64,
        max_weight: f64,
    ) -> BalancerConfig {
        BalancerConfig {
            strategy,
            relax_factor,
            beta,
            epsilon,
            max_weight,
        }
    }

    /// Instantiates the configured method for a model with `num_tasks`
    /// tasks (target included).
    pub fn build(
        &self,
        groups: &[ParameterGroup],
        num_tasks: usize,
    ) -> Result<Box<dyn Balancer<Real>>> {
        let num_aux = num_tasks.saturating_sub(1);
        Ok(match self {
            MethodConfig::Metabalance {
                strategy,
                relax_factor,
                beta,
                epsilon,
                max_weight,
            } => Box::new(MetaBalance::new(
                self.balancer_config(*strategy, *relax_factor, *beta, *epsilon, *max_weight),
                groups,
                num_aux,
            )?),
            MethodConfig::VanillaMulti => Box::new(FixedWeights::<Real>::vanilla(num_tasks)),
            MethodConfig::SingleLoss => Box::new(FixedWeights::<Real>::single_loss(num_tasks)),
            MethodConfig::WeightsTuning { weights } => {
                if weights.len() != num_tasks {
                    return Err(Error::Config(format!(
                        "{} task weights for {num_tasks} tasks",
                        weights.len()
                    )));
                }
                Box::new(FixedWeights::<Real>::new(weights.clone())?)
            }
            MethodConfig::GradSimilarity => Box::new(GradSimilarity),
            MethodConfig::GradSurgery => Box::new(GradSurgery),
            MethodConfig::OlAux { weight_lr, window } => {
                Box::new(OlAux::<Real>::new(groups, num_aux, *weight_lr, *window)?)
            }
            MethodConfig::Dwa {
                temperature,
                window,
            } => Box::new(Dwa::<Real>::new(num_tasks, *temperature, *window)?),
            MethodConfig::Uncertainty { lr } => Box::new(Uncertainty::<Real>::new(num_tasks, *lr)),
            MethodConfig::GradNorm { alpha, weight_lr } => {
                Box::new(GradNorm::<Real>::new(groups, num_tasks, *alpha, *weight_lr)?)
            }
        })
    }

    pub fn label(&self) -> String {
        match self {
            MethodConfig::Metabalance {
                strategy,
                relax_factor,
                beta,
                ..
            } => format!("metabalance[{strategy},r={relax_factor},beta={beta}]"),
            MethodConfig::VanillaMulti => "vanilla-multi".into(),
            MethodConfig::SingleLoss => "single-loss".into(),
            MethodConfig::WeightsTuning { .. } => "weights-tuning".into(),
            MethodConfig::GradSimilarity => "grad-similarity".into(),
            MethodConfig::GradSurgery => "grad-surgery".into(),
            MethodConfig::OlAux { .. } => "ol-aux".into(),
            MethodConfig::Dwa { .. } => "dwa".into(),
            MethodConfig::Uncertainty { .. } => "uncertainty".into(),
            MethodConfig::GradNorm { .. } => "grad-norm".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_sgd_lr")]
        lr: f64,
    },
    Adam {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_epsilon")]
        epsilon: f64,
    },
    Adagrad {
        #[serde(default = "default_adagrad_lr")]
        lr: f64,
        #[serde(default = "default_adagrad_epsilon")]
        epsilon: f64,
    },
    Rmsprop {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_rms_decay")]
        decay: f64,
        #[serde(default = "default_adam_epsilon")]
        epsilon: f64,
    },
}

fn default_sgd_lr() -> f64 {
    0.01
}

fn default_adam_lr() -> f64 {
    0.001
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_epsilon() -> f64 {
    1e-8
}

fn default_adagrad_lr() -> f64 {
    0.05
}

fn default_adagrad_epsilon() -> f64 {
    1e-10
}

fn default_rms_decay() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: default_adam_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_epsilon(),
        }
    }
}

impl OptimizerConfig {
    pub fn rule(&self) -> Rule {
        match *self {
            OptimizerConfig::Sgd { lr } => Rule::Sgd { lr },
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            } => Rule::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            },
            OptimizerConfig::Adagrad { lr, epsilon } => Rule::Adagrad { lr, epsilon },
            OptimizerConfig::Rmsprop { lr, decay, epsilon } => Rule::RmsProp { lr, decay, epsilon },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub max_epochs: usize,
    /// Stop when validation NDCG has not improved for this many epochs.
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// K used for validation selection and early stopping.
    pub eval_k: usize,
    pub metric_ks: Vec<usize>,
    /// Seed for dataset generation and splitting; fixed across run seeds.
    pub split_seed: u64,
    pub ratios: [f64; 3],
    /// Standard deviation of per-batch, per-task log-normal loss scaling.
    pub loss_jitter: f64,
    pub candidate_policy: CandidatePolicy,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            negatives_per_positive: 4,
            max_epochs: 200,
            patience: 20,
            seeds: vec![7, 11, 13],
            eval_k: 10,
            metric_ks: vec![10, 20],
            split_seed: 42,
            ratios: [0.7, 0.1, 0.2],
            loss_jitter: 0.0,
            candidate_policy: CandidatePolicy::AllItems,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub strategies: Vec<Strategy>,
    pub relax_factors: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::A, Strategy::B, Strategy::C],
            relax_factors: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceSection {
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

/// CLI flag overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<String>,
    pub strategy: Option<Strategy>,
    pub relax_factor: Option<f64>,
    pub beta: Option<f64>,
    pub optimizer: Option<String>,
    pub out: Option<PathBuf>,
    pub trace: Option<bool>,
}

impl ExperimentConfig {
    pub fn apply_overrides(&mut self, o: &Overrides) -> Result<()> {
        if let Some(name) = &o.method {
            self.method = match name.as_str() {
                "metabalance" => MethodConfig::default(),
                "vanilla-multi" => MethodConfig::VanillaMulti,
                "single-loss" => MethodConfig::SingleLoss,
                "grad-similarity" => MethodConfig::GradSimilarity,
                "grad-surgery" => MethodConfig::GradSurgery,
                "ol-aux" => MethodConfig::OlAux {
                    weight_lr: default_olaux_lr(),
                    window: default_olaux_window(),
                },
                "dwa" => MethodConfig::Dwa {
                    temperature: default_dwa_temperature(),
                    window: default_dwa_window(),
                },
                "uncertainty" => MethodConfig::Uncertainty {
                    lr: default_uncertainty_lr(),
                },
                "grad-norm" => MethodConfig::GradNorm {
                    alpha: default_gradnorm_alpha(),
                    weight_lr: default_gradnorm_lr(),
                },
                other => {
                    return Err(Error::Config(format!("unknown method `{other}`")));
                }
            };
        }
        if o.strategy.is_some() || o.relax_factor.is_some() || o.beta.is_some() {
            if let MethodConfig::Metabalance {
                strategy,
                relax_factor,
                beta,
                ..
            } = &mut self.method
            {
                if let Some(s) = o.strategy {
                    *strategy = s;
                }
                if let Some(r) = o.relax_factor {
                    *relax_factor = r;
                }
                if let Some(b) = o.beta {
                    *beta = b;
                }
            } else {
                return Err(Error::Config(
                    "--strategy/--relax-factor/--beta apply to the metabalance method".into(),
                ));
            }
        }
        if let Some(name) = &o.optimizer {
            self.optimizer = match name.as_str() {
                "sgd" => OptimizerConfig::Sgd { lr: default_sgd_lr() },
                "adam" => OptimizerConfig::default(),
                "adagrad" => OptimizerConfig::Adagrad {
                    lr: default_adagrad_lr(),
                    epsilon: default_adagrad_epsilon(),
                },
                "rmsprop" => OptimizerConfig::Rmsprop {
                    lr: default_adam_lr(),
                    decay: default_rms_decay(),
                    epsilon: default_adam_epsilon(),
                },
                other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
            };
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if let Some(t) = o.trace {
            self.trace.enabled = t;
        }
        self.validate()
    }
}
