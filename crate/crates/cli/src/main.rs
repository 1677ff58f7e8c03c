use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metabalance::data::{
    filter_by_count, load_interactions, split, FilterMode, FormatDescriptor, IdMaps,
};
use metabalance::eval::evaluate;
use metabalance::{Error, MultiTaskModel, Result, Strategy};
use metabalance_cli::bench::benchmark_overhead;
use metabalance_cli::config::{ExperimentConfig, Overrides};
use metabalance_cli::run::{prepare_dataset, train, write_metrics_csv, write_trace_csv};
use metabalance_cli::sweep::sweep;

#[derive(Parser)]
#[command(
    name = "mtb",
    version,
    about = "Multi-task training with gradient-magnitude balancing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction file: dedup, count-filter, reindex, split.
    Preprocess {
        input: PathBuf,
        out_dir: PathBuf,
        /// Format descriptor (TOML) naming columns and behaviors.
        #[arg(long)]
        format: PathBuf,
        #[arg(long, default_value_t = 20)]
        min_user_purchases: usize,
        #[arg(long, default_value_t = 10)]
        min_item_purchasers: usize,
        /// Run the count filter once instead of iterating to a fixpoint.
        #[arg(long)]
        single_pass: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train/validation/test fractions.
        #[arg(long, num_args = 3, default_values_t = [0.7, 0.1, 0.2])]
        ratios: Vec<f64>,
    },
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        relax_factor: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        optimizer: Option<String>,
    },
    /// Grid sweep over strategies and relax factors.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a held-out split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train with magnitude tracing enabled and write the trace CSV.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the training-step phases on the configured workload.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            let code = match e {
                Error::Config(_) => 2,
                Error::Contract(_) => 3,
                Error::Data(_) => 4,
                Error::Training(_) => 5,
                Error::Io(_) => 6,
                Error::Serde(_) => 7,
            };
            ExitCode::from(code)
        }
    }
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "A" | "a" => Ok(Strategy::A),
        "B" | "b" => Ok(Strategy::B),
        "C" | "c" => Ok(Strategy::C),
        "off" | "Off" => Ok(Strategy::Off),
        other => Err(Error::Config(format!("unknown strategy `{other}`"))),
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_toml_file(path)?;
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, value).map_err(|e| Error::Serde(e.to_string()))
}

fn dispatch() -> Result<()> {
    match Cli::parse().command {
        Command::Preprocess {
            input,
            out_dir,
            format,
            min_user_purchases,
            min_item_purchasers,
            single_pass,
            seed,
            ratios,
        } => preprocess(
            &input,
            &out_dir,
            &format,
            min_user_purchases,
            min_item_purchasers,
            single_pass,
            seed,
            &ratios,
        ),
        Command::Train {
            config,
            seed,
            out,
            method,
            strategy,
            relax_factor,
            beta,
            optimizer,
        } => {
            let overrides = Overrides {
                method,
                strategy: strategy.as_deref().map(parse_strategy).transpose()?,
                relax_factor,
                beta,
                optimizer,
                out,
                trace: None,
            };
            let cfg = load_config(&config, &overrides)?;
            let seed = seed.or_else(|| cfg.training.seeds.first().copied()).unwrap_or(7);
            run_train(&cfg, seed)
        }
        Command::Sweep { config, out } => {
            let overrides = Overrides {
                out,
                ..Overrides::default()
            };
            let cfg = load_config(&config, &overrides)?;
            run_sweep(&cfg)
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&config, &Overrides::default())?;
            run_evaluate(&cfg, &checkpoint, &split)
        }
        Command::Trace { config, seed, out } => {
            let overrides = Overrides {
                out,
                trace: Some(true),
                ..Overrides::default()
            };
            let cfg = load_config(&config, &overrides)?;
            let seed = seed.or_else(|| cfg.training.seeds.first().copied()).unwrap_or(7);
            run_train(&cfg, seed)
        }
        Command::Bench { config, steps } => {
            let cfg = load_config(&config, &Overrides::default())?;
            let report = benchmark_overhead(&cfg, steps)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?
            );
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn preprocess(
    input: &Path,
    out_dir: &Path,
    format: &Path,
    min_user_purchases: usize,
    min_item_purchasers: usize,
    single_pass: bool,
    seed: u64,
    ratios: &[f64],
) -> Result<()> {
    if ratios.len() != 3 {
        return Err(Error::Config("--ratios takes three fractions".into()));
    }
    let ratios = [ratios[0], ratios[1], ratios[2]];
    let desc = FormatDescriptor::from_toml_file(format)?;
    let (table, maps) = load_interactions(input, &desc)?;
    let mode = if single_pass {
        FilterMode::SinglePass
    } else {
        FilterMode::Fixpoint
    };
    let filtered = filter_by_count(&table, min_user_purchases, min_item_purchasers, mode)?;

    // Compose dictionaries: surviving dense ids back to original tokens.
    let users: Vec<String> = filtered
        .kept_users
        .iter()
        .map(|&old| maps.users[old].clone())
        .collect();
    let items: Vec<String> = filtered
        .kept_items
        .iter()
        .map(|&old| maps.items[old].clone())
        .collect();

    let bundle = split(&filtered.table, ratios, seed)?;

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("user_map.csv"), IdMaps::to_csv(&users))?;
    fs::write(out_dir.join("item_map.csv"), IdMaps::to_csv(&items))?;

    let write_rows = |path: &Path, rows: &[(usize, usize, usize)]| -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "user,item,behavior")?;
        for &(u, i, t) in rows {
            writeln!(out, "{u},{i},{}", filtered.table.task_names[t])?;
        }
        Ok(())
    };
    let train_rows: Vec<(usize, usize, usize)> = bundle
        .train
        .iter()
        .map(|r| (r.user, r.item, r.task))
        .collect();
    let val_rows: Vec<(usize, usize, usize)> =
        bundle.validation.iter().map(|&(u, i)| (u, i, 0)).collect();
    let test_rows: Vec<(usize, usize, usize)> =
        bundle.test.iter().map(|&(u, i)| (u, i, 0)).collect();
    write_rows(&out_dir.join("train.csv"), &train_rows)?;
    write_rows(&out_dir.join("validation.csv"), &val_rows)?;
    write_rows(&out_dir.join("test.csv"), &test_rows)?;

    let mut per_task = BTreeMap::new();
    for (t, name) in filtered.table.task_names.iter().enumerate() {
        per_task.insert(name.clone(), filtered.table.count_for_task(t));
    }
    let manifest = serde_json::json!({
        "num_users": filtered.table.num_users,
        "num_items": filtered.table.num_items,
        "interactions": filtered.table.len(),
        "interactions_per_task": per_task,
        "train_records": bundle.train.len(),
        "validation_pairs": bundle.validation.len(),
        "test_pairs": bundle.test.len(),
        "min_user_purchases": min_user_purchases,
        "min_item_purchasers": min_item_purchasers,
        "filter_mode": if single_pass { "single-pass" } else { "fixpoint" },
        "ratios": ratios,
        "seed": seed,
    });
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    println!(
        "preprocessed {} interactions over {} users x {} items into {}",
        filtered.table.len(),
        filtered.table.num_users,
        filtered.table.num_items,
        out_dir.display()
    );
    Ok(())
}

fn run_train(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let outcome = train(cfg, seed)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join(format!("run-seed{seed}.json")), &outcome.record)?;
    let mut metrics = BufWriter::new(File::create(dir.join(format!("metrics-seed{seed}.csv")))?);
    write_metrics_csv(&outcome.record, &mut metrics)?;
    outcome
        .best_model
        .save(&dir.join(format!("checkpoint-seed{seed}.json")))?;
    if let Some(rows) = &outcome.record.trace {
        let mut trace = BufWriter::new(File::create(dir.join(format!("trace-seed{seed}.csv")))?);
        write_trace_csv(rows, &mut trace)?;
    }
    let record = &outcome.record;
    println!(
        "{} + {} seed {seed}: best epoch {} val ndcg@{} {:.5} ({} epochs run)",
        record.method,
        record.optimizer,
        record.best_epoch,
        cfg.training.eval_k,
        record.best_val,
        record.epochs.len()
    );
    for (key, value) in &record.test {
        println!("test {key}: {value:.5}");
    }
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig) -> Result<()> {
    let outcome = sweep(cfg)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("sweep.json"), &outcome)?;
    for p in &outcome.points {
        println!(
            "strategy {} r {:.2}: median val ndcg@{} {:.5}",
            p.strategy, p.relax_factor, cfg.training.eval_k, p.score
        );
    }
    let best = outcome.winning_point();
    println!(
        "winner: strategy {} r {:.2} (median val {:.5})",
        best.strategy, best.relax_factor, best.score
    );
    for (key, value) in &outcome.winner_test {
        println!("winner test {key}: {value:.5}");
    }
    Ok(())
}

fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, split_name: &str) -> Result<()> {
    let data = prepare_dataset(cfg)?;
    let model = MultiTaskModel::load(checkpoint)?;
    let truth = match split_name {
        "test" => &data.bundle.test_truth,
        "validation" => &data.bundle.val_truth,
        other => {
            return Err(Error::Config(format!(
                "unknown split `{other}` (expected `test` or `validation`)"
            )))
        }
    };
    let metrics = evaluate(
        &model,
        truth,
        &cfg.metric_ks(),
        cfg.training.candidate_policy,
        Some(&data.bundle.train_target_by_user),
    )?;
    let mut stdout = std::io::stdout().lock();
    metrics.write_csv(&format!("eval-{split_name}"), 0, &mut stdout, true)?;
    Ok(())
}
