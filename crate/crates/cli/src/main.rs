//! `iclrb`: dataset generation, training, risk evaluation, inequality
//! audits, entropy tables and the task-scaling study.
//!
//! Configs are JSON documents with a `schema_version` field; outputs are
//! CSV / JSON files under `--out`. The `ICLRB_SEED` environment variable
//! overrides the seed carried by any config.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use iclrb_core::complexity::{
    mlp_composite_entropy_bound, mlp_entropy_bound, transformer_entropy_bound, EntropyReport,
};
use iclrb_core::experiment::{
    read_scaling_csv, run_scaling, summarize, write_scaling_csv, ExperimentSpec, ModelConfig,
};
use iclrb_core::models::{
    gradient_fd_audit, load_checkpoint, save_checkpoint, CompositeModel, MlpSpec, TransformerSpec,
};
use iclrb_core::numerics::RngStream;
use iclrb_core::risk::{
    estimate_rb, sweep_hellinger_bracket, sweep_kl_chisq, sweep_logsoftmax_lipschitz,
    sweep_trunc_moment, SweepReport,
};
use iclrb_core::tasks::{
    dataset_task, generate_dataset, read_dataset, write_dataset, FamilyKind, FreshTaskLaw,
    PromptLaw, TaskFamilySpec,
};
use iclrb_core::train::{train_erm, TrainSpec};

#[derive(Parser)]
#[command(name = "iclrb", about = "In-context classification risk bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every inequality suite and the autodiff audit; exit 0 iff all pass.
    Check {
        /// Directory for violation dumps (ndjson); stdout summary otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset file from a family config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset; writes checkpoint.json and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the truncated-KL risk of a checkpoint on fresh draws.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the task-scaling study; writes scaling.csv and summary.json.
    Scaling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bounded worker pool size.
        #[arg(long, default_value_t = default_workers())]
        workers: usize,
        /// Print the (T, replicate, seed) plan without computing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Print entropy-bound tables as CSV.
    Entropy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge scaling CSVs and print the fitted slope summary.
    Report {
        /// One or more scaling CSV files.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Seed override honoured by every config that carries a seed.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("ICLRB_SEED") {
        Ok(v) => Ok(Some(v.parse().context("ICLRB_SEED must be an unsigned integer")?)),
        Err(_) => Ok(None),
    }
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("schema error in {}: {e}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Check { out } => check(out.as_deref()),
        Command::Gen { config, out } => gen(&config, &out),
        Command::Train { config, out } => train(&config, &out),
        Command::Eval { config, out } => eval(&config, out.as_deref()),
        Command::Scaling { config, out, workers, dry_run } => {
            scaling(&config, &out, workers, dry_run)
        }
        Command::Entropy { config, out } => entropy(config.as_deref(), out.as_deref()),
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
    }
}

// ---------------------------------------------------------------- check ----

fn check(out: Option<&Path>) -> Result<()> {
    let mut rng = RngStream::new(0x1c1_5eed, "check");
    let mut all_pass = true;
    let mut violations = Vec::new();

    let mut run = |report: SweepReport| {
        println!(
            "{:<22} trials {:>7}  violations {:>3}  max slack {:+.3e}  {}",
            report.check,
            report.trials,
            report.violations.len(),
            report.max_slack,
            if report.pass() { "PASS" } else { "FAIL" }
        );
        all_pass &= report.pass();
        violations.extend(report.violations);
    };

    run(sweep_hellinger_bracket(100_000, &[2.0, 4.0, 8.0], &mut rng)?);
    run(sweep_kl_chisq(10_000, &mut rng)?);
    run(sweep_trunc_moment(10_000, &mut rng)?);
    run(sweep_logsoftmax_lipschitz(10_000, &mut rng)?);

    let audit = gradient_fd_audit(25, 0x6ead_c4ec, 1e-6)?;
    println!(
        "{:<22} configs {:>6}  max rel err {:.3e}  {}",
        "gradient-audit",
        audit.configs,
        audit.max_rel_err,
        if audit.pass { "PASS" } else { "FAIL" }
    );
    all_pass &= audit.pass;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("violations.ndjson");
        let mut text = String::new();
        for v in &violations {
            text.push_str(&serde_json::to_string(v)?);
            text.push('\n');
        }
        std::fs::write(&path, text)?;
        println!("violations written to {}", path.display());
    } else {
        for v in &violations {
            println!("{}", serde_json::to_string(v)?);
        }
    }

    if all_pass {
        Ok(())
    } else {
        bail!("one or more checks failed")
    }
}

// ------------------------------------------------------------------ gen ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenConfig {
    schema_version: u32,
    family: TaskFamilySpec,
    count: usize,
    seed: u64,
}

fn gen(config: &Path, out: &Path) -> Result<()> {
    let mut cfg: GenConfig = read_config(config)?;
    if cfg.schema_version != 1 {
        bail!("schema error: unsupported schema_version {}", cfg.schema_version);
    }
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(out)?;
    let dataset = generate_dataset(&cfg.family, cfg.count, cfg.seed)?;
    let path = out.join("dataset.ndjson");
    write_dataset(&path, &dataset)?;
    println!("wrote {} records to {}", dataset.records.len(), path.display());
    Ok(())
}

// ---------------------------------------------------------------- train ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    schema_version: u32,
    dataset: PathBuf,
    model: ModelConfig,
    train: TrainSpec,
}

fn build_model(model: &ModelConfig, family: &TaskFamilySpec, rng: &mut RngStream) -> Result<CompositeModel> {
    Ok(model.build(family, rng)?)
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg: TrainConfig = read_config(config)?;
    if cfg.schema_version != 1 {
        bail!("schema error: unsupported schema_version {}", cfg.schema_version);
    }
    let dataset = read_dataset(&cfg.dataset)?;
    let samples = dataset.samples()?;
    let mut init_rng = RngStream::new(cfg.train.seed, "cli-train/init");
    let init = build_model(&cfg.model, &dataset.header.family, &mut init_rng)?;
    let (model, result) = train_erm(&init, &samples, &cfg.train)?;

    std::fs::create_dir_all(out)?;
    let ckpt = out.join("checkpoint.json");
    save_checkpoint(&ckpt, &model)?;
    let log = out.join("train_log.csv");
    let mut text = String::from("step,loss,grad_norm,nonzeros\n");
    for entry in &result.steps_log {
        text.push_str(&format!(
            "{},{},{},{}\n",
            entry.step, entry.loss, entry.grad_norm, entry.nonzeros
        ));
    }
    std::fs::write(&log, text)?;

    println!(
        "{}",
        serde_json::json!({
            "final_loss": result.final_loss,
            "best_restart_loss": result.best_restart_loss,
            "gap_estimate": result.gap_estimate,
            "restarts": result.restart_losses.len(),
            "compliance": result.compliance,
            "checkpoint": ckpt,
            "train_log": log,
        })
    );
    Ok(())
}

// ----------------------------------------------------------------- eval ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    schema_version: u32,
    checkpoint: PathBuf,
    /// Dataset whose generating law supplies the fresh evaluation draws.
    dataset: PathBuf,
    n_mc_risk: usize,
    truncation: f64,
    seed: u64,
}

fn eval(config: &Path, out: Option<&Path>) -> Result<()> {
    let mut cfg: EvalConfig = read_config(config)?;
    if cfg.schema_version != 1 {
        bail!("schema error: unsupported schema_version {}", cfg.schema_version);
    }
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let model = load_checkpoint(&cfg.checkpoint)?;
    let dataset = read_dataset(&cfg.dataset)?;
    let family = dataset.header.family.clone();
    let law: Box<dyn PromptLaw> = match family.kind {
        FamilyKind::DirectHolder { .. } => Box::new(dataset_task(&family, dataset.header.seed)),
        FamilyKind::MixturePosterior { .. } => Box::new(FreshTaskLaw(family.clone())),
    };
    let mut rng = RngStream::new(cfg.seed, "cli-eval");
    let estimate = estimate_rb(&model, law.as_ref(), cfg.n_mc_risk, cfg.truncation, &mut rng)?;
    let doc = serde_json::json!({
        "rb_mean": estimate.mean,
        "rb_stderr": estimate.stderr,
        "n": estimate.n,
        "truncation": estimate.level,
    });
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    println!("{doc}");
    Ok(())
}

// -------------------------------------------------------------- scaling ----

fn scaling(config: &Path, out: &Path, workers: usize, dry_run: bool) -> Result<()> {
    let mut spec: ExperimentSpec = read_config(config)?;
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    spec.validate()?;
    if dry_run {
        println!("t,replicate,seed");
        for (t, rep, seed) in spec.plan() {
            println!("{t},{rep},{seed}");
        }
        return Ok(());
    }
    let result = run_scaling(&spec, workers)?;
    std::fs::create_dir_all(out)?;
    let csv = out.join("scaling.csv");
    write_scaling_csv(&csv, &result.rows)?;
    let summary = out.join("summary.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&result.summary)?)?;
    println!("{}", serde_json::to_string(&result.summary)?);
    println!("rows: {} summary: {}", csv.display(), summary.display());
    Ok(())
}

// -------------------------------------------------------------- entropy ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EntropyConfig {
    schema_version: u32,
    deltas: Vec<f64>,
    constant_c: f64,
    samples: usize,
    classes: usize,
    transformer: Option<TransformerSpec>,
    mlp: Option<MlpSpec>,
    /// Sup-norm bound `B2` for the MLP-only composite formula.
    mlp_composite_output_bound: Option<f64>,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            deltas: vec![0.001, 0.01, 0.1, 0.125, 0.5],
            constant_c: 1.0,
            samples: 1000,
            classes: 2,
            transformer: Some(TransformerSpec {
                blocks: 2,
                heads: 2,
                dim: 4,
                width_cap: 8,
                output_bound: 2.0,
                nonzero_budget: 50,
                lipschitz_budget: 10.0,
                classes: 2,
            }),
            mlp: Some(MlpSpec {
                depth: 2,
                width_cap: 3,
                nonzero_budget: 10,
                lipschitz_assumed: 4.0,
            }),
            mlp_composite_output_bound: Some(3.0),
        }
    }
}

fn entropy(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg: EntropyConfig = match config {
        Some(path) => read_config(path)?,
        None => EntropyConfig::default(),
    };
    if cfg.schema_version != 1 {
        bail!("schema error: unsupported schema_version {}", cfg.schema_version);
    }
    let mut rows: Vec<EntropyReport> = Vec::new();
    for &delta in &cfg.deltas {
        if let Some(mlp) = &cfg.mlp {
            rows.push(mlp_entropy_bound(delta, mlp.depth, mlp.width_cap, mlp.nonzero_budget)?);
        }
        if let Some(tf) = &cfg.transformer {
            rows.push(transformer_entropy_bound(
                delta,
                tf.classes,
                tf.blocks,
                tf.heads,
                tf.width_cap,
                tf.nonzero_budget,
                tf.output_bound,
                cfg.samples,
                cfg.constant_c,
            )?);
        }
    }
    if let (Some(mlp), Some(b2)) = (&cfg.mlp, cfg.mlp_composite_output_bound) {
        rows.push(mlp_composite_entropy_bound(
            cfg.classes,
            mlp.nonzero_budget,
            mlp.depth,
            b2,
            cfg.samples,
            cfg.constant_c,
        )?);
    }
    let mut text = String::from("formula,delta,value,c,floored\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.formula, r.delta, r.value, r.constant_c, r.floored
        ));
    }
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("entropy.csv"), text)?;
    }
    Ok(())
}

// --------------------------------------------------------------- report ----

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_scaling_csv(path)?);
    }
    let summary = summarize(&rows)?;
    let doc = serde_json::to_string_pretty(&summary)?;
    println!("{doc}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), doc)?;
    }
    Ok(())
}
