//! The task-scaling study: for each `(T, replicate)` cell, draw a task and
//! `T` training prompts with a seed that is a pure function of
//! `(global seed, T, replicate)`, train, estimate the truncated-KL risk on
//! fresh prompts, and fit a log-log slope to the replicate-averaged risks.
//!
//! For the direct-holder family the task (the conditional map itself) is
//! held fixed within a cell and fresh prompts are drawn from it; for the
//! mixture-posterior family tasks are resampled per draw, since its
//! conditional is the same posterior map for every task.

use crate::models::{ClampSpec, CompositeModel, MlpSpec, MlpWeights, TransformerSpec, TransformerWeights};
use crate::numerics::{mix_seed, RngStream};
use crate::risk::{estimate_rb, ProbabilityModel};
use crate::tasks::{FamilyKind, FreshTaskLaw, PromptLaw, PromptSample, TaskFamilySpec};
use crate::train::{train_erm, TrainSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Composite { transformer: TransformerSpec, head: MlpSpec, clamp_epsilon: f64 },
    MlpOnly { head: MlpSpec, clamp_epsilon: f64 },
}

impl ModelConfig {
    /// Builds an initialised model sized for the family's prompts.
    pub fn build(&self, family: &TaskFamilySpec, rng: &mut RngStream) -> Result<CompositeModel> {
        match self {
            ModelConfig::Composite { transformer, head, clamp_epsilon } => {
                if transformer.dim != family.prompt_rows() {
                    return Err(Error::Config(format!(
                        "transformer dim {} must equal p + K = {}",
                        transformer.dim,
                        family.prompt_rows()
                    )));
                }
                if transformer.classes != family.classes {
                    return Err(Error::Config("transformer classes must match the family".into()));
                }
                let enc = TransformerWeights::init(transformer, rng)?;
                let head = MlpWeights::init(head, family.classes, family.classes, rng)?;
                CompositeModel::new(Some(enc), head, ClampSpec::new(*clamp_epsilon, family.classes)?)
            }
            ModelConfig::MlpOnly { head, clamp_epsilon } => {
                let head = MlpWeights::init(head, family.flat_dim(), family.classes, rng)?;
                CompositeModel::new(None, head, ClampSpec::new(*clamp_epsilon, family.classes)?)
            }
        }
    }
}

/// Substitute the exact conditional for the trained model (pipeline checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    #[default]
    Trained,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub family: TaskFamilySpec,
    pub model: ModelConfig,
    pub t_grid: Vec<usize>,
    pub replicates: usize,
    /// Truncation level `B` of the risk.
    pub truncation: f64,
    pub n_mc_risk: usize,
    pub seed: u64,
    pub train: TrainSpec,
    #[serde(default)]
    pub learner: Learner,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Schema(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.family.validate()?;
        self.train.validate()?;
        if self.t_grid.len() < 3 {
            return Err(Error::Config("t_grid needs at least 3 points".into()));
        }
        if self.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("t_grid must be strictly increasing".into()));
        }
        if self.replicates < 3 {
            return Err(Error::Config("need at least 3 replicates".into()));
        }
        if self.truncation < 2.0 {
            return Err(Error::Config("truncation level must be >= 2".into()));
        }
        if self.n_mc_risk < 100 {
            return Err(Error::Config("n_mc_risk must be at least 100".into()));
        }
        Ok(())
    }

    /// The deterministic `(T, replicate, seed)` plan, in output order.
    pub fn plan(&self) -> Vec<(usize, usize, u64)> {
        let mut cells = Vec::new();
        for &t in &self.t_grid {
            for rep in 0..self.replicates {
                cells.push((t, rep, mix_seed(self.seed, t as u64, rep as u64)));
            }
        }
        cells
    }
}

/// One `(T, replicate)` cell of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub t: usize,
    pub replicate: usize,
    pub seed: u64,
    pub rb_mean: f64,
    pub rb_stderr: f64,
    pub gap_estimate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

/// Ordinary least squares on `(ln T, ln value)`.
///
/// A nonpositive value cannot enter the log-log fit; it returns the
/// degenerate-input error instead of a fit.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::Config("need at least 2 points for a slope".into()));
    }
    if points.iter().any(|(t, v)| *t <= 0.0 || *v <= 0.0) {
        return Err(Error::Numeric("degenerate input: nonpositive value in log-log fit".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(t, v)| (t.ln(), v.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("degenerate input: all T values coincide".into()));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = logs.iter().map(|(x, y)| y - (intercept + slope * x)).collect();
    Ok(SlopeFit { slope, intercept, residuals })
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Config("spearman needs two equal-length series".into()));
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Numeric("degenerate input: constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Replicate-averaged summary of a set of scaling rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingSummary {
    /// `(T, mean over replicates of rb_mean)` in increasing `T`.
    pub averaged: Vec<(usize, f64)>,
    pub fit: Option<SlopeFit>,
    /// Set when the averaged risks could not enter a log-log fit.
    pub degenerate: bool,
    pub per_replicate_slopes: Vec<Option<f64>>,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingResult {
    pub rows: Vec<ScalingRow>,
    pub summary: ScalingSummary,
}

/// Aggregates rows into the replicate-averaged fit and dispersion view.
pub fn summarize(rows: &[ScalingRow]) -> Result<ScalingSummary> {
    if rows.is_empty() {
        return Err(Error::Config("no rows to summarize".into()));
    }
    let mut ts: Vec<usize> = rows.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    let averaged: Vec<(usize, f64)> = ts
        .iter()
        .map(|&t| {
            let vals: Vec<f64> =
                rows.iter().filter(|r| r.t == t).map(|r| r.rb_mean).collect();
            (t, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();

    let points: Vec<(f64, f64)> = averaged.iter().map(|&(t, v)| (t as f64, v)).collect();
    let (fit, degenerate) = match fit_loglog_slope(&points) {
        Ok(f) => (Some(f), false),
        Err(_) => (None, true),
    };

    let mut reps: Vec<usize> = rows.iter().map(|r| r.replicate).collect();
    reps.sort_unstable();
    reps.dedup();
    let per_replicate_slopes = reps
        .iter()
        .map(|&rep| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.replicate == rep)
                .map(|r| (r.t as f64, r.rb_mean))
                .collect();
            fit_loglog_slope(&pts).ok().map(|f| f.slope)
        })
        .collect();

    let xs: Vec<f64> = averaged.iter().map(|&(t, _)| t as f64).collect();
    let ys: Vec<f64> = averaged.iter().map(|&(_, v)| v).collect();
    let spearman = spearman(&xs, &ys).ok();

    Ok(ScalingSummary { averaged, fit, degenerate, per_replicate_slopes, spearman })
}

/// Computes one cell; pure function of the spec and the cell coordinates.
pub fn run_cell(spec: &ExperimentSpec, t: usize, replicate: usize) -> Result<ScalingRow> {
    let seed = mix_seed(spec.seed, t as u64, replicate as u64);
    let root = RngStream::new(seed, "cell");

    // the evaluation law and, for the oracle learner, the exact conditional
    let (law, oracle_task): (Box<dyn PromptLaw>, _) = match spec.family.kind {
        FamilyKind::DirectHolder { .. } => {
            let task = spec.family.sample_task(&mut root.child("task"));
            (Box::new(task.clone()), task)
        }
        FamilyKind::MixturePosterior { .. } => {
            // any task carries the shared posterior map
            let task = spec.family.sample_task(&mut root.child("task"));
            (Box::new(FreshTaskLaw(spec.family.clone())), task)
        }
    };

    let mut data_rng = root.child("train-data");
    let data: Vec<PromptSample> =
        (0..t).map(|_| law.sample_prompt_law(&mut data_rng)).collect::<Result<_>>()?;

    let (model, gap_estimate): (Box<dyn ProbabilityModel + Send>, f64) = match spec.learner {
        Learner::Oracle => (Box::new(oracle_task), 0.0),
        Learner::Trained => {
            let init = spec.model.build(&spec.family, &mut root.child("init"))?;
            let mut cell_train = spec.train.clone();
            cell_train.seed = mix_seed(seed, 0x7261696e, 0);
            let (trained, result) = train_erm(&init, &data, &cell_train).map_err(|e| {
                Error::Numeric(format!("cell (T={t}, replicate={replicate}): {e}"))
            })?;
            (Box::new(trained), result.gap_estimate)
        }
    };

    let mut risk_rng = root.child("risk");
    let rb = estimate_rb(model.as_ref(), law.as_ref(), spec.n_mc_risk, spec.truncation, &mut risk_rng)?;
    Ok(ScalingRow { t, replicate, seed, rb_mean: rb.mean, rb_stderr: rb.stderr, gap_estimate })
}

/// Runs every `(T, replicate)` cell on a bounded worker pool and summarises.
/// Cells are independently seeded, so the worker count never changes values;
/// rows come back in deterministic `(T, replicate)` order.
pub fn run_scaling(spec: &ExperimentSpec, workers: usize) -> Result<ScalingResult> {
    spec.validate()?;
    let cells = spec.plan();
    let workers = workers.max(1).min(cells.len());
    let slots: Mutex<Vec<Option<Result<ScalingRow>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (t, rep, _) = cells[i];
                let row = run_cell(spec, t, rep);
                slots.lock().unwrap()[i] = Some(row);
            });
        }
    });

    let mut rows = Vec::with_capacity(cells.len());
    for slot in slots.into_inner().unwrap() {
        rows.push(slot.expect("worker pool covered every cell")?);
    }
    let summary = summarize(&rows)?;
    Ok(ScalingResult { rows, summary })
}

const CSV_HEADER: &str = "t,replicate,seed,rb_mean,rb_stderr,gap_estimate";

/// Writes rows as CSV: UTF-8, `.` decimal separator, shortest round-trip
/// float formatting.
pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.t, r.replicate, r.seed, r.rb_mean, r.rb_stderr, r.gap_estimate
        )?;
    }
    Ok(())
}

pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingRow>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header =
        lines.next().ok_or_else(|| Error::Schema("empty scaling csv".into()))??;
    if header.trim() != CSV_HEADER {
        return Err(Error::Schema(format!("unexpected csv header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Schema(format!("row {}: expected 6 fields", ln + 2)));
        }
        let parse_err = |field: &str, e: String| Error::Schema(format!("row {}: {field}: {e}", ln + 2));
        rows.push(ScalingRow {
            t: fields[0].parse().map_err(|e: std::num::ParseIntError| parse_err("t", e.to_string()))?,
            replicate: fields[1]
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("replicate", e.to_string()))?,
            seed: fields[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("seed", e.to_string()))?,
            rb_mean: fields[3]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err("rb_mean", e.to_string()))?,
            rb_stderr: fields[4]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err("rb_stderr", e.to_string()))?,
            gap_estimate: fields[5]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err("gap_estimate", e.to_string()))?,
        });
    }
    Ok(rows)
}
