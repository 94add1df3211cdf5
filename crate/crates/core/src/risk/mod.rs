//! Losses, divergences, Monte Carlo risk estimators, and executable checkers
//! for the divergence inequalities the analysis relies on.
//!
//! Conventions: natural logarithms everywhere; `0 * log(0/q) = 0`; when
//! `q_k = 0 < p_k` the untruncated KL is reported as `+inf` while the
//! truncated KL contributes `p_k * B` for that term (the truncation caps
//! exactly the ratios that blow up).

mod checks;

pub use checks::{
    check_hellinger_bracket, check_kl_chisq, check_logsoftmax_lipschitz, check_trunc_moment,
    random_simplex_pair, sweep_hellinger_bracket, sweep_kl_chisq, sweep_logsoftmax_lipschitz,
    sweep_trunc_moment, BracketCheck, InequalityCheck, SweepReport, Violation, SLACK_TOL,
};

use crate::numerics::{Matrix, RngStream};
use crate::tasks::{PromptLaw, PromptSample};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point on the probability simplex; construction rejects violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Entries must be finite and nonnegative and sum to one within `1e-9`.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("probability vector needs at least one entry".into()));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("invalid probability entry {bad}")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("probability mass sums to {sum}")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// KL, truncated KL at `level`, squared Hellinger and chi-square for one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub kl: f64,
    pub kl_trunc: f64,
    pub hellinger_sq: f64,
    pub chi_sq: f64,
    pub level: f64,
}

/// `sum_k p_k * min(B, log(p_k/q_k))` with the zero conventions above.
pub fn kl_truncated(p: &ProbVector, q: &ProbVector, level: f64) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| {
            if pk == 0.0 {
                0.0
            } else if qk == 0.0 {
                pk * level
            } else {
                pk * level.min((pk / qk).ln())
            }
        })
        .sum()
}

/// Untruncated KL; `+inf` when `q` lacks mass somewhere `p` has it.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| {
            if pk == 0.0 {
                0.0
            } else if qk == 0.0 {
                f64::INFINITY
            } else {
                pk * (pk / qk).ln()
            }
        })
        .sum()
}

pub fn hellinger_sq(p: &ProbVector, q: &ProbVector) -> f64 {
    1.0 - p.as_slice().iter().zip(q.as_slice()).map(|(&a, &b)| (a * b).sqrt()).sum::<f64>()
}

/// `sum_k (p_k - q_k)^2 / q_k`; `+inf` when `q_k = 0 < p_k`.
pub fn chi_sq(p: &ProbVector, q: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| {
            if qk == 0.0 {
                if pk == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (pk - qk) * (pk - qk) / qk
            }
        })
        .sum()
}

/// All four divergences for one pair; `level` must be at least 2.
pub fn divergences(p: &ProbVector, q: &ProbVector, level: f64) -> Result<DivergenceReport> {
    if p.classes() != q.classes() {
        return Err(Error::Shape(format!("{} vs {} classes", p.classes(), q.classes())));
    }
    if level < 2.0 {
        return Err(Error::Config(format!("truncation level must be >= 2, got {level}")));
    }
    Ok(DivergenceReport {
        kl: kl_divergence(p, q),
        kl_trunc: kl_truncated(p, q, level),
        hellinger_sq: hellinger_sq(p, q),
        chi_sq: chi_sq(p, q),
        level,
    })
}

/// Anything that turns a prompt matrix into conditional class probabilities.
pub trait ProbabilityModel {
    fn classes(&self) -> usize;
    fn predict_probs(&self, z: &Matrix) -> Result<ProbVector>;
}

/// Model that ignores the prompt and always answers `p`.
#[derive(Debug, Clone)]
pub struct ConstantModel(pub ProbVector);

impl ProbabilityModel for ConstantModel {
    fn classes(&self) -> usize {
        self.0.classes()
    }
    fn predict_probs(&self, _z: &Matrix) -> Result<ProbVector> {
        Ok(self.0.clone())
    }
}

/// Average cross-entropy `-(1/T) sum_t log p_{y_t}(Z_t)` over a dataset.
///
/// Every predicted coordinate must be strictly positive (the output clamp
/// guarantees this for the model classes here); a nonpositive prediction is a
/// numeric contract violation.
pub fn cross_entropy(model: &dyn ProbabilityModel, data: &[PromptSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cross_entropy over an empty dataset".into()));
    }
    let mut total = 0.0;
    for sample in data {
        let probs = model.predict_probs(&sample.z)?;
        let p = probs.get(sample.label);
        if p <= 0.0 {
            return Err(Error::Numeric(format!(
                "predicted probability {p} for the observed class; cross-entropy undefined"
            )));
        }
        total -= p.ln();
    }
    Ok(total / data.len() as f64)
}

/// Monte Carlo estimate of a truncated-KL risk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub level: f64,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Estimates `R_B = E[KL_B(p0(Z) || model(Z))]` by drawing `n_mc` fresh
/// prompts from `law` (the law decides whether the latent task is resampled
/// per draw) and averaging the truncated KL against the attached ground truth.
pub fn estimate_rb(
    model: &dyn ProbabilityModel,
    law: &dyn PromptLaw,
    n_mc: usize,
    level: f64,
    rng: &mut RngStream,
) -> Result<RiskEstimate> {
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if level < 2.0 {
        return Err(Error::Config(format!("truncation level must be >= 2, got {level}")));
    }
    let mut draws = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let sample = law.sample_prompt_law(rng)?;
        let predicted = model.predict_probs(&sample.z)?;
        draws.push(kl_truncated(&sample.p0, &predicted, level));
    }
    let (mean, stderr) = mean_stderr(&draws);
    Ok(RiskEstimate { mean, stderr, n: n_mc, level })
}

/// Clustered variant: `prompts_per_task` draws share each task draw, and the
/// standard error is computed over cluster means.
pub fn estimate_rb_clustered(
    model: &dyn ProbabilityModel,
    laws: &mut dyn FnMut(&mut RngStream) -> Result<Box<dyn PromptLaw>>,
    n_tasks: usize,
    prompts_per_task: usize,
    level: f64,
    rng: &mut RngStream,
) -> Result<RiskEstimate> {
    if n_tasks < 2 || prompts_per_task == 0 {
        return Err(Error::Config("need at least 2 tasks and 1 prompt per task".into()));
    }
    let mut cluster_means = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let law = laws(rng)?;
        let mut vals = Vec::with_capacity(prompts_per_task);
        for _ in 0..prompts_per_task {
            let sample = law.sample_prompt_law(rng)?;
            let predicted = model.predict_probs(&sample.z)?;
            vals.push(kl_truncated(&sample.p0, &predicted, level));
        }
        cluster_means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let (mean, stderr) = mean_stderr(&cluster_means);
    Ok(RiskEstimate { mean, stderr, n: n_tasks * prompts_per_task, level })
}

/// Both sides of the chi-square pathway bound
/// `E[KL(p0 || p)] <= E[sum_k (p0_k - p_k)^2 / p_k]`, estimated on shared
/// draws. `margin` is the mean of the per-draw slack, which the pointwise
/// inequality keeps nonnegative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiSqRiskBound {
    pub risk_kl: f64,
    pub risk_kl_stderr: f64,
    pub bound: f64,
    pub bound_stderr: f64,
    pub margin: f64,
    pub margin_stderr: f64,
    pub holds: bool,
}

pub fn chi_sq_risk_bound(
    model: &dyn ProbabilityModel,
    law: &dyn PromptLaw,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<ChiSqRiskBound> {
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    let mut kls = Vec::with_capacity(n_mc);
    let mut bounds = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let sample = law.sample_prompt_law(rng)?;
        let predicted = model.predict_probs(&sample.z)?;
        if predicted.min_entry() <= 0.0 {
            return Err(Error::Numeric("chi-square bound needs strictly positive model".into()));
        }
        kls.push(kl_divergence(&sample.p0, &predicted));
        bounds.push(chi_sq(&sample.p0, &predicted));
    }
    let diffs: Vec<f64> = bounds.iter().zip(&kls).map(|(b, k)| b - k).collect();
    let (risk_kl, risk_kl_stderr) = mean_stderr(&kls);
    let (bound, bound_stderr) = mean_stderr(&bounds);
    let (margin, margin_stderr) = mean_stderr(&diffs);
    Ok(ChiSqRiskBound {
        risk_kl,
        risk_kl_stderr,
        bound,
        bound_stderr,
        margin,
        margin_stderr,
        holds: margin >= -3.0 * margin_stderr,
    })
}
