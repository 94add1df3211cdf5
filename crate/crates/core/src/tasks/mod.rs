//! Synthetic task families with exactly known conditional class
//! probabilities, prompt encoding, and small-value-bound diagnostics.
//!
//! Two production families:
//!
//! - **direct-holder**: the conditional probability is a smooth trigonometric
//!   feature map of the flattened prompt, `p0(Z) = softmax(tau * g(vec Z))`
//!   with `g_k(z) = sum_j a_kj cos(pi <w_j, z> + phi_kj)`. Prompt entries are
//!   uniform and prompt labels carry no information; the statistical problem
//!   is literally conditional-probability estimation on `[0,1]^d`, and the
//!   coefficients are rescaled so a first-derivative bound of `Q` is
//!   certified.
//! - **mixture-posterior**: class means are latent Gaussians; the ground
//!   truth is the exact conjugate posterior over the query label given the
//!   prompt, marginalising the means. Covariates are squashed into `[0,1]`
//!   by the logistic map; the posterior is computed in pre-squash
//!   coordinates, where it is exact and invariant to the bijection.
//!
//! Two further designed laws ([`FirstCoordinateLaw`], [`ConstantLaw`]) have
//! trivially known conditionals and exist for diagnostics and tests.

mod dataset;
mod svb;

pub use dataset::{
    dataset_task, generate_dataset, read_dataset, write_dataset, Dataset, DatasetHeader, Record,
};
pub use svb::{estimate_svb, small_value_integral, SmallValueIntegral, SvbClassReport, SvbFit, SvbReport};

use crate::numerics::{softmax_columns, Matrix, RngStream};
use crate::risk::ProbVector;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Logistic squash used by the mixture family to keep covariates in `[0,1]`.
pub fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`squash`], guarded against the saturated endpoints.
pub fn unsquash(z: f64) -> f64 {
    let z = z.clamp(1e-300, 1.0 - 1e-16);
    (z / (1.0 - z)).ln()
}

/// Family-specific smoothness knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FamilyKind {
    DirectHolder {
        /// Max absolute integer frequency per coordinate.
        frequency_cutoff: u32,
        /// Softmax temperature applied to the feature map.
        temperature: f64,
        /// Certified first-derivative budget for `tau * g_k`.
        holder_radius: f64,
        /// Number of random cosine features.
        features: usize,
    },
    MixturePosterior {
        /// Within-class noise standard deviation.
        noise_sd: f64,
        /// Prior standard deviation of the class means.
        prior_sd: f64,
    },
}

/// A task family: the joint law over tasks and prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamilySpec {
    pub kind: FamilyKind,
    /// Covariate dimension `p`.
    pub covariate_dim: usize,
    /// Class count `K`.
    pub classes: usize,
    /// Context length `N` (labelled examples per prompt).
    pub context_len: usize,
}

impl TaskFamilySpec {
    pub fn direct_holder(
        covariate_dim: usize,
        classes: usize,
        context_len: usize,
        frequency_cutoff: u32,
        temperature: f64,
        holder_radius: f64,
        features: usize,
    ) -> Result<Self> {
        if temperature < 0.0 || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
        }
        if holder_radius <= 0.0 {
            return Err(Error::Config(format!("holder_radius must be > 0, got {holder_radius}")));
        }
        if features == 0 {
            return Err(Error::Config("need at least one random feature".into()));
        }
        let spec = Self {
            kind: FamilyKind::DirectHolder {
                frequency_cutoff,
                temperature,
                holder_radius,
                features,
            },
            covariate_dim,
            classes,
            context_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mixture_posterior(
        covariate_dim: usize,
        classes: usize,
        context_len: usize,
        noise_sd: f64,
        prior_sd: f64,
    ) -> Result<Self> {
        if noise_sd <= 0.0 || prior_sd <= 0.0 {
            return Err(Error::Config("noise_sd and prior_sd must be positive".into()));
        }
        let spec = Self {
            kind: FamilyKind::MixturePosterior { noise_sd, prior_sd },
            covariate_dim,
            classes,
            context_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.covariate_dim == 0 {
            return Err(Error::Config("covariate_dim must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        match &self.kind {
            FamilyKind::DirectHolder { temperature, holder_radius, features, .. } => {
                if *temperature < 0.0 || *holder_radius <= 0.0 || *features == 0 {
                    return Err(Error::Config("invalid direct-holder smoothness knobs".into()));
                }
            }
            FamilyKind::MixturePosterior { noise_sd, prior_sd } => {
                if *noise_sd <= 0.0 || *prior_sd <= 0.0 {
                    return Err(Error::Config("invalid mixture-posterior scales".into()));
                }
            }
        }
        Ok(())
    }

    /// Prompt matrix rows, `p + K`.
    pub fn prompt_rows(&self) -> usize {
        self.covariate_dim + self.classes
    }

    /// Prompt matrix columns, `N + 1`.
    pub fn prompt_cols(&self) -> usize {
        self.context_len + 1
    }

    /// Flattened prompt dimension `d = (p + K)(N + 1)`.
    pub fn flat_dim(&self) -> usize {
        self.prompt_rows() * self.prompt_cols()
    }

    /// Draws a task from the family prior.
    pub fn sample_task(&self, rng: &mut RngStream) -> Task {
        let params = match &self.kind {
            FamilyKind::DirectHolder {
                frequency_cutoff,
                temperature,
                holder_radius,
                features,
            } => {
                let d = self.flat_dim();
                let f = *frequency_cutoff as i64;
                let frequencies: Vec<Vec<i64>> = (0..*features)
                    .map(|_| (0..d).map(|_| if f == 0 { 0 } else { rng.int_range(-f, f) }).collect())
                    .collect();
                let mut coefficients: Vec<Vec<f64>> = (0..self.classes)
                    .map(|_| (0..*features).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
                    .collect();
                let phases: Vec<Vec<f64>> = (0..self.classes)
                    .map(|_| {
                        (0..*features)
                            .map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI))
                            .collect()
                    })
                    .collect();
                // rescale so that tau * pi * sum_j |a_kj| ||w_j||_1 <= Q per class
                for row in coefficients.iter_mut() {
                    let budget: f64 = row
                        .iter()
                        .zip(&frequencies)
                        .map(|(a, w)| {
                            a.abs()
                                * std::f64::consts::PI
                                * w.iter().map(|v| v.abs() as f64).sum::<f64>()
                        })
                        .sum::<f64>()
                        * temperature;
                    if budget > *holder_radius {
                        let shrink = holder_radius / budget;
                        for a in row.iter_mut() {
                            *a *= shrink;
                        }
                    }
                }
                TaskParams::DirectHolder { frequencies, coefficients, phases }
            }
            FamilyKind::MixturePosterior { prior_sd, .. } => {
                let means: Vec<Vec<f64>> = (0..self.classes)
                    .map(|_| (0..self.covariate_dim).map(|_| prior_sd * rng.normal()).collect())
                    .collect();
                TaskParams::MixturePosterior { means }
            }
        };
        Task { family: self.clone(), params }
    }
}

/// Task-level parameters drawn from the family prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskParams {
    DirectHolder {
        /// `J x d` integer frequency vectors.
        frequencies: Vec<Vec<i64>>,
        /// `K x J` cosine coefficients, rescaled to the certified budget.
        coefficients: Vec<Vec<f64>>,
        /// `K x J` phases.
        phases: Vec<Vec<f64>>,
    },
    MixturePosterior {
        /// `K x p` latent class means (pre-squash coordinates).
        means: Vec<Vec<f64>>,
    },
}

/// One draw from the task prior: fixes the conditional law of prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub family: TaskFamilySpec,
    pub params: TaskParams,
}

/// One labelled prompt with its exact ground-truth conditional.
#[derive(Debug, Clone)]
pub struct PromptSample {
    /// `(p+K) x (N+1)` prompt matrix.
    pub z: Matrix,
    /// Column-major flattening of `z`, length `d`.
    pub z_flat: Vec<f64>,
    /// Query label, drawn from `p0`.
    pub label: usize,
    /// True conditional class probabilities at `z`.
    pub p0: ProbVector,
}

impl PromptSample {
    /// Validates the structural invariants before accepting the sample.
    pub fn new(z: Matrix, label: usize, p0: ProbVector, spec: &TaskFamilySpec) -> Result<Self> {
        let (p, k) = (spec.covariate_dim, spec.classes);
        if z.shape() != (spec.prompt_rows(), spec.prompt_cols()) {
            return Err(Error::Shape(format!(
                "prompt must be {}x{}, got {:?}",
                spec.prompt_rows(),
                spec.prompt_cols(),
                z.shape()
            )));
        }
        if label >= k || p0.classes() != k {
            return Err(Error::Contract("label or p0 out of range".into()));
        }
        for j in 0..z.cols() {
            for i in 0..p {
                let v = z.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!("X-block entry {v} outside [0,1]")));
                }
            }
        }
        let last = z.cols() - 1;
        for i in 0..k {
            if z.get(p + i, last) != 0.0 {
                return Err(Error::Contract("query label block must be zero".into()));
            }
        }
        for j in 0..last {
            let mut ones = 0;
            for i in 0..k {
                let v = z.get(p + i, j);
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::Contract(format!("label block entry {v} not one-hot")));
                }
            }
            if ones != 1 {
                return Err(Error::Contract("each context label column must be one-hot".into()));
            }
        }
        let z_flat = z.vec_columns();
        Ok(Self { z, z_flat, label, p0 })
    }

    pub fn query_one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.p0.classes()];
        y[self.label] = 1.0;
        y
    }
}

/// Assembles the block prompt matrix `[X | x_query; Y | 0]`.
pub fn encode_prompt(xs: &[Vec<f64>], ys: &[usize], x_query: &[f64], classes: usize) -> Result<Matrix> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "got {} covariates but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let p = x_query.len();
    if p == 0 || classes == 0 {
        return Err(Error::Config("covariate dim and class count must be positive".into()));
    }
    if let Some(bad) = xs.iter().find(|x| x.len() != p) {
        return Err(Error::Shape(format!(
            "context covariate of dim {} against query dim {p}",
            bad.len()
        )));
    }
    if let Some(bad) = ys.iter().find(|y| **y >= classes) {
        return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
    }
    let n = xs.len();
    let mut z = Matrix::zeros(p + classes, n + 1);
    for (j, x) in xs.iter().enumerate() {
        for (i, &v) in x.iter().enumerate() {
            z.set(i, j, v);
        }
        z.set(p + ys[j], j, 1.0);
    }
    for (i, &v) in x_query.iter().enumerate() {
        z.set(i, n, v);
    }
    Ok(z)
}

impl Task {
    /// Exact conditional class probabilities at a prompt.
    pub fn true_conditional(&self, z: &Matrix) -> Result<ProbVector> {
        let spec = &self.family;
        if z.shape() != (spec.prompt_rows(), spec.prompt_cols()) {
            return Err(Error::Shape(format!(
                "prompt must be {}x{}, got {:?}",
                spec.prompt_rows(),
                spec.prompt_cols(),
                z.shape()
            )));
        }
        match (&self.params, &spec.kind) {
            (
                TaskParams::DirectHolder { frequencies, coefficients, phases },
                FamilyKind::DirectHolder { temperature, .. },
            ) => {
                let flat = z.vec_columns();
                let logits: Vec<f64> = (0..spec.classes)
                    .map(|k| {
                        let g: f64 = (0..frequencies.len())
                            .map(|j| {
                                let dot: f64 = frequencies[j]
                                    .iter()
                                    .zip(&flat)
                                    .map(|(&w, &v)| w as f64 * v)
                                    .sum();
                                coefficients[k][j]
                                    * (std::f64::consts::PI * dot + phases[k][j]).cos()
                            })
                            .sum();
                        temperature * g
                    })
                    .collect();
                let soft = softmax_columns(&Matrix::column(&logits));
                ProbVector::new(soft.column_slice(0))
            }
            (TaskParams::MixturePosterior { .. }, FamilyKind::MixturePosterior { .. }) => {
                let (xs, ys, xq) = split_prompt(z, spec)?;
                let xs_pre: Vec<Vec<f64>> =
                    xs.iter().map(|x| x.iter().map(|&v| unsquash(v)).collect()).collect();
                let xq_pre: Vec<f64> = xq.iter().map(|&v| unsquash(v)).collect();
                mixture_posterior_probs(spec, &xs_pre, &ys, &xq_pre)
            }
            _ => Err(Error::Contract("task parameters do not match the family kind".into())),
        }
    }

    /// Draws one labelled prompt; the query label is drawn from the exact
    /// conditional so that label frequencies at a fixed `Z` match `p0(Z)`.
    pub fn sample_prompt(&self, rng: &mut RngStream) -> Result<PromptSample> {
        let spec = &self.family;
        let (p, k, n) = (spec.covariate_dim, spec.classes, spec.context_len);
        match (&self.params, &spec.kind) {
            (TaskParams::DirectHolder { .. }, FamilyKind::DirectHolder { .. }) => {
                let xs: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..p).map(|_| rng.uniform_01()).collect()).collect();
                let ys: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
                let xq: Vec<f64> = (0..p).map(|_| rng.uniform_01()).collect();
                let z = encode_prompt(&xs, &ys, &xq, k)?;
                let p0 = self.true_conditional(&z)?;
                let label = rng.categorical(p0.as_slice());
                PromptSample::new(z, label, p0, spec)
            }
            (
                TaskParams::MixturePosterior { means },
                FamilyKind::MixturePosterior { noise_sd, .. },
            ) => {
                let mut xs_pre = Vec::with_capacity(n);
                let mut ys = Vec::with_capacity(n);
                for _ in 0..n {
                    let class = rng.index(k);
                    ys.push(class);
                    xs_pre.push(
                        (0..p).map(|i| means[class][i] + noise_sd * rng.normal()).collect::<Vec<f64>>(),
                    );
                }
                // the query covariate comes from the task marginal; its
                // generating component is discarded and the recorded label is
                // drawn from the marginal posterior instead
                let qc = rng.index(k);
                let xq_pre: Vec<f64> =
                    (0..p).map(|i| means[qc][i] + noise_sd * rng.normal()).collect();
                let p0 = mixture_posterior_probs(spec, &xs_pre, &ys, &xq_pre)?;
                let xs: Vec<Vec<f64>> =
                    xs_pre.iter().map(|x| x.iter().map(|&v| squash(v)).collect()).collect();
                let xq: Vec<f64> = xq_pre.iter().map(|&v| squash(v)).collect();
                let z = encode_prompt(&xs, &ys, &xq, k)?;
                let label = rng.categorical(p0.as_slice());
                PromptSample::new(z, label, p0, spec)
            }
            _ => Err(Error::Contract("task parameters do not match the family kind".into())),
        }
    }
}

/// Splits a prompt matrix into context covariates, labels and the query.
fn split_prompt(z: &Matrix, spec: &TaskFamilySpec) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> {
    let (p, k, n) = (spec.covariate_dim, spec.classes, spec.context_len);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for j in 0..n {
        xs.push((0..p).map(|i| z.get(i, j)).collect());
        let mut label = None;
        for i in 0..k {
            if z.get(p + i, j) == 1.0 {
                label = Some(i);
                break;
            }
        }
        ys.push(label.ok_or_else(|| Error::Contract("context column lacks a one-hot label".into()))?);
    }
    let xq = (0..p).map(|i| z.get(i, n)).collect();
    Ok((xs, ys, xq))
}

/// Exact conjugate posterior over the query label given the prompt, with the
/// class means marginalised; classes absent from the prompt fall back to the
/// prior predictive. All coordinates are pre-squash.
pub fn mixture_posterior_probs(
    spec: &TaskFamilySpec,
    xs: &[Vec<f64>],
    ys: &[usize],
    x_query: &[f64],
) -> Result<ProbVector> {
    let FamilyKind::MixturePosterior { noise_sd, prior_sd } = &spec.kind else {
        return Err(Error::Contract("posterior requires a mixture-posterior family".into()));
    };
    let (p, k) = (spec.covariate_dim, spec.classes);
    let noise_var = noise_sd * noise_sd;
    let prior_var = prior_sd * prior_sd;
    let mut log_w = Vec::with_capacity(k);
    for class in 0..k {
        let mut count = 0usize;
        let mut sum = vec![0.0; p];
        for (x, &y) in xs.iter().zip(ys) {
            if y == class {
                count += 1;
                for (s, &v) in sum.iter_mut().zip(x) {
                    *s += v;
                }
            }
        }
        let precision = 1.0 / prior_var + count as f64 / noise_var;
        let predictive_var = 1.0 / precision + noise_var;
        let mut sq = 0.0;
        for i in 0..p {
            let post_mean = sum[i] / (noise_var * precision);
            let diff = x_query[i] - post_mean;
            sq += diff * diff;
        }
        log_w.push(
            -0.5 * p as f64 * (2.0 * std::f64::consts::PI * predictive_var).ln()
                - 0.5 * sq / predictive_var,
        );
    }
    let soft = softmax_columns(&Matrix::column(&log_w));
    ProbVector::new(soft.column_slice(0))
}

/// A sampling law over labelled prompts with exact conditionals attached.
///
/// For the mixture family the conditional is the same function of `Z` for
/// every task, so resampling the task per draw is part of sampling the prompt
/// marginal. For the direct-holder family the conditional *is* the task, so
/// the task must be held fixed for `p0` to be the conditional of the data law.
pub trait PromptLaw {
    fn classes(&self) -> usize;
    fn sample_prompt_law(&self, rng: &mut RngStream) -> Result<PromptSample>;
}

/// Fixed task, fresh prompts: the estimation problem of the scaling study.
impl PromptLaw for Task {
    fn classes(&self) -> usize {
        self.family.classes
    }
    fn sample_prompt_law(&self, rng: &mut RngStream) -> Result<PromptSample> {
        self.sample_prompt(rng)
    }
}

/// Fresh task per draw.
#[derive(Debug, Clone)]
pub struct FreshTaskLaw(pub TaskFamilySpec);

impl PromptLaw for FreshTaskLaw {
    fn classes(&self) -> usize {
        self.0.classes
    }
    fn sample_prompt_law(&self, rng: &mut RngStream) -> Result<PromptSample> {
        self.0.sample_task(rng).sample_prompt(rng)
    }
}

/// Draws the structural prompt (uniform covariates, uniform one-hot context
/// labels) shared by the designed diagnostic laws.
fn sample_structural_prompt(spec: &TaskFamilySpec, rng: &mut RngStream) -> Result<Matrix> {
    let (p, k, n) = (spec.covariate_dim, spec.classes, spec.context_len);
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.uniform_01()).collect()).collect();
    let ys: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
    let xq: Vec<f64> = (0..p).map(|_| rng.uniform_01()).collect();
    encode_prompt(&xs, &ys, &xq, k)
}

/// Designed two-class diagnostic law with `p0(Z) = (Z_1, 1 - Z_1)`: the first
/// flattened coordinate is uniform, so `P(p_1 <= t) = t` exactly (`alpha = 1`,
/// `C = 1` in the small-value bound).
#[derive(Debug, Clone)]
pub struct FirstCoordinateLaw(TaskFamilySpec);

impl FirstCoordinateLaw {
    pub fn new(spec: TaskFamilySpec) -> Result<Self> {
        if spec.classes != 2 {
            return Err(Error::Config("the first-coordinate law is two-class".into()));
        }
        Ok(Self(spec))
    }
}

impl PromptLaw for FirstCoordinateLaw {
    fn classes(&self) -> usize {
        2
    }
    fn sample_prompt_law(&self, rng: &mut RngStream) -> Result<PromptSample> {
        let z = sample_structural_prompt(&self.0, rng)?;
        let z1 = z.get(0, 0);
        let p0 = ProbVector::new(vec![z1, 1.0 - z1])?;
        let label = rng.categorical(p0.as_slice());
        PromptSample::new(z, label, p0, &self.0)
    }
}

/// Designed law whose conditional is a constant vector, independent of `Z`.
#[derive(Debug, Clone)]
pub struct ConstantLaw {
    spec: TaskFamilySpec,
    p0: ProbVector,
}

impl ConstantLaw {
    pub fn new(spec: TaskFamilySpec, p0: ProbVector) -> Result<Self> {
        if p0.classes() != spec.classes {
            return Err(Error::Shape("constant law p0 must match the class count".into()));
        }
        Ok(Self { spec, p0 })
    }
}

impl PromptLaw for ConstantLaw {
    fn classes(&self) -> usize {
        self.spec.classes
    }
    fn sample_prompt_law(&self, rng: &mut RngStream) -> Result<PromptSample> {
        let z = sample_structural_prompt(&self.spec, rng)?;
        let label = rng.categorical(self.p0.as_slice());
        PromptSample::new(z, label, self.p0.clone(), &self.spec)
    }
}

/// The task as an oracle model: predicts its own exact conditional.
impl crate::risk::ProbabilityModel for Task {
    fn classes(&self) -> usize {
        self.family.classes
    }
    fn predict_probs(&self, z: &Matrix) -> Result<ProbVector> {
        self.true_conditional(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn holder_spec(temperature: f64, cutoff: u32) -> TaskFamilySpec {
        TaskFamilySpec::direct_holder(2, 3, 2, cutoff, temperature, 2.0, 4).unwrap()
    }

    #[test]
    fn encode_prompt_shapes_and_example() {
        let spec = holder_spec(1.0, 1);
        assert_eq!(spec.prompt_rows(), 5);
        assert_eq!(spec.prompt_cols(), 3);
        assert_eq!(spec.flat_dim(), 15);

        // N=1, x1=(0.2), y1 = class 2 of 2, query (0.7)
        let z = encode_prompt(&[vec![0.2]], &[1], &[0.7], 2).unwrap();
        assert_eq!(z.shape(), (3, 2));
        assert_eq!(z.data(), &[0.2, 0.7, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(z.vec_columns().len(), 6);
    }

    #[test]
    fn encode_prompt_rejects_mismatches() {
        assert!(encode_prompt(&[vec![0.1]], &[0, 1], &[0.5], 2).is_err());
        assert!(encode_prompt(&[vec![0.1, 0.2]], &[0], &[0.5], 2).is_err());
        assert!(encode_prompt(&[vec![0.1]], &[5], &[0.5], 2).is_err());
    }

    #[test]
    fn zero_temperature_gives_uniform_conditional() {
        let spec = holder_spec(0.0, 1);
        let mut rng = RngStream::new(1, "tau0");
        let task = spec.sample_task(&mut rng);
        for _ in 0..10 {
            let s = task.sample_prompt(&mut rng).unwrap();
            for k in 0..3 {
                assert!((s.p0.get(k) - 1.0 / 3.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_cutoff_gives_conditional_constant_in_z() {
        let spec = holder_spec(1.0, 0);
        let mut rng = RngStream::new(2, "f0");
        let task = spec.sample_task(&mut rng);
        let a = task.sample_prompt(&mut rng).unwrap();
        let b = task.sample_prompt(&mut rng).unwrap();
        for k in 0..3 {
            assert!((a.p0.get(k) - b.p0.get(k)).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_rng_state_reproduces_tasks() {
        let spec = holder_spec(1.0, 2);
        let t1 = spec.sample_task(&mut RngStream::new(3, "task"));
        let t2 = spec.sample_task(&mut RngStream::new(3, "task"));
        assert_eq!(t1, t2);
    }

    #[test]
    fn degenerate_prompt_has_single_zero_label_column() {
        let spec = TaskFamilySpec::direct_holder(2, 3, 0, 1, 1.0, 2.0, 4).unwrap();
        let mut rng = RngStream::new(4, "n0");
        let task = spec.sample_task(&mut rng);
        let s = task.sample_prompt(&mut rng).unwrap();
        assert_eq!(s.z.shape(), (5, 1));
        for i in 2..5 {
            assert_eq!(s.z.get(i, 0), 0.0);
        }
    }

    #[test]
    fn context_label_columns_are_one_hot() {
        let spec = holder_spec(1.0, 1);
        let mut rng = RngStream::new(5, "onehot");
        let task = spec.sample_task(&mut rng);
        for _ in 0..20 {
            let s = task.sample_prompt(&mut rng).unwrap();
            for j in 0..2 {
                let col: f64 = (2..5).map(|i| s.z.get(i, j)).sum();
                assert_eq!(col, 1.0);
            }
        }
    }

    #[test]
    fn query_labels_match_conditional_frequencies() {
        // empirical label frequencies at a fixed Z match p0 within 3 binomial
        // standard errors
        let spec = holder_spec(1.5, 1);
        let mut rng = RngStream::new(6, "freq");
        let task = spec.sample_task(&mut rng);
        let s = task.sample_prompt(&mut rng).unwrap();
        let n = 100_000;
        let mut counts = vec![0usize; 3];
        for _ in 0..n {
            counts[rng.categorical(s.p0.as_slice())] += 1;
        }
        for k in 0..3 {
            let freq = counts[k] as f64 / n as f64;
            let p = s.p0.get(k);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "class {k}: {freq} vs {p}");
        }
    }

    #[test]
    fn conditional_lies_on_simplex() {
        let spec = holder_spec(2.0, 2);
        let mut rng = RngStream::new(7, "simplex");
        let task = spec.sample_task(&mut rng);
        for _ in 0..50 {
            let s = task.sample_prompt(&mut rng).unwrap();
            let sum: f64 = s.p0.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn certified_gradient_bound_holds_for_sampled_finite_differences() {
        let spec = holder_spec(1.0, 2);
        let mut rng = RngStream::new(8, "gradbound");
        let task = spec.sample_task(&mut rng);
        let TaskParams::DirectHolder { frequencies, coefficients, .. } = &task.params else {
            unreachable!()
        };
        let d = spec.flat_dim();
        // analytic bound on ||grad g_k||_2 (certified by the coefficient rescale)
        let g = |flat: &[f64], k: usize| -> f64 {
            let TaskParams::DirectHolder { frequencies, coefficients, phases } = &task.params
            else {
                unreachable!()
            };
            (0..frequencies.len())
                .map(|j| {
                    let dot: f64 =
                        frequencies[j].iter().zip(flat).map(|(&w, &v)| w as f64 * v).sum();
                    coefficients[k][j] * (std::f64::consts::PI * dot + phases[k][j]).cos()
                })
                .sum()
        };
        let h = 1e-6;
        for k in 0..3 {
            let bound: f64 = coefficients[k]
                .iter()
                .zip(frequencies)
                .map(|(a, w)| {
                    a.abs() * std::f64::consts::PI * w.iter().map(|v| v.abs() as f64).sum::<f64>()
                })
                .sum();
            for _ in 0..20 {
                let flat: Vec<f64> = (0..d).map(|_| rng.uniform_01()).collect();
                let mut norm_sq = 0.0;
                for i in 0..d {
                    let mut plus = flat.clone();
                    plus[i] += h;
                    let mut minus = flat.clone();
                    minus[i] -= h;
                    let deriv = (g(&plus, k) - g(&minus, k)) / (2.0 * h);
                    norm_sq += deriv * deriv;
                }
                assert!(norm_sq.sqrt() <= bound + 1e-6, "{} > {bound}", norm_sq.sqrt());
            }
        }
    }

    #[test]
    fn mixture_prompt_roundtrip_and_posterior_consistency() {
        let spec = TaskFamilySpec::mixture_posterior(2, 3, 3, 0.7, 1.3).unwrap();
        let mut rng = RngStream::new(9, "mixture");
        let task = spec.sample_task(&mut rng);
        for _ in 0..20 {
            let s = task.sample_prompt(&mut rng).unwrap();
            // true_conditional recovers pre-squash coordinates from Z; it must
            // agree with the p0 computed at sampling time
            let recomputed = task.true_conditional(&s.z).unwrap();
            for k in 0..3 {
                assert!((recomputed.get(k) - s.p0.get(k)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mixture_posterior_with_empty_prompt_is_uniform() {
        let spec = TaskFamilySpec::mixture_posterior(2, 3, 0, 0.5, 1.0).unwrap();
        let mut rng = RngStream::new(10, "mixture-n0");
        let task = spec.sample_task(&mut rng);
        let s = task.sample_prompt(&mut rng).unwrap();
        // no context: every class uses the same prior predictive
        for k in 0..3 {
            assert!((s.p0.get(k) - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixture_posterior_matches_quadrature_oracle() {
        // p = 1, K = 2, N = 1: marginal likelihood by adaptive Simpson over mu
        let spec = TaskFamilySpec::mixture_posterior(1, 2, 1, 0.8, 1.1).unwrap();
        let mut rng = RngStream::new(11, "mixture-quad");
        let task = spec.sample_task(&mut rng);
        let FamilyKind::MixturePosterior { noise_sd, prior_sd } = spec.kind else { unreachable!() };

        let normal_pdf = |x: f64, mean: f64, sd: f64| {
            (-0.5 * ((x - mean) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        // marginal likelihood of the class observations, integrating the mean
        let evidence = |obs: &[f64]| {
            let f = |mu: f64| {
                obs.iter().map(|&x| normal_pdf(x, mu, noise_sd)).product::<f64>()
                    * normal_pdf(mu, 0.0, prior_sd)
            };
            adaptive_simpson(&f, -60.0, 60.0, 1e-12, 50)
        };

        for _ in 0..10 {
            let s = task.sample_prompt(&mut rng).unwrap();
            let x1 = unsquash(s.z.get(0, 0));
            let y1 = if s.z.get(1, 0) == 1.0 { 0 } else { 1 };
            let xq = unsquash(s.z.get(0, 1));

            let mut weights = [0.0; 2];
            for k in 0..2 {
                let class_obs: Vec<f64> = if y1 == k { vec![x1] } else { vec![] };
                let mut with_query = class_obs.clone();
                with_query.push(xq);
                // posterior predictive of the query under class k; the other
                // classes' evidence factors cancel in the normalisation
                weights[k] = evidence(&with_query) / evidence(&class_obs);
            }
            let total = weights[0] + weights[1];
            for k in 0..2 {
                assert!((s.p0.get(k) - weights[k] / total).abs() <= 1e-6);
            }
        }
    }

    /// Adaptive Simpson quadrature, a test-only oracle.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn recurse(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let left = simpson(f, a, m);
            let right = simpson(f, m, b);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                recurse(f, a, m, left, tol / 2.0, depth - 1)
                    + recurse(f, m, b, right, tol / 2.0, depth - 1)
            }
        }
        recurse(f, a, b, simpson(f, a, b), tol, depth)
    }

    #[test]
    fn prompt_sample_validation_rejects_structural_breaks() {
        let spec = holder_spec(1.0, 1);
        let mut rng = RngStream::new(12, "invalid");
        let task = spec.sample_task(&mut rng);
        let good = task.sample_prompt(&mut rng).unwrap();

        let mut bad = good.z.clone();
        bad.set(3, 2, 1.0); // query label block no longer zero
        assert!(PromptSample::new(bad, good.label, good.p0.clone(), &spec).is_err());

        let mut bad = good.z.clone();
        bad.set(0, 0, 1.7); // X entry outside [0,1]
        assert!(PromptSample::new(bad, good.label, good.p0.clone(), &spec).is_err());

        let mut bad = good.z.clone();
        bad.set(2, 0, 0.4); // context label not one-hot
        assert!(PromptSample::new(bad, good.label, good.p0, &spec).is_err());
    }
}
