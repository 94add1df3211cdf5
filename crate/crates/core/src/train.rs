//! Seeded minibatch ERM over the constrained classes, with magnitude
//! pruning on a fixed cadence and a restart-based surrogate for the
//! empirical risk gap.
//!
//! The returned model is the one trained from the provided initialisation
//! (restart 0); further restarts reinitialise from the init distribution and
//! exist to estimate how far restart 0 sits above the best loss found. The
//! true inner minimum over a nonconvex class is not computable, so the gap
//! is a restart surrogate and is always reported with its restart count.

use crate::models::{
    encoder_lipschitz_probe, mlp_lipschitz_probe, CompositeModel, MlpWeights,
    TransformerWeights, ENCODER_PROBE_MIN_SEPARATION,
};
use crate::numerics::{Matrix, RngStream, Tape};
use crate::risk::cross_entropy;
use crate::tasks::PromptSample;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    GradientDescent,
    AdaptiveMoment { beta1: f64, beta2: f64, stabilizer: f64 },
}

impl Optimizer {
    /// Step 1e-3, decays 0.9/0.999, stabiliser 1e-8.
    pub fn adaptive_default() -> Self {
        Optimizer::AdaptiveMoment { beta1: 0.9, beta2: 0.999, stabilizer: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub optimizer: Optimizer,
    pub step_size: f64,
    pub steps: usize,
    pub batch: usize,
    /// Projection cadence in optimizer steps.
    pub prune_every: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Optional encoder Lipschitz penalty weight `lambda`; adds
    /// `lambda * relu(probe - gamma)^2` over a few sampled pairs per step.
    #[serde(default)]
    pub gamma_penalty: Option<f64>,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if self.step_size <= 0.0 {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.batch == 0 || self.prune_every == 0 {
            return Err(Error::Config("batch and prune_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub nonzeros: usize,
}

/// Post-training constraint audit: budgets and entry bounds are exact
/// (projection postconditions); Lipschitz and output norms are sampled
/// monitors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub head_nonzeros: usize,
    pub head_budget: usize,
    pub head_max_abs_entry: f64,
    pub head_lipschitz_probe: f64,
    pub head_lipschitz_assumed: f64,
    pub encoder_nonzeros: Option<usize>,
    pub encoder_budget: Option<usize>,
    pub encoder_lipschitz_probe: Option<f64>,
    pub encoder_lipschitz_budget: Option<f64>,
    pub max_output_norm: Option<f64>,
    pub output_bound: Option<f64>,
    /// Hard constraints (budgets, entry bound) hold exactly.
    pub hard_constraints_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    /// Loss of the returned model (restart 0) on the full dataset.
    pub final_loss: f64,
    /// Minimum loss across all restarts.
    pub best_restart_loss: f64,
    /// `final_loss - best_restart_loss`; zero when restart 0 is the best.
    pub gap_estimate: f64,
    pub restart_losses: Vec<f64>,
    /// Full-dataset loss at the end of each epoch for the returned run.
    pub history: Vec<f64>,
    pub steps_log: Vec<StepLog>,
    pub compliance: ComplianceReport,
}

struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: usize,
}

fn reinit(template: &CompositeModel, rng: &mut RngStream) -> Result<CompositeModel> {
    let encoder = match &template.encoder {
        Some(enc) => Some(TransformerWeights::init(&enc.spec, rng)?),
        None => None,
    };
    let head = MlpWeights::init(
        &template.head.spec,
        template.head.input_dim(),
        template.head.output_dim(),
        rng,
    )?;
    CompositeModel::new(encoder, head, template.clamp.clone())
}

/// Trains one model by seeded minibatch descent with periodic projection.
fn train_single(
    mut model: CompositeModel,
    data: &[PromptSample],
    spec: &TrainSpec,
    rng: &mut RngStream,
) -> Result<(CompositeModel, Vec<f64>, Vec<StepLog>)> {
    let mut history = Vec::new();
    let mut steps_log = Vec::new();
    let mut adam: Option<AdamState> = None;
    let mut step = 0usize;
    let mut penalty_rng = rng.child("penalty-pairs");

    'outer: loop {
        let order = rng.permutation(data.len());
        for chunk in order.chunks(spec.batch.min(data.len())) {
            if step >= spec.steps {
                break 'outer;
            }
            step += 1;
            let batch: Vec<&PromptSample> = chunk.iter().map(|&i| &data[i]).collect();

            let mut tape = Tape::new();
            let binding = model.register_params(&mut tape);
            let mut loss = model.batch_loss_on_tape(&mut tape, &binding, &batch)?;
            if let (Some(lambda), Some(enc)) = (spec.gamma_penalty, &model.encoder) {
                loss = add_gamma_penalty(
                    &model,
                    enc,
                    &mut tape,
                    &binding,
                    loss,
                    lambda,
                    data[0].z.cols(),
                    &mut penalty_rng,
                )?;
            }
            let loss_value = tape.value(loss).get(0, 0);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_value} at step {step}: learning-rate fault"
                )));
            }
            let grads = tape.gradient(loss)?;
            let grad_mats: Vec<Matrix> =
                binding.param_ids.iter().map(|&id| grads.get(id)).collect();
            let grad_norm =
                grad_mats.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();

            match &spec.optimizer {
                Optimizer::GradientDescent => {
                    for (tensor, grad) in model.tensors_mut().into_iter().zip(&grad_mats) {
                        for (w, g) in tensor.values.data_mut().iter_mut().zip(grad.data()) {
                            *w -= spec.step_size * g;
                        }
                    }
                }
                Optimizer::AdaptiveMoment { beta1, beta2, stabilizer } => {
                    let state = adam.get_or_insert_with(|| AdamState {
                        m: grad_mats.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect(),
                        v: grad_mats.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect(),
                        t: 0,
                    });
                    state.t += 1;
                    let bc1 = 1.0 - beta1.powi(state.t as i32);
                    let bc2 = 1.0 - beta2.powi(state.t as i32);
                    for ((tensor, grad), (m, v)) in model
                        .tensors_mut()
                        .into_iter()
                        .zip(&grad_mats)
                        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
                    {
                        for (((w, g), mi), vi) in tensor
                            .values
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .zip(m.data_mut())
                            .zip(v.data_mut())
                        {
                            *mi = beta1 * *mi + (1.0 - beta1) * g;
                            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                            let m_hat = *mi / bc1;
                            let v_hat = *vi / bc2;
                            *w -= spec.step_size * m_hat / (v_hat.sqrt() + stabilizer);
                        }
                    }
                }
            }

            if step % spec.prune_every == 0 {
                model.project_constraints();
            }
            steps_log.push(StepLog {
                step,
                loss: loss_value,
                grad_norm,
                nonzeros: crate::models::count_nonzeros(&model),
            });
        }
        history.push(cross_entropy(&model, data)?);
        if step >= spec.steps {
            break;
        }
    }
    model.project_constraints();
    history.push(cross_entropy(&model, data)?);
    Ok((model, history, steps_log))
}

/// Differentiable surrogate of the monitored encoder constraint:
/// `lambda * relu(max_pairs ratio - gamma)^2` added to the loss node.
#[allow(clippy::too_many_arguments)]
fn add_gamma_penalty(
    model: &CompositeModel,
    enc: &TransformerWeights,
    tape: &mut Tape,
    binding: &crate::models::TapeBinding,
    loss: crate::numerics::NodeId,
    lambda: f64,
    prompt_cols: usize,
    rng: &mut RngStream,
) -> Result<crate::numerics::NodeId> {
    const PAIRS: usize = 4;
    let d = enc.spec.dim;
    let mut ratios = Vec::with_capacity(PAIRS);
    let mut drawn = 0;
    while drawn < PAIRS {
        let z1 = Matrix::from_fn(d, prompt_cols, |_, _| rng.uniform_01());
        let z2 = Matrix::from_fn(d, prompt_cols, |_, _| rng.uniform_01());
        let sep = z1.sub(&z2)?.frobenius_norm();
        if sep < ENCODER_PROBE_MIN_SEPARATION {
            continue;
        }
        drawn += 1;
        let f1 = model.logits_on_tape(tape, binding, &z1)?;
        let f2 = model.logits_on_tape(tape, binding, &z2)?;
        let sq = tape.frob_sq_diff(f1, f2)?;
        let dist = tape.sqrt(sq);
        ratios.push(tape.scale(dist, 1.0 / sep));
    }
    let worst = tape.max_n(&ratios)?;
    let excess = tape.sub_const(worst, enc.spec.lipschitz_budget);
    let active = tape.relu(excess);
    let sq = tape.hadamard(active, active)?;
    let scaled = tape.scale(sq, lambda);
    tape.add(loss, scaled)
}

fn compliance_report(
    model: &CompositeModel,
    prompt_cols: usize,
    rng: &mut RngStream,
) -> Result<ComplianceReport> {
    let (enc_nonzeros, head_nonzeros) = model.count_nonzeros();
    let head_probe = mlp_lipschitz_probe(&model.head, 200, rng)?;
    let mut report = ComplianceReport {
        head_nonzeros,
        head_budget: model.head.spec.nonzero_budget,
        head_max_abs_entry: model.head.max_abs_entry(),
        head_lipschitz_probe: head_probe,
        head_lipschitz_assumed: model.head.spec.lipschitz_assumed,
        encoder_nonzeros: None,
        encoder_budget: None,
        encoder_lipschitz_probe: None,
        encoder_lipschitz_budget: None,
        max_output_norm: None,
        output_bound: None,
        hard_constraints_ok: head_nonzeros <= model.head.spec.nonzero_budget
            && model.head.max_abs_entry() <= 1.0,
    };
    if let Some(enc) = &model.encoder {
        let probe = encoder_lipschitz_probe(enc, prompt_cols, 200, rng)?;
        let mut max_out: f64 = 0.0;
        for _ in 0..200 {
            let z = Matrix::from_fn(enc.spec.dim, prompt_cols, |_, _| rng.uniform_01());
            let out = enc.forward(&z)?;
            max_out = max_out.max(out.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        report.encoder_nonzeros = Some(enc_nonzeros);
        report.encoder_budget = Some(enc.spec.nonzero_budget);
        report.encoder_lipschitz_probe = Some(probe);
        report.encoder_lipschitz_budget = Some(enc.spec.lipschitz_budget);
        report.max_output_norm = Some(max_out);
        report.output_bound = Some(enc.spec.output_bound);
        report.hard_constraints_ok =
            report.hard_constraints_ok && enc_nonzeros <= enc.spec.nonzero_budget;
    }
    Ok(report)
}

/// Runs the restart ensemble: restart 0 trains the provided init, later
/// restarts train fresh initialisations with seeds derived from the spec.
fn run_restarts(
    init: &CompositeModel,
    data: &[PromptSample],
    spec: &TrainSpec,
) -> Result<Vec<(CompositeModel, f64, Vec<f64>, Vec<StepLog>)>> {
    let root = RngStream::new(spec.seed, "train");
    let mut out = Vec::with_capacity(spec.restarts);
    for r in 0..spec.restarts {
        let model = if r == 0 {
            init.clone()
        } else {
            reinit(init, &mut root.child(&format!("restart-init/{r}")))?
        };
        let mut rng = root.child(&format!("restart/{r}"));
        let (trained, history, steps_log) = train_single(model, data, spec, &mut rng)?;
        let loss = cross_entropy(&trained, data)?;
        out.push((trained, loss, history, steps_log));
    }
    Ok(out)
}

/// Minibatch ERM with projection every `prune_every` steps and once at the
/// end; deterministic given the spec seed. Returns the model trained from
/// `init` plus the restart ensemble statistics.
pub fn train_erm(
    init: &CompositeModel,
    data: &[PromptSample],
    spec: &TrainSpec,
) -> Result<(CompositeModel, TrainResult)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let runs = run_restarts(init, data, spec)?;
    let restart_losses: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let best_restart_loss = restart_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let (model, final_loss, history, steps_log) = {
        let first = &runs[0];
        (first.0.clone(), first.1, first.2.clone(), first.3.clone())
    };
    let mut compliance_rng = RngStream::new(spec.seed, "train/compliance");
    let compliance = compliance_report(&model, data[0].z.cols(), &mut compliance_rng)?;
    Ok((
        model,
        TrainResult {
            final_loss,
            best_restart_loss,
            gap_estimate: final_loss - best_restart_loss,
            restart_losses,
            history,
            steps_log,
            compliance,
        },
    ))
}

/// Restart-surrogate estimate of the empirical risk gap for an external
/// model: `loss(model) - min over restart losses`. The restarts reproduce
/// exactly the ensemble [`train_erm`] would run with the same spec, so a
/// model that *is* the best restart scores zero.
pub fn estimate_gap(data: &[PromptSample], model: &CompositeModel, spec: &TrainSpec) -> Result<f64> {
    spec.validate()?;
    if spec.restarts < 2 {
        return Err(Error::Config("gap estimation needs at least 2 restarts".into()));
    }
    let runs = run_restarts(model, data, spec)?;
    let best = runs.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    Ok(cross_entropy(model, data)? - best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClampSpec, MlpSpec};
    use crate::risk::ProbVector;
    use crate::tasks::{encode_prompt, PromptSample, TaskFamilySpec};

    /// Linearly separated 1-D two-class toy encoded as N = 0 prompts. Inputs
    /// stay in [0.4, 0.6], so with entries clipped to [-1, 1] the logits
    /// never reach the clamp and the problem is convex over the weight box.
    fn convex_toy() -> (Vec<PromptSample>, CompositeModel) {
        let family = TaskFamilySpec::direct_holder(1, 2, 0, 0, 0.0, 1.0, 1).unwrap();
        let mut data = Vec::new();
        for i in 0..20 {
            let (x, label) = if i % 2 == 0 {
                (0.4 + 0.001 * i as f64, 0usize)
            } else {
                (0.6 - 0.001 * i as f64, 1usize)
            };
            let z = encode_prompt(&[], &[], &[x], 2).unwrap();
            let p0 = ProbVector::new(vec![1.0 - label as f64, label as f64]).unwrap();
            data.push(PromptSample::new(z, label, p0, &family).unwrap());
        }
        let spec = MlpSpec { depth: 0, width_cap: 1, nonzero_budget: 100, lipschitz_assumed: 5.0 };
        let head = MlpWeights::zeros(&spec, 3, 2).unwrap();
        let model = CompositeModel::new(None, head, ClampSpec::new(0.1, 2).unwrap()).unwrap();
        (data, model)
    }

    fn toy_spec(optimizer: Optimizer, step_size: f64, steps: usize, restarts: usize) -> TrainSpec {
        TrainSpec {
            optimizer,
            step_size,
            steps,
            batch: 20,
            prune_every: 25,
            restarts,
            seed: 1234,
            gamma_penalty: None,
        }
    }

    #[test]
    fn zero_like_budget_returns_init_unchanged() {
        // steps must be >= 1; a single tiny step with zero learning rate is
        // rejected, so verify the invariant via spec validation instead
        let (data, model) = convex_toy();
        let mut spec = toy_spec(Optimizer::GradientDescent, 0.1, 1, 1);
        spec.steps = 0;
        assert!(train_erm(&model, &data, &spec).is_err());
    }

    #[test]
    fn full_batch_descent_history_is_nonincreasing() {
        let (data, model) = convex_toy();
        let spec = toy_spec(Optimizer::GradientDescent, 1e-3, 200, 1);
        let (_, result) = train_erm(&model, &data, &spec).unwrap();
        for w in result.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "history must not increase: {w:?}");
        }
    }

    #[test]
    fn convex_toy_reaches_the_long_run_optimum() {
        let (data, model) = convex_toy();
        // oracle: long-run full-batch plain descent
        let oracle_spec = toy_spec(Optimizer::GradientDescent, 0.5, 20_000, 1);
        let (_, oracle) = train_erm(&model, &data, &oracle_spec).unwrap();
        // test run: adaptive optimizer, much shorter
        let spec = toy_spec(Optimizer::adaptive_default(), 0.01, 3_000, 1);
        let (_, result) = train_erm(&model, &data, &spec).unwrap();
        assert!(
            (result.final_loss - oracle.final_loss).abs() <= 1e-3,
            "{} vs oracle {}",
            result.final_loss,
            oracle.final_loss
        );
    }

    #[test]
    fn trained_gradient_norm_shrinks_on_convex_toy() {
        let (data, model) = convex_toy();
        let spec = toy_spec(Optimizer::GradientDescent, 0.5, 500, 1);
        let (_, result) = train_erm(&model, &data, &spec).unwrap();
        let first = result.steps_log.first().unwrap().grad_norm;
        let last = result.steps_log.last().unwrap().grad_norm;
        assert!(last < first, "gradient norm should shrink: {last} vs {first}");
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let (data, model) = convex_toy();
        let spec = toy_spec(Optimizer::adaptive_default(), 0.01, 50, 2);
        let (m1, r1) = train_erm(&model, &data, &spec).unwrap();
        let (m2, r2) = train_erm(&model, &data, &spec).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        for (a, b) in m1.tensors().iter().zip(m2.tensors()) {
            assert!(a
                .values
                .data()
                .iter()
                .zip(b.values.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn constraints_hold_after_training() {
        let (data, model) = convex_toy();
        let mut spec = toy_spec(Optimizer::adaptive_default(), 0.05, 300, 1);
        spec.prune_every = 10;
        let (trained, result) = train_erm(&model, &data, &spec).unwrap();
        assert!(result.compliance.hard_constraints_ok);
        assert!(trained.head.nonzeros() <= trained.head.spec.nonzero_budget);
        assert!(trained.head.max_abs_entry() <= 1.0);
    }

    #[test]
    fn gap_of_best_restart_is_zero_and_min_is_monotone() {
        let (data, model) = convex_toy();
        let spec = toy_spec(Optimizer::adaptive_default(), 0.01, 100, 3);
        let (_, result) = train_erm(&model, &data, &spec).unwrap();
        assert!(result.gap_estimate >= 0.0);
        assert!((result.final_loss - result.best_restart_loss - result.gap_estimate).abs() == 0.0);

        // nested restart seeds: the minimum over a superset cannot grow
        let spec2 = toy_spec(Optimizer::adaptive_default(), 0.01, 100, 2);
        let (_, result2) = train_erm(&model, &data, &spec2).unwrap();
        assert!(result.best_restart_loss <= result2.best_restart_loss + 1e-15);
        assert_eq!(result.restart_losses[..2], result2.restart_losses[..]);
    }

    #[test]
    fn gap_on_convex_toy_is_tiny() {
        let (data, model) = convex_toy();
        let spec = toy_spec(Optimizer::adaptive_default(), 0.02, 2_000, 2);
        let (trained, _) = train_erm(&model, &data, &spec).unwrap();
        let gap = estimate_gap(&data, &trained, &spec).unwrap();
        assert!(gap.abs() <= 1e-3, "convex toy gap should vanish, got {gap}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let (data, model) = convex_toy();
        // absurd learning rate on plain descent blows the logits up; the
        // clamp keeps predictions finite, so blow up the weights instead and
        // check the error path via a poisoned sample
        let mut bad = data.clone();
        bad[0].z.set(0, 0, 1.0);
        let spec = toy_spec(Optimizer::GradientDescent, 1e12, 40, 1);
        let out = train_erm(&model, &bad, &spec);
        // either the run aborts with a numeric fault or the clamp saved it;
        // both are acceptable, but a returned result must be finite
        match out {
            Err(Error::Numeric(msg)) => assert!(msg.contains("learning-rate")),
            Ok((_, result)) => assert!(result.final_loss.is_finite()),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
