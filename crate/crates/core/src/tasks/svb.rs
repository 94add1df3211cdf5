//! Small-value-bound diagnostics: Monte Carlo estimates of the lower-tail
//! CDF of the true class probabilities, a log-log fit of `(C, alpha)` in
//! `P(p_k(Z) <= t) <= C t^alpha`, and the small-value integral
//! `E[1{p_k >= h} / p_k]` against the lemma bound
//! `C h^(alpha-1)/(1-alpha)` (for `alpha < 1`) or `C (1 - log h)` otherwise.

use super::PromptLaw;
use crate::numerics::RngStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Least-squares fit of `log P(p <= t) = log C + alpha log t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvbFit {
    pub c: f64,
    pub alpha: f64,
    /// Grid points that carried enough positive counts to enter the fit.
    pub points_used: usize,
}

/// Tail estimates for one class across the `t` grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvbClassReport {
    pub estimates: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub counts: Vec<usize>,
    pub fit: Option<SvbFit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvbReport {
    pub t_grid: Vec<f64>,
    pub n_mc: usize,
    pub per_class: Vec<SvbClassReport>,
}

/// Grid points need at least this many positive counts to enter the fit.
const MIN_FIT_COUNT: usize = 50;

/// Monte Carlo CDF estimates of `P(p_k(Z) <= t)` per class, with binomial
/// standard errors and a companion `(C, alpha)` log-log fit.
pub fn estimate_svb(
    law: &dyn PromptLaw,
    t_grid: &[f64],
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<SvbReport> {
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config("t_grid must lie in (0, 1]".into()));
    }
    let mut t_grid = t_grid.to_vec();
    t_grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let k = law.classes();
    let mut counts = vec![vec![0usize; t_grid.len()]; k];
    for _ in 0..n_mc {
        let sample = law.sample_prompt_law(rng)?;
        for class in 0..k {
            let p = sample.p0.get(class);
            for (ti, &t) in t_grid.iter().enumerate() {
                if p <= t {
                    counts[class][ti] += 1;
                }
            }
        }
    }

    let per_class = counts
        .into_iter()
        .map(|class_counts| {
            let estimates: Vec<f64> =
                class_counts.iter().map(|&c| c as f64 / n_mc as f64).collect();
            let stderrs: Vec<f64> = estimates
                .iter()
                .map(|&e| (e * (1.0 - e) / n_mc as f64).sqrt())
                .collect();
            let fit = fit_loglog(&t_grid, &estimates, &class_counts);
            SvbClassReport { estimates, stderrs, counts: class_counts, fit }
        })
        .collect();

    Ok(SvbReport { t_grid, n_mc, per_class })
}

fn fit_loglog(t_grid: &[f64], estimates: &[f64], counts: &[usize]) -> Option<SvbFit> {
    let pts: Vec<(f64, f64)> = t_grid
        .iter()
        .zip(estimates)
        .zip(counts)
        .filter(|((_, _), &c)| c >= MIN_FIT_COUNT)
        .map(|((&t, &e), _)| (t.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let alpha = sxy / sxx;
    let c = (my - alpha * mx).exp();
    Some(SvbFit { c, alpha, points_used: pts.len() })
}

/// Small-value integral estimate and the lemma bound at the fitted `(C, alpha)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallValueIntegral {
    pub h: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub fit: Option<SvbFit>,
    /// `C h^(alpha-1)/(1-alpha)` for `alpha < 1`, else `C(1 - log h)`.
    pub fitted_bound: Option<f64>,
}

/// MC estimate of `E[1{p_class(Z) >= h} / p_class(Z)]` plus the fitted bound.
/// The SVB fit reuses the same draws on a fixed log-spaced grid.
pub fn small_value_integral(
    law: &dyn PromptLaw,
    class: usize,
    h: f64,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<SmallValueIntegral> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::Config(format!("h must lie in (0, 1], got {h}")));
    }
    if n_mc < 100 {
        return Err(Error::Config(format!("n_mc must be at least 100, got {n_mc}")));
    }
    if class >= law.classes() {
        return Err(Error::Config(format!("class {class} out of range")));
    }

    let t_grid = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5];
    let mut values = Vec::with_capacity(n_mc);
    let mut counts = vec![0usize; t_grid.len()];
    for _ in 0..n_mc {
        let sample = law.sample_prompt_law(rng)?;
        let p = sample.p0.get(class);
        values.push(if p >= h { 1.0 / p } else { 0.0 });
        for (ti, &t) in t_grid.iter().enumerate() {
            if p <= t {
                counts[ti] += 1;
            }
        }
    }
    let n = n_mc as f64;
    let estimate = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - estimate) * (v - estimate)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();

    let estimates: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let fit = fit_loglog(&t_grid, &estimates, &counts);
    let fitted_bound = fit.as_ref().map(|f| {
        if f.alpha < 1.0 {
            f.c * h.powf(f.alpha - 1.0) / (1.0 - f.alpha)
        } else {
            f.c * (1.0 - h.ln())
        }
    });

    Ok(SmallValueIntegral { h, estimate, stderr, fit, fitted_bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::ProbVector;
    use crate::tasks::{ConstantLaw, FirstCoordinateLaw, TaskFamilySpec};

    fn grid() -> Vec<f64> {
        vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.49, 0.5, 0.6]
    }

    #[test]
    fn uniform_two_class_family_is_a_point_mass_at_half() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 1, 0, 0.0, 1.0, 1).unwrap();
        let law = ConstantLaw::new(spec, ProbVector::uniform(2)).unwrap();
        let mut rng = RngStream::new(1, "svb-point");
        let rep = estimate_svb(&law, &grid(), 500, &mut rng).unwrap();
        for (ti, &t) in rep.t_grid.iter().enumerate() {
            let expect = if t < 0.5 { 0.0 } else { 1.0 };
            assert_eq!(rep.per_class[0].estimates[ti], expect, "t = {t}");
        }
    }

    #[test]
    fn first_coordinate_law_has_unit_slope() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 2, 0, 0.0, 1.0, 1).unwrap();
        let law = FirstCoordinateLaw::new(spec).unwrap();
        let mut rng = RngStream::new(2, "svb-linear");
        let rep = estimate_svb(&law, &[0.01, 0.03, 0.1, 0.3, 0.6], 100_000, &mut rng).unwrap();
        // P(p_1 <= t) = t exactly; the estimates track it within 4 stderr
        for (ti, &t) in rep.t_grid.iter().enumerate() {
            let e = rep.per_class[0].estimates[ti];
            let se = rep.per_class[0].stderrs[ti].max(1e-6);
            assert!((e - t).abs() <= 4.0 * se, "t={t}: {e}");
        }
        let fit = rep.per_class[0].fit.as_ref().unwrap();
        assert!((fit.alpha - 1.0).abs() <= 0.1, "alpha = {}", fit.alpha);
        assert!((fit.c - 1.0).abs() <= 0.15, "c = {}", fit.c);
    }

    #[test]
    fn estimates_are_cdf_monotone() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 1, 1, 1.0, 2.0, 3).unwrap();
        let law = crate::tasks::FreshTaskLaw(spec);
        let mut rng = RngStream::new(3, "svb-monotone");
        let rep = estimate_svb(&law, &grid(), 2_000, &mut rng).unwrap();
        for class in &rep.per_class {
            for w in class.estimates.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn small_mc_budget_rejected() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 1, 0, 0.0, 1.0, 1).unwrap();
        let law = FirstCoordinateLaw::new(spec).unwrap();
        let mut rng = RngStream::new(4, "svb-small");
        assert!(estimate_svb(&law, &grid(), 99, &mut rng).is_err());
    }

    #[test]
    fn integral_on_first_coordinate_law_matches_log_oracle() {
        // E[1{p >= h}/p] with p ~ U(0,1) is -ln h; bound at (C=1, alpha=1) is
        // 1 - ln h
        let spec = TaskFamilySpec::direct_holder(1, 2, 2, 0, 0.0, 1.0, 1).unwrap();
        let law = FirstCoordinateLaw::new(spec).unwrap();
        let mut rng = RngStream::new(5, "svb-integral");
        let out = small_value_integral(&law, 0, 0.1, 100_000, &mut rng).unwrap();
        let oracle = 10.0_f64.ln();
        assert!((out.estimate - oracle).abs() <= 3.0 * out.stderr, "{} vs {oracle}", out.estimate);
        let analytic_bound = 1.0 - 0.1_f64.ln();
        assert!(out.estimate <= analytic_bound);
        assert!(out.fitted_bound.unwrap() >= out.estimate - 3.0 * out.stderr);
    }

    #[test]
    fn integral_at_h_one_is_bounded_by_mass_at_one() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 1, 0, 0.0, 1.0, 1).unwrap();
        let law = FirstCoordinateLaw::new(spec).unwrap();
        let mut rng = RngStream::new(6, "svb-h1");
        let out = small_value_integral(&law, 0, 1.0, 1_000, &mut rng).unwrap();
        assert!(out.estimate <= 1e-12, "only p = 1 exactly contributes at h = 1");
    }

    #[test]
    fn integral_grows_as_h_shrinks() {
        let spec = TaskFamilySpec::direct_holder(1, 2, 2, 0, 0.0, 1.0, 1).unwrap();
        let law = FirstCoordinateLaw::new(spec).unwrap();
        let at = |h: f64| {
            let mut rng = RngStream::new(7, "svb-shrink");
            small_value_integral(&law, 0, h, 20_000, &mut rng).unwrap().estimate
        };
        // shared seed: the same draws, so monotonicity is exact
        assert!(at(0.05) > at(0.2));
        assert!(at(0.2) > at(0.5));
    }
}
