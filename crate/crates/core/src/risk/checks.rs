//! Executable inequality checkers and randomized property sweeps.
//!
//! Every checker evaluates its inequality with an absolute slack of
//! [`SLACK_TOL`] and reports the raw slack values so violations can be dumped
//! and replayed.

use super::{hellinger_sq, kl_divergence, kl_truncated, ProbVector};
use crate::numerics::RngStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Absolute slack allowed on every inequality check.
pub const SLACK_TOL: f64 = 1e-12;

/// Three-way bracket `H^2 <= KL_2/2 <= KL_B/2 <= 5 e^{B/2} H^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketCheck {
    pub hellinger_sq: f64,
    pub half_kl2: f64,
    pub half_klb: f64,
    pub hellinger_ceiling: f64,
    /// `lhs - rhs` for each of the three inequalities, in order.
    pub slacks: [f64; 3],
    pub pass: bool,
}

pub fn check_hellinger_bracket(p: &ProbVector, q: &ProbVector, level: f64) -> Result<BracketCheck> {
    if level < 2.0 {
        return Err(Error::Config(format!("bracket needs B >= 2, got {level}")));
    }
    let h2 = hellinger_sq(p, q);
    let half_kl2 = 0.5 * kl_truncated(p, q, 2.0);
    let half_klb = 0.5 * kl_truncated(p, q, level);
    let ceiling = 5.0 * (level / 2.0).exp() * h2;
    let slacks = [h2 - half_kl2, half_kl2 - half_klb, half_klb - ceiling];
    Ok(BracketCheck {
        hellinger_sq: h2,
        half_kl2,
        half_klb,
        hellinger_ceiling: ceiling,
        slacks,
        pass: slacks.iter().all(|s| *s <= SLACK_TOL),
    })
}

/// Generic two-sided report: `lhs <= rhs` within [`SLACK_TOL`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl InequalityCheck {
    fn of(lhs: f64, rhs: f64) -> Self {
        let slack = lhs - rhs;
        Self { lhs, rhs, slack, pass: slack <= SLACK_TOL }
    }
}

/// `KL(p || q) <= chi^2(p || q)` for strictly positive `q`.
pub fn check_kl_chisq(p: &ProbVector, q: &ProbVector) -> Result<InequalityCheck> {
    if q.min_entry() <= 0.0 {
        return Err(Error::Config("chi-square comparison needs strictly positive q".into()));
    }
    Ok(InequalityCheck::of(kl_divergence(p, q), super::chi_sq(p, q)))
}

/// Truncated moment inequality:
/// `sum_k p_k |B ^ log(p_k/q_k)|^m <= max(m!, B^m/(B-1)) * KL_B(p || q)`
/// for `B > 2` and integer `m >= 2`.
pub fn check_trunc_moment(
    p: &ProbVector,
    q: &ProbVector,
    level: f64,
    m: u32,
) -> Result<InequalityCheck> {
    if level <= 2.0 {
        return Err(Error::Config(format!("moment inequality needs B > 2, got {level}")));
    }
    if m < 2 {
        return Err(Error::Config(format!("moment order must be >= 2, got {m}")));
    }
    if q.min_entry() <= 0.0 {
        return Err(Error::Config("moment inequality needs strictly positive q".into()));
    }
    let lhs: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| {
            if pk == 0.0 {
                0.0
            } else {
                pk * level.min((pk / qk).ln()).abs().powi(m as i32)
            }
        })
        .sum();
    let factorial: f64 = (1..=m as u64).product::<u64>() as f64;
    let constant = factorial.max(level.powi(m as i32) / (level - 1.0));
    Ok(InequalityCheck::of(lhs, constant * kl_truncated(p, q, level)))
}

/// Log-softmax Lipschitz bound:
/// `||log softmax(y1) - log softmax(y2)||_inf <= K ||y1 - y2||_inf`.
pub fn check_logsoftmax_lipschitz(y1: &[f64], y2: &[f64]) -> Result<InequalityCheck> {
    if y1.len() != y2.len() || y1.is_empty() {
        return Err(Error::Shape("log-softmax inputs must share a positive length".into()));
    }
    if y1.iter().chain(y2).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("log-softmax inputs must be finite".into()));
    }
    let log_softmax = |y: &[f64]| -> Vec<f64> {
        let m = y.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + y.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        y.iter().map(|&v| v - lse).collect()
    };
    let l1 = log_softmax(y1);
    let l2 = log_softmax(y2);
    let lhs = l1.iter().zip(&l2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let rhs = y1.len() as f64
        * y1.iter().zip(y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(InequalityCheck::of(lhs, rhs))
}

/// One failed trial of a sweep, with everything needed to replay it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub level: Option<f64>,
    pub moment: Option<u32>,
    pub slacks: Vec<f64>,
}

/// Outcome of a randomized property sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub check: String,
    pub trials: usize,
    pub violations: Vec<Violation>,
    /// Worst (largest) slack seen across all trials and sub-inequalities.
    pub max_slack: f64,
}

impl SweepReport {
    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Uniform draw from the simplex (normalized exponentials), with `q`
/// coordinates rejection-sampled to stay at or above `q_floor`.
pub fn random_simplex_pair(
    rng: &mut RngStream,
    min_classes: usize,
    max_classes: usize,
    q_floor: f64,
) -> (ProbVector, ProbVector) {
    let k = if min_classes == max_classes {
        min_classes
    } else {
        min_classes + rng.index(max_classes - min_classes + 1)
    };
    let draw = |rng: &mut RngStream| -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -rng.uniform_01().max(1e-300).ln()).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    };
    let p = ProbVector::new(draw(rng)).expect("simplex draw");
    let q = loop {
        let cand = draw(rng);
        if cand.iter().all(|&v| v >= q_floor) {
            break ProbVector::new(cand).expect("simplex draw");
        }
    };
    (p, q)
}

/// Hellinger bracket over `trials` random pairs per truncation level.
pub fn sweep_hellinger_bracket(
    trials: usize,
    levels: &[f64],
    rng: &mut RngStream,
) -> Result<SweepReport> {
    let mut violations = Vec::new();
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (p, q) = random_simplex_pair(rng, 2, 10, 1e-6);
        for &level in levels {
            let check = check_hellinger_bracket(&p, &q, level)?;
            max_slack = max_slack.max(check.slacks.iter().cloned().fold(f64::MIN, f64::max));
            if !check.pass {
                violations.push(Violation {
                    check: "hellinger-bracket".into(),
                    p: p.as_slice().to_vec(),
                    q: q.as_slice().to_vec(),
                    level: Some(level),
                    moment: None,
                    slacks: check.slacks.to_vec(),
                });
            }
        }
    }
    Ok(SweepReport {
        check: "hellinger-bracket".into(),
        trials: trials * levels.len(),
        violations,
        max_slack,
    })
}

/// `KL <= chi^2` over random pairs.
pub fn sweep_kl_chisq(trials: usize, rng: &mut RngStream) -> Result<SweepReport> {
    let mut violations = Vec::new();
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (p, q) = random_simplex_pair(rng, 2, 10, 1e-6);
        let check = check_kl_chisq(&p, &q)?;
        max_slack = max_slack.max(check.slack);
        if !check.pass {
            violations.push(Violation {
                check: "kl-chisq".into(),
                p: p.as_slice().to_vec(),
                q: q.as_slice().to_vec(),
                level: None,
                moment: None,
                slacks: vec![check.slack],
            });
        }
    }
    Ok(SweepReport { check: "kl-chisq".into(), trials, violations, max_slack })
}

/// Truncated moment inequality over random `(p, q, B in [2.5, 8], m in {2,3})`.
pub fn sweep_trunc_moment(trials: usize, rng: &mut RngStream) -> Result<SweepReport> {
    let mut violations = Vec::new();
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..trials {
        let (p, q) = random_simplex_pair(rng, 2, 10, 1e-6);
        let level = rng.uniform_range(2.5, 8.0);
        let m = 2 + rng.index(2) as u32;
        let check = check_trunc_moment(&p, &q, level, m)?;
        max_slack = max_slack.max(check.slack);
        if !check.pass {
            violations.push(Violation {
                check: "trunc-moment".into(),
                p: p.as_slice().to_vec(),
                q: q.as_slice().to_vec(),
                level: Some(level),
                moment: Some(m),
                slacks: vec![check.slack],
            });
        }
    }
    Ok(SweepReport { check: "trunc-moment".into(), trials, violations, max_slack })
}

/// Log-softmax Lipschitz bound over random vector pairs with `K <= 16`.
pub fn sweep_logsoftmax_lipschitz(trials: usize, rng: &mut RngStream) -> Result<SweepReport> {
    let mut violations = Vec::new();
    let mut max_slack = f64::NEG_INFINITY;
    for _ in 0..trials {
        let k = 2 + rng.index(15);
        let y1: Vec<f64> = (0..k).map(|_| rng.uniform_range(-8.0, 8.0)).collect();
        let y2: Vec<f64> = (0..k).map(|_| rng.uniform_range(-8.0, 8.0)).collect();
        let check = check_logsoftmax_lipschitz(&y1, &y2)?;
        max_slack = max_slack.max(check.slack);
        if !check.pass {
            violations.push(Violation {
                check: "logsoftmax-lipschitz".into(),
                p: y1,
                q: y2,
                level: None,
                moment: None,
                slacks: vec![check.slack],
            });
        }
    }
    Ok(SweepReport { check: "logsoftmax-lipschitz".into(), trials, violations, max_slack })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn bracket_on_equal_vectors_passes_with_zero_slack() {
        let p = pv(&[0.4, 0.6]);
        let check = check_hellinger_bracket(&p, &p, 4.0).unwrap();
        assert!(check.pass);
        assert!(check.hellinger_sq.abs() <= 1e-12);
        assert!(check.half_klb.abs() <= 1e-12);
    }

    #[test]
    fn bracket_on_worked_pair() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.25, 0.75]);
        let check = check_hellinger_bracket(&p, &q, 2.0).unwrap();
        assert!(check.pass);
        // frozen high-precision values of the three chain members
        assert!((check.hellinger_sq - 0.034_074_173_710_931_713).abs() <= 1e-12);
        assert!((check.half_kl2 - 0.071_920_518_112_945_23).abs() <= 1e-12);
        assert!((check.half_klb - 0.071_920_518_112_945_23).abs() <= 1e-12);
        assert!((check.hellinger_ceiling - 0.463_116_036_090_912_94).abs() <= 1e-12);
    }

    #[test]
    fn kl_chisq_worked_pair() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.25, 0.75]);
        let check = check_kl_chisq(&p, &q).unwrap();
        assert!(check.pass);
        assert!((check.lhs - 0.143_841_036_225_890_46).abs() <= 1e-12);
        assert!((check.rhs - 1.0 / 3.0).abs() <= 1e-12);

        let same = check_kl_chisq(&p, &p).unwrap();
        assert!(same.lhs.abs() <= 1e-12 && same.rhs.abs() <= 1e-12 && same.pass);
    }

    #[test]
    fn trunc_moment_worked_pair() {
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.25, 0.75]);
        let check = check_trunc_moment(&p, &q, 3.0, 2).unwrap();
        assert!(check.pass);
        // frozen direct evaluation of both sides:
        //   lhs = (ln 2)^2/2 + (ln(2/3))^2/2
        //   rhs = max(2!, B^2/(B-1)) * KL_3 = 4.5 * KL_3
        assert!((check.lhs - 0.322_427_483_905_683_43).abs() <= 1e-12);
        assert!((check.rhs - 0.647_284_663_016_507_1).abs() <= 1e-12);

        let same = check_trunc_moment(&p, &p, 3.0, 2).unwrap();
        assert!(same.lhs.abs() <= 1e-12 && same.pass);
    }

    #[test]
    fn trunc_moment_preconditions() {
        let p = pv(&[0.5, 0.5]);
        assert!(check_trunc_moment(&p, &p, 2.0, 2).is_err());
        assert!(check_trunc_moment(&p, &p, 3.0, 1).is_err());
    }

    #[test]
    fn logsoftmax_shift_invariance_and_worked_pair() {
        let y = [0.7, -0.3, 1.1];
        let shifted: Vec<f64> = y.iter().map(|v| v + 3.5).collect();
        let check = check_logsoftmax_lipschitz(&y, &shifted).unwrap();
        assert!(check.lhs <= 1e-12, "log-softmax is shift invariant");

        let check = check_logsoftmax_lipschitz(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(check.pass);
        // frozen direct evaluation of the max-abs log-softmax difference
        assert!((check.lhs - 0.620_114_506_958_277_5).abs() <= 1e-12);
        assert!((check.rhs - 2.0).abs() <= 1e-15);
    }

    #[test]
    fn quick_sweeps_have_zero_violations() {
        let mut rng = RngStream::new(2024, "quick-sweeps");
        assert!(sweep_hellinger_bracket(2_000, &[2.0, 4.0, 8.0], &mut rng).unwrap().pass());
        assert!(sweep_kl_chisq(2_000, &mut rng).unwrap().pass());
        assert!(sweep_trunc_moment(2_000, &mut rng).unwrap().pass());
        assert!(sweep_logsoftmax_lipschitz(2_000, &mut rng).unwrap().pass());
    }
}
