//! Closed-form capacity evaluators: metric-entropy bounds for the MLP and
//! transformer classes, the composite decomposition, a pseudo-dimension
//! bound, the oracle-inequality term assembly, and a greedy covering oracle
//! for tiny finite families.
//!
//! Every formula hides an unspecified universal constant; it is exposed as
//! an explicit `c` argument (default 1) and echoed in the report rather than
//! baked in.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One evaluated entropy formula.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub formula: String,
    pub delta: f64,
    pub value: f64,
    pub constant_c: f64,
    /// Set when the formula went negative and was floored at zero.
    pub floored: bool,
}

/// Metric entropy of the constrained MLP class:
/// `2 S L log(L (W + 1) / (3 delta))`, floored at zero with a flag when the
/// log argument drops at or below one (the bound is only meaningful for
/// small `delta`).
pub fn mlp_entropy_bound(delta: f64, depth: usize, width: usize, size: usize) -> Result<EntropyReport> {
    if delta <= 0.0 {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    if depth == 0 || width == 0 {
        return Err(Error::Config("depth and width must be >= 1".into()));
    }
    let raw = 2.0
        * size as f64
        * depth as f64
        * (depth as f64 * (width as f64 + 1.0) / (3.0 * delta)).ln();
    let floored = raw < 0.0;
    Ok(EntropyReport {
        formula: "mlp-entropy".into(),
        delta,
        value: if floored { 0.0 } else { raw },
        constant_c: 1.0,
        floored,
    })
}

/// Uniform empirical entropy of the transformer class:
/// `c K M^2 S1 log(max(M, H, W1)) log(T B1 / delta)`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_entropy_bound(
    delta: f64,
    classes: usize,
    blocks: usize,
    heads: usize,
    width_cap: usize,
    size: usize,
    output_bound: f64,
    samples: usize,
    c: f64,
) -> Result<EntropyReport> {
    if delta <= 0.0 || output_bound <= 0.0 || c <= 0.0 {
        return Err(Error::Config("delta, output bound and c must be positive".into()));
    }
    if classes == 0 || blocks == 0 || heads == 0 || width_cap == 0 || size == 0 || samples == 0 {
        return Err(Error::Config("transformer entropy counts must be >= 1".into()));
    }
    let m = blocks as f64;
    let value = c
        * classes as f64
        * m
        * m
        * size as f64
        * (m.max(heads as f64).max(width_cap as f64)).ln()
        * (samples as f64 * output_bound / delta).ln();
    Ok(EntropyReport { formula: "transformer-entropy".into(), delta, value, constant_c: c, floored: false })
}

/// Entropy of the composite log-class: the transformer bound at radius
/// `delta / (4 K L1)` plus the MLP bound at `delta / (4 K)`.
#[allow(clippy::too_many_arguments)]
pub fn composite_entropy_bound(
    delta: f64,
    classes: usize,
    head_lipschitz: f64,
    blocks: usize,
    heads: usize,
    width_cap: usize,
    encoder_size: usize,
    output_bound: f64,
    samples: usize,
    mlp_depth: usize,
    mlp_width: usize,
    mlp_size: usize,
    c: f64,
) -> Result<EntropyReport> {
    if head_lipschitz <= 0.0 {
        return Err(Error::Config("head Lipschitz constant must be positive".into()));
    }
    let k = classes as f64;
    let enc = transformer_entropy_bound(
        delta / (4.0 * k * head_lipschitz),
        classes,
        blocks,
        heads,
        width_cap,
        encoder_size,
        output_bound,
        samples,
        c,
    )?;
    let head = mlp_entropy_bound(delta / (4.0 * k), mlp_depth, mlp_width, mlp_size)?;
    Ok(EntropyReport {
        formula: "composite-entropy".into(),
        delta,
        value: enc.value + head.value,
        constant_c: c,
        floored: head.floored,
    })
}

/// Uniform empirical entropy of the MLP-only composite class at radius `1/T`:
/// `c K S L log(S) log(B2 K T)`; needs `S >= 2` so `log S > 0`.
pub fn mlp_composite_entropy_bound(
    classes: usize,
    size: usize,
    depth: usize,
    output_bound: f64,
    samples: usize,
    c: f64,
) -> Result<EntropyReport> {
    if size < 2 {
        return Err(Error::Config(format!("size must be >= 2 for log(S), got {size}")));
    }
    if classes == 0 || depth == 0 || samples == 0 || output_bound <= 0.0 || c <= 0.0 {
        return Err(Error::Config("invalid mlp-composite entropy arguments".into()));
    }
    let value = c
        * classes as f64
        * size as f64
        * depth as f64
        * (size as f64).ln()
        * (output_bound * classes as f64 * samples as f64).ln();
    Ok(EntropyReport {
        formula: "mlp-composite-entropy".into(),
        delta: 1.0 / samples as f64,
        value,
        constant_c: c,
        floored: false,
    })
}

/// Pseudo-dimension bound for the scalar transformer class:
/// `c S1 N M^2 log(max(H, W1))`.
pub fn pdim_bound(size: usize, context: usize, blocks: usize, heads: usize, width_cap: usize, c: f64) -> Result<f64> {
    if size == 0 || context == 0 || blocks == 0 || heads == 0 || width_cap == 0 || c <= 0.0 {
        return Err(Error::Config("pdim arguments must be positive".into()));
    }
    let m = blocks as f64;
    Ok(c * size as f64 * context as f64 * m * m * (heads as f64).max(width_cap as f64).ln())
}

/// The three oracle-inequality terms, assembled constant-free (`c = 1`):
/// approximation error + empirical-risk gap + `B^2 log(N_T) log^2(T) / T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleTerms {
    pub approximation: f64,
    pub gap: f64,
    pub complexity_term: f64,
    pub total: f64,
}

pub fn oracle_terms(approx_err: f64, gap: f64, level: f64, log_nt: f64, samples: usize) -> Result<OracleTerms> {
    if samples < 2 {
        return Err(Error::Config(format!("need T >= 2, got {samples}")));
    }
    if approx_err < 0.0 || gap < 0.0 || level < 0.0 || log_nt < 0.0 {
        return Err(Error::Config("oracle terms must be nonnegative".into()));
    }
    let t = samples as f64;
    let log_t = t.ln();
    let complexity_term = level * level * log_nt * log_t * log_t / t;
    Ok(OracleTerms { approximation: approx_err, gap, complexity_term, total: approx_err + gap + complexity_term })
}

/// Greedy farthest-point cover of a finite family of value vectors under the
/// sup distance over the probe points. Returns an upper bound on the true
/// covering number.
pub fn brute_force_cover(family: &[Vec<f64>], delta: f64) -> Result<usize> {
    if family.is_empty() {
        return Err(Error::Config("cover of an empty family".into()));
    }
    if family.len() > 100_000 {
        return Err(Error::Config(format!("family of {} members is too large", family.len())));
    }
    if delta <= 0.0 {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let probe_len = family[0].len();
    if family.iter().any(|f| f.len() != probe_len) {
        return Err(Error::Shape("family members disagree on probe count".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let mut nearest = vec![f64::INFINITY; family.len()];
    let mut centers = 0usize;
    loop {
        // farthest uncovered member becomes the next center (first index on ties)
        let (mut far_idx, mut far_dist) = (0usize, -1.0);
        for (i, &d) in nearest.iter().enumerate() {
            if d > far_dist {
                far_dist = d;
                far_idx = i;
            }
        }
        if far_dist <= delta {
            break;
        }
        centers += 1;
        let center = &family[far_idx];
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(center, &family[i]));
        }
    }
    Ok(centers.max(1))
}

/// Value vectors of the scalar one-layer maps `x -> v relu(w x + b)` over a
/// parameter grid, evaluated at the probe points. A convenience for feeding
/// [`brute_force_cover`].
pub fn one_layer_family(
    weights: &[f64],
    biases: &[f64],
    scales: &[f64],
    probes: &[f64],
) -> Vec<Vec<f64>> {
    let mut family = Vec::with_capacity(weights.len() * biases.len() * scales.len());
    for &w in weights {
        for &b in biases {
            for &v in scales {
                family.push(probes.iter().map(|&x| v * (w * x + b).max(0.0)).collect());
            }
        }
    }
    family
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_entropy_spot_value() {
        // frozen hand evaluation: 2*10*2*ln(2*4/(3/8)) = 40 ln(64/3)
        let rep = mlp_entropy_bound(0.125, 2, 3, 10).unwrap();
        assert!((rep.value - 122.410_831_787_662_49).abs() <= 1e-9);
        assert!(!rep.floored);
    }

    #[test]
    fn mlp_entropy_empty_network_and_floor() {
        assert_eq!(mlp_entropy_bound(0.125, 2, 3, 0).unwrap().value, 0.0);
        // delta >= L(W+1)/3 drives the log negative; floored at zero
        let rep = mlp_entropy_bound(10.0, 2, 3, 5).unwrap();
        assert_eq!(rep.value, 0.0);
        assert!(rep.floored);
    }

    #[test]
    fn mlp_entropy_monotone_in_delta() {
        let mut prev = f64::INFINITY;
        for delta in [0.01, 0.05, 0.1, 0.5, 1.0] {
            let v = mlp_entropy_bound(delta, 2, 3, 10).unwrap().value;
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn transformer_entropy_spot_value() {
        // frozen: 5 ln(2) ln(1e4) at K=1, M=1, H=2, W1=2, S1=5, B1=1, T=100
        let rep = transformer_entropy_bound(0.01, 1, 1, 2, 2, 5, 1.0, 100, 1.0).unwrap();
        assert!((rep.value - 31.920_607_304_163_645).abs() <= 1e-9);
    }

    #[test]
    fn transformer_entropy_block_scaling() {
        // with H >= 2M the log argument stays at H, so doubling M quadruples
        // the value
        let one = transformer_entropy_bound(0.01, 2, 1, 8, 4, 5, 1.0, 100, 1.0).unwrap().value;
        let two = transformer_entropy_bound(0.01, 2, 2, 8, 4, 5, 1.0, 100, 1.0).unwrap().value;
        assert!((two / one - 4.0).abs() <= 1e-12);

        let more = transformer_entropy_bound(0.01, 2, 1, 8, 4, 5, 1.0, 1_000, 1.0).unwrap().value;
        assert!(more > one, "value increases in T");
    }

    #[test]
    fn composite_entropy_decomposition() {
        // L1 = 1, K = 1: both components evaluated at delta / 4
        let delta = 0.2;
        let combined =
            composite_entropy_bound(delta, 1, 1.0, 1, 2, 2, 5, 1.0, 100, 2, 3, 10, 1.0).unwrap();
        let enc = transformer_entropy_bound(delta / 4.0, 1, 1, 2, 2, 5, 1.0, 100, 1.0).unwrap();
        let head = mlp_entropy_bound(delta / 4.0, 2, 3, 10).unwrap();
        assert!((combined.value - (enc.value + head.value)).abs() <= 1e-12);
        assert!(combined.value >= enc.value && combined.value >= head.value);

        // monotone nonincreasing in delta
        let larger =
            composite_entropy_bound(0.4, 1, 1.0, 1, 2, 2, 5, 1.0, 100, 2, 3, 10, 1.0).unwrap();
        assert!(larger.value <= combined.value);
    }

    #[test]
    fn mlp_composite_spot_value_and_scaling() {
        // frozen: 2*10*2*ln(10)*ln(600) at K=2, S=10, L=2, B2=3, T=100
        let rep = mlp_composite_entropy_bound(2, 10, 2, 3.0, 100, 1.0).unwrap();
        assert!((rep.value - 589.178_994_601_289_6).abs() <= 1e-9);

        // increasing in every argument; c scales linearly
        let base = rep.value;
        assert!(mlp_composite_entropy_bound(3, 10, 2, 3.0, 100, 1.0).unwrap().value > base);
        assert!(mlp_composite_entropy_bound(2, 11, 2, 3.0, 100, 1.0).unwrap().value > base);
        assert!(mlp_composite_entropy_bound(2, 10, 3, 3.0, 100, 1.0).unwrap().value > base);
        assert!(mlp_composite_entropy_bound(2, 10, 2, 4.0, 100, 1.0).unwrap().value > base);
        assert!(mlp_composite_entropy_bound(2, 10, 2, 3.0, 200, 1.0).unwrap().value > base);
        let doubled = mlp_composite_entropy_bound(2, 10, 2, 3.0, 100, 2.0).unwrap().value;
        assert!((doubled - 2.0 * base).abs() <= 1e-9);

        assert!(mlp_composite_entropy_bound(2, 1, 2, 3.0, 100, 1.0).is_err());
    }

    #[test]
    fn pdim_spot_value_and_context_scaling() {
        // frozen: 5*3*4*ln(4) = 60 ln 4
        let v = pdim_bound(5, 3, 2, 4, 2, 1.0).unwrap();
        assert!((v - 83.177_661_667_193_44).abs() <= 1e-9);
        let doubled = pdim_bound(5, 6, 2, 4, 2, 1.0).unwrap();
        assert!((doubled - 2.0 * v).abs() <= 1e-9);
    }

    #[test]
    fn oracle_terms_spot_value_and_exact_sum() {
        // frozen: 4 * 100 * ln(1e4)^2 / 1e4
        let terms = oracle_terms(0.0, 0.0, 2.0, 100.0, 10_000).unwrap();
        assert!((terms.complexity_term - 3.393_214_790_706_175).abs() <= 1e-12);
        assert_eq!(terms.total, terms.approximation + terms.gap + terms.complexity_term);

        let zero = oracle_terms(0.0, 0.0, 0.0, 0.0, 10).unwrap();
        assert_eq!(zero.total, 0.0);

        // complexity term vanishes as T grows with log N_T held fixed
        let big = oracle_terms(0.0, 0.0, 2.0, 100.0, 100_000_000).unwrap();
        assert!(big.complexity_term < 0.01 * terms.complexity_term);
    }

    #[test]
    fn greedy_cover_small_families() {
        // constants {0, delta/2, delta} within radius delta: one center suffices
        let fam = vec![vec![0.0], vec![0.05], vec![0.1]];
        assert!(brute_force_cover(&fam, 0.1).unwrap() <= 2);

        // delta larger than the family diameter
        assert_eq!(brute_force_cover(&fam, 1.0).unwrap(), 1);

        // cover size is nonincreasing in delta
        let family = one_layer_family(
            &[-1.0, -0.5, 0.0, 0.5, 1.0],
            &[-0.5, 0.0, 0.5],
            &[-1.0, 1.0],
            &[0.0, 0.25, 0.5, 0.75, 1.0],
        );
        let fine = brute_force_cover(&family, 0.1).unwrap();
        let coarse = brute_force_cover(&family, 0.2).unwrap();
        assert!(fine >= coarse);
    }

    #[test]
    fn cover_rejects_oversized_family() {
        let family = vec![vec![0.0]; 100_001];
        assert!(brute_force_cover(&family, 0.5).is_err());
    }
}
