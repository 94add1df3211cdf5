//! Constraint accounting that is monitored rather than projected: sampled
//! Lipschitz probes (lower bounds on the true constants) and norm-product
//! upper bounds that bracket them.

use super::{CompositeModel, MlpWeights, TransformerWeights};
use crate::numerics::{Matrix, RngStream};
use crate::Result;

/// Minimum Frobenius separation enforced between encoder probe pairs. The
/// hardmax makes the encoder discontinuous across score ties, so ratios are
/// only bracketable away from coincident pairs.
pub const ENCODER_PROBE_MIN_SEPARATION: f64 = 0.5;

/// Total nonzero count across all of a model's tensors.
pub fn count_nonzeros(model: &CompositeModel) -> usize {
    let (enc, head) = model.count_nonzeros();
    enc + head
}

/// Max over sampled pairs of `||phi(Z1) - phi(Z2)|| / ||Z1 - Z2||_F`, a lower
/// bound on the encoder's Lipschitz constant over `[0,1]^d`. Pairs closer
/// than [`ENCODER_PROBE_MIN_SEPARATION`] are resampled.
pub fn encoder_lipschitz_probe(
    encoder: &TransformerWeights,
    prompt_cols: usize,
    n_pairs: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let d = encoder.spec.dim;
    let mut worst = 0.0_f64;
    let mut drawn = 0;
    while drawn < n_pairs {
        let z1 = Matrix::from_fn(d, prompt_cols, |_, _| rng.uniform_01());
        let z2 = Matrix::from_fn(d, prompt_cols, |_, _| rng.uniform_01());
        let sep = z1.sub(&z2)?.frobenius_norm();
        if sep < ENCODER_PROBE_MIN_SEPARATION {
            continue;
        }
        drawn += 1;
        let f1 = encoder.forward(&z1)?;
        let f2 = encoder.forward(&z2)?;
        let num = f1.iter().zip(&f2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst = worst.max(num / sep);
    }
    Ok(worst)
}

/// Norm-product upper bound on the probe ratios, valid for any pair at
/// separation `>= eta`:
/// `||A_out||_F (1 + 2 * total_residual_sup / eta)`, where the residual
/// supremum is accumulated block by block over `[0,1]^{D x cols}` inputs.
pub fn encoder_lipschitz_norm_bound(
    encoder: &TransformerWeights,
    prompt_cols: usize,
    eta: f64,
) -> f64 {
    let d = encoder.spec.dim as f64;
    let cols = prompt_cols as f64;
    // Frobenius bound on the residual stream, starting from entries in [0,1]
    let mut stream = (d * cols).sqrt();
    let mut total_residual = 0.0;
    for block in &encoder.blocks {
        let mut sa = 0.0;
        for head in &block.heads {
            // per-entry score bound, then a Frobenius bound on the gated
            // score matrix (each column carries at most the max |score|)
            let score_max =
                head.wk.values.frobenius_norm() * head.wq.values.frobenius_norm() * stream * stream;
            let gate_frob = cols.sqrt() * score_max;
            sa += head.wo.values.frobenius_norm()
                * head.wv.values.frobenius_norm()
                * stream
                * gate_frob;
        }
        stream += sa;
        total_residual += sa;
        let ff = block.w_f2.values.frobenius_norm() * block.w_f1.values.frobenius_norm() * stream;
        stream += ff;
        total_residual += ff;
    }
    encoder.a_out.values.frobenius_norm() * (1.0 + 2.0 * total_residual / eta)
}

/// Max over sampled pairs of `||f(x1) - f(x2)||_inf / ||x1 - x2||_inf` on
/// `[0,1]^{K_0}`, a lower bound on the head's Lipschitz constant.
pub fn mlp_lipschitz_probe(head: &MlpWeights, n_pairs: usize, rng: &mut RngStream) -> Result<f64> {
    let dim = head.input_dim();
    let mut worst = 0.0_f64;
    for _ in 0..n_pairs {
        let x1: Vec<f64> = (0..dim).map(|_| rng.uniform_01()).collect();
        let x2: Vec<f64> = (0..dim).map(|_| rng.uniform_01()).collect();
        let sep = x1.iter().zip(&x2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if sep == 0.0 {
            continue;
        }
        let f1 = head.forward(&x1)?;
        let f2 = head.forward(&x2)?;
        let num = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(num / sep);
    }
    Ok(worst)
}

/// Product of inf-operator norms; the biased ReLU is 1-Lipschitz, so this
/// bounds the head's inf-norm Lipschitz constant exactly.
pub fn mlp_inf_norm_bound(head: &MlpWeights) -> f64 {
    head.layers.iter().map(|l| l.values.inf_operator_norm()).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClampSpec, MlpSpec, TransformerSpec};

    fn spec(dim: usize, classes: usize) -> TransformerSpec {
        TransformerSpec {
            blocks: 1,
            heads: 1,
            dim,
            width_cap: dim,
            output_bound: 10.0,
            nonzero_budget: 10_000,
            lipschitz_budget: 50.0,
            classes,
        }
    }

    #[test]
    fn constant_encoder_probe_is_zero() {
        let w = TransformerWeights::zeros(&spec(3, 2)).unwrap();
        let mut rng = RngStream::new(1, "probe-zero");
        assert_eq!(encoder_lipschitz_probe(&w, 2, 50, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn count_nonzeros_identity_readout() {
        let mut w = TransformerWeights::zeros(&spec(3, 2)).unwrap();
        for i in 0..2 {
            w.a_out.values.set(i, i, 1.0);
        }
        let head = MlpWeights::zeros(
            &MlpSpec { depth: 1, width_cap: 2, nonzero_budget: 10, lipschitz_assumed: 1.0 },
            2,
            2,
        )
        .unwrap();
        let model =
            CompositeModel::new(Some(w), head, ClampSpec::new(0.1, 2).unwrap()).unwrap();
        assert_eq!(count_nonzeros(&model), 2);
    }

    #[test]
    fn encoder_probe_stays_below_norm_bound() {
        // the bracket holds by construction; exercise it on random weights
        let mut rng = RngStream::new(5, "probe-bracket");
        for seed in 0..5 {
            let mut w = TransformerWeights::zeros(&spec(3, 2)).unwrap();
            let mut wrng = RngStream::new(seed, "probe-weights");
            for block in &mut w.blocks {
                for head in &mut block.heads {
                    for t in [&mut head.wq, &mut head.wk, &mut head.wv, &mut head.wo] {
                        t.values = Matrix::from_fn(3, 3, |_, _| wrng.uniform_range(-0.5, 0.5));
                    }
                }
                block.w_f1.values = Matrix::from_fn(3, 3, |_, _| wrng.uniform_range(-0.5, 0.5));
                block.w_f2.values = Matrix::from_fn(3, 3, |_, _| wrng.uniform_range(-0.5, 0.5));
            }
            w.a_out.values = Matrix::from_fn(2, 3, |_, _| wrng.uniform_range(-0.5, 0.5));
            let probe = encoder_lipschitz_probe(&w, 3, 500, &mut rng).unwrap();
            let bound = encoder_lipschitz_norm_bound(&w, 3, ENCODER_PROBE_MIN_SEPARATION);
            assert!(probe <= bound, "probe {probe} exceeded bound {bound}");
        }
    }

    #[test]
    fn mlp_probe_stays_below_inf_norm_product() {
        let mut rng = RngStream::new(9, "mlp-probe");
        for seed in 0..5 {
            let mut wrng = RngStream::new(seed, "mlp-probe-weights");
            let head = MlpWeights::init(
                &MlpSpec { depth: 2, width_cap: 5, nonzero_budget: 10_000, lipschitz_assumed: 5.0 },
                4,
                3,
                &mut wrng,
            )
            .unwrap();
            let probe = mlp_lipschitz_probe(&head, 500, &mut rng).unwrap();
            let bound = mlp_inf_norm_bound(&head);
            assert!(probe <= bound + 1e-12, "probe {probe} exceeded bound {bound}");
        }
    }
}
