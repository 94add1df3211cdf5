//! The model families: a hardmax transformer encoder, a constrained
//! biased-ReLU MLP, and the composite softmax classifier with an output
//! clamp. Weight tensors carry explicit binary masks so the sparsity
//! budgets are auditable; projection clips MLP entries into `[-1, 1]` and
//! keeps the largest-magnitude entries within each budget.

mod checkpoint;
mod composite;
mod constraints;
mod gradcheck;
mod mlp;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use composite::{clamp_log, CompositeModel, TapeBinding};
pub use gradcheck::{gradient_fd_audit, GradientAuditReport};
pub use constraints::{
    count_nonzeros, encoder_lipschitz_norm_bound, encoder_lipschitz_probe, mlp_inf_norm_bound,
    mlp_lipschitz_probe, ENCODER_PROBE_MIN_SEPARATION,
};
pub use mlp::MlpWeights;
pub use transformer::{BlockWeights, HeadWeights, TransformerWeights};

use crate::numerics::Matrix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Configuration of the constrained transformer encoder class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    /// Block count `M`.
    pub blocks: usize,
    /// Heads per block `H`.
    pub heads: usize,
    /// Token dimension `D = p + K`.
    pub dim: usize,
    /// Width cap `W1`; the feed-forward width defaults to it, and
    /// `max(D, D') <= W1` must hold.
    pub width_cap: usize,
    /// Output-norm bound `B1` (monitored, not projected).
    pub output_bound: f64,
    /// Nonzero-parameter budget `S1` across all encoder tensors.
    pub nonzero_budget: usize,
    /// Lipschitz budget `gamma` (monitored, not projected).
    pub lipschitz_budget: f64,
    /// Class count `K`; the readout is `K x D`.
    pub classes: usize,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.dim == 0 || self.classes == 0 {
            return Err(Error::Config("transformer counts must be >= 1".into()));
        }
        if self.width_cap < self.dim {
            return Err(Error::Config(format!(
                "width cap {} below token dimension {}",
                self.width_cap, self.dim
            )));
        }
        if self.output_bound <= 0.0 || self.lipschitz_budget <= 0.0 {
            return Err(Error::Config("output and Lipschitz bounds must be positive".into()));
        }
        if self.nonzero_budget == 0 {
            return Err(Error::Config("nonzero budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Feed-forward width `D'`, fixed to the cap for every block.
    pub fn ff_width(&self) -> usize {
        self.width_cap
    }
}

/// Configuration of the constrained MLP class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Depth `L`: number of biased-ReLU activations; `L + 1` affine maps.
    pub depth: usize,
    /// Maximum hidden width `W`.
    pub width_cap: usize,
    /// Nonzero budget `S` over all weights and thresholds.
    pub nonzero_budget: usize,
    /// Assumed Lipschitz constant `L1` (monitored).
    pub lipschitz_assumed: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_cap == 0 || self.nonzero_budget == 0 {
            return Err(Error::Config("mlp width and budget must be >= 1".into()));
        }
        if self.lipschitz_assumed <= 0.0 {
            return Err(Error::Config("assumed Lipschitz constant must be positive".into()));
        }
        Ok(())
    }
}

/// Output clamp `(g v log eps) ^ log 2`, realising the probability floor
/// `eps / (2K)` after the softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampSpec {
    pub epsilon: f64,
    pub classes: usize,
}

impl ClampSpec {
    pub fn new(epsilon: f64, classes: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        if classes == 0 {
            return Err(Error::Config("class count must be >= 1".into()));
        }
        Ok(Self { epsilon, classes })
    }

    pub fn lo(&self) -> f64 {
        self.epsilon.ln()
    }

    pub fn hi(&self) -> f64 {
        2.0_f64.ln()
    }

    /// Guaranteed lower bound on every predicted coordinate.
    pub fn floor(&self) -> f64 {
        self.epsilon / (2.0 * self.classes as f64)
    }
}

/// A weight tensor with its binary sparsity mask; masked-out entries are
/// exactly zero after projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTensor {
    pub values: Matrix,
    pub mask: Vec<bool>,
}

impl MaskedTensor {
    pub fn dense(values: Matrix) -> Self {
        let mask = vec![true; values.data().len()];
        Self { values, mask }
    }

    /// Entries that are nonzero (masked entries are zero by invariant).
    pub fn nonzeros(&self) -> usize {
        self.values.data().iter().filter(|v| **v != 0.0).count()
    }

    pub fn zero_masked(&mut self) {
        for (v, &keep) in self.values.data_mut().iter_mut().zip(&self.mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Global magnitude pruning: keep the `budget` largest-magnitude entries
/// across the given tensors, break ties by (tensor, index) order, zero and
/// unmask the rest. Projecting twice equals projecting once.
pub(crate) fn prune_to_budget(tensors: &mut [&mut MaskedTensor], budget: usize) {
    let total: usize = tensors.iter().map(|t| t.values.data().len()).sum();
    if budget >= total {
        for t in tensors.iter_mut() {
            t.mask.iter_mut().for_each(|m| *m = true);
        }
        return;
    }
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ti, t) in tensors.iter().enumerate() {
        for (i, v) in t.values.data().iter().enumerate() {
            scored.push((v.abs(), ti, i));
        }
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for t in tensors.iter_mut() {
        t.mask.iter_mut().for_each(|m| *m = false);
    }
    for &(_, ti, i) in scored.iter().take(budget) {
        tensors[ti].mask[i] = true;
    }
    for t in tensors.iter_mut() {
        t.zero_masked();
    }
}
