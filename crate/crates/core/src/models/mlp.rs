//! Constrained biased-ReLU MLP: `f(x) = W_L s_L ... W_1 s_1 W_0 x` with
//! `s_j(x) = max(x - nu_j, 0)`, entries bounded by one and a global nonzero
//! budget over all weights and thresholds.

use super::{MaskedTensor, MlpSpec};
use crate::numerics::{Matrix, NodeId, RngStream, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub spec: MlpSpec,
    /// Layer widths `K_0 .. K_{L+1}` (input, hidden layers, output).
    pub widths: Vec<usize>,
    /// Affine maps `W_j: K_{j+1} x K_j` for `j = 0..=L`.
    pub layers: Vec<MaskedTensor>,
    /// ReLU thresholds `nu_j: K_j x 1` for `j = 1..=L`.
    pub thresholds: Vec<MaskedTensor>,
}

impl MlpWeights {
    pub fn zeros(spec: &MlpSpec, input_dim: usize, output_dim: usize) -> Result<Self> {
        spec.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::Config("mlp input and output dims must be >= 1".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat(spec.width_cap).take(spec.depth));
        widths.push(output_dim);
        let layers = (0..=spec.depth)
            .map(|j| MaskedTensor::dense(Matrix::zeros(widths[j + 1], widths[j])))
            .collect();
        let thresholds = (1..=spec.depth)
            .map(|j| MaskedTensor::dense(Matrix::zeros(widths[j], 1)))
            .collect();
        Ok(Self { spec: spec.clone(), widths, layers, thresholds })
    }

    /// Fan-in uniform initialisation, thresholds at zero, pruned to budget.
    pub fn init(spec: &MlpSpec, input_dim: usize, output_dim: usize, rng: &mut RngStream) -> Result<Self> {
        let mut w = Self::zeros(spec, input_dim, output_dim)?;
        for layer in &mut w.layers {
            let (rows, cols) = layer.values.shape();
            let bound = 1.0 / (cols as f64).sqrt();
            layer.values = Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound));
        }
        w.project();
        Ok(w)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Tensors in registry order: `W_0..W_L` then `nu_1..nu_L`.
    pub fn tensors(&self) -> Vec<&MaskedTensor> {
        self.layers.iter().chain(self.thresholds.iter()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut MaskedTensor> {
        self.layers.iter_mut().chain(self.thresholds.iter_mut()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.layers.len()).map(|j| format!("layer{j}/weight")).collect();
        names.extend((1..=self.thresholds.len()).map(|j| format!("layer{j}/threshold")));
        names
    }

    /// Clip entries into `[-1, 1]`, then prune to the `S` budget.
    pub fn project(&mut self) {
        for t in self.tensors_mut() {
            for v in t.values.data_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
        }
        let budget = self.spec.nonzero_budget;
        let mut tensors = self.tensors_mut();
        super::prune_to_budget(&mut tensors, budget);
    }

    pub fn nonzeros(&self) -> usize {
        self.tensors().iter().map(|t| t.nonzeros()).sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.tensors().iter().map(|t| t.values.max_abs_entry()).fold(0.0, f64::max)
    }

    /// `f(x)`: affine maps with biased ReLU between them, none after the last.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "mlp expects input dim {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let mut cur = Matrix::column(x);
        cur = self.layers[0].values.matmul(&cur)?;
        for j in 1..self.layers.len() {
            cur = crate::numerics::Matrix::from_vec(
                cur.rows(),
                1,
                cur.data()
                    .iter()
                    .zip(self.thresholds[j - 1].values.data())
                    .map(|(&v, &t)| (v - t).max(0.0))
                    .collect(),
            )?;
            cur = self.layers[j].values.matmul(&cur)?;
        }
        Ok(cur.column_slice(0))
    }

    pub(super) fn register(&self, tape: &mut Tape) -> MlpBinding {
        MlpBinding {
            layers: self.layers.iter().map(|t| tape.leaf(t.values.clone())).collect(),
            thresholds: self.thresholds.iter().map(|t| tape.leaf(t.values.clone())).collect(),
        }
    }

    /// Forward on the tape from an existing `K_0 x 1` input node.
    pub(super) fn forward_tape(
        &self,
        tape: &mut Tape,
        binding: &MlpBinding,
        input: NodeId,
    ) -> Result<NodeId> {
        if tape.value(input).shape() != (self.input_dim(), 1) {
            return Err(Error::Shape(format!(
                "mlp tape input must be {}x1, got {:?}",
                self.input_dim(),
                tape.value(input).shape()
            )));
        }
        let mut cur = tape.matmul(binding.layers[0], input)?;
        for j in 1..binding.layers.len() {
            cur = tape.biased_relu(cur, binding.thresholds[j - 1])?;
            cur = tape.matmul(binding.layers[j], cur)?;
        }
        Ok(cur)
    }
}

pub(super) struct MlpBinding {
    pub layers: Vec<NodeId>,
    pub thresholds: Vec<NodeId>,
}
