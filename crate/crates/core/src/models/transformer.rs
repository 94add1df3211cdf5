//! Hardmax transformer encoder: `M` blocks of multi-head self-attention and
//! position-wise feed-forward maps, both with residual connections, followed
//! by an affine readout of the last token.
//!
//! The attention sublayer is
//! `Z + sum_s W_O,s (W_V,s Z) [ ((W_K,s Z)^T (W_Q,s Z)) .* hardmax(...) ]`
//! exactly as written: the score matrix is Hadamard-gated by its own
//! columnwise hardmax, and gradient flows only through the bilinear factor
//! (the hardmax is piecewise constant).

use super::{MaskedTensor, TransformerSpec};
use crate::numerics::{hardmax_columns, relu, Matrix, NodeId, RngStream, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: MaskedTensor,
    pub wk: MaskedTensor,
    pub wv: MaskedTensor,
    pub wo: MaskedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub heads: Vec<HeadWeights>,
    /// `D' x D` first feed-forward map.
    pub w_f1: MaskedTensor,
    /// `D x D'` second feed-forward map.
    pub w_f2: MaskedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub spec: TransformerSpec,
    pub blocks: Vec<BlockWeights>,
    /// `K x D` readout.
    pub a_out: MaskedTensor,
    /// `K x 1` readout bias.
    pub b_out: MaskedTensor,
}

fn uniform_fan_in(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

impl TransformerWeights {
    /// All-zero weights (the residual identity encoder).
    pub fn zeros(spec: &TransformerSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let ff = spec.ff_width();
        let blocks = (0..spec.blocks)
            .map(|_| BlockWeights {
                heads: (0..spec.heads)
                    .map(|_| HeadWeights {
                        wq: MaskedTensor::dense(Matrix::zeros(d, d)),
                        wk: MaskedTensor::dense(Matrix::zeros(d, d)),
                        wv: MaskedTensor::dense(Matrix::zeros(d, d)),
                        wo: MaskedTensor::dense(Matrix::zeros(d, d)),
                    })
                    .collect(),
                w_f1: MaskedTensor::dense(Matrix::zeros(ff, d)),
                w_f2: MaskedTensor::dense(Matrix::zeros(d, ff)),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            blocks,
            a_out: MaskedTensor::dense(Matrix::zeros(spec.classes, d)),
            b_out: MaskedTensor::dense(Matrix::zeros(spec.classes, 1)),
        })
    }

    /// Fan-in uniform initialisation followed by pruning to the budget.
    pub fn init(spec: &TransformerSpec, rng: &mut RngStream) -> Result<Self> {
        let mut w = Self::zeros(spec)?;
        for block in &mut w.blocks {
            for head in &mut block.heads {
                head.wq.values = uniform_fan_in(spec.dim, spec.dim, rng);
                head.wk.values = uniform_fan_in(spec.dim, spec.dim, rng);
                head.wv.values = uniform_fan_in(spec.dim, spec.dim, rng);
                head.wo.values = uniform_fan_in(spec.dim, spec.dim, rng);
            }
            block.w_f1.values = uniform_fan_in(spec.ff_width(), spec.dim, rng);
            block.w_f2.values = uniform_fan_in(spec.dim, spec.ff_width(), rng);
        }
        w.a_out.values = uniform_fan_in(spec.classes, spec.dim, rng);
        // b_out stays zero
        w.project();
        Ok(w)
    }

    /// Tensors in registry order: per block per head Q, K, V, O, then the two
    /// feed-forward maps, then the readout pair.
    pub fn tensors(&self) -> Vec<&MaskedTensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for head in &block.heads {
                out.extend([&head.wq, &head.wk, &head.wv, &head.wo]);
            }
            out.extend([&block.w_f1, &block.w_f2]);
        }
        out.extend([&self.a_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut MaskedTensor> {
        let mut out: Vec<&mut MaskedTensor> = Vec::new();
        for block in &mut self.blocks {
            for head in &mut block.heads {
                out.push(&mut head.wq);
                out.push(&mut head.wk);
                out.push(&mut head.wv);
                out.push(&mut head.wo);
            }
            out.push(&mut block.w_f1);
            out.push(&mut block.w_f2);
        }
        out.push(&mut self.a_out);
        out.push(&mut self.b_out);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (r, block) in self.blocks.iter().enumerate() {
            for s in 0..block.heads.len() {
                for part in ["wq", "wk", "wv", "wo"] {
                    out.push(format!("block{r}/head{s}/{part}"));
                }
            }
            out.push(format!("block{r}/ff1"));
            out.push(format!("block{r}/ff2"));
        }
        out.push("a_out".into());
        out.push("b_out".into());
        out
    }

    /// Global magnitude pruning to the `S1` budget.
    pub fn project(&mut self) {
        let budget = self.spec.nonzero_budget;
        let mut tensors = self.tensors_mut();
        super::prune_to_budget(&mut tensors, budget);
    }

    pub fn nonzeros(&self) -> usize {
        self.tensors().iter().map(|t| t.nonzeros()).sum()
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if z.rows() != self.spec.dim {
            return Err(Error::Shape(format!(
                "prompt has {} rows, encoder expects {}",
                z.rows(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    /// Full encoder: blocks then `A_out z_last + b_out`.
    pub fn forward(&self, z: &Matrix) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let mut cur = z.clone();
        for block in &self.blocks {
            cur = sa_forward(&cur, block)?;
            cur = ff_forward(&cur, &block.w_f1.values, &block.w_f2.values)?;
        }
        let last = Matrix::column(&cur.column_slice(cur.cols() - 1));
        let out = self.a_out.values.matmul(&last)?.add(&self.b_out.values)?;
        Ok(out.column_slice(0))
    }
}

/// One self-attention sublayer with residual connection.
pub fn sa_forward(z: &Matrix, block: &BlockWeights) -> Result<Matrix> {
    let mut acc = z.clone();
    for head in &block.heads {
        let q = head.wq.values.matmul(z)?;
        let k = head.wk.values.matmul(z)?;
        let v = head.wv.values.matmul(z)?;
        let scores = k.transpose().matmul(&q)?;
        let gated = scores.hadamard(&hardmax_columns(&scores))?;
        let head_out = head.wo.values.matmul(&v.matmul(&gated)?)?;
        acc = acc.add(&head_out)?;
    }
    Ok(acc)
}

/// One feed-forward sublayer `Z + W_F2 relu(W_F1 Z)`.
pub fn ff_forward(z: &Matrix, w_f1: &Matrix, w_f2: &Matrix) -> Result<Matrix> {
    z.add(&w_f2.matmul(&relu(&w_f1.matmul(z)?))?)
}

/// Tape node ids mirroring [`TransformerWeights::tensors`] order.
pub(super) struct EncoderBinding {
    pub blocks: Vec<BlockBinding>,
    pub a_out: NodeId,
    pub b_out: NodeId,
}

pub(super) struct BlockBinding {
    pub heads: Vec<[NodeId; 4]>,
    pub w_f1: NodeId,
    pub w_f2: NodeId,
}

impl TransformerWeights {
    pub(super) fn register(&self, tape: &mut Tape) -> EncoderBinding {
        let blocks = self
            .blocks
            .iter()
            .map(|block| BlockBinding {
                heads: block
                    .heads
                    .iter()
                    .map(|h| {
                        [
                            tape.leaf(h.wq.values.clone()),
                            tape.leaf(h.wk.values.clone()),
                            tape.leaf(h.wv.values.clone()),
                            tape.leaf(h.wo.values.clone()),
                        ]
                    })
                    .collect(),
                w_f1: tape.leaf(block.w_f1.values.clone()),
                w_f2: tape.leaf(block.w_f2.values.clone()),
            })
            .collect();
        EncoderBinding {
            blocks,
            a_out: tape.leaf(self.a_out.values.clone()),
            b_out: tape.leaf(self.b_out.values.clone()),
        }
    }

    /// Encoder forward on the tape; returns the `K x 1` readout node.
    pub(super) fn forward_tape(
        &self,
        tape: &mut Tape,
        binding: &EncoderBinding,
        z: &Matrix,
    ) -> Result<NodeId> {
        self.check_input(z)?;
        let mut cur = tape.leaf(z.clone());
        for block in &binding.blocks {
            // attention sublayer
            let mut acc = cur;
            for &[wq, wk, wv, wo] in &block.heads {
                let q = tape.matmul(wq, cur)?;
                let k = tape.matmul(wk, cur)?;
                let v = tape.matmul(wv, cur)?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(kt, q)?;
                let mask = tape.hardmax_columns(scores);
                let gated = tape.hadamard(scores, mask)?;
                let va = tape.matmul(v, gated)?;
                let head_out = tape.matmul(wo, va)?;
                acc = tape.add(acc, head_out)?;
            }
            cur = acc;
            // feed-forward sublayer
            let pre = tape.matmul(block.w_f1, cur)?;
            let act = tape.relu(pre);
            let post = tape.matmul(block.w_f2, act)?;
            cur = tape.add(cur, post)?;
        }
        let last = tape.column(cur, z.cols() - 1)?;
        let proj = tape.matmul(binding.a_out, last)?;
        tape.add(proj, binding.b_out)
    }
}
