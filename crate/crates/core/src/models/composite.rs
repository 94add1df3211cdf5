//! Composite classifier: optional transformer encoder, biased-ReLU head,
//! output clamp, final softmax. Without an encoder the head consumes the
//! flattened prompt directly (the MLP-only family).
//!
//! The clamp keeps the head output in `[log eps, log 2]` entrywise, which
//! pins every predicted probability at or above `eps / (2K)`.

use super::mlp::MlpBinding;
use super::transformer::EncoderBinding;
use super::{ClampSpec, MaskedTensor, MlpWeights, TransformerWeights};
use crate::numerics::{softmax_columns, Matrix, NodeId, Tape};
use crate::risk::{ProbVector, ProbabilityModel};
use crate::tasks::PromptSample;
use crate::{Error, Result};

/// Entrywise `min(max(g, log eps), log 2)`.
pub fn clamp_log(g: &[f64], clamp: &ClampSpec) -> Vec<f64> {
    g.iter().map(|&v| v.clamp(clamp.lo(), clamp.hi())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeModel {
    /// Transformer encoder; absent for the MLP-only family.
    pub encoder: Option<TransformerWeights>,
    pub head: MlpWeights,
    pub clamp: ClampSpec,
}

impl CompositeModel {
    pub fn new(
        encoder: Option<TransformerWeights>,
        head: MlpWeights,
        clamp: ClampSpec,
    ) -> Result<Self> {
        if let Some(enc) = &encoder {
            enc.spec.validate()?;
            if enc.spec.classes != clamp.classes {
                return Err(Error::Config("encoder and clamp class counts differ".into()));
            }
            if head.input_dim() != enc.spec.classes {
                return Err(Error::Shape(format!(
                    "head input dim {} must equal the encoder output {}",
                    head.input_dim(),
                    enc.spec.classes
                )));
            }
        }
        if head.output_dim() != clamp.classes {
            return Err(Error::Shape(format!(
                "head output dim {} must equal the class count {}",
                head.output_dim(),
                clamp.classes
            )));
        }
        Ok(Self { encoder, head, clamp })
    }

    pub fn classes(&self) -> usize {
        self.clamp.classes
    }

    pub fn is_mlp_only(&self) -> bool {
        self.encoder.is_none()
    }

    /// Clamped head output (log-scale scores) for one prompt.
    pub fn clamped_logits(&self, z: &Matrix) -> Result<Vec<f64>> {
        let raw = match &self.encoder {
            Some(enc) => self.head.forward(&enc.forward(z)?)?,
            None => {
                let flat = z.vec_columns();
                if flat.len() != self.head.input_dim() {
                    return Err(Error::Shape(format!(
                        "flattened prompt has dim {}, head expects {}",
                        flat.len(),
                        self.head.input_dim()
                    )));
                }
                self.head.forward(&flat)?
            }
        };
        Ok(clamp_log(&raw, &self.clamp))
    }

    /// Softmax of the clamped head output; every coordinate is at least
    /// `eps / (2K)` and the coordinates sum to one.
    pub fn predict(&self, z: &Matrix) -> Result<ProbVector> {
        let logits = self.clamped_logits(z)?;
        let soft = softmax_columns(&Matrix::column(&logits));
        ProbVector::new(soft.column_slice(0))
    }

    /// Applies both constraint projections (encoder budget, head clip+budget).
    pub fn project_constraints(&mut self) {
        if let Some(enc) = &mut self.encoder {
            enc.project();
        }
        self.head.project();
    }

    /// Nonzero parameters as `(encoder, head)` counts.
    pub fn count_nonzeros(&self) -> (usize, usize) {
        (self.encoder.as_ref().map_or(0, |e| e.nonzeros()), self.head.nonzeros())
    }

    /// All tensors in registry order: encoder first, then head.
    pub fn tensors(&self) -> Vec<&MaskedTensor> {
        let mut out = Vec::new();
        if let Some(enc) = &self.encoder {
            out.extend(enc.tensors());
        }
        out.extend(self.head.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut MaskedTensor> {
        let mut out = Vec::new();
        if let Some(enc) = &mut self.encoder {
            out.extend(enc.tensors_mut());
        }
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(enc) = &self.encoder {
            out.extend(enc.tensor_names().into_iter().map(|n| format!("encoder/{n}")));
        }
        out.extend(self.head.tensor_names().into_iter().map(|n| format!("head/{n}")));
        out
    }

    /// Registers every parameter tensor as a tape leaf, in registry order.
    pub fn register_params(&self, tape: &mut Tape) -> TapeBinding {
        let encoder = self.encoder.as_ref().map(|enc| enc.register(tape));
        let head = self.head.register(tape);
        let mut param_ids = Vec::new();
        if let Some(enc) = &encoder {
            for block in &enc.blocks {
                for head_ids in &block.heads {
                    param_ids.extend_from_slice(head_ids);
                }
                param_ids.push(block.w_f1);
                param_ids.push(block.w_f2);
            }
            param_ids.push(enc.a_out);
            param_ids.push(enc.b_out);
        }
        param_ids.extend(&head.layers);
        param_ids.extend(&head.thresholds);
        TapeBinding { encoder, head, param_ids }
    }

    /// Clamped-logit node for one prompt, differentiable in the parameters.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        z: &Matrix,
    ) -> Result<NodeId> {
        let head_in = match (&self.encoder, &binding.encoder) {
            (Some(enc), Some(enc_ids)) => enc.forward_tape(tape, enc_ids, z)?,
            (None, None) => {
                let flat = z.vec_columns();
                if flat.len() != self.head.input_dim() {
                    return Err(Error::Shape(format!(
                        "flattened prompt has dim {}, head expects {}",
                        flat.len(),
                        self.head.input_dim()
                    )));
                }
                tape.leaf(Matrix::column(&flat))
            }
            _ => return Err(Error::Contract("binding does not match the model".into())),
        };
        let raw = self.head.forward_tape(tape, &binding.head, head_in)?;
        Ok(tape.clamp_box(raw, self.clamp.lo(), self.clamp.hi()))
    }

    /// Mean cross-entropy node over a batch of samples.
    pub fn batch_loss_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        batch: &[&PromptSample],
    ) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::Config("loss over an empty batch".into()));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            let logits = self.logits_on_tape(tape, binding, &sample.z)?;
            terms.push(tape.neg_log_softmax_pick(logits, sample.label)?);
        }
        let total = tape.add_n(&terms)?;
        Ok(tape.scale(total, 1.0 / batch.len() as f64))
    }
}

/// Tape ids for every parameter tensor, in registry order.
pub struct TapeBinding {
    pub(super) encoder: Option<EncoderBinding>,
    pub(super) head: MlpBinding,
    /// Flat view matching [`CompositeModel::tensors`] order.
    pub param_ids: Vec<NodeId>,
}

impl ProbabilityModel for CompositeModel {
    fn classes(&self) -> usize {
        self.clamp.classes
    }
    fn predict_probs(&self, z: &Matrix) -> Result<ProbVector> {
        self.predict(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpSpec, TransformerSpec};
    use crate::numerics::RngStream;

    fn mlp_only(classes: usize, input_dim: usize, eps: f64, seed: u64) -> CompositeModel {
        let spec =
            MlpSpec { depth: 2, width_cap: 6, nonzero_budget: 10_000, lipschitz_assumed: 10.0 };
        let mut rng = RngStream::new(seed, "composite-test");
        let head = MlpWeights::init(&spec, input_dim, classes, &mut rng).unwrap();
        CompositeModel::new(None, head, ClampSpec::new(eps, classes).unwrap()).unwrap()
    }

    #[test]
    fn clamp_log_floor_ceiling_interior() {
        let clamp = ClampSpec::new(0.1, 3).unwrap();
        let out = clamp_log(&[-10.0, 5.0, 0.0], &clamp);
        assert!((out[0] - 0.1_f64.ln()).abs() <= 1e-12); // -2.302585...
        assert!((out[1] - 2.0_f64.ln()).abs() <= 1e-12); // 0.693147...
        assert_eq!(out[2], 0.0);
    }

    #[test]
    fn equal_head_outputs_give_uniform_prediction() {
        let mut model = mlp_only(4, 5, 0.1, 1);
        for layer in &mut model.head.layers {
            let (r, c) = layer.values.shape();
            layer.values = Matrix::zeros(r, c);
        }
        let z = Matrix::from_fn(5, 1, |_, _| 0.3);
        let p = model.predict(&z).unwrap();
        for k in 0..4 {
            assert!((p.get(k) - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn worked_clamped_softmax_example() {
        // eps = 0.1, K = 3, clamped outputs (ln 2, ln 0.1, ln 0.1):
        // softmax = (2, 0.1, 0.1)/2.2, every coordinate >= eps/(2K)
        let clamp = ClampSpec::new(0.1, 3).unwrap();
        let logits = clamp_log(&[5.0, -10.0, -10.0], &clamp);
        let p = softmax_columns(&Matrix::column(&logits)).column_slice(0);
        assert!((p[0] - 0.909_090_909_090_909_1).abs() <= 1e-12);
        assert!((p[1] - 0.045_454_545_454_545_456).abs() <= 1e-12);
        assert!((p[2] - 0.045_454_545_454_545_456).abs() <= 1e-12);
        let floor = clamp.floor();
        assert!((floor - 0.016_666_666_666_666_666).abs() <= 1e-15);
        assert!(p.iter().all(|&v| v >= floor - 1e-12));
    }

    #[test]
    fn prediction_respects_simplex_and_floor() {
        let mut rng = RngStream::new(7, "floor-sweep");
        for trial in 0..200 {
            let model = mlp_only(3, 4, 0.05, trial);
            let z = Matrix::from_fn(4, 1, |_, _| rng.uniform_01());
            let p = model.predict(&z).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(p.min_entry() >= model.clamp.floor() - 1e-12);
        }
    }

    #[test]
    fn mlp_only_prediction_is_softmax_of_clamped_head() {
        let model = mlp_only(2, 6, 0.1, 3);
        let z = Matrix::from_fn(3, 2, |i, j| (i as f64 + j as f64) / 5.0);
        let flat = z.vec_columns();
        let direct = {
            let raw = model.head.forward(&flat).unwrap();
            let clamped = clamp_log(&raw, &model.clamp);
            softmax_columns(&Matrix::column(&clamped)).column_slice(0)
        };
        let p = model.predict(&z).unwrap();
        for k in 0..2 {
            assert!((p.get(k) - direct[k]).abs() <= 1e-15);
        }
    }

    #[test]
    fn composite_encoder_head_agree_between_plain_and_tape() {
        let tf_spec = TransformerSpec {
            blocks: 1,
            heads: 2,
            dim: 4,
            width_cap: 4,
            output_bound: 10.0,
            nonzero_budget: 10_000,
            lipschitz_budget: 50.0,
            classes: 3,
        };
        let mlp_spec =
            MlpSpec { depth: 1, width_cap: 5, nonzero_budget: 10_000, lipschitz_assumed: 5.0 };
        let mut rng = RngStream::new(11, "composite-tape");
        let enc = TransformerWeights::init(&tf_spec, &mut rng).unwrap();
        let head = MlpWeights::init(&mlp_spec, 3, 3, &mut rng).unwrap();
        let model =
            CompositeModel::new(Some(enc), head, ClampSpec::new(0.1, 3).unwrap()).unwrap();

        let z = Matrix::from_fn(4, 3, |_, _| rng.uniform_01());
        let plain = model.clamped_logits(&z).unwrap();
        let mut tape = Tape::new();
        let binding = model.register_params(&mut tape);
        let node = model.logits_on_tape(&mut tape, &binding, &z).unwrap();
        let taped = tape.value(node).column_slice(0);
        for k in 0..3 {
            assert!((plain[k] - taped[k]).abs() <= 1e-12);
        }

        // batch loss value matches the average of per-sample cross-entropies
        let task_spec =
            crate::tasks::TaskFamilySpec::direct_holder(1, 3, 2, 1, 1.0, 2.0, 2).unwrap();
        let task = task_spec.sample_task(&mut rng);
        let samples: Vec<_> =
            (0..4).map(|_| task.sample_prompt(&mut rng).unwrap()).collect();
        let refs: Vec<&PromptSample> = samples.iter().collect();
        let mut tape = Tape::new();
        let binding = model.register_params(&mut tape);
        let loss = model.batch_loss_on_tape(&mut tape, &binding, &refs).unwrap();
        let direct = crate::risk::cross_entropy(&model, &samples).unwrap();
        assert!((tape.value(loss).get(0, 0) - direct).abs() <= 1e-12);
    }

    #[test]
    fn mismatched_head_dimension_is_rejected() {
        let mlp_spec =
            MlpSpec { depth: 1, width_cap: 3, nonzero_budget: 100, lipschitz_assumed: 1.0 };
        let mut rng = RngStream::new(13, "mismatch");
        let head = MlpWeights::init(&mlp_spec, 5, 3, &mut rng).unwrap();
        // encoder outputs K=2 but head expects 5 inputs / produces 3 classes
        let tf_spec = TransformerSpec {
            blocks: 1,
            heads: 1,
            dim: 3,
            width_cap: 3,
            output_bound: 1.0,
            nonzero_budget: 10,
            lipschitz_budget: 1.0,
            classes: 2,
        };
        let enc = TransformerWeights::zeros(&tf_spec).unwrap();
        assert!(CompositeModel::new(Some(enc), head, ClampSpec::new(0.1, 2).unwrap()).is_err());
    }
}
