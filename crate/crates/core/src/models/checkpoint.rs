//! Model checkpoints: a single JSON document with spec fields, flat
//! row-major weight arrays, and masks as kept-index lists. Round-trips are
//! bit exact (`float_roundtrip` parsing plus shortest-representation output).

use super::{ClampSpec, CompositeModel, MaskedTensor, MlpSpec, MlpWeights, TransformerSpec, TransformerWeights};
use crate::numerics::Matrix;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Flat indices (row-major) of mask-kept entries.
    mask_kept: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderDoc {
    spec: TransformerSpec,
    tensors: Vec<TensorDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    spec: MlpSpec,
    input_dim: usize,
    output_dim: usize,
    tensors: Vec<TensorDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    schema_version: u32,
    kind: String,
    clamp: ClampSpec,
    encoder: Option<EncoderDoc>,
    head: HeadDoc,
}

fn tensor_doc(name: &str, t: &MaskedTensor) -> TensorDoc {
    TensorDoc {
        name: name.to_string(),
        rows: t.values.rows(),
        cols: t.values.cols(),
        data: t.values.data().to_vec(),
        mask_kept: t.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
    }
}

fn tensor_from_doc(doc: &TensorDoc) -> Result<MaskedTensor> {
    let values = Matrix::from_vec(doc.rows, doc.cols, doc.data.clone())
        .map_err(|e| Error::Schema(format!("tensor {}: {e}", doc.name)))?;
    let mut mask = vec![false; doc.rows * doc.cols];
    for &i in &doc.mask_kept {
        if i >= mask.len() {
            return Err(Error::Schema(format!("tensor {}: mask index {i} out of range", doc.name)));
        }
        mask[i] = true;
    }
    let t = MaskedTensor { values, mask };
    for (v, &kept) in t.values.data().iter().zip(&t.mask) {
        if !kept && *v != 0.0 {
            return Err(Error::Schema(format!("tensor {}: masked entry is nonzero", doc.name)));
        }
    }
    Ok(t)
}

pub fn save_checkpoint(path: &Path, model: &CompositeModel) -> Result<()> {
    let encoder = model.encoder.as_ref().map(|enc| EncoderDoc {
        spec: enc.spec.clone(),
        tensors: enc
            .tensor_names()
            .iter()
            .zip(enc.tensors())
            .map(|(n, t)| tensor_doc(n, t))
            .collect(),
    });
    let head = HeadDoc {
        spec: model.head.spec.clone(),
        input_dim: model.head.input_dim(),
        output_dim: model.head.output_dim(),
        tensors: model
            .head
            .tensor_names()
            .iter()
            .zip(model.head.tensors())
            .map(|(n, t)| tensor_doc(n, t))
            .collect(),
    };
    let doc = CheckpointDoc {
        schema_version: 1,
        kind: if model.is_mlp_only() { "mlp-only".into() } else { "composite".into() },
        clamp: model.clamp.clone(),
        encoder,
        head,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &doc)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CompositeModel> {
    let file = std::fs::File::open(path)?;
    let doc: CheckpointDoc = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
    if doc.schema_version != 1 {
        return Err(Error::Schema(format!(
            "unsupported checkpoint schema_version {}",
            doc.schema_version
        )));
    }

    let encoder = match &doc.encoder {
        None => None,
        Some(enc_doc) => {
            let mut enc = TransformerWeights::zeros(&enc_doc.spec)?;
            let names = enc.tensor_names();
            if names.len() != enc_doc.tensors.len() {
                return Err(Error::Schema(format!(
                    "encoder expects {} tensors, checkpoint has {}",
                    names.len(),
                    enc_doc.tensors.len()
                )));
            }
            for ((name, slot), tensor_doc) in
                names.iter().zip(enc.tensors_mut()).zip(&enc_doc.tensors)
            {
                if *name != tensor_doc.name {
                    return Err(Error::Schema(format!(
                        "encoder tensor order mismatch: expected {name}, found {}",
                        tensor_doc.name
                    )));
                }
                let loaded = tensor_from_doc(tensor_doc)?;
                if loaded.values.shape() != slot.values.shape() {
                    return Err(Error::Schema(format!("tensor {name}: wrong shape")));
                }
                *slot = loaded;
            }
            Some(enc)
        }
    };

    let mut head = MlpWeights::zeros(&doc.head.spec, doc.head.input_dim, doc.head.output_dim)?;
    let names = head.tensor_names();
    if names.len() != doc.head.tensors.len() {
        return Err(Error::Schema(format!(
            "head expects {} tensors, checkpoint has {}",
            names.len(),
            doc.head.tensors.len()
        )));
    }
    for ((name, slot), tensor_doc) in names.iter().zip(head.tensors_mut()).zip(&doc.head.tensors) {
        if *name != tensor_doc.name {
            return Err(Error::Schema(format!(
                "head tensor order mismatch: expected {name}, found {}",
                tensor_doc.name
            )));
        }
        let loaded = tensor_from_doc(tensor_doc)?;
        if loaded.values.shape() != slot.values.shape() {
            return Err(Error::Schema(format!("tensor {name}: wrong shape")));
        }
        *slot = loaded;
    }

    let expected_kind = if encoder.is_none() { "mlp-only" } else { "composite" };
    if doc.kind != expected_kind {
        return Err(Error::Schema(format!(
            "kind says {} but encoder presence implies {expected_kind}",
            doc.kind
        )));
    }
    CompositeModel::new(encoder, head, doc.clamp)
}
