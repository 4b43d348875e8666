//! Checkpoints are a single safetensors file. Parameters are stored as
//! `param.{name}`, optimizer moments as `adam.{m|v}.{name}`. The header
//! metadata carries the configuration snapshot, the vocabulary and a SHA-256
//! digest of every tensor payload, so truncation or bit rot is detected
//! before anything is loaded into a model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWHyper};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::tensor_bytes;

const FORMAT: &str = "medvl-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training stage that produced the weights (0 for untrained).
    pub stage: u8,
    pub epoch: usize,
    pub vocab: Vec<String>,
    pub class_names: Vec<String>,
    /// Resolved training configuration, when produced by a training run.
    pub train: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    hyper: AdamWHyper,
    step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamW>,
}

fn st_dtype(dtype: DType) -> Result<Dtype> {
    match dtype {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn digest(entries: &BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)>) -> String {
    let mut h = Sha256::new();
    for (name, (dtype, shape, bytes)) in entries {
        h.update(name.as_bytes());
        h.update(format!("{dtype:?}").as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

/// Writes `model`'s parameters (and optionally the optimizer) to `path`.
/// The file is written to a sibling temporary path and renamed into place.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamW>,
) -> Result<()> {
    let mut entries: BTreeMap<String, (Dtype, Vec<usize>, Vec<u8>)> = BTreeMap::new();
    let mut push = |name: String, t: &Tensor| -> Result<()> {
        entries.insert(name, (st_dtype(t.dtype())?, t.dims().to_vec(), tensor_bytes(t)?));
        Ok(())
    };
    for (name, var) in model.store().vars() {
        push(format!("param.{name}"), var.as_tensor())?;
    }
    if let Some(opt) = optimizer {
        for (name, t) in opt.state_tensors() {
            push(format!("adam.{name}"), &t)?;
        }
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert(
        "meta".to_string(),
        serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    if let Some(opt) = optimizer {
        let om = OptimizerMeta {
            hyper: opt.hyper,
            step: opt.steps(),
        };
        info.insert(
            "optimizer".to_string(),
            serde_json::to_string(&om).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    info.insert("digest".to_string(), digest(&entries));
    let views = entries
        .iter()
        .map(|(n, (dt, shape, bytes))| {
            TensorView::new(*dt, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn to_tensor(view: &TensorView<'_>, device: &Device) -> Result<Tensor> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, device)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Reads and verifies a checkpoint. Nothing is returned unless the digest
/// matches.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(format!("unreadable ({e})")))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| corrupt("missing metadata".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(corrupt("not a model checkpoint".into()));
    }
    let mut entries = BTreeMap::new();
    for (name, view) in st.tensors() {
        entries.insert(name, (view.dtype(), view.shape().to_vec(), view.data().to_vec()));
    }
    let expected = info.get("digest").ok_or_else(|| corrupt("missing digest".into()))?;
    if &digest(&entries) != expected {
        return Err(corrupt("digest mismatch (file is corrupted)".into()));
    }
    let meta: CheckpointMeta = serde_json::from_str(info.get("meta").ok_or_else(|| corrupt("missing meta".into()))?)
        .map_err(|e| corrupt(format!("bad meta: {e}")))?;

    let mut params = BTreeMap::new();
    let mut moments = Vec::new();
    for (name, view) in st.tensors() {
        let t = to_tensor(&view, device)?;
        if let Some(n) = name.strip_prefix("param.") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam.") {
            moments.push((n.to_string(), t));
        } else {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
    }
    let optimizer = match info.get("optimizer") {
        Some(s) => {
            let om: OptimizerMeta = serde_json::from_str(s).map_err(|e| corrupt(format!("bad optimizer meta: {e}")))?;
            Some(AdamW::from_state(om.hyper, om.step, moments)?)
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

impl Checkpoint {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(&self.meta.vocab)
    }

    /// Copies every parameter into `model`. Names and shapes are checked
    /// first; on any mismatch nothing is written and every offender is
    /// listed.
    pub fn apply(&self, model: &Model) -> Result<()> {
        let vars = model.store().vars();
        let mut problems = Vec::new();
        for (name, var) in &vars {
            match self.params.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(t) if t.dims() != var.dims() => problems.push(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )),
                Some(_) => {}
            }
        }
        for name in self.params.keys() {
            if !vars.iter().any(|(n, _)| n == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: {}",
                problems.join("; ")
            )));
        }
        for (name, var) in &vars {
            var.set(&self.params[name].to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// Builds a model from the embedded configuration and loads the weights.
    pub fn build_model(&self, device: &Device) -> Result<Model> {
        let dtype = self
            .params
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32);
        let model = Model::new(&self.meta.model, dtype, device, 0)?;
        self.apply(&model)?;
        Ok(model)
    }
}
