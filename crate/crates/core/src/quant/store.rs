use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{QuantPolicy, QuantizedModel};
use crate::nn::arch::ArchConfig;
use crate::nn::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::model::ModelGraph;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantMeta {
    kind: String,
    arch: ArchConfig,
    policy: QuantPolicy,
    bits_w: u32,
    bits_a: u32,
    finalized: bool,
    weight_bits: BTreeMap<String, u32>,
    act_bits: BTreeMap<String, u32>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn meta_err(e: impl ToString) -> CheckpointError {
    CheckpointError::Metadata(e.to_string())
}

impl<T: Scalar> QuantizedModel<T> {
    /// Folded weights, steps, zero points, rounding logits, integer weights
    /// (once finalized) and activation steps.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = QuantMeta {
            kind: "quantized".into(),
            arch: self.arch.clone(),
            policy: self.policy,
            bits_w: self.bits_w,
            bits_a: self.bits_a,
            finalized: self.finalized,
            weight_bits: self.weights.iter().map(|(k, q)| (k.clone(), q.bits)).collect(),
            act_bits: self.acts.iter().map(|(k, a)| (k.clone(), a.bits)).collect(),
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("serializable"));
        for (name, q) in &self.weights {
            ck.insert(format!("{}.weight", name), &q.weight);
            ck.insert(format!("{}.bias", name), &q.bias);
            ck.insert(format!("{}.step", name), &q.step);
            ck.insert(format!("{}.v", name), &q.v);
            ck.insert_i32(format!("{}.zero_point", name), &[q.zero_point.len()], q.zero_point.clone());
            if let Some(h) = &q.hard {
                ck.insert_i32(format!("{}.w_int", name), q.weight.shape(), h.clone());
            }
        }
        for (name, a) in &self.acts {
            if let Some(s) = a.step {
                ck.insert(format!("{}.step", name), &crate::tensor::Tensor::scalar(s));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let meta: QuantMeta = serde_json::from_value(ck.metadata.clone()).map_err(meta_err)?;
        if meta.kind != "quantized" {
            return Err(meta_err(format!("expected a quantized model, found {}", meta.kind)));
        }
        // structure from a freshly built model; every tensor is then replaced
        let skeleton = ModelGraph::<T>::build(&meta.arch).map_err(meta_err)?;
        let mut qm = QuantizedModel::prepare(&skeleton, meta.bits_w, meta.bits_a, meta.policy, 2.0).map_err(meta_err)?;
        for (name, q) in qm.weights.iter_mut() {
            let shape = q.weight.shape().to_vec();
            let load = |suffix: &str, expect: &[usize]| -> Result<_, CheckpointError> {
                let t = ck.tensor::<T>(&format!("{}.{}", name, suffix))?;
                if t.shape() != expect {
                    return Err(CheckpointError::Corrupt(format!("{}.{} has shape {:?}", name, suffix, t.shape())));
                }
                Ok(t)
            };
            q.weight = load("weight", &shape)?;
            q.bias = load("bias", &[shape[0]])?;
            q.step = load("step", &[shape[0]])?;
            q.v = load("v", &shape)?;
            q.zero_point = ck.ints(&format!("{}.zero_point", name))?.1.to_vec();
            q.bits = *meta.weight_bits.get(name).ok_or_else(|| meta_err(format!("no bits for {}", name)))?;
            q.bounds = super::Bounds::asymmetric(q.bits).map_err(meta_err)?;
            q.fallback_channels.clear();
            q.hard = if meta.finalized {
                Some(ck.ints(&format!("{}.w_int", name))?.1.to_vec())
            } else {
                None
            };
        }
        for (name, a) in qm.acts.iter_mut() {
            a.bits = *meta.act_bits.get(name).ok_or_else(|| meta_err(format!("no bits for {}", name)))?;
            a.bounds = super::Bounds::symmetric(a.bits).map_err(meta_err)?;
            a.step = match ck.tensor::<T>(&format!("{}.step", name)) {
                Ok(t) => Some(t.data()[0]),
                Err(CheckpointError::Missing(_)) => None,
                Err(e) => return Err(e),
            };
        }
        qm.finalized = meta.finalized;
        Ok(qm)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), CheckpointError> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
