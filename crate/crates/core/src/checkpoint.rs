//! Model checkpoints stored as tensor containers: one `f64` tensor per
//! parameter segment and per frozen basis, plus a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_container, write_container, Container, DType};
use crate::model::{AxisBasis, IsotropicModel, ModelConfig, ParamSet, Segment, StageSummary};
use crate::ssm::{Cutoff, C64};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "ndssm-checkpoint";

/// Everything about a checkpoint except the tensors themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub resolution: Vec<usize>,
    pub alpha: Cutoff,
    pub segments: Vec<Segment>,
    /// Hash of the experiment configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub stage_history: Vec<StageSummary>,
    /// Test resolution this checkpoint was selected for, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_for: Option<Vec<usize>>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointInfo {
    pub config_hash: Option<String>,
    pub stage_history: Vec<StageSummary>,
    pub selected_for: Option<Vec<usize>>,
    pub epoch: usize,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: IsotropicModel,
    pub manifest: CheckpointManifest,
}

fn complex_tensor(v: &[C64]) -> Tensor {
    Tensor::new(vec![v.len(), 2], v.iter().flat_map(|z| [z.re, z.im]).collect()).expect("shape matches")
}

fn complex_values(t: &Tensor, name: &str) -> Result<Vec<C64>> {
    if t.ndim() != 2 || t.shape()[1] != 2 {
        return Err(Error::Parse { offset: 0, message: format!("tensor {name:?} must have shape [N, 2]") });
    }
    Ok(t.data().chunks_exact(2).map(|c| C64::new(c[0], c[1])).collect())
}

pub fn checkpoint_container(model: &IsotropicModel, info: &CheckpointInfo) -> Container {
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        model: model.config.clone(),
        resolution: model.resolution().to_vec(),
        alpha: model.alpha(),
        segments: model.params.segments.clone(),
        config_hash: info.config_hash.clone(),
        stage_history: info.stage_history.clone(),
        selected_for: info.selected_for.clone(),
        epoch: info.epoch,
        val_accuracy: info.val_accuracy,
    };
    let mut c = Container::with_metadata(serde_json::to_value(&manifest).expect("manifest serializes"));
    for (i, seg) in model.params.segments.iter().enumerate() {
        let t = Tensor::new(seg.shape.clone(), model.params.get(i).to_vec()).expect("segment shape");
        c.push(format!("param.{}", seg.name), DType::F64, t);
    }
    for (l, block) in model.bases().iter().enumerate() {
        for (tau, basis) in block.iter().enumerate() {
            c.push(format!("basis.{l}.{tau}.a"), DType::F64, complex_tensor(&basis.a));
            c.push(format!("basis.{l}.{tau}.b"), DType::F64, complex_tensor(&basis.b));
        }
    }
    c
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &IsotropicModel, info: &CheckpointInfo) -> Result<()> {
    write_container(path, &checkpoint_container(model, info))
}

pub fn checkpoint_from_container(c: &Container) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = serde_json::from_value(c.metadata.clone())
        .map_err(|e| Error::Parse { offset: 4, message: format!("checkpoint manifest: {e}") })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Parse { offset: 4, message: format!("not a checkpoint (format {:?})", manifest.format) });
    }
    let mut params = ParamSet::new();
    for seg in &manifest.segments {
        let t = c.require(&format!("param.{}", seg.name))?;
        if t.shape() != seg.shape.as_slice() {
            return Err(Error::Parse {
                offset: 0,
                message: format!("segment {:?} has shape {:?}", seg.name, t.shape()),
            });
        }
        params.add(seg.name.clone(), &seg.shape, seg.decay, seg.trainable, t.data().to_vec());
    }
    let mut bases = Vec::with_capacity(manifest.model.depth);
    for l in 0..manifest.model.depth {
        let mut block = Vec::new();
        for tau in 0.. {
            let (an, bn) = (format!("basis.{l}.{tau}.a"), format!("basis.{l}.{tau}.b"));
            let Some(a) = c.get(&an) else { break };
            block.push(AxisBasis { a: complex_values(a, &an)?, b: complex_values(c.require(&bn)?, &bn)? });
        }
        bases.push(block);
    }
    let model =
        IsotropicModel::from_parts(manifest.model.clone(), &manifest.resolution, manifest.alpha, params, bases)?;
    Ok(Checkpoint { model, manifest })
}

/// Reads a checkpoint; a missing file surfaces as [`Error::Io`] with kind `NotFound`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_container(&read_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::FeatureMap;
    use crate::model::LayerKind;

    #[test]
    fn round_trip_forward_is_bit_identical() {
        for layer in [LayerKind::S4nd, LayerKind::Conv] {
            let cfg =
                ModelConfig { layer, depth: 2, width: 4, state_dim: 3, train_delta: true, ..ModelConfig::default() };
            let model = IsotropicModel::new(cfg, &[6, 6], Cutoff::new(0.5).unwrap(), 4).unwrap();
            let info = CheckpointInfo { config_hash: Some("abc".into()), epoch: 3, ..CheckpointInfo::default() };
            let bytes = checkpoint_container(&model, &info).to_bytes().unwrap();
            let back = checkpoint_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back.manifest.epoch, 3);
            assert_eq!(back.model.params, model.params);
            let x = FeatureMap::new(Tensor::from_fn(&[1, 6, 6], |i| (i[1] as f64 - i[2] as f64).sin())).unwrap();
            let a = model.forward(std::slice::from_ref(&x)).unwrap();
            let b = back.model.forward(&[x]).unwrap();
            for (p, q) in a[0].iter().zip(&b[0]) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn missing_file_is_io_not_found() {
        match load_checkpoint("/nonexistent/ckpt.ndssm") {
            Err(Error::Io(e)) => assert_eq!(e.kind(), std::io::ErrorKind::NotFound),
            other => panic!("expected i/o error, got {other:?}"),
        }
    }
}
