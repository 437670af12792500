//! Single-file checkpoint archive: a safetensors file holding parameters and
//! Adam moments as float64 tensors, plus a JSON manifest in its metadata.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use segsr_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig, TrainState};
use crate::error::{ensure, Error, Result};
use crate::nn::ParamStore;
use crate::recon::{SrConfig, SrModel};
use crate::seg::{SegConfig, SegModel};

/// Value of the manifest's `format` field.
pub const CHECKPOINT_FORMAT: &str = "segsr-checkpoint-v1";

const MANIFEST_KEY: &str = "manifest";
const PARAM_PREFIX: &str = "param.";
const MOMENT1_PREFIX: &str = "adam.m.";
const MOMENT2_PREFIX: &str = "adam.v.";

/// Architecture of a checkpointed network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelSpec {
    Sr(SrConfig),
    Seg(SegConfig),
}

// Only ever held one at a time, so the variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Model {
    Sr(SrModel),
    Seg(SegModel),
}

impl Model {
    /// A freshly initialized network of the given architecture.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Sr(c) => Model::Sr(SrModel::new(c, seed)?),
            ModelSpec::Seg(c) => Model::Seg(SegModel::new(c, seed)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Sr(m) => ModelSpec::Sr(m.config().clone()),
            Model::Seg(m) => ModelSpec::Seg(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Sr(m) => &m.params,
            Model::Seg(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Sr(m) => &mut m.params,
            Model::Seg(m) => &mut m.params,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Sr(_) => "sr",
            Model::Seg(_) => "seg",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RngManifest {
    algorithm: String,
    seed: u64,
    /// Every step's randomness is derived from (seed, step), so the next step
    /// index is the whole generator state.
    next_step: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    model: ModelSpec,
    train: TrainConfig,
    step: usize,
    epoch: usize,
    adam_steps: u64,
    rng: RngManifest,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: TrainState,
    /// Completed epochs.
    pub epoch: usize,
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_tensor(view: &TensorView<'_>, name: &str) -> Result<Tensor> {
    ensure!(view.dtype() == Dtype::F64, Checkpoint, "tensor {name} is {:?}, expected F64", view.dtype());
    let data = view.data().chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
    Ok(Tensor::new(view.shape().to_vec(), data))
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            model: self.model.spec(),
            train: self.train.clone(),
            step: self.state.step,
            epoch: self.epoch,
            adam_steps: self.state.adam.t,
            rng: RngManifest { algorithm: "chacha8".into(), seed: self.train.seed, next_step: self.state.step },
        };
        let mut entries: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, p) in self.model.params().iter() {
            entries.push((format!("{PARAM_PREFIX}{name}"), p.value.shape().to_vec(), le_bytes(&p.value)));
        }
        for (prefix, moments) in [(MOMENT1_PREFIX, &self.state.adam.m), (MOMENT2_PREFIX, &self.state.adam.v)] {
            for (name, t) in moments {
                entries.push((format!("{prefix}{name}"), t.shape().to_vec(), le_bytes(t)));
            }
        }
        let views = entries
            .iter()
            .map(|(n, s, b)| TensorView::new(Dtype::F64, s.clone(), b).map(|v| (n.as_str(), v)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(st_err)?;
        let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest)?)]);
        safetensors::serialize(views, Some(meta)).map_err(st_err)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(st_err)?;
        let text = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(MANIFEST_KEY))
            .ok_or_else(|| Error::Checkpoint("archive has no manifest".into()))?;
        let manifest: Manifest = serde_json::from_str(text)?;
        ensure!(
            manifest.format == CHECKPOINT_FORMAT,
            Checkpoint,
            "unsupported format {:?} (expected {CHECKPOINT_FORMAT})",
            manifest.format
        );
        let archive = SafeTensors::deserialize(bytes).map_err(st_err)?;
        let mut model = Model::build(&manifest.model, 0)?;
        let mut adam = Adam::new(manifest.train.adam);
        adam.t = manifest.adam_steps;
        let mut seen = BTreeSet::new();
        for (key, view) in archive.iter() {
            let tensor = read_tensor(&view, key)?;
            if let Some(name) = key.strip_prefix(PARAM_PREFIX) {
                ensure!(model.params().contains(name), Checkpoint, "unknown parameter {name}");
                model.params_mut().set(name, tensor).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                seen.insert(name.to_string());
            } else if let Some((name, moments)) = key
                .strip_prefix(MOMENT1_PREFIX)
                .map(|n| (n, &mut adam.m))
                .or_else(|| key.strip_prefix(MOMENT2_PREFIX).map(|n| (n, &mut adam.v)))
            {
                ensure!(
                    model.params().contains(name) && model.params().param(name).kind.trainable(),
                    Checkpoint,
                    "optimizer moment for unknown or frozen parameter {name}"
                );
                ensure!(
                    tensor.shape() == model.params().get(name).shape(),
                    Checkpoint,
                    "optimizer moment {key} has shape {:?}",
                    tensor.shape()
                );
                moments.insert(name.to_string(), tensor);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {key}")));
            }
        }
        if let Some((name, _)) = model.params().iter().find(|(n, _)| !seen.contains(*n)) {
            return Err(Error::Checkpoint(format!("parameter {name} missing from archive")));
        }
        ensure!(
            adam.m.keys().eq(adam.v.keys()),
            Checkpoint,
            "first and second optimizer moments cover different parameters"
        );
        Ok(Self {
            model,
            train: manifest.train,
            state: TrainState { adam, step: manifest.step },
            epoch: manifest.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn into_sr(self) -> Result<SrModel> {
        match self.model {
            Model::Sr(m) => Ok(m),
            other => Err(Error::Checkpoint(format!("expected an SR checkpoint, found {}", other.kind_name()))),
        }
    }

    pub fn into_seg(self) -> Result<SegModel> {
        match self.model {
            Model::Seg(m) => Ok(m),
            other => Err(Error::Checkpoint(format!("expected a segmentation checkpoint, found {}", other.kind_name()))),
        }
    }
}
