//! Checkpoint files: a safetensors archive whose metadata carries a JSON
//! header (configuration, step, model id). Parameters of E / entropy model /
//! G live under `g.`, the discriminator under `d.`, optimizer moments under
//! any other prefix the trainer chooses.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{model_id_hex, CodecModel};
use crate::trainer::latest_checkpoint;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "mrc_header";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub step: u64,
    pub model: ModelConfig,
    /// Hex model id of the `g.` parameters.
    pub model_id: String,
    pub dtype: String,
    pub has_disc: bool,
    /// Seed the model was initialized with.
    pub seed: u64,
    /// Free-form JSON owned by the trainer (config, optimizer counters).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

impl Checkpoint {
    /// Captures all model parameters; `extra_tensors` must not use the `g.`
    /// or `d.` prefixes.
    pub fn from_model(
        model: &CodecModel,
        step: u64,
        seed: u64,
        extra_tensors: BTreeMap<String, Tensor>,
        extra: serde_json::Value,
    ) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (k, v) in model.store().snapshot() {
            tensors.insert(format!("g.{k}"), v);
        }
        if let Some(ds) = model.disc_store() {
            for (k, v) in ds.snapshot() {
                tensors.insert(format!("d.{k}"), v);
            }
        }
        for (k, v) in extra_tensors {
            if k.starts_with("g.") || k.starts_with("d.") {
                return Err(Error::Checkpoint(format!("reserved tensor name {k}")));
            }
            tensors.insert(k, v);
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                format: FORMAT_VERSION,
                step,
                model: model.config().clone(),
                model_id: model_id_hex(&model.model_id()?),
                dtype: dtype_name(model.dtype())?.to_string(),
                has_disc: model.disc_store().is_some(),
                seed,
                extra,
            },
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert(HEADER_KEY.to_string(), serde_json::to_string(&self.header)?);
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        safetensors::serialize(data, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        let header_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(HEADER_KEY))
            .ok_or_else(|| Error::Checkpoint("missing checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_str(header_json)?;
        if header.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", header.format)));
        }
        let tensors = candle_core::safetensors::load_buffer(bytes, device)?
            .into_iter()
            .collect();
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Self::from_bytes(&bytes, device)
    }

    fn prefixed(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds the model and checks the recomputed id against the header.
    /// The discriminator is restored only when `with_disc` is set.
    pub fn build_model(&self, with_disc: bool, device: &Device) -> Result<CodecModel> {
        let dtype = parse_dtype(&self.header.dtype)?;
        let with_disc = with_disc && self.header.has_disc;
        let model = CodecModel::new(&self.header.model, self.header.seed, with_disc, dtype, device)?;
        model.store().load(&self.prefixed("g."))?;
        if let Some(ds) = model.disc_store() {
            ds.load(&self.prefixed("d."))?;
        }
        let actual = model_id_hex(&model.model_id()?);
        if actual != self.header.model_id {
            return Err(Error::ModelMismatch {
                expected: self.header.model_id.clone(),
                actual,
            });
        }
        Ok(model)
    }

    /// Rate label recorded by the trainer, if any.
    pub fn rate_label(&self) -> Option<u8> {
        self.header.extra.get("rate_label")?.as_u64().and_then(|v| u8::try_from(v).ok())
    }

    /// Tensors stored under `prefix`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.prefixed(prefix)
    }
}

/// Environment variable naming the default checkpoint directory.
pub const MODEL_DIR_ENV: &str = "MRC_MODEL_DIR";

/// Resolves a `--model` argument. A file is used as is; a directory yields
/// its newest `ckpt-*.mrcm`, falling back to `model.mrcm`. Without an
/// argument the directory comes from `MRC_MODEL_DIR`.
pub fn resolve_checkpoint(arg: Option<&Path>) -> Result<PathBuf> {
    let path = match arg {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(MODEL_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no model given and {MODEL_DIR_ENV} is not set")))?,
    };
    if path.is_file() {
        return Ok(path);
    }
    if path.is_dir() {
        if let Some(p) = latest_checkpoint(&path)? {
            return Ok(p);
        }
        let fallback = path.join("model.mrcm");
        if fallback.is_file() {
            return Ok(fallback);
        }
    }
    Err(Error::Checkpoint(format!("no checkpoint found at {}", path.display())))
}

/// Loads a checkpoint and its model for inference (no discriminator).
pub fn load_inference_model(path: impl AsRef<Path>, device: &Device) -> Result<CodecModel> {
    Checkpoint::load(path, device)?.build_model(false, device)
}
