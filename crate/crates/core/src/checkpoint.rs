//! Checkpoints: a JSON manifest plus one little-endian `f64` blob.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/params.bin
//! ```
//!
//! The manifest lists every parameter (name, shape, role, byte offset), the
//! run config, the seed the model was built from, the MoRE routing tables and
//! the SHA-256 of the blob. Loading rebuilds the architecture from the config
//! and then overwrites every parameter by name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::more::Routing;
use crate::params::ParamRole;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::transformer::Model;

pub const FORMAT: &str = "more-kit-checkpoint";
pub const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of `f64` values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub blob: String,
    pub blob_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
    /// `|T|` used by each MoRE site's rank scaling.
    pub scaling_tasks: Vec<usize>,
    pub routing: Vec<Routing>,
    pub rng: Option<RngState>,
    pub params: Vec<ParamEntry>,
}

fn blob_and_entries(model: &Model) -> (Vec<u8>, Vec<ParamEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (_, p) in model.params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            role: p.role,
            offset: blob.len(),
            len: p.value.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (blob, entries)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(dir: &Path, model: &Model, config: &RunConfig, seed: u64, rng: Option<RngState>) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let (blob, params) = blob_and_entries(model);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        dtype: "f64-le".to_string(),
        blob: BLOB.to_string(),
        blob_sha256: sha256_hex(&blob),
        seed,
        config: config.clone(),
        scaling_tasks: model.more_layers().iter().map(|m| m.scaling_tasks).collect(),
        routing: model.routings(),
        rng,
        params,
    };
    std::fs::write(dir.join(BLOB), &blob)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Load a model and the manifest it came with.
pub fn load(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("parameter blob hash mismatch".into()));
    }
    manifest.config.validate()?;
    let mut model = Model::build(&manifest.config.backbone, &manifest.config.adapter_spec(), manifest.seed)?;
    if model.params.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, config builds {}",
            manifest.params.len(),
            model.params.len()
        )));
    }
    for entry in &manifest.params {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
        let end = entry
            .len
            .checked_mul(8)
            .and_then(|n| n.checked_add(entry.offset))
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::Checkpoint(format!("`{}` runs past the blob", entry.name)))?;
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if model.params.param(id).role != entry.role {
            return Err(Error::Checkpoint(format!("`{}` has the wrong role", entry.name)));
        }
        let value = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", entry.name)))?;
        model
            .params
            .set(id, value)
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", entry.name)))?;
    }
    let sites = model.more_layers().len();
    if manifest.routing.len() != sites || manifest.scaling_tasks.len() != sites {
        return Err(Error::Checkpoint(format!(
            "manifest routing covers {} sites, model has {sites}",
            manifest.routing.len()
        )));
    }
    for ((layer, routing), scaling) in model
        .more_layers_mut()
        .zip(manifest.routing.iter().cloned())
        .zip(manifest.scaling_tasks.iter().copied())
    {
        layer.set_routing(routing)?;
        if scaling == 0 {
            return Err(Error::Checkpoint("scaling task count must be >= 1".into()));
        }
        layer.scaling_tasks = scaling;
    }
    Ok((model, manifest))
}
