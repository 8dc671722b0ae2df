//! Checkpoint persistence.
//!
//! File layout (`<name>.awck`): 8-byte magic `AWAKERCK`, u32 LE format
//! version, u64 LE manifest length, UTF-8 JSON manifest, then the raw
//! little-endian f64 parameter payload in manifest order. Byte offsets are
//! relative to the payload start and each entry carries a crc32 of its raw
//! bytes, so a single corrupted payload byte is detected on load.
//!
//! Only adapter parameters (and optimizer moments) are stored; the frozen
//! base is rebuilt deterministically from the recorded config and seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, AdapterConfig, BaseModel, ModelConfig, PlacementMap, RoutingConfig};
use crate::optim::Optimizer;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AWAKERCK";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub model: ModelConfig,
    pub adapters: AdapterConfig,
    pub routing: RoutingConfig,
    pub stage: u8,
    pub step: u64,
    pub seed: u64,
    pub rng_state: u64,
    pub adam_step: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

fn f64s_to_le(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

impl Checkpoint {
    /// Snapshot the adapter parameters (names starting with `adapter.`) and
    /// the optimizer moments of the current trainable set.
    pub fn from_model(
        model: &AdaptedModel,
        stage: u8,
        step: u64,
        seed: u64,
        rng_state: u64,
        optimizer: Option<&Optimizer>,
    ) -> Checkpoint {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
            let bytes = f64s_to_le(data);
            entries.push(ManifestEntry {
                name,
                shape,
                dtype: "f64".to_string(),
                byte_offset: payload.len() as u64,
                crc32: crc32fast::hash(&bytes),
            });
            payload.extend_from_slice(&bytes);
        };
        model.visit_params(&mut |name, t| {
            if name.starts_with("adapter.") {
                push(name.to_string(), t.shape().to_vec(), t.data());
            }
        });
        let adam_step = optimizer.map_or(0, Optimizer::step_count);
        if let Some(opt) = optimizer {
            for (pname, m, v) in opt.export_moments() {
                push(format!("adam.m.{pname}"), vec![m.len()], &m);
                push(format!("adam.v.{pname}"), vec![v.len()], &v);
            }
        }
        Checkpoint {
            manifest: Manifest {
                version: FORMAT_VERSION,
                model: model.cfg().clone(),
                adapters: *model.adapter_cfg(),
                routing: *model.routing(),
                stage,
                step,
                seed,
                rng_state,
                adam_step,
                entries,
            },
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Strict decoder for untrusted bytes: every length is bounded by the
    /// input before allocation, entries must tile the payload exactly in
    /// order, and each entry's crc32 must match.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checkpoint(format!(
                "file too short ({} bytes) for header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let remaining = (bytes.len() - HEADER_LEN) as u64;
        if manifest_len > remaining {
            return Err(Error::Checkpoint(format!(
                "manifest length {manifest_len} exceeds file contents ({remaining} bytes left)"
            )));
        }
        let manifest_end = HEADER_LEN + manifest_len as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| Error::Checkpoint(format!("manifest is not valid JSON: {e}")))?;
        if manifest.version != version {
            return Err(Error::Checkpoint(format!(
                "manifest version {} disagrees with header {version}",
                manifest.version
            )));
        }
        let payload = &bytes[manifest_end..];

        let mut offset = 0u64;
        let mut seen = std::collections::BTreeSet::new();
        for entry in &manifest.entries {
            if entry.dtype != "f64" {
                return Err(Error::Checkpoint(format!(
                    "entry '{}' has unsupported dtype '{}'",
                    entry.name, entry.dtype
                )));
            }
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "duplicate entry '{}'",
                    entry.name
                )));
            }
            let mut numel: u64 = 1;
            for &d in &entry.shape {
                if d == 0 {
                    return Err(Error::Checkpoint(format!(
                        "entry '{}' has a zero dimension",
                        entry.name
                    )));
                }
                numel = numel.checked_mul(d as u64).ok_or_else(|| {
                    Error::Checkpoint(format!("entry '{}' shape overflows", entry.name))
                })?;
            }
            let nbytes = numel.checked_mul(8).ok_or_else(|| {
                Error::Checkpoint(format!("entry '{}' size overflows", entry.name))
            })?;
            if entry.byte_offset != offset {
                return Err(Error::Checkpoint(format!(
                    "entry '{}' at offset {} but payload cursor is {offset}",
                    entry.name, entry.byte_offset
                )));
            }
            let end = offset.checked_add(nbytes).ok_or_else(|| {
                Error::Checkpoint(format!("entry '{}' range overflows", entry.name))
            })?;
            if end > payload.len() as u64 {
                return Err(Error::Checkpoint(format!(
                    "entry '{}' extends past the payload ({} > {})",
                    entry.name,
                    end,
                    payload.len()
                )));
            }
            let slice = &payload[offset as usize..end as usize];
            let actual = crc32fast::hash(slice);
            if actual != entry.crc32 {
                return Err(Error::Checksum {
                    name: entry.name.clone(),
                    expected: entry.crc32,
                    actual,
                });
            }
            offset = end;
        }
        if offset != payload.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "payload has {} trailing bytes past the last entry",
                payload.len() as u64 - offset
            )));
        }
        Ok(Checkpoint {
            manifest,
            payload: payload.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::decode(&bytes)
    }

    fn entry_data(&self, entry: &ManifestEntry) -> Vec<f64> {
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        le_to_f64s(&self.payload[start..start + numel * 8])
    }

    /// Parameter entries by name (adapter weights, not optimizer moments).
    pub fn param_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.name.starts_with("adapter."))
    }

    /// Copy stored adapter parameters into a freshly attached model. Every
    /// stored adapter entry must land on a parameter of the same shape, and
    /// every adapter parameter must be covered.
    pub fn apply_to_model(&self, model: &mut AdaptedModel) -> Result<()> {
        let mut table: BTreeMap<&str, &ManifestEntry> = BTreeMap::new();
        for e in self.param_entries() {
            table.insert(e.name.as_str(), e);
        }
        let mut missing = Vec::new();
        let mut failure: Option<Error> = None;
        model.visit_params_mut(&mut |name, t: &mut Tensor| {
            if !name.starts_with("adapter.") || failure.is_some() {
                return;
            }
            match table.remove(name) {
                Some(entry) => {
                    if entry.shape != t.shape() {
                        failure = Some(Error::Checkpoint(format!(
                            "entry '{name}' has shape {:?}, model expects {:?}",
                            entry.shape,
                            t.shape()
                        )));
                        return;
                    }
                    t.data_mut().copy_from_slice(&self.entry_data(entry));
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(err) = failure {
            return Err(err);
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint misses parameters: {}",
                missing.join(", ")
            )));
        }
        if let Some(stale) = table.keys().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint entry '{stale}' matches no model parameter"
            )));
        }
        Ok(())
    }

    /// Rebuild the full model: deterministically pretrain the base from the
    /// recorded config/seed, attach adapters per the recorded stage, then
    /// load the stored parameters.
    pub fn restore_model(&self) -> Result<AdaptedModel> {
        let m = &self.manifest;
        let base = BaseModel::pretrained(&m.model, effective_base_seed(&m.model, m.seed))?;
        let map = if m.stage <= 1 {
            PlacementMap::single_everywhere()
        } else {
            PlacementMap::moe_default()
        };
        let mut model = AdaptedModel::attach(
            base,
            map,
            m.adapters,
            m.routing,
            &mut Rng::new(m.seed).split("stage1-init"),
        )?;
        self.apply_to_model(&mut model)?;
        Ok(model)
    }

    /// Optimizer state recorded alongside the parameters.
    pub fn restore_optimizer(&self, cfg: crate::optim::AdamConfig) -> Optimizer {
        let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for e in &self.manifest.entries {
            if let Some(p) = e.name.strip_prefix("adam.m.") {
                moments.entry(p.to_string()).or_default().0 = self.entry_data(e);
            } else if let Some(p) = e.name.strip_prefix("adam.v.") {
                moments.entry(p.to_string()).or_default().1 = self.entry_data(e);
            }
        }
        let mut opt = Optimizer::new(cfg);
        opt.import_moments(
            self.manifest.adam_step,
            moments.into_iter().map(|(n, (m, v))| (n, m, v)).collect(),
        );
        opt
    }

    /// The config recorded in the manifest must agree with the run config
    /// the caller is using; stage transitions depend on it.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        if self.manifest.model != cfg.model {
            return Err(Error::Config(
                "checkpoint model config disagrees with the run config".into(),
            ));
        }
        if self.manifest.adapters != cfg.adapters {
            return Err(Error::Config(
                "checkpoint adapter config disagrees with the run config".into(),
            ));
        }
        if self.manifest.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was produced with seed {}, run config has {}",
                self.manifest.seed, cfg.seed
            )));
        }
        Ok(())
    }
}

/// Base pretraining seed derived from the run seed.
pub fn base_seed(seed: u64) -> u64 {
    Rng::new(seed).split("base").state()
}

/// The seed the frozen base is actually built from: the configured fixed
/// foundation seed when present, otherwise derived from the run seed.
pub fn effective_base_seed(cfg: &ModelConfig, run_seed: u64) -> u64 {
    cfg.base_seed.unwrap_or_else(|| base_seed(run_seed))
}
