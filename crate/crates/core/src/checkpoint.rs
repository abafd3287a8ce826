//! Checkpoint container.
//!
//! ```text
//! <dir>/manifest.json    format, version, component, variant, config,
//!                        config hash, seed, step, tensor index per group
//! <dir>/<group>.bin      little-endian f32, tensors back to back in
//!                        manifest order (row-major)
//! ```
//!
//! The config hash is the SHA-256 of the config's compact JSON form (keys
//! sorted). Serialization is deterministic, so load-then-save reproduces the
//! same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::TaskHead;
use crate::nn::{ParamSet, Tensor};
use crate::predictor::{Predictor, PredictorConfig};
use crate::synthworld::dataset::parse_json;
use crate::tokenizer::{Tokenizer, TokenizerConfig};
use crate::toyvfm::{self, FeatureGrid, ToyVfm, ToyVfmConfig};

pub const CHECKPOINT_FORMAT: &str = "deltaworld-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of a value's canonical JSON.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let v = serde_json::to_value(config).expect("config serializes");
    let text = serde_json::to_string(&v).expect("value serializes");
    hex_digest(text.as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    component: String,
    variant: Option<String>,
    config_hash: String,
    seed: u64,
    step: u64,
    config: serde_json::Value,
    groups: BTreeMap<String, Vec<TensorEntry>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    pub variant: Option<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    /// Named tensor groups, e.g. `params` and `optimizer`.
    pub groups: BTreeMap<String, ParamSet<f32>>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(component: &str, variant: Option<&str>, config: &C, seed: u64, step: u64) -> Self {
        Self {
            component: component.to_string(),
            variant: variant.map(str::to_string),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config_hash(config),
            seed,
            step,
            groups: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, name: &str, tensors: ParamSet<f32>) -> Self {
        self.groups.insert(name.to_string(), tensors);
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet<f32>> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` tensors")))
    }

    /// Decode the stored config, first checking it against its hash.
    pub fn config<C: DeserializeOwned + Serialize>(&self) -> Result<C> {
        let c: C = serde_json::from_value(self.config.clone())
            .map_err(|e| Error::Checkpoint(format!("stored config does not decode: {e}")))?;
        let h = config_hash(&c);
        if h != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: manifest says {}, config hashes to {h}",
                self.config_hash
            )));
        }
        Ok(c)
    }

    /// Fail unless this checkpoint was produced for `component` and `config`.
    pub fn expect<C: Serialize>(&self, component: &str, config: &C) -> Result<()> {
        if self.component != component {
            return Err(Error::Checkpoint(format!(
                "expected a {component} checkpoint, found {}",
                self.component
            )));
        }
        let h = config_hash(config);
        if h != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: expected {h}, checkpoint has {}",
                self.config_hash
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut groups = BTreeMap::new();
        for (g, ps) in &self.groups {
            check_name(g)?;
            let mut entries = Vec::with_capacity(ps.len());
            let mut buf = Vec::with_capacity(ps.num_scalars() * 4);
            for (name, p) in ps.iter() {
                entries.push(TensorEntry {
                    name: name.to_string(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    trainable: p.trainable,
                });
                for v in p.value.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            let path = dir.join(format!("{g}.bin"));
            fs::write(&path, &buf).map_err(|e| Error::io(&path, e))?;
            groups.insert(g.clone(), entries);
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            component: self.component.clone(),
            variant: self.variant.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            step: self.step,
            config: self.config.clone(),
            groups,
        };
        let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        text.push(b'\n');
        let path = dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = parse_json(&mpath, &bytes)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint: format `{}`", m.format)));
        }
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                m.version
            )));
        }
        let mut groups = BTreeMap::new();
        for (g, entries) in &m.groups {
            check_name(g)?;
            let path = dir.join(format!("{g}.bin"));
            let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let want: usize = entries.iter().map(|e| e.rows * e.cols * 4).sum();
            if buf.len() != want {
                return Err(Error::Parse {
                    path,
                    offset: buf.len().min(want) as u64,
                    msg: format!("expected {want} bytes, found {}", buf.len()),
                });
            }
            let mut ps = ParamSet::new();
            let mut off = 0;
            for e in entries {
                let n = e.rows * e.cols;
                let data = buf[off..off + n * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                off += n * 4;
                ps.insert(e.name.clone(), Tensor::from_vec(e.rows, e.cols, data), e.trainable);
            }
            groups.insert(g.to_string(), ps);
        }
        Ok(Self {
            component: m.component,
            variant: m.variant,
            config: m.config,
            config_hash: m.config_hash,
            seed: m.seed,
            step: m.step,
            groups,
        })
    }
}

pub const TOKENIZER: &str = "tokenizer";
pub const PREDICTOR: &str = "predictor";
pub const TASK_HEAD: &str = "task-head";

/// Tokenizer weights plus the black frame it was trained against.
pub fn tokenizer_checkpoint(tok: &Tokenizer, seed: u64, step: u64) -> Checkpoint {
    let mut black = ParamSet::new();
    black.insert("tokens", tok.black().tokens.clone(), false);
    Checkpoint::new(TOKENIZER, Some(tok.config.mode.as_str()), &tok.config, seed, step)
        .with_group("params", tok.params.clone())
        .with_group("black", black)
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<Tokenizer> {
    if ck.component != TOKENIZER {
        return Err(Error::Checkpoint(format!("expected a tokenizer checkpoint, found {}", ck.component)));
    }
    let config: TokenizerConfig = ck.config()?;
    let tokens = ck.group("black")?.get("tokens")?.clone();
    let side = (tokens.rows() as f64).sqrt().round() as usize;
    if side * side != tokens.rows() {
        return Err(Error::Checkpoint(format!("black frame has {} patches, not a square grid", tokens.rows())));
    }
    let black = FeatureGrid { h: side, w: side, tokens };
    Tokenizer::from_params(config, ck.group("params")?.clone(), black)
}

pub fn predictor_checkpoint(p: &Predictor, seed: u64, step: u64) -> Checkpoint {
    Checkpoint::new(PREDICTOR, Some(p.config.variant.as_str()), &p.config, seed, step)
        .with_group("params", p.params.clone())
}

pub fn load_predictor(ck: &Checkpoint) -> Result<Predictor> {
    if ck.component != PREDICTOR {
        return Err(Error::Checkpoint(format!("expected a predictor checkpoint, found {}", ck.component)));
    }
    let config: PredictorConfig = ck.config()?;
    Predictor::from_params(config, ck.group("params")?.clone())
}

/// The frozen extractor under its reserved component name.
pub fn vfm_checkpoint(vfm: &ToyVfm) -> Checkpoint {
    let cfg = vfm.config();
    Checkpoint::new(toyvfm::COMPONENT, None, cfg, cfg.seed, 0).with_group("params", vfm.params().clone())
}

pub fn load_vfm(ck: &Checkpoint) -> Result<ToyVfm> {
    if ck.component != toyvfm::COMPONENT {
        return Err(Error::Checkpoint(format!("expected a {} checkpoint, found {}", toyvfm::COMPONENT, ck.component)));
    }
    let config: ToyVfmConfig = ck.config()?;
    ToyVfm::from_params(config, ck.group("params")?.clone())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadManifest<C> {
    num_classes: usize,
    train: C,
}

/// A trained segmentation probe; `train` is whatever configured it.
pub fn head_checkpoint<C: Serialize>(head: &TaskHead, train: &C, seed: u64, step: u64) -> Checkpoint {
    let cfg = HeadManifest {
        num_classes: head.num_classes,
        train,
    };
    Checkpoint::new(TASK_HEAD, None, &cfg, seed, step).with_group("params", head.params().clone())
}

pub fn load_head(ck: &Checkpoint) -> Result<TaskHead> {
    if ck.component != TASK_HEAD {
        return Err(Error::Checkpoint(format!("expected a {TASK_HEAD} checkpoint, found {}", ck.component)));
    }
    let cfg: HeadManifest<serde_json::Value> = ck.config()?;
    TaskHead::from_params(cfg.num_classes, ck.group("params")?.clone())
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(Error::Checkpoint(format!("invalid tensor group name `{name}`")));
    }
    Ok(())
}
