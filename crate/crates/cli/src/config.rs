//! Run configuration: TOML file over built-in defaults, then `--set`
//! overrides. Every section is optional and every key within a section
//! falls back to its default.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use deltaworld::bom::PredictorTrainConfig;
use deltaworld::eval::{EvalConfig, HeadConfig};
use deltaworld::predictor::PredictorConfig;
use deltaworld::synthworld::ScenarioConfig;
use deltaworld::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use deltaworld::toyvfm::ToyVfmConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_sequences: 64,
            test_sequences: 16,
            train_seed: 1,
            test_seed: 999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub train_ks: Vec<usize>,
    pub eval_ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train_ks: vec![1, 4, 16],
            eval_ks: vec![1, 4, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsConfig {
    pub k: u64,
    pub context_frames: Vec<usize>,
    pub rollout_steps: usize,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            k: 20,
            context_frames: vec![4, 5, 6],
            rollout_steps: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for model initialization and training streams.
    pub seed: u64,
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub vfm: ToyVfmConfig,
    pub head: HeadConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TokenizerTrainConfig,
    pub predictor: PredictorConfig,
    pub predictor_train: PredictorTrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            scenario: ScenarioConfig::desk(),
            vfm: ToyVfmConfig::default(),
            head: HeadConfig::default(),
            tokenizer: TokenizerConfig::default(),
            tokenizer_train: TokenizerTrainConfig::default(),
            predictor: PredictorConfig::default(),
            predictor_train: PredictorTrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

impl RunConfig {
    /// SHA-256 of the resolved config, embedded in every artifact.
    pub fn hash(&self) -> String {
        deltaworld::checkpoint::config_hash(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Defaults, overlaid by `file`, overlaid by `sets` (`a.b=value`), in that
/// order.
pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut root = Value::try_from(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| deltaworld::Error::io(path, e))?;
        let table: Table = toml::from_str(&text)
            .map_err(|e| deltaworld::Error::Config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut root, Value::Table(table));
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects key=value, got `{s}`")))?;
        set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
    }
    let cfg: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| deltaworld::Error::Config(e.message().to_string()))?;
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A TOML literal when it parses as one, else a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("bad config key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .with_context(|| UsageError(format!("`{key}`: `{p}` is not a section")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| UsageError(format!("`{key}` does not name a config key")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(resolve(None, &[]).unwrap(), cfg);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 5\n[predictor_train]\nsteps = 7\nk = 3\n").unwrap();
        let cfg = resolve(Some(&path), &["predictor_train.k=9".into(), "eval.anchor=10".into()]).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.predictor_train.steps, 7);
        assert_eq!(cfg.predictor_train.k, 9);
        assert_eq!(cfg.predictor_train.batch_size, PredictorTrainConfig::default().batch_size);
        assert_eq!(cfg.eval.anchor, Some(10));
        let cfg = resolve(None, &["scenario.dynamics=deterministic-drift".into()]).unwrap();
        assert!(!cfg.scenario.dynamics.branches());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, &["predictor.depht=2".into()]).is_err());
        assert!(resolve(None, &["nonsense".into()]).is_err());
        assert!(resolve(None, &["seed.x=1".into()]).is_err());
    }
}
