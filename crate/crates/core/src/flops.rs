//! Closed-form multiply-accumulate (MAC) accounting.
//!
//! Convention: only dense matmuls count. For a block over `n` tokens of
//! width `D` with MLP hidden width `F` and `P` allowed attention pairs:
//!
//! ```text
//! projections  4 · n · D²      (q, k, v, output)
//! mlp          2 · n · D · F
//! attention    2 · P · D       (scores q·k and the probability-weighted sum)
//! ```
//!
//! Softmax, normalization, activations, rotary rotations and residual adds
//! are excluded. One MAC is two FLOPs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BlockConfig, Tensor};
use crate::predictor::{PredItem, PredQuery, Predictor, PredictorConfig, Variant};
use crate::tokenizer::{Tokenizer, TokenizerConfig, TokenizerMode};
use crate::toyvfm::{FeatureGrid, ToyVfm, ToyVfmConfig};

/// MACs of one block under a mask with `pairs` allowed (query, key) pairs.
pub fn count_block_pairs(cfg: &BlockConfig, n: usize, pairs: u64) -> u64 {
    let (n, d, f) = (n as u64, cfg.dim as u64, cfg.hidden() as u64);
    4 * n * d * d + 2 * n * d * f + 2 * pairs * d
}

/// MACs of one block with full attention over `seq_len` tokens.
pub fn count_block(cfg: &BlockConfig, seq_len: usize) -> u64 {
    count_block_pairs(cfg, seq_len, (seq_len * seq_len) as u64)
}

/// Encoder MACs for one frame (frame mode) or one frame pair (delta mode).
/// Every encoder row attends to all rows of its own item.
pub fn encoder_macs(cfg: &TokenizerConfig, side: usize) -> u64 {
    let frames = match cfg.mode {
        TokenizerMode::Frame => 1,
        TokenizerMode::Delta => 2,
    };
    let n = frames * side * side + 1;
    count_block(&cfg.block(), n) * cfg.enc_depth as u64
}

/// Decoder MACs for one token: the base grid plus one slot, fully connected.
pub fn decoder_macs(cfg: &TokenizerConfig, side: usize) -> u64 {
    count_block(&cfg.block(), side * side + 1) * cfg.dec_depth as u64
}

/// Predictor MACs for one sample's prediction from `ctx_len` context frames.
///
/// With `m` tokens per frame, context frame `f` (1-based) attends to the
/// `f·m` tokens up to and including itself and each of the `m` query rows
/// sees all `ctx_len·m` context tokens plus itself. The whole context is
/// recomputed at every step.
pub fn predictor_step_macs(cfg: &PredictorConfig, side: usize, ctx_len: usize) -> u64 {
    let (m, l, d) = (cfg.tokens_per_frame(side) as u64, ctx_len as u64, cfg.dim as u64);
    let rows = (l + 1) * m;
    let pairs = m * m * l * (l + 1) / 2 + m * (l * m + 1);
    let blocks = count_block_pairs(&cfg.block(), rows as usize, pairs) * cfg.depth as u64;
    let proj = l * m * d * d + m * d * d;
    blocks + proj
}

/// Backbone MACs for one frame: patch embedding plus full attention blocks.
pub fn backbone_macs(cfg: &ToyVfmConfig, side: usize) -> u64 {
    let n = (side * side) as u64;
    let p = cfg.patch_size as u64;
    n * p * p * 3 * cfg.dim as u64 + count_block(&cfg.block(), side * side) * cfg.depth as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub frame_size: usize,
    pub vfm: ToyVfmConfig,
    pub tokenizer: TokenizerConfig,
    pub predictor: PredictorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frame_size: 32,
            vfm: ToyVfmConfig::default(),
            tokenizer: TokenizerConfig::default(),
            predictor: PredictorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn side(&self) -> Result<usize> {
        let p = self.vfm.patch_size;
        if p == 0 || self.frame_size == 0 || self.frame_size % p != 0 {
            return Err(Error::Config(format!(
                "frame size {} is not a multiple of patch size {p}",
                self.frame_size
            )));
        }
        Ok(self.frame_size / p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    SharedOnce,
    PerSample,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::SharedOnce => "shared-once",
            Group::PerSample => "per-sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub component: String,
    pub group: Group,
    /// Applications within the group (per context frame, or per step).
    pub calls: u64,
    pub macs_each: u64,
}

impl FlopsRow {
    pub fn macs(&self) -> u64 {
        self.calls * self.macs_each
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: Variant,
    pub k: u64,
    pub context_frames: usize,
    pub rollout_steps: usize,
    pub rows: Vec<FlopsRow>,
}

impl FlopsReport {
    pub fn group_macs(&self, group: Group) -> u64 {
        self.rows.iter().filter(|r| r.group == group).map(FlopsRow::macs).sum()
    }

    pub fn shared_macs(&self) -> u64 {
        self.group_macs(Group::SharedOnce)
    }

    /// MACs of one sample's full rollout.
    pub fn per_sample_macs(&self) -> u64 {
        self.group_macs(Group::PerSample)
    }

    pub fn total_macs(&self) -> u64 {
        self.shared_macs() + self.k * self.per_sample_macs()
    }

    /// Summed MACs of rows whose component starts with `prefix`.
    pub fn component_macs(&self, prefix: &str) -> u64 {
        self.rows.iter().filter(|r| r.component.starts_with(prefix)).map(FlopsRow::macs).sum()
    }

    pub const CSV_HEADER: &'static str = "variant,k,context_frames,rollout_steps,component,group,calls,macs_each,macs,flops";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let mut line = |component: &str, group: &str, calls: u64, each: u64, macs: u64| {
            out.push_str(&format!(
                "{},{},{},{},{component},{group},{calls},{each},{macs},{}\n",
                self.variant.as_str(),
                self.k,
                self.context_frames,
                self.rollout_steps,
                2 * macs
            ));
        };
        for r in &self.rows {
            line(&r.component, r.group.as_str(), r.calls, r.macs_each, r.macs());
        }
        line("shared-once total", "total", 1, self.shared_macs(), self.shared_macs());
        line("per-sample total", "total", self.k, self.per_sample_macs(), self.k * self.per_sample_macs());
        line("total", "total", 1, self.total_macs(), self.total_macs());
        out
    }

    /// Aligned text table with MACs and FLOPs columns.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} variant, K={}, {} context frames, {} rollout steps\n{:<28} {:<12} {:>6} {:>14} {:>14} {:>14}\n",
            self.variant.as_str(),
            self.k,
            self.context_frames,
            self.rollout_steps,
            "component",
            "group",
            "calls",
            "MACs each",
            "MACs",
            "FLOPs"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:<12} {:>6} {:>14} {:>14} {:>14}\n",
                r.component,
                r.group.as_str(),
                r.calls,
                r.macs_each,
                r.macs(),
                2 * r.macs()
            ));
        }
        let (s, p, t) = (self.shared_macs(), self.per_sample_macs(), self.total_macs());
        out.push_str(&format!("{:<28} {:<12} {:>6} {:>14} {:>14} {:>14}\n", "shared once", "", 1, s, s, 2 * s));
        out.push_str(&format!("{:<28} {:<12} {:>6} {:>14} {:>14} {:>14}\n", "per sample", "", self.k, p, self.k * p, 2 * self.k * p));
        out.push_str(&format!("{:<28} {:<12} {:>6} {:>14} {:>14} {:>14}\n", "total", "", "", "", t, 2 * t));
        out
    }
}

/// Inference cost of `k` rollouts of `rollout_steps` steps from
/// `context_frames` observed frames. The backbone and tokenizer encoder run
/// once per context frame; each sample runs the predictor and (for token
/// variants) the decoder once per step.
pub fn pipeline_breakdown(
    variant: Variant,
    k: u64,
    context_frames: usize,
    rollout_steps: usize,
    config: &PipelineConfig,
) -> Result<FlopsReport> {
    if context_frames == 0 {
        return Err(Error::Config("at least one context frame is required".into()));
    }
    let side = config.side()?;
    let pc = PredictorConfig { variant, ..config.predictor };
    let mut rows = vec![FlopsRow {
        component: "backbone".into(),
        group: Group::SharedOnce,
        calls: context_frames as u64,
        macs_each: backbone_macs(&config.vfm, side),
    }];
    let tc = variant.tokenizer_mode().map(|mode| TokenizerConfig { mode, ..config.tokenizer });
    if let Some(tc) = &tc {
        rows.push(FlopsRow {
            component: format!("{} encoder", tc.mode.as_str()),
            group: Group::SharedOnce,
            calls: context_frames as u64,
            macs_each: encoder_macs(tc, side),
        });
    }
    for s in 0..rollout_steps {
        let ctx = context_frames + s;
        rows.push(FlopsRow {
            component: format!("predictor ({ctx}-frame context)"),
            group: Group::PerSample,
            calls: 1,
            macs_each: predictor_step_macs(&pc, side, ctx),
        });
        if let Some(tc) = &tc {
            rows.push(FlopsRow {
                component: format!("{} decoder (step {})", tc.mode.as_str(), s + 1),
                group: Group::PerSample,
                calls: 1,
                macs_each: decoder_macs(tc, side),
            });
        }
    }
    Ok(FlopsReport {
        variant,
        k,
        context_frames,
        rollout_steps,
        rows,
    })
}

/// Analytic against instrumented count for one component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterCheck {
    pub component: String,
    pub analytic: u64,
    pub instrumented: u64,
}

impl CounterCheck {
    pub fn matches(&self) -> bool {
        self.analytic == self.instrumented
    }
}

/// Run each component once on zero inputs with freshly initialized weights
/// and compare the graph's recorded MACs with the closed forms.
pub fn verify_against_counter(variant: Variant, ctx_len: usize, config: &PipelineConfig) -> Result<Vec<CounterCheck>> {
    let side = config.side()?;
    let mut out = Vec::new();
    let vfm = ToyVfm::new(config.vfm)?;
    let frame = vec![0.0f32; config.frame_size * config.frame_size * 3];
    out.push(CounterCheck {
        component: "backbone".into(),
        analytic: backbone_macs(&config.vfm, side),
        instrumented: vfm.count_macs(&[&frame], config.frame_size)?,
    });
    let d = config.predictor.dim;
    let zero = FeatureGrid::zeros(side, side, config.tokenizer.dim);
    if let Some(mode) = variant.tokenizer_mode() {
        let tc = TokenizerConfig { mode, ..config.tokenizer };
        let tok = Tokenizer::new(tc, 0, zero.clone())?;
        out.push(CounterCheck {
            component: format!("{} encoder", mode.as_str()),
            analytic: encoder_macs(&tc, side),
            instrumented: tok.count_encoder_macs(&zero)?,
        });
        out.push(CounterCheck {
            component: format!("{} decoder", mode.as_str()),
            analytic: decoder_macs(&tc, side),
            instrumented: tok.count_decoder_macs(&zero)?,
        });
    }
    let pc = PredictorConfig { variant, ..config.predictor };
    let p = Predictor::new(pc, 0)?;
    let m = pc.tokens_per_frame(side);
    let context = Tensor::zeros(ctx_len * m, d);
    let times: Vec<f64> = (0..ctx_len).map(|i| i as f64).collect();
    let item = PredItem {
        context: &context,
        times: &times,
        queries: vec![PredQuery {
            ctx_len,
            time: ctx_len as f64,
            query: 0,
        }],
    };
    out.push(CounterCheck {
        component: format!("predictor ({ctx_len}-frame context)"),
        analytic: predictor_step_macs(&pc, side, ctx_len),
        instrumented: p.count_macs(side, &[item], &Tensor::zeros(1, d))?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sequence_costs_nothing() {
        assert_eq!(count_block(&BlockConfig::default(), 0), 0);
    }

    #[test]
    fn attention_term_is_quadratic() {
        let c = BlockConfig::default();
        for n in [1, 4, 16, 64] {
            assert!(count_block(&c, 2 * n) > 2 * count_block(&c, n));
        }
    }

    #[test]
    fn tiny_config_by_hand() {
        // D=4, one head, hidden 16, two tokens attending to both
        let c = BlockConfig {
            dim: 4,
            heads: 1,
            mlp_ratio: 4.0,
        };
        // q,k,v,o: 4 matmuls of [2x4]x[4x4] = 4 * 32
        let proj = 4 * (2 * 4 * 4);
        // fc1 [2x4]x[4x16] and fc2 [2x16]x[16x4]
        let mlp = 2 * 4 * 16 + 2 * 16 * 4;
        // scores [2x4]x[4x2] and weighted sum [2x2]x[2x4]
        let attn = 2 * 4 * 2 + 2 * 2 * 4;
        assert_eq!(count_block(&c, 2), (proj + mlp + attn) as u64);
    }
}
