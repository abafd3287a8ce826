//! Evaluation protocol: a fixed-spacing context ending at the anchor frame,
//! direct prediction for the short horizon and an autoregressive rollout for
//! the mid horizon, scored best / mean against model-free bounds.

use serde::{Deserialize, Serialize};

use super::head::TaskHead;
use super::metrics::patch_labels;
use super::rollout::{rollout, QuerySource, RolloutSet, WorldModel};
use super::score::{copy_last, feature_loss, head_miou, present, score_best, score_mean, Score};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthworld::VideoSequence;
use crate::toyvfm::{FeatureGrid, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Short,
    Mid,
}

impl Horizon {
    pub fn as_str(self) -> &'static str {
        match self {
            Horizon::Short => "short",
            Horizon::Mid => "mid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub context_frames: usize,
    /// Frames between consecutive context frames and between rollout steps.
    pub spacing: usize,
    pub short_steps: usize,
    pub mid_steps: usize,
    pub k: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Last context frame; defaults to each sequence's branch frame.
    pub anchor: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            context_frames: 4,
            spacing: 2,
            short_steps: 1,
            mid_steps: 3,
            k: 20,
            sigma: crate::bom::QUERY_STD,
            seed: 0,
            anchor: None,
        }
    }
}

impl EvalConfig {
    pub fn steps(&self, h: Horizon) -> usize {
        match h {
            Horizon::Short => self.short_steps,
            Horizon::Mid => self.mid_steps,
        }
    }
}

/// Context and ground truth for one sequence at one horizon.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub seq_id: String,
    pub seq_index: usize,
    pub horizon: Horizon,
    pub context: FeatureSequence,
    pub context_frames: Vec<usize>,
    pub target_frames: Vec<usize>,
    pub target_times: Vec<f64>,
    /// Ground-truth features of the last target.
    pub truth: FeatureGrid,
    /// Patch labels of the last target.
    pub labels: Vec<u8>,
}

pub fn build_case(
    seq_index: usize,
    seq: &VideoSequence,
    feats: &FeatureSequence,
    cfg: &EvalConfig,
    horizon: Horizon,
    patch: usize,
) -> Result<EvalCase> {
    if cfg.context_frames == 0 || cfg.spacing == 0 {
        return Err(Error::Config("context_frames and spacing must be positive".into()));
    }
    let anchor = cfg.anchor.unwrap_or_else(|| seq.config.branch_frame());
    let span = (cfg.context_frames - 1) * cfg.spacing;
    let steps = cfg.steps(horizon);
    let last = anchor + steps * cfg.spacing;
    if anchor < span || last >= feats.len() || steps == 0 {
        return Err(Error::OutOfRange(format!(
            "context ending at frame {anchor} with {steps} steps does not fit {} frames",
            feats.len()
        )));
    }
    let context_frames: Vec<usize> = (0..cfg.context_frames).map(|i| anchor - span + i * cfg.spacing).collect();
    let target_frames: Vec<usize> = (1..=steps).map(|s| anchor + s * cfg.spacing).collect();
    let context = FeatureSequence {
        grids: context_frames.iter().map(|&f| feats.grids[f].clone()).collect(),
        timestamps: context_frames.iter().map(|&f| feats.timestamps[f]).collect(),
    };
    let nc = seq.config.num_classes();
    Ok(EvalCase {
        seq_id: seq.id.clone(),
        seq_index,
        horizon,
        context,
        target_times: target_frames.iter().map(|&f| feats.timestamps[f]).collect(),
        truth: feats.grids[last].clone(),
        labels: patch_labels(seq.label(last), seq.frame_size(), patch, nc),
        context_frames,
        target_frames,
    })
}

/// Rollout seed for a case: nested in K, shared across models.
pub fn case_seed(cfg: &EvalConfig, case: &EvalCase) -> u64 {
    seed::derive(&[cfg.seed, case.seq_index as u64, case.horizon as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seq_id: String,
    pub horizon: Horizon,
    pub k: usize,
    pub best: Score,
    pub mean: Score,
    pub copy_last: Score,
    pub present: f64,
    /// `(final feature loss, mIoU)` per sample.
    pub samples: Vec<(f64, f64)>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "seq_id,horizon,k,best_miou,best_feature_loss,best_index,mean_miou,mean_feature_loss,copy_last_miou,copy_last_feature_loss,present_miou";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.8e},{},{:.6},{:.8e},{:.6},{:.8e},{:.6}",
            self.seq_id,
            self.horizon.as_str(),
            self.k,
            self.best.miou,
            self.best.feature_loss,
            self.best.index.unwrap_or(0),
            self.mean.miou,
            self.mean.feature_loss,
            self.copy_last.miou,
            self.copy_last.feature_loss,
            self.present
        )
    }
}

/// Score a finished rollout set against a case.
pub fn score_case(set: &RolloutSet, case: &EvalCase, head: &TaskHead) -> Result<MetricsRow> {
    let samples = set
        .final_grids()
        .iter()
        .map(|g| Ok((feature_loss(g, &case.truth)?, head_miou(head, g, &case.labels)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsRow {
        seq_id: case.seq_id.clone(),
        horizon: case.horizon,
        k: set.k(),
        best: score_best(set, &case.truth, head, &case.labels)?,
        mean: score_mean(set, &case.truth, head, &case.labels)?,
        copy_last: copy_last(case.context.grids.last().unwrap(), &case.truth, head, &case.labels)?,
        present: present(&case.truth, head, &case.labels)?,
        samples,
    })
}

pub fn run_case(
    model: &WorldModel<'_>,
    case: &EvalCase,
    cfg: &EvalConfig,
    queries: &QuerySource,
) -> Result<RolloutSet> {
    rollout(model, &case.context, &case.target_times, cfg.k, queries, case_seed(cfg, case))
}

/// Aggregate over rows of one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub best_miou: f64,
    pub best_feature_loss: f64,
    pub mean_miou: f64,
    pub mean_feature_loss: f64,
    pub copy_last_miou: f64,
    pub copy_last_feature_loss: f64,
    pub present_miou: f64,
}

pub fn summarize(rows: &[&MetricsRow]) -> Summary {
    let n = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    Summary {
        n: rows.len(),
        best_miou: avg(&|r| r.best.miou),
        best_feature_loss: avg(&|r| r.best.feature_loss),
        mean_miou: avg(&|r| r.mean.miou),
        mean_feature_loss: avg(&|r| r.mean.feature_loss),
        copy_last_miou: avg(&|r| r.copy_last.miou),
        copy_last_feature_loss: avg(&|r| r.copy_last.feature_loss),
        present_miou: avg(&|r| r.present),
    }
}

/// Evaluate a model on every sequence at both horizons.
pub fn evaluate(
    model: &WorldModel<'_>,
    sequences: &[VideoSequence],
    features: &[FeatureSequence],
    head: &TaskHead,
    cfg: &EvalConfig,
    queries: &QuerySource,
    patch: usize,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, (seq, feats)) in sequences.iter().zip(features).enumerate() {
        for h in [Horizon::Short, Horizon::Mid] {
            let case = build_case(i, seq, feats, cfg, h, patch)?;
            let set = run_case(model, &case, cfg, queries)?;
            rows.push(score_case(&set, &case, head)?);
        }
    }
    Ok(rows)
}
