//! Train-K by eval-K grid. Each case is rolled out once at the largest
//! eval-K; smaller eval-Ks score the leading trajectories of that set, so
//! the query sets are nested.

use serde::{Deserialize, Serialize};

use super::head::TaskHead;
use super::protocol::{build_case, run_case, EvalConfig, Horizon};
use super::rollout::{QuerySource, WorldModel};
use super::score::{score_best, score_mean};
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::synthworld::VideoSequence;
use crate::tokenizer::Tokenizer;
use crate::toyvfm::FeatureSequence;

/// Scores averaged over sequences for one (train-K, eval-K, horizon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub train_k: usize,
    pub eval_k: usize,
    pub horizon: Horizon,
    pub n: usize,
    pub best_feature_loss: f64,
    pub best_miou: f64,
    pub mean_feature_loss: f64,
    pub mean_miou: f64,
}

impl SweepCell {
    pub const CSV_HEADER: &'static str =
        "train_k,eval_k,horizon,n,best_feature_loss,best_miou,mean_feature_loss,mean_miou";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.8e},{:.6},{:.8e},{:.6}",
            self.train_k,
            self.eval_k,
            self.horizon.as_str(),
            self.n,
            self.best_feature_loss,
            self.best_miou,
            self.mean_feature_loss,
            self.mean_miou
        )
    }
}

/// Score one model at every eval-K. Fails if the best feature loss of any
/// case increases with K.
#[allow(clippy::too_many_arguments)]
pub fn eval_k_curve(
    model: &WorldModel<'_>,
    train_k: usize,
    sequences: &[VideoSequence],
    features: &[FeatureSequence],
    head: &TaskHead,
    cfg: &EvalConfig,
    queries: &QuerySource,
    eval_ks: &[usize],
    patch: usize,
) -> Result<Vec<SweepCell>> {
    let mut ks = eval_ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let kmax = *ks.last().ok_or_else(|| Error::Config("no eval K values".into()))?;
    if ks[0] == 0 {
        return Err(Error::Config("eval K must be positive".into()));
    }
    let run_cfg = EvalConfig { k: kmax, ..*cfg };
    let mut cells = Vec::new();
    for h in [Horizon::Short, Horizon::Mid] {
        let mut acc = vec![[0.0f64; 4]; ks.len()];
        for (i, (seq, feats)) in sequences.iter().zip(features).enumerate() {
            let case = build_case(i, seq, feats, &run_cfg, h, patch)?;
            let set = run_case(model, &case, &run_cfg, queries)?;
            let mut prev = f64::INFINITY;
            for (j, &k) in ks.iter().enumerate() {
                let sub = set.prefix(k);
                let b = score_best(&sub, &case.truth, head, &case.labels)?;
                let m = score_mean(&sub, &case.truth, head, &case.labels)?;
                if b.feature_loss > prev {
                    return Err(Error::Config(format!(
                        "best feature loss rose from {prev} to {} at eval K {k} on {}",
                        b.feature_loss, case.seq_id
                    )));
                }
                prev = b.feature_loss;
                for (a, v) in acc[j].iter_mut().zip([b.feature_loss, b.miou, m.feature_loss, m.miou]) {
                    *a += v;
                }
            }
        }
        let n = sequences.len().min(features.len());
        for (j, &k) in ks.iter().enumerate() {
            let d = n.max(1) as f64;
            cells.push(SweepCell {
                train_k,
                eval_k: k,
                horizon: h,
                n,
                best_feature_loss: acc[j][0] / d,
                best_miou: acc[j][1] / d,
                mean_feature_loss: acc[j][2] / d,
                mean_miou: acc[j][3] / d,
            });
        }
    }
    Ok(cells)
}

/// Train one model per train-K with `train` and score each at every eval-K.
#[allow(clippy::too_many_arguments)]
pub fn sweep_k(
    train_ks: &[usize],
    eval_ks: &[usize],
    mut train: impl FnMut(usize) -> Result<Predictor>,
    tokenizer: Option<&Tokenizer>,
    sequences: &[VideoSequence],
    features: &[FeatureSequence],
    head: &TaskHead,
    cfg: &EvalConfig,
    patch: usize,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &tk in train_ks {
        let p = train(tk)?;
        let model = WorldModel::new(&p, tokenizer)?;
        let qs = QuerySource::noise(p.config.dim, cfg.sigma);
        cells.extend(eval_k_curve(&model, tk, sequences, features, head, cfg, &qs, eval_ks, patch)?);
    }
    Ok(cells)
}
