//! K-sample autoregressive rollouts.
//!
//! Trajectory `i` draws a fresh query at every step `s` from the stream
//! `derive(base_seed, i, s)`, so a trajectory never depends on how many
//! others run beside it and the sample sets for increasing `K` are nested.

use crate::bom::sample_queries;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::predictor::{PredItem, PredQuery, Predictor, Variant};
use crate::seed;
use crate::tokenizer::Tokenizer;
use crate::toyvfm::{FeatureGrid, FeatureSequence};

/// Predictor plus the tokenizer its variant needs.
#[derive(Clone, Copy)]
pub struct WorldModel<'a> {
    pub predictor: &'a Predictor,
    pub tokenizer: Option<&'a Tokenizer>,
}

impl<'a> WorldModel<'a> {
    pub fn new(predictor: &'a Predictor, tokenizer: Option<&'a Tokenizer>) -> Result<Self> {
        match (predictor.config.variant.tokenizer_mode(), tokenizer) {
            (None, _) => {}
            (Some(mode), Some(t)) if t.config.mode == mode => {}
            (Some(mode), _) => {
                return Err(Error::Config(format!(
                    "{} predictor needs a {} tokenizer",
                    predictor.config.variant.as_str(),
                    mode.as_str()
                )))
            }
        }
        Ok(Self { predictor, tokenizer })
    }

    pub fn variant(&self) -> Variant {
        self.predictor.config.variant
    }

    /// Context representations: grids, frame tokens, or delta tokens with
    /// the black frame before the first grid.
    pub fn encode_context(&self, context: &FeatureSequence) -> Result<Vec<Tensor<f32>>> {
        match (self.variant(), self.tokenizer) {
            (Variant::Spatial, _) => Ok(context.grids.iter().map(|g| g.tokens.clone()).collect()),
            (_, Some(tok)) => Ok(tok.encode_sequence(context)?.into_iter().map(|t| t.value).collect()),
            _ => unreachable!("checked at construction"),
        }
    }
}

/// Where queries come from: `N(mu, sigma² I)`. Discriminative models use
/// their learned query with `sigma = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySource {
    pub mu: Tensor<f32>,
    pub sigma: f64,
}

impl QuerySource {
    pub fn learned(p: &Predictor) -> Self {
        Self {
            mu: p.learned_query().clone(),
            sigma: 0.0,
        }
    }

    pub fn noise(dim: usize, sigma: f64) -> Self {
        Self {
            mu: Tensor::zeros(1, dim),
            sigma,
        }
    }

    pub fn query(&self, base_seed: u64, trajectory: usize, step: usize) -> Result<Tensor<f32>> {
        let s = seed::derive(&[base_seed, trajectory as u64, step as u64]);
        Ok(sample_queries(1, &self.mu, self.sigma, s)?.queries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub queries: Vec<Tensor<f32>>,
    /// Predicted representation per step (`[m, dim]`).
    pub tokens: Vec<Tensor<f32>>,
    /// Decoded feature grid per step.
    pub grids: Vec<FeatureGrid>,
}

impl Trajectory {
    pub fn final_grid(&self) -> &FeatureGrid {
        self.grids.last().expect("at least one step")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSet {
    pub context: FeatureSequence,
    pub target_times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl RolloutSet {
    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn final_grids(&self) -> Vec<&FeatureGrid> {
        self.trajectories.iter().map(|t| t.final_grid()).collect()
    }

    /// The first `k` trajectories (the nested subset for a smaller `K`).
    pub fn prefix(&self, k: usize) -> RolloutSet {
        RolloutSet {
            context: self.context.clone(),
            target_times: self.target_times.clone(),
            trajectories: self.trajectories[..k.min(self.k())].to_vec(),
        }
    }
}

/// Roll trajectories `ids` forward through `target_times`, each step
/// appending a trajectory's own prediction to its own context.
pub fn rollout_ids(
    model: &WorldModel<'_>,
    context: &FeatureSequence,
    target_times: &[f64],
    ids: &[usize],
    queries: &QuerySource,
    base_seed: u64,
) -> Result<RolloutSet> {
    if context.is_empty() {
        return Err(Error::Config("empty rollout context".into()));
    }
    if target_times.is_empty() || target_times[0] <= *context.timestamps.last().unwrap() {
        return Err(Error::Config("target times must follow the context".into()));
    }
    let side = context.grids[0].h;
    let ctx = model.encode_context(context)?;
    let k = ids.len();
    let mut tokens: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
    let mut grids: Vec<Vec<FeatureGrid>> = vec![Vec::new(); k];
    let mut used: Vec<Vec<Tensor<f32>>> = vec![Vec::new(); k];
    let last = context.grids.last().unwrap();
    for (s, &tau) in target_times.iter().enumerate() {
        let mut qs = Vec::with_capacity(k);
        for (j, &id) in ids.iter().enumerate() {
            let q = queries.query(base_seed, id, s)?;
            used[j].push(q.clone());
            qs.push(q);
        }
        let mut times = context.timestamps.clone();
        times.extend_from_slice(&target_times[..s]);
        let stacks: Vec<Tensor<f32>> = (0..k)
            .map(|j| {
                let mut parts: Vec<&Tensor<f32>> = ctx.iter().collect();
                parts.extend(tokens[j].iter());
                Tensor::vstack(&parts)
            })
            .collect();
        let items: Vec<PredItem<'_, f32>> = stacks
            .iter()
            .enumerate()
            .map(|(j, c)| PredItem {
                context: c,
                times: &times,
                queries: vec![PredQuery {
                    ctx_len: times.len(),
                    time: tau,
                    query: j,
                }],
            })
            .collect();
        let q = Tensor::vstack(&qs.iter().collect::<Vec<_>>());
        let preds = model.predictor.predict_batch(side, &items, &q)?;
        for (j, p) in preds.iter().enumerate() {
            if !p.all_finite() {
                return Err(Error::NonFinite {
                    trajectory: ids[j],
                    msg: format!("prediction at step {s} is not finite"),
                });
            }
        }
        let decoded: Vec<FeatureGrid> = match (model.variant(), model.tokenizer) {
            (Variant::Spatial, _) => preds
                .iter()
                .map(|p| FeatureGrid {
                    h: side,
                    w: side,
                    tokens: p.clone(),
                })
                .collect(),
            (Variant::Frame, Some(tok)) => {
                let zero = FeatureGrid::zeros(side, side, last.dim());
                let bases = vec![&zero; k];
                tok.decode_batch(&bases, &preds.iter().collect::<Vec<_>>())?
            }
            (Variant::Delta, Some(tok)) => {
                let bases: Vec<&FeatureGrid> = (0..k).map(|j| grids[j].last().unwrap_or(last)).collect();
                tok.decode_batch(&bases, &preds.iter().collect::<Vec<_>>())?
            }
            _ => unreachable!("checked at construction"),
        };
        for (j, (p, g)) in preds.into_iter().zip(decoded).enumerate() {
            if !g.tokens.all_finite() {
                return Err(Error::NonFinite {
                    trajectory: ids[j],
                    msg: format!("decoded grid at step {s} is not finite"),
                });
            }
            tokens[j].push(p);
            grids[j].push(g);
        }
    }
    let trajectories = ids
        .iter()
        .enumerate()
        .map(|(j, &id)| Trajectory {
            id,
            queries: std::mem::take(&mut used[j]),
            tokens: std::mem::take(&mut tokens[j]),
            grids: std::mem::take(&mut grids[j]),
        })
        .collect();
    Ok(RolloutSet {
        context: context.clone(),
        target_times: target_times.to_vec(),
        trajectories,
    })
}

/// Trajectories `0..k`.
pub fn rollout(
    model: &WorldModel<'_>,
    context: &FeatureSequence,
    target_times: &[f64],
    k: usize,
    queries: &QuerySource,
    base_seed: u64,
) -> Result<RolloutSet> {
    if k == 0 {
        return Err(Error::Config("rollout needs K >= 1".into()));
    }
    let ids: Vec<usize> = (0..k).collect();
    rollout_ids(model, context, target_times, &ids, queries, base_seed)
}
