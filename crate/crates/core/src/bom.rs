//! Best-of-many training: K noise queries give K candidates per target, only
//! the closest one is supervised.
//!
//! A step runs two passes. Pass 1 has no gradient tape and scores every
//! candidate of every target; `k*` is picked per target. Pass 2 re-runs only
//! the selected queries with gradients, so nothing flows through the others.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{smooth_l1_value, AdamW, Graph, OptimConfig, ParamSet, Real, StepStats, Tensor};
use crate::predictor::{
    predictor_graph, sample_training_timestamps, PredItem, PredQuery, Predictor, PredictorConfig, TokenCache,
};
use crate::sampling::OffsetRange;
use crate::seed;

pub const QUERY_STD: f64 = 0.02;
pub const SMOOTH_L1_BETA: f64 = 0.1;

/// `K` query vectors drawn i.i.d. from `N(mu, sigma² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank {
    pub queries: Tensor<f32>,
    pub mu: Tensor<f32>,
    pub sigma: f64,
    pub seed: u64,
}

impl QueryBank {
    pub fn k(&self) -> usize {
        self.queries.rows()
    }
}

pub fn sample_queries(k: usize, mu: &Tensor<f32>, sigma: f64, seed: u64) -> Result<QueryBank> {
    if k == 0 {
        return Err(Error::Config("a query bank needs K >= 1".into()));
    }
    if mu.rows() != 1 || !(sigma >= 0.0) {
        return Err(Error::Config("mu must be one row and sigma non-negative".into()));
    }
    let d = mu.cols();
    let mut rng = seed::rng(&[seed]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let queries = Tensor::from_fn(k, d, |_, c| {
        let e: f64 = normal.sample(&mut rng);
        (mu.data()[c] as f64 + sigma * e) as f32
    });
    Ok(QueryBank {
        queries,
        mu: mu.clone(),
        sigma,
        seed,
    })
}

/// Index and loss of the candidate closest to `target`; ties go to the
/// lowest index.
pub fn bom_select<C, L: Real>(candidates: &[C], target: &C, loss: impl Fn(&C, &C) -> L) -> Result<(usize, L)> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to select from".into()));
    }
    let mut best = (0, L::infinity());
    for (k, c) in candidates.iter().enumerate() {
        let l = loss(c, target);
        if !l.is_finite() {
            return Err(Error::NonFinite {
                trajectory: k,
                msg: format!("candidate loss is {l}"),
            });
        }
        if l < best.1 {
            best = (k, l);
        }
    }
    Ok(best)
}

/// One supervised prediction: from context frames `0..ctx_len`, at `time`.
#[derive(Debug, Clone)]
pub struct BomTarget<T> {
    pub ctx_len: usize,
    pub time: f64,
    /// `[m, dim]`.
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BomItem<T> {
    pub context: Tensor<T>,
    pub times: Vec<f64>,
    pub targets: Vec<BomTarget<T>>,
}

impl<T: Real> BomItem<T> {
    fn pred_item(&self, query: impl Fn(usize) -> usize) -> PredItem<'_, T> {
        PredItem {
            context: &self.context,
            times: &self.times,
            queries: self
                .targets
                .iter()
                .enumerate()
                .map(|(j, t)| PredQuery {
                    ctx_len: t.ctx_len,
                    time: t.time,
                    query: query(j),
                })
                .collect(),
        }
    }

    fn stacked_targets(&self) -> Tensor<T> {
        let refs: Vec<&Tensor<T>> = self.targets.iter().map(|t| &t.value).collect();
        Tensor::vstack(&refs)
    }
}

/// Pass-1 result, flattened over (item, target).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub selected: Vec<usize>,
    pub min_loss: Vec<f64>,
    pub mean_loss: Vec<f64>,
}

impl Selection {
    /// Mean of the per-target minima.
    pub fn l_bom(&self) -> f64 {
        self.min_loss.iter().sum::<f64>() / self.min_loss.len().max(1) as f64
    }

    /// Mean over targets of the per-target candidate average.
    pub fn mean_candidate_loss(&self) -> f64 {
        self.mean_loss.iter().sum::<f64>() / self.mean_loss.len().max(1) as f64
    }

    pub fn histogram(&self, k: usize) -> Vec<u32> {
        let mut h = vec![0; k];
        for &s in &self.selected {
            h[s] += 1;
        }
        h
    }
}

/// Entropy (nats) of an index histogram.
pub fn index_entropy(hist: &[u32]) -> f64 {
    let n: u32 = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn check_banks<T: Real>(items: &[BomItem<T>], banks: &[Tensor<T>]) -> Result<usize> {
    if items.len() != banks.len() || banks.is_empty() {
        return Err(Error::Config("one query bank per item required".into()));
    }
    let k = banks[0].rows();
    if k == 0 || banks.iter().any(|b| b.rows() != k) {
        return Err(Error::Config("query banks must share K >= 1".into()));
    }
    Ok(k)
}

/// Pass 1: score all `K` candidates of every target without a tape.
pub fn bom_select_pass<T: Real>(
    params: &ParamSet<T>,
    cfg: &PredictorConfig,
    side: usize,
    items: &[BomItem<T>],
    banks: &[Tensor<T>],
    beta: T,
) -> Result<Selection> {
    let k = check_banks(items, banks)?;
    let mut g = Graph::no_grad();
    let p = g.bind(params);
    let q = g.constant(Tensor::vstack(&banks.iter().collect::<Vec<_>>()));
    let m = cfg.tokens_per_frame(side);
    let pred_items: Vec<PredItem<'_, T>> = items
        .iter()
        .enumerate()
        .map(|(a, it)| {
            let mut pi = it.pred_item(|_| 0);
            pi.queries = it
                .targets
                .iter()
                .flat_map(|t| {
                    (0..k).map(move |kk| PredQuery {
                        ctx_len: t.ctx_len,
                        time: t.time,
                        query: a * k + kk,
                    })
                })
                .collect();
            pi
        })
        .collect();
    let y = predictor_graph(&mut g, &p, cfg, side, &pred_items, q)?;
    let out = g.value(y);
    let mut sel = Selection {
        selected: Vec::new(),
        min_loss: Vec::new(),
        mean_loss: Vec::new(),
    };
    let mut row = 0;
    for it in items {
        for t in &it.targets {
            let losses: Vec<f64> = (0..k)
                .map(|kk| {
                    let r = row + kk * m;
                    let l = smooth_l1_value(&out.data()[r * cfg.dim..(r + m) * cfg.dim], t.value.data(), beta);
                    l.to_f64().unwrap_or(f64::NAN)
                })
                .collect();
            let (best, min) = bom_select(&losses, &0.0, |l, _| *l)?;
            sel.selected.push(best);
            sel.min_loss.push(min);
            sel.mean_loss.push(losses.iter().sum::<f64>() / k as f64);
            row += k * m;
        }
    }
    Ok(sel)
}

#[allow(clippy::too_many_arguments)]
/// Pass-2 loss: mean smooth-L1 of the selected candidates. `q` holds the
/// stacked banks (item `a`, query `k` at row `a·K + k`).
pub fn bom_loss_graph<T: Real>(
    g: &mut Graph<T>,
    p: &crate::nn::Bound,
    cfg: &PredictorConfig,
    side: usize,
    items: &[BomItem<T>],
    q: crate::nn::Var,
    k: usize,
    selected: &[usize],
    beta: T,
) -> Result<crate::nn::Var> {
    let mut offset = 0;
    let mut pred_items = Vec::with_capacity(items.len());
    for (a, it) in items.iter().enumerate() {
        let sel = &selected[offset..offset + it.targets.len()];
        pred_items.push(it.pred_item(|j| a * k + sel[j]));
        offset += it.targets.len();
    }
    let y = predictor_graph(g, p, cfg, side, &pred_items, q)?;
    let targets: Vec<Tensor<T>> = items.iter().map(|it| it.stacked_targets()).collect();
    let t = g.constant(Tensor::vstack(&targets.iter().collect::<Vec<_>>()));
    g.smooth_l1(y, t, beta)
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Value of the differentiated loss.
    pub loss: T,
    pub selection: Selection,
    pub grads: BTreeMap<String, Tensor<T>>,
    /// Gradient with respect to the stacked query banks.
    pub query_grads: Tensor<T>,
}

/// Both passes of one best-of-many step.
pub fn bom_training_step<T: Real>(
    params: &ParamSet<T>,
    cfg: &PredictorConfig,
    side: usize,
    items: &[BomItem<T>],
    banks: &[Tensor<T>],
    beta: T,
) -> Result<StepOutput<T>> {
    let k = check_banks(items, banks)?;
    let selection = bom_select_pass(params, cfg, side, items, banks, beta)?;
    let mut g = Graph::new();
    let p = g.bind(params);
    let q = g.input(Tensor::vstack(&banks.iter().collect::<Vec<_>>()));
    let l = bom_loss_graph(&mut g, &p, cfg, side, items, q, k, &selection.selected, beta)?;
    let loss = g.value(l).item();
    let grads = g.backward(l)?;
    let query_grads = grads.get(q).cloned().unwrap_or_else(|| Tensor::zeros(g.value(q).rows(), cfg.dim));
    Ok(StepOutput {
        loss,
        selection,
        grads: grads.into_named(),
        query_grads,
    })
}

/// A plain regression step driven by the learned `query` parameter.
pub fn discriminative_step<T: Real>(
    params: &ParamSet<T>,
    cfg: &PredictorConfig,
    side: usize,
    items: &[BomItem<T>],
    beta: T,
) -> Result<StepOutput<T>> {
    let n: usize = items.iter().map(|i| i.targets.len()).sum();
    let mut g = Graph::new();
    let p = g.bind(params);
    let q = p.get("query")?;
    // with K = 0 every prediction reads row 0, the learned query
    let l = bom_loss_graph(&mut g, &p, cfg, side, items, q, 0, &vec![0; n], beta)?;
    let loss = g.value(l).item();
    let lf = loss.to_f64().unwrap_or(f64::NAN);
    let grads = g.backward(l)?.into_named();
    Ok(StepOutput {
        loss,
        selection: Selection {
            selected: vec![0; n],
            min_loss: vec![lf; n],
            mean_loss: vec![lf; n],
        },
        grads,
        query_grads: Tensor::zeros(1, cfg.dim),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Discriminative,
    BestOfMany,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTrainConfig {
    pub objective: Objective,
    pub steps: u64,
    /// Sequences per step.
    pub batch_size: usize,
    /// Context frames per training sequence; one more frame is drawn as the
    /// last target.
    pub seq_len: usize,
    pub k: usize,
    pub sigma: f64,
    pub beta: f64,
    pub optim: OptimConfig,
    pub offsets: OffsetRange,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::BestOfMany,
            steps: 1500,
            batch_size: 8,
            seq_len: 8,
            k: 16,
            sigma: QUERY_STD,
            beta: SMOOTH_L1_BETA,
            optim: OptimConfig {
                lr: 1e-3,
                warmup_steps: 100,
                weight_decay: 0.4,
                clip_norm: None,
                ..Default::default()
            },
            offsets: OffsetRange::default(),
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub mean_candidate_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub histogram: Vec<u32>,
}

impl StepLog {
    pub fn entropy(&self) -> f64 {
        index_entropy(&self.histogram)
    }

    pub const CSV_HEADER: &'static str = "step,l_bom,mean_candidate_loss,lr,grad_norm,selected_entropy,selected_histogram";

    pub fn csv_row(&self) -> String {
        let hist: Vec<String> = self.histogram.iter().map(|c| c.to_string()).collect();
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.6},{}",
            self.step,
            self.loss,
            self.mean_candidate_loss,
            self.lr,
            self.grad_norm,
            self.entropy(),
            hist.join(";")
        )
    }
}

/// Resumable predictor training (either objective).
#[derive(Debug, Clone)]
pub struct PredictorTrainer {
    pub predictor: Predictor,
    pub optimizer: AdamW<f32>,
    pub config: PredictorTrainConfig,
    pub seed: u64,
}

impl PredictorTrainer {
    pub fn new(predictor: Predictor, config: PredictorTrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 || config.seq_len == 0 || config.k == 0 {
            return Err(Error::Config("batch_size, seq_len and k must be positive".into()));
        }
        Ok(Self {
            predictor,
            optimizer: AdamW::new(config.optim),
            config,
            seed,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// The batch and query banks of training step `step`.
    pub fn batch(&self, cache: &mut TokenCache<'_>, step: u64) -> Result<(Vec<BomItem<f32>>, Vec<Tensor<f32>>, usize)> {
        let corpus = cache.corpus();
        if corpus.is_empty() {
            return Err(Error::Config("empty training corpus".into()));
        }
        let side = corpus[0].grids.first().map(|g| g.h).unwrap_or(0);
        let mut rng = seed::rng(&[self.seed, step, 0x7072_6564]);
        let n = self.config.seq_len + 1;
        let mut items = Vec::with_capacity(self.config.batch_size);
        let mut banks = Vec::with_capacity(self.config.batch_size);
        let mu = Tensor::zeros(1, self.predictor.config.dim);
        for b in 0..self.config.batch_size {
            let s = rng.gen_range(0..corpus.len());
            let ts = &corpus[s].timestamps;
            let sample = sample_training_timestamps(ts, n, &self.config.offsets, &mut rng)?;
            let tokens = cache.sequence(s, &sample.frames)?;
            let times: Vec<f64> = sample.frames.iter().map(|&f| ts[f]).collect();
            let ctx: Vec<&Tensor<f32>> = tokens[..n - 1].iter().collect();
            let targets = (1..n)
                .map(|i| BomTarget {
                    ctx_len: i,
                    time: times[i],
                    value: tokens[i].clone(),
                })
                .collect();
            items.push(BomItem {
                context: Tensor::vstack(&ctx),
                times: times[..n - 1].to_vec(),
                targets,
            });
            let bank = sample_queries(self.config.k, &mu, self.config.sigma, seed::derive(&[self.seed, step, b as u64]))?;
            banks.push(bank.queries);
        }
        Ok((items, banks, side))
    }

    /// Loss the next step would report, without updating.
    pub fn peek_loss(&self, cache: &mut TokenCache<'_>) -> Result<f64> {
        let (items, banks, side) = self.batch(cache, self.step_count())?;
        let out = self.forward(&items, &banks, side)?;
        Ok(out.selection.l_bom())
    }

    fn forward(&self, items: &[BomItem<f32>], banks: &[Tensor<f32>], side: usize) -> Result<StepOutput<f32>> {
        let (p, c) = (&self.predictor.params, &self.predictor.config);
        let beta = self.config.beta as f32;
        match self.config.objective {
            Objective::BestOfMany => bom_training_step(p, c, side, items, banks, beta),
            Objective::Discriminative => discriminative_step(p, c, side, items, beta),
        }
    }

    pub fn step(&mut self, cache: &mut TokenCache<'_>) -> Result<StepLog> {
        let step = self.step_count();
        let (items, banks, side) = self.batch(cache, step)?;
        let out = self.forward(&items, &banks, side).map_err(|e| match e {
            Error::NonFinite { msg, .. } => Error::Diverged { step: step as usize, msg },
            e => e,
        })?;
        let loss = out.selection.l_bom();
        if !loss.is_finite() || !out.loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                msg: format!("predictor loss is {loss}"),
            });
        }
        let StepStats { lr, grad_norm } = self.optimizer.step(&mut self.predictor.params, out.grads)?;
        let k = match self.config.objective {
            Objective::BestOfMany => self.config.k,
            Objective::Discriminative => 1,
        };
        Ok(StepLog {
            step,
            loss,
            mean_candidate_loss: out.selection.mean_candidate_loss(),
            lr,
            grad_norm,
            histogram: out.selection.histogram(k),
        })
    }

    pub fn run(&mut self, cache: &mut TokenCache<'_>, mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.step_count() < self.config.steps {
            let l = self.step(cache)?;
            log(&l);
            logs.push(l);
        }
        Ok(logs)
    }
}

/// Train a fresh predictor with the best-of-many objective.
pub fn train_bom(
    cache: &mut TokenCache<'_>,
    config: PredictorConfig,
    mut train: PredictorTrainConfig,
    seed: u64,
) -> Result<(Predictor, Vec<StepLog>)> {
    train.objective = Objective::BestOfMany;
    let mut t = PredictorTrainer::new(Predictor::new(config, seed)?, train, seed)?;
    let logs = t.run(cache, |_| {})?;
    Ok((t.predictor, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_gives_the_mean() {
        let mu = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let b = sample_queries(5, &mu, 0.0, 9).unwrap();
        for r in 0..5 {
            assert_eq!(b.queries.row(r), mu.row(0));
        }
        assert!(sample_queries(0, &mu, 0.1, 9).is_err());
    }

    #[test]
    fn query_moments() {
        let b = sample_queries(1024, &Tensor::zeros(1, 64), QUERY_STD, 3).unwrap();
        for c in 0..64 {
            let col: Vec<f64> = (0..1024).map(|r| b.queries.get(r, c) as f64).collect();
            let m = col.iter().sum::<f64>() / 1024.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1023.0).sqrt();
            assert!((0.018..=0.022).contains(&sd), "column {c}: {sd}");
        }
        assert_eq!(b, sample_queries(1024, &Tensor::zeros(1, 64), QUERY_STD, 3).unwrap());
    }

    #[test]
    fn selection_by_brute_force() {
        let sq = |a: &f64, b: &f64| (a - b) * (a - b);
        let cands = [0.0, 1.0, 2.0];
        let brute = (0..3)
            .min_by(|&i, &j| sq(&cands[i], &0.9).partial_cmp(&sq(&cands[j], &0.9)).unwrap())
            .unwrap();
        assert_eq!(bom_select(&cands, &0.9, sq).unwrap().0, brute);
        assert_eq!(brute, 1);
        assert_eq!(bom_select(&[0.3], &0.9, sq).unwrap(), (0, sq(&0.3, &0.9)));
        assert_eq!(bom_select(&[2.0, 1.0, 1.0], &1.0, sq).unwrap().0, 1);
        assert!(bom_select::<f64, f64>(&[], &0.0, sq).is_err());
        assert!(bom_select(&[f64::NAN], &0.0, |a, _| *a).is_err());
    }

    #[test]
    fn entropy_of_histograms() {
        assert_eq!(index_entropy(&[4, 0, 0]), 0.0);
        assert!((index_entropy(&[2, 2]) - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
