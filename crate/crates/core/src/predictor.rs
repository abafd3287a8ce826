//! Future predictor over frames of tokens.
//!
//! A context frame contributes `m` tokens: the full patch grid for the
//! spatial variant (`m = H·W`), one frame or delta token otherwise. Context
//! tokens go through an input projection and attend block-causally (every
//! token of frame `f` sees all tokens of frames `<= f`; with `m = 1` this is
//! the plain causal mask). Each prediction is a set of `m` query tokens that
//! attend to the context frames before the target and to themselves only, so
//! every target of a sequence is predicted in one parallel pass.
//!
//! Rotary positions: spatial tokens use `(τ·s, h, w)` in 3-D, token variants
//! use `τ·s` in 1-D, with `τ` in seconds and `s = time_scale`. A query token
//! sits at the target timestamp. Query rows leave through a final layer
//! norm and an output projection.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    init_block, stack_forward, AttnMask, BlockConfig, Bound, Graph, Init, ParamSet, Real, RopeConfig,
    RopeLayout, RopeTable, Tensor, Var,
};
use crate::sampling::{nearest_frame, OffsetRange};
use crate::tokenizer::{Tokenizer, TokenizerMode};
use crate::toyvfm::{FeatureGrid, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Spatial,
    Frame,
    Delta,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Spatial => "spatial",
            Variant::Frame => "frame",
            Variant::Delta => "delta",
        }
    }

    pub fn tokenizer_mode(self) -> Option<TokenizerMode> {
        match self {
            Variant::Spatial => None,
            Variant::Frame => Some(TokenizerMode::Frame),
            Variant::Delta => Some(TokenizerMode::Delta),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub variant: Variant,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub rope: RopeConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Delta,
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4.0,
            rope: RopeConfig::default(),
        }
    }
}

impl PredictorConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    /// Tokens per frame for a grid of `side x side` patches.
    pub fn tokens_per_frame(&self, side: usize) -> usize {
        match self.variant {
            Variant::Spatial => side * side,
            Variant::Frame | Variant::Delta => 1,
        }
    }

    pub fn rope_layout(&self) -> RopeLayout {
        let axes = if self.variant == Variant::Spatial { 3 } else { 1 };
        RopeLayout::proportional(self.block().head_dim(), axes)
    }
}

pub fn init_predictor<T: Real>(cfg: &PredictorConfig, seed: u64) -> Result<ParamSet<T>> {
    let bc = cfg.block();
    bc.validate()?;
    let d = cfg.dim;
    let mut init = Init::new(seed);
    let mut ps = ParamSet::new();
    ps.insert("in.w", init.weight(d, d), true);
    ps.insert("in.b", Tensor::zeros(1, d), true);
    ps.insert("query", init.weight(1, d), true);
    for i in 0..cfg.depth {
        init_block(&mut ps, &format!("blocks.{i}"), &bc, &mut init);
    }
    ps.insert("norm.g", Tensor::ones(1, d), true);
    ps.insert("norm.b", Tensor::zeros(1, d), true);
    ps.insert("out.w", init.weight(d, d), true);
    ps.insert("out.b", Tensor::zeros(1, d), true);
    Ok(ps)
}

/// One prediction: sees context frames `0..ctx_len`, targets `time`, and is
/// driven by row `query` of the query matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredQuery {
    pub ctx_len: usize,
    pub time: f64,
    pub query: usize,
}

/// A context (`[frames * m, dim]`, frame-major) and the predictions made
/// against it.
#[derive(Debug, Clone)]
pub struct PredItem<'a, T> {
    pub context: &'a Tensor<T>,
    pub times: &'a [f64],
    pub queries: Vec<PredQuery>,
}

struct Layout {
    mask: AttnMask,
    positions: Vec<f64>,
    ctx_rows: usize,
}

fn layout<T: Real>(cfg: &PredictorConfig, side: usize, items: &[PredItem<'_, T>]) -> Result<Layout> {
    let m = cfg.tokens_per_frame(side);
    let axes = if cfg.variant == Variant::Spatial { 3 } else { 1 };
    let ts = cfg.rope.time_scale;
    let ctx_rows: usize = items.iter().map(|it| it.context.rows()).sum();
    let q_rows: usize = items.iter().map(|it| it.queries.len() * m).sum();
    let mut allowed = vec![Vec::new(); ctx_rows + q_rows];
    let mut positions = vec![0.0; (ctx_rows + q_rows) * axes];
    let mut put = |row: usize, t: f64, r: usize| {
        let p = &mut positions[row * axes..(row + 1) * axes];
        p[0] = t * ts;
        if axes == 3 {
            p[1] = (r / side) as f64;
            p[2] = (r % side) as f64;
        }
    };
    let (mut c0, mut q0) = (0, ctx_rows);
    for it in items {
        let n = it.times.len();
        if it.context.rows() != n * m || it.context.cols() != cfg.dim {
            return Err(Error::Shape(format!(
                "context {:?} for {n} frames of {m} tokens at dim {}",
                it.context.shape(),
                cfg.dim
            )));
        }
        if it.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("context timestamps must increase".into()));
        }
        for f in 0..n {
            let keys: Vec<u32> = (c0..c0 + (f + 1) * m).map(|v| v as u32).collect();
            for r in 0..m {
                allowed[c0 + f * m + r] = keys.clone();
                put(c0 + f * m + r, it.times[f], r);
            }
        }
        for q in &it.queries {
            if q.ctx_len == 0 || q.ctx_len > n {
                return Err(Error::OutOfRange(format!(
                    "prediction sees {} of {n} context frames",
                    q.ctx_len
                )));
            }
            let base: Vec<u32> = (c0..c0 + q.ctx_len * m).map(|v| v as u32).collect();
            for r in 0..m {
                let mut keys = base.clone();
                keys.push((q0 + r) as u32);
                allowed[q0 + r] = keys;
                put(q0 + r, q.time, r);
            }
            q0 += m;
        }
        c0 += n * m;
    }
    Ok(Layout {
        mask: AttnMask::from_rows(allowed),
        positions,
        ctx_rows,
    })
}

/// Predictions for every query of every item, `[sum(queries) * m, dim]`,
/// in item order. `q` holds the query vectors referenced by `PredQuery::query`.
pub fn predictor_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &PredictorConfig,
    side: usize,
    items: &[PredItem<'_, T>],
    q: Var,
) -> Result<Var> {
    if items.is_empty() || items.iter().all(|it| it.queries.is_empty()) {
        return Err(Error::Config("nothing to predict".into()));
    }
    if items.iter().any(|it| it.times.is_empty()) {
        return Err(Error::Config("empty context".into()));
    }
    let m = cfg.tokens_per_frame(side);
    let lay = layout(cfg, side, items)?;
    let nq = g.value(q).rows();
    let mut q_idx = Vec::new();
    for it in items {
        for pq in &it.queries {
            if pq.query >= nq {
                return Err(Error::OutOfRange(format!("query row {} of {nq}", pq.query)));
            }
            q_idx.extend(std::iter::repeat(pq.query).take(m));
        }
    }
    let ctx: Vec<&Tensor<T>> = items.iter().map(|it| it.context).collect();
    let x = g.constant(Tensor::vstack(&ctx));
    let x = g.linear(x, p.get("in.w")?, Some(p.get("in.b")?))?;
    let qs = g.gather_rows(q, &q_idx)?;
    let x = g.concat_rows(&[x, qs])?;
    let table = Arc::new(RopeTable::new(&cfg.rope_layout(), cfg.rope.base, &lay.positions));
    let mask = Arc::new(lay.mask);
    let y = stack_forward(g, p, "blocks", cfg.depth, &cfg.block(), x, &mask, Some(&table))?;
    let rows: Vec<usize> = (lay.ctx_rows..lay.ctx_rows + q_idx.len()).collect();
    let y = g.gather_rows(y, &rows)?;
    let y = g.layer_norm(y, p.get("norm.g")?, p.get("norm.b")?)?;
    g.linear(y, p.get("out.w")?, Some(p.get("out.b")?))
}

/// Teacher-forced layout over one sequence of `n` frames: predictions of
/// frames `1..n` from the prefixes `0..i`, all driven by query row `query`.
pub fn teacher_forced_queries(times: &[f64], query: usize) -> Vec<PredQuery> {
    (1..times.len())
        .map(|i| PredQuery {
            ctx_len: i,
            time: times[i],
            query,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamSet<f32>,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_predictor(&config, seed)?,
            config,
        })
    }

    pub fn from_params(config: PredictorConfig, params: ParamSet<f32>) -> Result<Self> {
        let reference = init_predictor::<f32>(&config, 0)?;
        for (name, p) in reference.iter() {
            if params.get(name)?.shape() != p.value.shape() {
                return Err(Error::Shape(format!("predictor tensor {name}")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn learned_query(&self) -> &Tensor<f32> {
        self.params.get("query").expect("initialized with a query")
    }

    /// Forward without gradients; one `[m, dim]` tensor per prediction.
    pub fn predict_batch(
        &self,
        side: usize,
        items: &[PredItem<'_, f32>],
        queries: &Tensor<f32>,
    ) -> Result<Vec<Tensor<f32>>> {
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let q = g.constant(queries.clone());
        let y = predictor_graph(&mut g, &p, &self.config, side, items, q)?;
        let m = self.config.tokens_per_frame(side);
        let out = g.value(y);
        Ok((0..out.rows() / m).map(|i| out.slice_rows(i * m, (i + 1) * m)).collect())
    }

    /// Multiply-accumulates of one no-grad pass over `items`.
    pub fn count_macs(&self, side: usize, items: &[PredItem<'_, f32>], queries: &Tensor<f32>) -> Result<u64> {
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let q = g.constant(queries.clone());
        predictor_graph(&mut g, &p, &self.config, side, items, q)?;
        Ok(g.macs())
    }

    /// One patch token of the next grid (spatial variant). The whole grid is
    /// computed; positions do not interact, so this equals a per-position pass.
    pub fn predict_spatial(
        &self,
        query: &Tensor<f32>,
        context: &FeatureSequence,
        tau_next: f64,
        pos: (usize, usize),
    ) -> Result<Tensor<f32>> {
        let grid = self.predict_grid(query, context, tau_next)?;
        let side = grid.h;
        if pos.0 >= side || pos.1 >= side {
            return Err(Error::OutOfRange(format!("position {pos:?} on a {side}x{side} grid")));
        }
        let r = pos.0 * side + pos.1;
        Ok(grid.tokens.slice_rows(r, r + 1))
    }

    /// Full next grid from a feature context (spatial variant).
    pub fn predict_grid(&self, query: &Tensor<f32>, context: &FeatureSequence, tau_next: f64) -> Result<FeatureGrid> {
        self.require(Variant::Spatial)?;
        if context.is_empty() {
            return Err(Error::Config("empty context".into()));
        }
        let side = context.grids[0].h;
        let refs: Vec<&Tensor<f32>> = context.grids.iter().map(|g| &g.tokens).collect();
        let ctx = Tensor::vstack(&refs);
        let item = PredItem {
            context: &ctx,
            times: &context.timestamps,
            queries: vec![PredQuery {
                ctx_len: context.len(),
                time: tau_next,
                query: 0,
            }],
        };
        let tokens = self.predict_batch(side, &[item], query)?.remove(0);
        Ok(FeatureGrid {
            h: side,
            w: side,
            tokens,
        })
    }

    /// Next token from a token context (frame and delta variants).
    pub fn predict_token(
        &self,
        query: &Tensor<f32>,
        context: &[Tensor<f32>],
        times: &[f64],
        tau_next: f64,
    ) -> Result<Tensor<f32>> {
        if self.config.variant == Variant::Spatial {
            return Err(Error::Config("token prediction needs a frame or delta predictor".into()));
        }
        if context.is_empty() || context.len() != times.len() {
            return Err(Error::Config("context needs at least one token and one time per token".into()));
        }
        let refs: Vec<&Tensor<f32>> = context.iter().collect();
        let ctx = Tensor::vstack(&refs);
        let item = PredItem {
            context: &ctx,
            times,
            queries: vec![PredQuery {
                ctx_len: context.len(),
                time: tau_next,
                query: 0,
            }],
        };
        Ok(self.predict_batch(1, &[item], query)?.remove(0))
    }

    fn require(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::Config(format!(
                "operation needs a {} predictor, this one is {}",
                v.as_str(),
                self.config.variant.as_str()
            )));
        }
        Ok(())
    }
}

/// Frame indices and the raw offsets (before rounding) they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestampSample {
    pub frames: Vec<usize>,
    pub offsets: Vec<f64>,
}

/// Draw `n` frames: a uniform start, then successive offsets from `range`,
/// each rounded to the nearest frame (at least one frame later). Chains
/// running off the end are redrawn.
pub fn sample_training_timestamps(
    timestamps: &[f64],
    n: usize,
    range: &OffsetRange,
    rng: &mut impl Rng,
) -> Result<TimestampSample> {
    if n == 0 || timestamps.len() < n {
        return Err(Error::Config(format!(
            "cannot draw {n} frames from a sequence of {}",
            timestamps.len()
        )));
    }
    'attempt: for _ in 0..10_000 {
        let mut frames = vec![rng.gen_range(0..timestamps.len())];
        let mut offsets = Vec::with_capacity(n - 1);
        while frames.len() < n {
            let cur = *frames.last().unwrap();
            let dt = range.sample(rng);
            let next = nearest_frame(timestamps, timestamps[cur] + dt).max(cur + 1);
            if next >= timestamps.len() {
                continue 'attempt;
            }
            offsets.push(dt);
            frames.push(next);
        }
        return Ok(TimestampSample { frames, offsets });
    }
    Err(Error::Config("sequence too short for the offset range".into()))
}

/// Representation of frame `cur` of sequence `seq`, for delta tokens relative
/// to `prev` (`None` is the black frame).
pub type TokenKey = (usize, Option<usize>, usize);

/// Lazily computed, memoized frame representations for a corpus.
pub struct TokenCache<'a> {
    variant: Variant,
    corpus: &'a [FeatureSequence],
    tokenizer: Option<&'a Tokenizer>,
    cache: HashMap<TokenKey, Tensor<f32>>,
}

impl<'a> TokenCache<'a> {
    pub fn new(variant: Variant, corpus: &'a [FeatureSequence], tokenizer: Option<&'a Tokenizer>) -> Result<Self> {
        match (variant.tokenizer_mode(), tokenizer) {
            (None, _) => {}
            (Some(mode), Some(t)) if t.config.mode == mode => {}
            (Some(mode), _) => {
                return Err(Error::Config(format!(
                    "{} predictor needs a {} tokenizer",
                    variant.as_str(),
                    mode.as_str()
                )))
            }
        }
        Ok(Self {
            variant,
            corpus,
            tokenizer,
            cache: HashMap::new(),
        })
    }

    pub fn corpus(&self) -> &'a [FeatureSequence] {
        self.corpus
    }

    fn norm_key(&self, k: TokenKey) -> TokenKey {
        match self.variant {
            Variant::Delta => k,
            _ => (k.0, None, k.2),
        }
    }

    pub fn get_many(&mut self, keys: &[TokenKey]) -> Result<Vec<Tensor<f32>>> {
        let keys: Vec<TokenKey> = keys.iter().map(|&k| self.norm_key(k)).collect();
        let mut missing: Vec<TokenKey> = keys.iter().copied().filter(|k| !self.cache.contains_key(k)).collect();
        missing.sort_unstable();
        missing.dedup();
        for chunk in missing.chunks(64) {
            let computed: Vec<Tensor<f32>> = match (self.variant, self.tokenizer) {
                (Variant::Spatial, _) => chunk
                    .iter()
                    .map(|&(s, _, c)| self.corpus[s].grids[c].tokens.clone())
                    .collect(),
                (Variant::Frame, Some(tok)) => {
                    let grids: Vec<&FeatureGrid> = chunk.iter().map(|&(s, _, c)| &self.corpus[s].grids[c]).collect();
                    tok.encode_frames(&grids)?.into_iter().map(|t| t.value).collect()
                }
                (Variant::Delta, Some(tok)) => {
                    let pairs: Vec<(&FeatureGrid, &FeatureGrid)> = chunk
                        .iter()
                        .map(|&(s, p, c)| {
                            let prev = match p {
                                Some(i) => &self.corpus[s].grids[i],
                                None => tok.black(),
                            };
                            (prev, &self.corpus[s].grids[c])
                        })
                        .collect();
                    tok.encode_deltas(&pairs)?.into_iter().map(|t| t.value).collect()
                }
                _ => unreachable!("checked at construction"),
            };
            for (k, v) in chunk.iter().zip(computed) {
                self.cache.insert(*k, v);
            }
        }
        Ok(keys.iter().map(|k| self.cache[k].clone()).collect())
    }

    /// Representations of `frames` of one sequence in order; delta tokens
    /// are taken between consecutive entries, the first against black.
    pub fn sequence(&mut self, seq: usize, frames: &[usize]) -> Result<Vec<Tensor<f32>>> {
        let keys: Vec<TokenKey> = frames
            .iter()
            .enumerate()
            .map(|(i, &f)| (seq, if i == 0 { None } else { Some(frames[i - 1]) }, f))
            .collect();
        self.get_many(&keys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(variant: Variant) -> PredictorConfig {
        PredictorConfig {
            variant,
            dim: 16,
            heads: 2,
            depth: 2,
            mlp_ratio: 2.0,
            rope: RopeConfig::default(),
        }
    }

    #[test]
    fn fps16_offsets_land_on_sixteenths() {
        let ts: Vec<f64> = (0..200).map(|i| i as f64 / 16.0).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let s = sample_training_timestamps(&ts, 9, &OffsetRange::default(), &mut rng).unwrap();
            for (w, &off) in s.frames.windows(2).zip(&s.offsets) {
                assert!((1.0 / 25.0..=1.0 / 3.0).contains(&off));
                seen.insert(w[1] - w[0]);
            }
        }
        // 1/25 s rounds to 1/16, 1/3 s rounds to 5/16
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn query_rows_see_only_the_past() {
        let cfg = tiny(Variant::Spatial);
        let ctx = Tensor::<f32>::zeros(2 * 4, 16);
        let item = PredItem {
            context: &ctx,
            times: &[0.0, 0.1],
            queries: vec![PredQuery {
                ctx_len: 1,
                time: 0.1,
                query: 0,
            }],
        };
        let lay = layout(&cfg, 2, &[item]).unwrap();
        assert_eq!(lay.mask.row(0), &[0, 1, 2, 3]);
        assert_eq!(lay.mask.row(4).len(), 8);
        assert_eq!(lay.mask.row(9), &[0, 1, 2, 3, 9]);
        assert_eq!(&lay.positions[9 * 3..10 * 3], &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn variants_need_matching_tokenizers() {
        assert!(TokenCache::new(Variant::Delta, &[], None).is_err());
        assert!(TokenCache::new(Variant::Spatial, &[], None).is_ok());
    }

    #[test]
    fn context_bounds_are_checked() {
        let p = Predictor::new(tiny(Variant::Delta), 1).unwrap();
        let q = p.learned_query().clone();
        assert!(p.predict_token(&q, &[], &[], 0.1).is_err());
        let ctx = Tensor::zeros(1, 16);
        let item = PredItem {
            context: &ctx,
            times: &[0.0],
            queries: vec![PredQuery {
                ctx_len: 2,
                time: 0.1,
                query: 0,
            }],
        };
        assert!(matches!(p.predict_batch(1, &[item], &q), Err(Error::OutOfRange(_))));
    }
}
