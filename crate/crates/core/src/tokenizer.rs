//! Single-token frame and delta tokenizers over patch-feature grids.
//!
//! Encoder `g`: self-attention over patch tokens (tagged as previous or
//! current frame) plus one `z_init` slot; the transformed slot is the token.
//! Decoder `h`: self-attention over a base grid (the previous frame, or zeros
//! for frame mode) plus the token with a slot embedding; the transformed grid
//! rows are the reconstruction. Patch tokens carry 2-D rotary positions, the
//! slot sits at the origin (no rotation). Neither side has a final norm, so
//! with Layer Scale at `1e-5` the encoder returns `z_init` and the decoder
//! returns its base grid almost exactly at initialization.
//!
//! Batches are laid out as `[all base/prev grids, all cur grids, all slots]`
//! and separated by the attention mask, so each item only sees its own rows.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    init_block, stack_forward, AdamW, AttnMask, BlockConfig, Bound, Graph, Init, OptimConfig,
    ParamSet, Real, RopeLayout, RopeTable, Tensor, Var,
};
use crate::sampling::{nearest_frame, OffsetRange};
use crate::seed;
use crate::toyvfm::{FeatureGrid, FeatureSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Frame,
    Delta,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::Frame => "frame",
            TokenizerMode::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub mlp_ratio: f64,
    pub rope_base: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Delta,
            dim: 64,
            heads: 4,
            enc_depth: 4,
            dec_depth: 4,
            mlp_ratio: 4.0,
            rope_base: 100.0,
        }
    }
}

impl TokenizerConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Frame,
    Delta,
    AbsoluteFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaToken {
    /// `[1, dim]`.
    pub value: Tensor<f32>,
    pub kind: TokenKind,
}

pub fn init_tokenizer<T: Real>(cfg: &TokenizerConfig, seed: u64) -> Result<ParamSet<T>> {
    let bc = cfg.block();
    bc.validate()?;
    let mut ps = ParamSet::new();
    let mut init = Init::new(seed);
    let d = cfg.dim;
    ps.insert("z_init", init.weight(1, d), true);
    if cfg.mode == TokenizerMode::Delta {
        ps.insert("tag.prev", init.weight(1, d), true);
    }
    ps.insert("tag.cur", init.weight(1, d), true);
    ps.insert("slot", init.weight(1, d), true);
    for i in 0..cfg.enc_depth {
        init_block(&mut ps, &format!("enc.{i}"), &bc, &mut init);
    }
    for i in 0..cfg.dec_depth {
        init_block(&mut ps, &format!("dec.{i}"), &bc, &mut init);
    }
    Ok(ps)
}

fn grid_positions(side: usize, copies: usize, out: &mut Vec<f64>) {
    for _ in 0..copies {
        for r in 0..side {
            for c in 0..side {
                out.push(r as f64);
                out.push(c as f64);
            }
        }
    }
}

/// Encoder over `n` items. `prev`/`cur` are stacked `[n * hw, dim]` grids;
/// `prev` must be given exactly in delta mode. Returns `[n, dim]` tokens.
pub fn encode_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &TokenizerConfig,
    prev: Option<&Tensor<T>>,
    cur: &Tensor<T>,
    side: usize,
) -> Result<Var> {
    let hw = side * side;
    if hw == 0 || cur.rows() % hw != 0 || cur.cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "encoder input {:?} for a {side}x{side} grid of dim {}",
            cur.shape(),
            cfg.dim
        )));
    }
    let n = cur.rows() / hw;
    let frames = match (cfg.mode, prev) {
        (TokenizerMode::Delta, Some(pv)) if pv.shape() == cur.shape() => 2,
        (TokenizerMode::Frame, None) => 1,
        _ => {
            return Err(Error::Shape(format!(
                "{} encoder given mismatched previous-frame input",
                cfg.mode.as_str()
            )))
        }
    };
    let mut parts = Vec::with_capacity(3);
    if let Some(pv) = prev {
        let x = g.constant(pv.clone());
        parts.push(g.add_row(x, p.get("tag.prev")?)?);
    }
    let x = g.constant(cur.clone());
    parts.push(g.add_row(x, p.get("tag.cur")?)?);
    parts.push(g.gather_rows(p.get("z_init")?, &vec![0; n])?);
    let x = g.concat_rows(&parts)?;

    let slot0 = frames * n * hw;
    let mut allowed = Vec::with_capacity(slot0 + n);
    let item_keys = |i: usize| -> Vec<u32> {
        let mut k = Vec::with_capacity(frames * hw + 1);
        for f in 0..frames {
            let s = f * n * hw + i * hw;
            k.extend((s..s + hw).map(|v| v as u32));
        }
        k.push((slot0 + i) as u32);
        k
    };
    for _f in 0..frames {
        for i in 0..n {
            let keys = item_keys(i);
            for _ in 0..hw {
                allowed.push(keys.clone());
            }
        }
    }
    for i in 0..n {
        allowed.push(item_keys(i));
    }
    let mask = Arc::new(AttnMask::from_rows(allowed));
    let mut pos = Vec::with_capacity((slot0 + n) * 2);
    grid_positions(side, frames * n, &mut pos);
    pos.extend(std::iter::repeat(0.0).take(2 * n));
    let layout = RopeLayout::proportional(cfg.block().head_dim(), 2);
    let table = Arc::new(RopeTable::new(&layout, cfg.rope_base, &pos));
    let y = stack_forward(g, p, "enc", cfg.enc_depth, &cfg.block(), x, &mask, Some(&table))?;
    let slots: Vec<usize> = (slot0..slot0 + n).collect();
    g.gather_rows(y, &slots)
}

/// Decoder over `n` items: `base` is `[n * hw, dim]` (previous grids or
/// zeros), `z` is `[n, dim]`. Returns `[n * hw, dim]`.
pub fn decode_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &TokenizerConfig,
    base: &Tensor<T>,
    z: Var,
    side: usize,
) -> Result<Var> {
    let hw = side * side;
    let n = g.value(z).rows();
    if base.shape() != [n * hw, cfg.dim] || g.value(z).cols() != cfg.dim {
        return Err(Error::Shape(format!(
            "decoder base {:?} with {n} tokens on a {side}x{side} grid",
            base.shape()
        )));
    }
    let x = g.constant(base.clone());
    let zs = g.add_row(z, p.get("slot")?)?;
    let x = g.concat_rows(&[x, zs])?;
    let slot0 = n * hw;
    let mut allowed = Vec::with_capacity(slot0 + n);
    for i in 0..n {
        let mut keys: Vec<u32> = (i * hw..(i + 1) * hw).map(|v| v as u32).collect();
        keys.push((slot0 + i) as u32);
        for _ in 0..hw {
            allowed.push(keys.clone());
        }
    }
    for i in 0..n {
        allowed.push(allowed[i * hw].clone());
    }
    let mask = Arc::new(AttnMask::from_rows(allowed));
    let mut pos = Vec::with_capacity((slot0 + n) * 2);
    grid_positions(side, n, &mut pos);
    pos.extend(std::iter::repeat(0.0).take(2 * n));
    let layout = RopeLayout::proportional(cfg.block().head_dim(), 2);
    let table = Arc::new(RopeTable::new(&layout, cfg.rope_base, &pos));
    let y = stack_forward(g, p, "dec", cfg.dec_depth, &cfg.block(), x, &mask, Some(&table))?;
    let rows: Vec<usize> = (0..slot0).collect();
    g.gather_rows(y, &rows)
}

/// Mean squared error over all grid entries.
pub fn tokenizer_loss(x_hat: &FeatureGrid, x: &FeatureGrid) -> Result<f32> {
    crate::nn::mse(&x_hat.tokens, &x.tokens)
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamSet<f32>,
    /// Features of the black frame; previous frames bit-equal to it mark
    /// absolute-first tokens.
    black: FeatureGrid,
}

fn stack(grids: &[&FeatureGrid]) -> Tensor<f32> {
    let refs: Vec<&Tensor<f32>> = grids.iter().map(|g| &g.tokens).collect();
    Tensor::vstack(&refs)
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64, black: FeatureGrid) -> Result<Self> {
        let params = init_tokenizer(&config, seed)?;
        Self::from_params(config, params, black)
    }

    pub fn from_params(config: TokenizerConfig, params: ParamSet<f32>, black: FeatureGrid) -> Result<Self> {
        if black.dim() != config.dim || black.h != black.w {
            return Err(Error::Shape("black-frame grid does not match the tokenizer".into()));
        }
        let reference = init_tokenizer::<f32>(&config, 0)?;
        for (name, p) in reference.iter() {
            if params.get(name)?.shape() != p.value.shape() {
                return Err(Error::Shape(format!("tokenizer tensor {name}")));
            }
        }
        Ok(Self {
            config,
            params,
            black,
        })
    }

    pub fn black(&self) -> &FeatureGrid {
        &self.black
    }

    pub fn side(&self) -> usize {
        self.black.h
    }

    fn check(&self, grid: &FeatureGrid) -> Result<()> {
        if grid.h != self.black.h || grid.w != self.black.w || grid.dim() != self.config.dim {
            return Err(Error::Shape(format!(
                "grid {}x{}x{} vs tokenizer {}x{}x{}",
                grid.h,
                grid.w,
                grid.dim(),
                self.black.h,
                self.black.w,
                self.config.dim
            )));
        }
        Ok(())
    }

    fn require(&self, mode: TokenizerMode) -> Result<()> {
        if self.config.mode != mode {
            return Err(Error::Config(format!(
                "operation needs a {} tokenizer, this one is {}",
                mode.as_str(),
                self.config.mode.as_str()
            )));
        }
        Ok(())
    }

    /// Frame-mode tokens for a batch of grids.
    pub fn encode_frames(&self, grids: &[&FeatureGrid]) -> Result<Vec<DeltaToken>> {
        self.require(TokenizerMode::Frame)?;
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        for g in grids {
            self.check(g)?;
        }
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let z = encode_graph(&mut g, &p, &self.config, None, &stack(grids), self.side())?;
        Ok(split_tokens(g.value(z), |_| TokenKind::Frame))
    }

    pub fn encode_frame(&self, x: &FeatureGrid) -> Result<DeltaToken> {
        Ok(self.encode_frames(&[x])?.remove(0))
    }

    /// Delta-mode tokens for a batch of `(previous, current)` pairs.
    pub fn encode_deltas(&self, pairs: &[(&FeatureGrid, &FeatureGrid)]) -> Result<Vec<DeltaToken>> {
        self.require(TokenizerMode::Delta)?;
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (a, b) in pairs {
            self.check(a)?;
            self.check(b)?;
        }
        let prev: Vec<&FeatureGrid> = pairs.iter().map(|p| p.0).collect();
        let cur: Vec<&FeatureGrid> = pairs.iter().map(|p| p.1).collect();
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let z = encode_graph(&mut g, &p, &self.config, Some(&stack(&prev)), &stack(&cur), self.side())?;
        Ok(split_tokens(g.value(z), |i| {
            if prev[i].bit_eq(&self.black) {
                TokenKind::AbsoluteFirst
            } else {
                TokenKind::Delta
            }
        }))
    }

    pub fn encode_delta(&self, x_prev: &FeatureGrid, x_cur: &FeatureGrid) -> Result<DeltaToken> {
        Ok(self.encode_deltas(&[(x_prev, x_cur)])?.remove(0))
    }

    /// Decode a batch of tokens against base grids.
    /// MACs of encoding one grid (against itself as previous in delta mode).
    pub fn count_encoder_macs(&self, grid: &FeatureGrid) -> Result<u64> {
        self.check(grid)?;
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let prev = (self.config.mode == TokenizerMode::Delta).then_some(&grid.tokens);
        encode_graph(&mut g, &p, &self.config, prev, &grid.tokens, self.side())?;
        Ok(g.macs())
    }

    /// MACs of decoding one token onto `base`.
    pub fn count_decoder_macs(&self, base: &FeatureGrid) -> Result<u64> {
        self.check(base)?;
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let z = g.constant(Tensor::zeros(1, self.config.dim));
        decode_graph(&mut g, &p, &self.config, &base.tokens, z, self.side())?;
        Ok(g.macs())
    }

    pub fn decode_batch(&self, bases: &[&FeatureGrid], tokens: &[&Tensor<f32>]) -> Result<Vec<FeatureGrid>> {
        if bases.len() != tokens.len() {
            return Err(Error::Shape("one base grid per token required".into()));
        }
        if bases.is_empty() {
            return Ok(Vec::new());
        }
        for b in bases {
            self.check(b)?;
        }
        let z = Tensor::vstack(tokens);
        let mut g = Graph::no_grad();
        let p = g.bind(&self.params);
        let zv = g.constant(z);
        let y = decode_graph(&mut g, &p, &self.config, &stack(bases), zv, self.side())?;
        let out = g.value(y);
        let hw = self.side() * self.side();
        Ok((0..bases.len())
            .map(|i| FeatureGrid {
                h: self.side(),
                w: self.side(),
                tokens: out.slice_rows(i * hw, (i + 1) * hw),
            })
            .collect())
    }

    /// Reconstruct a grid from a frame token (base grid `x_init = 0`).
    pub fn decode_frame(&self, z: &DeltaToken) -> Result<FeatureGrid> {
        self.require(TokenizerMode::Frame)?;
        let zero = FeatureGrid::zeros(self.side(), self.side(), self.config.dim);
        Ok(self.decode_batch(&[&zero], &[&z.value])?.remove(0))
    }

    /// Apply a delta token to the previous grid.
    pub fn decode_delta(&self, x_prev: &FeatureGrid, z: &DeltaToken) -> Result<FeatureGrid> {
        self.require(TokenizerMode::Delta)?;
        Ok(self.decode_batch(&[x_prev], &[&z.value])?.remove(0))
    }

    /// Tokens for a whole sequence, one per frame. In delta mode, token `i`
    /// encodes `grid[i-1] -> grid[i]` with the black frame before `grid[0]`.
    pub fn encode_sequence(&self, seq: &FeatureSequence) -> Result<Vec<DeltaToken>> {
        match self.config.mode {
            TokenizerMode::Frame => {
                let refs: Vec<&FeatureGrid> = seq.grids.iter().collect();
                let mut out = Vec::with_capacity(refs.len());
                for chunk in refs.chunks(32) {
                    out.extend(self.encode_frames(chunk)?);
                }
                Ok(out)
            }
            TokenizerMode::Delta => {
                let pairs: Vec<(&FeatureGrid, &FeatureGrid)> = (0..seq.len())
                    .map(|i| {
                        let prev = if i == 0 { &self.black } else { &seq.grids[i - 1] };
                        (prev, &seq.grids[i])
                    })
                    .collect();
                let mut out = Vec::with_capacity(pairs.len());
                for chunk in pairs.chunks(32) {
                    out.extend(self.encode_deltas(chunk)?);
                }
                Ok(out)
            }
        }
    }

    /// Reconstruction of every frame of a sequence through its own token
    /// (teacher-forced: each delta is applied to the true previous grid).
    pub fn reconstruct_sequence(&self, seq: &FeatureSequence) -> Result<Vec<FeatureGrid>> {
        let tokens = self.encode_sequence(seq)?;
        let zero = FeatureGrid::zeros(self.side(), self.side(), self.config.dim);
        let bases: Vec<&FeatureGrid> = (0..seq.len())
            .map(|i| match self.config.mode {
                TokenizerMode::Frame => &zero,
                TokenizerMode::Delta if i == 0 => &self.black,
                TokenizerMode::Delta => &seq.grids[i - 1],
            })
            .collect();
        let zs: Vec<&Tensor<f32>> = tokens.iter().map(|t| &t.value).collect();
        let mut out = Vec::with_capacity(seq.len());
        for (b, z) in bases.chunks(32).zip(zs.chunks(32)) {
            out.extend(self.decode_batch(b, z)?);
        }
        Ok(out)
    }
}

fn split_tokens(z: &Tensor<f32>, kind: impl Fn(usize) -> TokenKind) -> Vec<DeltaToken> {
    (0..z.rows())
        .map(|i| DeltaToken {
            value: z.slice_rows(i, i + 1),
            kind: kind(i),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Probability that a training pair uses the black frame as previous.
    pub black_pair_prob: f64,
    pub offsets: OffsetRange,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            optim: OptimConfig {
                lr: 3e-3,
                warmup_steps: 100,
                weight_decay: 1e-4,
                clip_norm: Some(1e-2),
                ..Default::default()
            },
            black_pair_prob: 0.125,
            offsets: OffsetRange::default(),
        }
    }
}

/// One teacher-forced training example: indices into the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub seq: usize,
    /// `None` means the black frame.
    pub prev: Option<usize>,
    pub cur: usize,
}

/// Draw a training batch for `step` (frame mode ignores `prev`).
pub fn sample_pairs(
    corpus: &[FeatureSequence],
    cfg: &TokenizerTrainConfig,
    seed: u64,
    step: u64,
) -> Result<Vec<PairSample>> {
    if corpus.is_empty() || corpus.iter().any(|s| s.is_empty()) {
        return Err(Error::Config("tokenizer corpus has no frames".into()));
    }
    let mut rng = seed::rng(&[seed, step, 0x7061_6972]);
    let mut out = Vec::with_capacity(cfg.batch_size);
    while out.len() < cfg.batch_size {
        let s = rng.gen_range(0..corpus.len());
        let ts = &corpus[s].timestamps;
        if rng.gen_bool(cfg.black_pair_prob) || ts.len() == 1 {
            out.push(PairSample {
                seq: s,
                prev: None,
                cur: rng.gen_range(0..ts.len()),
            });
            continue;
        }
        let i = rng.gen_range(0..ts.len() - 1);
        let dt = cfg.offsets.sample(&mut rng);
        let j = nearest_frame(ts, ts[i] + dt).max(i + 1);
        if j >= ts.len() {
            continue;
        }
        out.push(PairSample {
            seq: s,
            prev: Some(i),
            cur: j,
        });
    }
    Ok(out)
}

/// Mean reconstruction loss of a batch, recorded on `g`.
fn batch_loss(
    g: &mut Graph<f32>,
    p: &Bound,
    tok: &Tokenizer,
    corpus: &[FeatureSequence],
    batch: &[PairSample],
) -> Result<Var> {
    let zero = FeatureGrid::zeros(tok.side(), tok.side(), tok.config.dim);
    let cur: Vec<&FeatureGrid> = batch.iter().map(|b| &corpus[b.seq].grids[b.cur]).collect();
    let cur_t = stack(&cur);
    let (z, base) = match tok.config.mode {
        TokenizerMode::Frame => {
            let z = encode_graph(g, p, &tok.config, None, &cur_t, tok.side())?;
            let bases: Vec<&FeatureGrid> = batch.iter().map(|_| &zero).collect();
            (z, stack(&bases))
        }
        TokenizerMode::Delta => {
            let prev: Vec<&FeatureGrid> = batch
                .iter()
                .map(|b| match b.prev {
                    Some(i) => &corpus[b.seq].grids[i],
                    None => &tok.black,
                })
                .collect();
            let prev_t = stack(&prev);
            let z = encode_graph(g, p, &tok.config, Some(&prev_t), &cur_t, tok.side())?;
            (z, prev_t)
        }
    };
    let y = decode_graph(g, p, &tok.config, &base, z, tok.side())?;
    let t = g.constant(cur_t);
    g.mse(y, t)
}

/// Resumable tokenizer training state.
#[derive(Debug, Clone)]
pub struct TokenizerTrainer {
    pub tokenizer: Tokenizer,
    pub optimizer: AdamW<f32>,
    pub config: TokenizerTrainConfig,
    pub seed: u64,
}

impl TokenizerTrainer {
    pub fn new(tokenizer: Tokenizer, config: TokenizerTrainConfig, seed: u64) -> Self {
        Self {
            tokenizer,
            optimizer: AdamW::new(config.optim),
            config,
            seed,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Loss of the batch the next step would draw, without updating.
    pub fn peek_loss(&self, corpus: &[FeatureSequence]) -> Result<f32> {
        let batch = sample_pairs(corpus, &self.config, self.seed, self.step_count())?;
        let mut g = Graph::no_grad();
        let p = g.bind(&self.tokenizer.params);
        let l = batch_loss(&mut g, &p, &self.tokenizer, corpus, &batch)?;
        Ok(g.value(l).item())
    }

    /// One optimizer update; returns the pre-update batch loss.
    pub fn step(&mut self, corpus: &[FeatureSequence]) -> Result<f32> {
        let step = self.step_count();
        let batch = sample_pairs(corpus, &self.config, self.seed, step)?;
        let mut g = Graph::new();
        let p = g.bind(&self.tokenizer.params);
        let l = batch_loss(&mut g, &p, &self.tokenizer, corpus, &batch)?;
        let loss = g.value(l).item();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                msg: format!("tokenizer loss is {loss}"),
            });
        }
        let grads = g.backward(l)?.into_named();
        self.optimizer.step(&mut self.tokenizer.params, grads)?;
        Ok(loss)
    }

    /// Run until `config.steps` updates have been applied.
    pub fn run(&mut self, corpus: &[FeatureSequence], mut log: impl FnMut(u64, f32)) -> Result<Vec<f32>> {
        let mut losses = Vec::new();
        while self.step_count() < self.config.steps {
            let s = self.step_count();
            let l = self.step(corpus)?;
            log(s, l);
            losses.push(l);
        }
        Ok(losses)
    }
}

/// Train a fresh tokenizer; returns it with the per-step losses.
pub fn train_tokenizer(
    corpus: &[FeatureSequence],
    config: TokenizerConfig,
    train: TokenizerTrainConfig,
    black: FeatureGrid,
    seed: u64,
) -> Result<(Tokenizer, Vec<f32>)> {
    let tok = Tokenizer::new(config, seed, black)?;
    let mut trainer = TokenizerTrainer::new(tok, train, seed);
    let losses = trainer.run(corpus, |_, _| {})?;
    Ok((trainer.tokenizer, losses))
}

/// Mean teacher-forced reconstruction MSE over every frame of a corpus.
pub fn reconstruction_mse(tok: &Tokenizer, corpus: &[FeatureSequence]) -> Result<f64> {
    reconstruction_mse_from(tok, corpus, 0)
}

/// Mean teacher-forced reconstruction MSE over frames `start..` of every
/// sequence. With `start = 1` a delta tokenizer is scored only on frames it
/// encodes as changes.
pub fn reconstruction_mse_from(tok: &Tokenizer, corpus: &[FeatureSequence], start: usize) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for seq in corpus {
        let rec = tok.reconstruct_sequence(seq)?;
        for (r, x) in rec.iter().zip(&seq.grids).skip(start) {
            acc += tokenizer_loss(r, x)? as f64;
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn small(mode: TokenizerMode) -> TokenizerConfig {
        TokenizerConfig {
            mode,
            dim: 16,
            heads: 2,
            enc_depth: 2,
            dec_depth: 2,
            mlp_ratio: 2.0,
            rope_base: 100.0,
        }
    }

    fn grid(seed: u64, side: usize, dim: usize) -> FeatureGrid {
        let mut init = Init::new(seed);
        FeatureGrid {
            h: side,
            w: side,
            tokens: init.trunc_normal(side * side, dim, 1.0),
        }
    }

    #[test]
    fn encoder_returns_z_init_at_init() {
        let tok = Tokenizer::new(small(TokenizerMode::Delta), 1, grid(0, 4, 16)).unwrap();
        let z = tok.encode_delta(&grid(1, 4, 16), &grid(2, 4, 16)).unwrap();
        let zi = tok.params.get("z_init").unwrap();
        let dev: f32 = z.value.data().iter().zip(zi.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dev.sqrt() / zi.sq_norm().sqrt() < 1e-3);
        assert_eq!(z.kind, TokenKind::Delta);
    }

    #[test]
    fn black_previous_marks_absolute_first() {
        let black = grid(0, 4, 16);
        let tok = Tokenizer::new(small(TokenizerMode::Delta), 1, black.clone()).unwrap();
        let z = tok.encode_delta(&black, &grid(2, 4, 16)).unwrap();
        assert_eq!(z.kind, TokenKind::AbsoluteFirst);
    }

    #[test]
    fn batched_matches_single() {
        let tok = Tokenizer::new(small(TokenizerMode::Delta), 3, grid(0, 4, 16)).unwrap();
        let (a, b, c) = (grid(1, 4, 16), grid(2, 4, 16), grid(3, 4, 16));
        let batch = tok.encode_deltas(&[(&a, &b), (&b, &c)]).unwrap();
        assert_eq!(batch[1].value, tok.encode_delta(&b, &c).unwrap().value);
        let dec = tok
            .decode_batch(&[&a, &c], &[&batch[0].value, &batch[1].value])
            .unwrap();
        assert_eq!(dec[1], tok.decode_delta(&c, &batch[1]).unwrap());
    }

    #[test]
    fn mode_is_enforced() {
        let tok = Tokenizer::new(small(TokenizerMode::Frame), 3, grid(0, 4, 16)).unwrap();
        assert!(matches!(tok.encode_delta(&grid(1, 4, 16), &grid(2, 4, 16)), Err(Error::Config(_))));
        assert!(matches!(tok.encode_frame(&grid(1, 2, 16)), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_contract() {
        let a = FeatureGrid {
            h: 2,
            w: 2,
            tokens: Tensor::ones(4, 3),
        };
        let b = FeatureGrid::zeros(2, 2, 3);
        assert_eq!(tokenizer_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(tokenizer_loss(&a, &b).unwrap(), 1.0);
        let (x, y) = (grid(4, 2, 3), grid(5, 2, 3));
        let brute: f64 = x
            .tokens
            .data()
            .iter()
            .zip(y.tokens.data())
            .map(|(p, q)| ((p - q) as f64).powi(2))
            .sum::<f64>()
            / 12.0;
        assert!((tokenizer_loss(&x, &y).unwrap() as f64 - brute).abs() < 1e-6);
    }
}
