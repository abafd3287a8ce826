//! A frozen toy vision encoder: linear patch embedding followed by a couple of
//! transformer blocks with 2-D rotary positions and a final layer norm.
//!
//! All weights are derived from a build seed and never trained. Matrices are
//! orthonormal (Gram-Schmidt on Gaussian draws). The first three embedding
//! directions are the per-channel patch means, so color coverage of a patch
//! survives the projection linearly.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{stack_forward, AttnMask, BlockConfig, Graph, ParamSet, RopeLayout, RopeTable, Tensor};
use crate::synthworld::VideoSequence;

/// Reserved checkpoint component name for the shared extractor.
pub const COMPONENT: &str = "toyvfm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyVfmConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
    pub rope_base: f64,
    /// Residual-branch scales of the frozen blocks (attention, MLP).
    pub attn_scale: f64,
    pub mlp_scale: f64,
}

impl Default for ToyVfmConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            dim: 64,
            heads: 4,
            depth: 2,
            mlp_ratio: 4.0,
            seed: 0x5eed_f00d,
            rope_base: 100.0,
            attn_scale: 0.2,
            mlp_scale: 0.5,
        }
    }
}

impl ToyVfmConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }
}

/// Patch-token grid of one frame, `[h * w, dim]` in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Tensor<f32>,
}

impl FeatureGrid {
    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn num_tokens(&self) -> usize {
        self.h * self.w
    }

    /// Token at patch row `r`, column `c`.
    pub fn at(&self, r: usize, c: usize) -> &[f32] {
        self.tokens.row(r * self.w + c)
    }

    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self {
            h,
            w,
            tokens: Tensor::zeros(h * w, dim),
        }
    }

    pub fn bit_eq(&self, other: &FeatureGrid) -> bool {
        self.h == other.h
            && self.w == other.w
            && self.tokens.shape() == other.tokens.shape()
            && self
                .tokens
                .data()
                .iter()
                .zip(other.tokens.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub grids: Vec<FeatureGrid>,
    pub timestamps: Vec<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ToyVfm {
    config: ToyVfmConfig,
    params: ParamSet<f32>,
}

/// Orthonormalize Gaussian columns after the given fixed unit columns.
fn orthonormal_columns(rows: usize, cols: usize, fixed: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(cols <= rows);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let push = |mut v: Vec<f64>, basis: &mut Vec<Vec<f64>>| -> bool {
        for b in basis.iter() {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
        true
    };
    for f in fixed.iter().take(cols) {
        push(f.clone(), &mut basis);
    }
    while basis.len() < cols {
        let v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        push(v, &mut basis);
    }
    basis
}

/// `[rows, cols]` matrix with orthonormal columns (or rows when wide).
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if cols <= rows {
        let basis = orthonormal_columns(rows, cols, &[], rng);
        Tensor::from_fn(rows, cols, |r, c| (gain * basis[c][r]) as f32)
    } else {
        let basis = orthonormal_columns(cols, rows, &[], rng);
        Tensor::from_fn(rows, cols, |r, c| (gain * basis[r][c]) as f32)
    }
}

impl ToyVfm {
    pub fn new(config: ToyVfmConfig) -> Result<Self> {
        let bc = config.block();
        bc.validate()?;
        let p = config.patch_size;
        let d = config.dim;
        let pin = p * p * 3;
        if p == 0 || d > pin {
            return Err(Error::Config(format!(
                "toy encoder dim {d} exceeds patch input size {pin}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        // per-channel mean directions first
        let fixed: Vec<Vec<f64>> = (0..3)
            .map(|ch| (0..pin).map(|i| if i % 3 == ch { 1.0 } else { 0.0 }).collect())
            .collect();
        let basis = orthonormal_columns(pin, d, &fixed, &mut rng);
        ps.insert(
            "patch.w",
            Tensor::from_fn(pin, d, |r, c| basis[c][r] as f32),
            false,
        );
        ps.insert("patch.b", Tensor::zeros(1, d), false);
        let h = bc.hidden();
        for i in 0..config.depth {
            let n = |s: &str| format!("blocks.{i}.{s}");
            ps.insert(n("ln1.g"), Tensor::ones(1, d), false);
            ps.insert(n("ln1.b"), Tensor::zeros(1, d), false);
            for w in ["q", "k", "v", "o"] {
                ps.insert(n(&format!("attn.w{w}")), orthogonal(d, d, 1.0, &mut rng), false);
                ps.insert(n(&format!("attn.b{w}")), Tensor::zeros(1, d), false);
            }
            ps.insert(n("ls1"), Tensor::full(1, d, config.attn_scale as f32), false);
            ps.insert(n("ln2.g"), Tensor::ones(1, d), false);
            ps.insert(n("ln2.b"), Tensor::zeros(1, d), false);
            ps.insert(n("mlp.fc1"), orthogonal(d, h, 2.0, &mut rng), false);
            ps.insert(n("mlp.fc1b"), Tensor::zeros(1, h), false);
            ps.insert(n("mlp.fc2"), orthogonal(h, d, 1.0, &mut rng), false);
            ps.insert(n("mlp.fc2b"), Tensor::zeros(1, d), false);
            ps.insert(n("ls2"), Tensor::full(1, d, config.mlp_scale as f32), false);
        }
        ps.insert("norm.g", Tensor::ones(1, d), false);
        ps.insert("norm.b", Tensor::zeros(1, d), false);
        Ok(Self { config, params: ps })
    }

    /// Rebuild from serialized weights.
    pub fn from_params(config: ToyVfmConfig, mut params: ParamSet<f32>) -> Result<Self> {
        let reference = Self::new(config)?;
        for (name, p) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::Shape(format!("toy encoder tensor {name}")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected toy encoder tensors".into()));
        }
        params.freeze();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ToyVfmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn grid_side(&self, frame_size: usize) -> Result<usize> {
        let p = self.config.patch_size;
        if frame_size == 0 || frame_size % p != 0 {
            return Err(Error::Shape(format!(
                "frame size {frame_size} not divisible by patch size {p}"
            )));
        }
        Ok(frame_size / p)
    }

    /// Embed one square `(size, size, 3)` frame.
    pub fn embed_frame(&self, frame: &[f32], size: usize) -> Result<FeatureGrid> {
        Ok(self.embed_frames(&[frame], size)?.pop().expect("one grid"))
    }

    /// Embed several frames of the same size in one pass. Each frame only
    /// attends to its own patches, so results equal per-frame embedding.
    pub fn embed_frames(&self, frames: &[&[f32]], size: usize) -> Result<Vec<FeatureGrid>> {
        Ok(self.forward(frames, size)?.0)
    }

    /// Multiply-accumulates recorded while embedding `frames`.
    pub fn count_macs(&self, frames: &[&[f32]], size: usize) -> Result<u64> {
        Ok(self.forward(frames, size)?.1)
    }

    fn forward(&self, frames: &[&[f32]], size: usize) -> Result<(Vec<FeatureGrid>, u64)> {
        let side = self.grid_side(size)?;
        let p = self.config.patch_size;
        let pin = p * p * 3;
        let per = side * side;
        let n = frames.len();
        if n == 0 {
            return Ok((Vec::new(), 0));
        }
        let mut patches = Tensor::zeros(n * per, pin);
        for (f, frame) in frames.iter().enumerate() {
            if frame.len() != size * size * 3 {
                return Err(Error::Shape(format!(
                    "frame has {} values, expected {}",
                    frame.len(),
                    size * size * 3
                )));
            }
            for pr in 0..side {
                for pc in 0..side {
                    let row = patches.row_mut(f * per + pr * side + pc);
                    for y in 0..p {
                        let src = ((pr * p + y) * size + pc * p) * 3;
                        for (k, v) in frame[src..src + p * 3].iter().enumerate() {
                            row[y * p * 3 + k] = v - 0.5;
                        }
                    }
                }
            }
        }
        let mut positions = Vec::with_capacity(n * per * 2);
        for _ in 0..n {
            for r in 0..side {
                for c in 0..side {
                    positions.push(r as f64);
                    positions.push(c as f64);
                }
            }
        }
        let bc = self.config.block();
        let layout = RopeLayout::proportional(bc.head_dim(), 2);
        let table = Arc::new(RopeTable::new(&layout, self.config.rope_base, &positions));
        let mask = Arc::new(AttnMask::block_diagonal(&vec![per; n]));

        let mut g = Graph::<f32>::no_grad();
        let b = g.bind(&self.params);
        let x = g.constant(patches);
        let x = g.linear(x, b.get("patch.w")?, Some(b.get("patch.b")?))?;
        let x = stack_forward(&mut g, &b, "blocks", self.config.depth, &bc, x, &mask, Some(&table))?;
        let x = g.layer_norm(x, b.get("norm.g")?, b.get("norm.b")?)?;
        let out = g.value(x);
        let grids = (0..n)
            .map(|f| FeatureGrid {
                h: side,
                w: side,
                tokens: out.slice_rows(f * per, (f + 1) * per),
            })
            .collect();
        Ok((grids, g.macs()))
    }

    /// Features of the all-zero (black) frame.
    pub fn black_frame(&self, size: usize) -> Result<FeatureGrid> {
        self.embed_frame(&vec![0.0; size * size * 3], size)
    }

    pub fn embed_sequence(&self, seq: &VideoSequence) -> Result<FeatureSequence> {
        let size = seq.frame_size();
        let frames: Vec<&[f32]> = (0..seq.len()).map(|i| seq.frame(i)).collect();
        let mut grids = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(32) {
            grids.extend(self.embed_frames(chunk, size)?);
        }
        Ok(FeatureSequence {
            grids,
            timestamps: seq.timestamps.clone(),
        })
    }

    /// Multiply-accumulates of one frame's forward pass.
    pub fn macs_per_frame(&self, frame_size: usize) -> Result<u64> {
        let side = self.grid_side(frame_size)? as u64;
        let n = side * side;
        let p = self.config.patch_size as u64;
        let embed = n * p * p * 3 * self.config.dim as u64;
        let blocks = crate::flops::count_block(&self.config.block(), n as usize) * self.config.depth as u64;
        Ok(embed + blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(size: usize, f: impl Fn(usize, usize, usize) -> f32) -> Vec<f32> {
        let mut v = vec![0.0; size * size * 3];
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    v[(y * size + x) * 3 + c] = f(y, x, c);
                }
            }
        }
        v
    }

    #[test]
    fn grid_shape() {
        let vfm = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let g = vfm.embed_frame(&frame(64, |y, x, c| ((y + x + c) % 7) as f32 / 7.0), 64).unwrap();
        assert_eq!((g.h, g.w, g.dim()), (8, 8, 64));
        assert!(g.tokens.all_finite());
        assert!(matches!(vfm.embed_frame(&frame(60, |_, _, _| 0.0), 60), Err(Error::Shape(_))));
    }

    #[test]
    fn frozen_and_deterministic() {
        let a = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let b = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.iter().all(|(_, p)| !p.trainable));
        let f = frame(32, |y, x, c| ((y * 3 + x * 5 + c) % 11) as f32 / 11.0);
        assert!(a.embed_frame(&f, 32).unwrap().bit_eq(&b.embed_frame(&f, 32).unwrap()));
    }

    #[test]
    fn one_patch_change_is_visible() {
        let vfm = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let f1 = frame(32, |_, _, _| 0.2);
        let f2 = frame(32, |y, x, c| if y < 8 && x >= 8 && x < 16 && c == 0 { 0.9 } else { 0.2 });
        let g1 = vfm.embed_frame(&f1, 32).unwrap();
        let g2 = vfm.embed_frame(&f2, 32).unwrap();
        assert!(!g1.bit_eq(&g2));
        let diff = |r, c| -> f32 {
            g1.at(r, c).iter().zip(g2.at(r, c)).map(|(a, b)| (a - b).abs()).sum()
        };
        // the changed patch moves the most
        assert!(diff(0, 1) > diff(3, 3));
    }

    #[test]
    fn batched_equals_single() {
        let vfm = ToyVfm::new(ToyVfmConfig::default()).unwrap();
        let f1 = frame(32, |y, x, c| ((y * 7 + x + c) % 13) as f32 / 13.0);
        let f2 = frame(32, |y, x, _| if (y / 8 + x / 8) % 2 == 0 { 0.1 } else { 0.8 });
        let batch = vfm.embed_frames(&[&f1, &f2, &f1], 32).unwrap();
        assert!(batch[0].bit_eq(&vfm.embed_frame(&f1, 32).unwrap()));
        assert!(batch[1].bit_eq(&vfm.embed_frame(&f2, 32).unwrap()));
        assert!(batch[2].bit_eq(&batch[0]));
    }
}
