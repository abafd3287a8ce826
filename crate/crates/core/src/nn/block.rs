//! Pre-norm transformer blocks with Layer Scale.
//!
//! ```text
//! a  = Attn(LN1(x))          with rotary q/k and a sparse mask
//! x' = x + ls1 ⊙ a
//! y  = x' + ls2 ⊙ MLP(LN2(x'))
//! ```
//!
//! Parameter names under a block prefix `p`:
//! `p.ln1.g p.ln1.b p.attn.{wq,bq,wk,bk,wv,bv,wo,bo} p.ls1 p.ln2.g p.ln2.b
//! p.mlp.{fc1,fc1b,fc2,fc2b} p.ls2`. Weight matrices are stored `[in, out]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Var};
use super::mask::AttnMask;
use super::params::{Init, ParamSet, LAYER_SCALE_INIT};
use super::rope::RopeTable;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("head_dim must be even for rotary pairs".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Add one block's parameters under `prefix` (`prefix.ln1.g`, ...).
pub fn init_block<T: Real>(ps: &mut ParamSet<T>, prefix: &str, cfg: &BlockConfig, init: &mut Init) {
    let (d, h) = (cfg.dim, cfg.hidden());
    let n = |s: &str| format!("{prefix}.{s}");
    ps.insert(n("ln1.g"), Tensor::ones(1, d), true);
    ps.insert(n("ln1.b"), Tensor::zeros(1, d), true);
    for w in ["q", "k", "v", "o"] {
        ps.insert(n(&format!("attn.w{w}")), init.weight(d, d), true);
        ps.insert(n(&format!("attn.b{w}")), Tensor::zeros(1, d), true);
    }
    ps.insert(n("ls1"), Tensor::full(1, d, T::from_f64_lossy(LAYER_SCALE_INIT)), true);
    ps.insert(n("ln2.g"), Tensor::ones(1, d), true);
    ps.insert(n("ln2.b"), Tensor::zeros(1, d), true);
    ps.insert(n("mlp.fc1"), init.weight(d, h), true);
    ps.insert(n("mlp.fc1b"), Tensor::zeros(1, h), true);
    ps.insert(n("mlp.fc2"), init.weight(h, d), true);
    ps.insert(n("mlp.fc2b"), Tensor::zeros(1, d), true);
    ps.insert(n("ls2"), Tensor::full(1, d, T::from_f64_lossy(LAYER_SCALE_INIT)), true);
}

/// A stack of `depth` blocks named `blocks.0`, `blocks.1`, ...
pub fn init_params<T: Real>(cfg: &BlockConfig, depth: usize, seed: u64) -> ParamSet<T> {
    let mut ps = ParamSet::new();
    let mut init = Init::new(seed);
    for i in 0..depth {
        init_block(&mut ps, &format!("blocks.{i}"), cfg, &mut init);
    }
    ps
}

/// One block applied to `x: [n, dim]`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    mask: &Arc<AttnMask>,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<Var> {
    let n = |s: &str| format!("{prefix}.{s}");
    let h = g.layer_norm(x, p.get(&n("ln1.g"))?, p.get(&n("ln1.b"))?)?;
    let mut q = g.linear(h, p.get(&n("attn.wq"))?, Some(p.get(&n("attn.bq"))?))?;
    let mut k = g.linear(h, p.get(&n("attn.wk"))?, Some(p.get(&n("attn.bk"))?))?;
    let v = g.linear(h, p.get(&n("attn.wv"))?, Some(p.get(&n("attn.bv"))?))?;
    if let Some(table) = rope {
        q = g.rope(q, table)?;
        k = g.rope(k, table)?;
    }
    let a = g.attention(q, k, v, cfg.heads, mask)?;
    let o = g.linear(a, p.get(&n("attn.wo"))?, Some(p.get(&n("attn.bo"))?))?;
    let o = g.mul_row(o, p.get(&n("ls1"))?)?;
    let x = g.add(x, o)?;
    let h = g.layer_norm(x, p.get(&n("ln2.g"))?, p.get(&n("ln2.b"))?)?;
    let m = g.linear(h, p.get(&n("mlp.fc1"))?, Some(p.get(&n("mlp.fc1b"))?))?;
    let m = g.gelu(m);
    let m = g.linear(m, p.get(&n("mlp.fc2"))?, Some(p.get(&n("mlp.fc2b"))?))?;
    let m = g.mul_row(m, p.get(&n("ls2"))?)?;
    g.add(x, m)
}

/// `depth` consecutive blocks named `{prefix}.{i}`.
#[allow(clippy::too_many_arguments)]
pub fn stack_forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    depth: usize,
    cfg: &BlockConfig,
    mut x: Var,
    mask: &Arc<AttnMask>,
    rope: Option<&Arc<RopeTable<T>>>,
) -> Result<Var> {
    for i in 0..depth {
        x = block_forward(g, p, &format!("{prefix}.{i}"), cfg, x, mask, rope)?;
    }
    Ok(x)
}

/// Evaluate a single block on concrete tokens without recording gradients.
pub fn attention_block<T: Real>(
    tokens: &Tensor<T>,
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &BlockConfig,
    mask: &AttnMask,
    rope: Option<&RopeTable<T>>,
) -> Result<Tensor<T>> {
    let mut g = Graph::no_grad();
    let p = g.bind(params);
    let x = g.constant(tokens.clone());
    let mask = Arc::new(mask.clone());
    let rope = rope.map(|r| Arc::new(r.clone()));
    let y = block_forward(&mut g, &p, prefix, cfg, x, &mask, rope.as_ref())?;
    Ok(g.value(y).clone())
}
