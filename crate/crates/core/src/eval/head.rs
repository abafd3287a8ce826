//! Linear segmentation probe over frozen patch features: per-feature
//! standardization (statistics of the training features) followed by a
//! linear map to class logits, trained with softmax cross-entropy.

use serde::{Deserialize, Serialize};

use super::metrics::Confusion;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Graph, Init, OptimConfig, ParamSet, Tensor};
use crate::toyvfm::FeatureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub num_classes: usize,
    params: ParamSet<f32>,
}

impl TaskHead {
    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn from_params(num_classes: usize, params: ParamSet<f32>) -> Result<Self> {
        let w = params.get("linear.w")?;
        if w.cols() != num_classes
            || params.get("linear.b")?.cols() != num_classes
            || params.get("norm.mean")?.cols() != w.rows()
            || params.get("norm.inv_std")?.cols() != w.rows()
        {
            return Err(Error::Shape("task head tensors disagree".into()));
        }
        Ok(Self {
            num_classes,
            params,
        })
    }

    fn standardize(&self, tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mean = self.params.get("norm.mean")?;
        let inv = self.params.get("norm.inv_std")?;
        if tokens.cols() != mean.cols() {
            return Err(Error::Shape(format!(
                "head expects dim {}, got {}",
                mean.cols(),
                tokens.cols()
            )));
        }
        let mut out = tokens.clone();
        let d = out.cols();
        for row in out.data_mut().chunks_mut(d) {
            for c in 0..d {
                row[c] = (row[c] - mean.data()[c]) * inv.data()[c];
            }
        }
        Ok(out)
    }

    /// Class logits, `[tokens, classes]`.
    pub fn logits(&self, tokens: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = self.standardize(tokens)?;
        let mut out = x.matmul(self.params.get("linear.w")?);
        let b = self.params.get("linear.b")?.data().to_vec();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(out)
    }

    /// Per-token class probabilities.
    pub fn probs(&self, grid: &FeatureGrid) -> Result<Tensor<f32>> {
        let mut l = self.logits(&grid.tokens)?;
        let c = l.cols();
        for row in l.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(l)
    }

    /// Argmax class per patch (ties to the lowest id).
    pub fn predict(&self, grid: &FeatureGrid) -> Result<Vec<u8>> {
        let l = self.logits(&grid.tokens)?;
        Ok((0..l.rows())
            .map(|r| {
                let row = l.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// mIoU of the head's predictions against patch labels.
    pub fn evaluate(&self, grids: &[&FeatureGrid], labels: &[&[u8]]) -> Result<f64> {
        let mut conf = Confusion::new(self.num_classes);
        for (g, l) in grids.iter().zip(labels) {
            conf.add(&self.predict(g)?, l);
        }
        Ok(conf.miou())
    }
}

/// Fit the probe on ground-truth features and their patch labels.
pub fn train_task_head(
    grids: &[&FeatureGrid],
    labels: &[&[u8]],
    num_classes: usize,
    cfg: &HeadConfig,
) -> Result<TaskHead> {
    if grids.is_empty() || grids.len() != labels.len() {
        return Err(Error::Config("task head needs matching, non-empty features and labels".into()));
    }
    let d = grids[0].dim();
    let refs: Vec<&Tensor<f32>> = grids.iter().map(|g| &g.tokens).collect();
    let x = Tensor::vstack(&refs);
    let y: Vec<usize> = labels.iter().flat_map(|l| l.iter().map(|&c| c as usize)).collect();
    if y.len() != x.rows() || y.iter().any(|&c| c >= num_classes) {
        return Err(Error::Shape("patch labels do not match features".into()));
    }
    let n = x.rows() as f64;
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            mean[c] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for r in 0..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            var[c] += (v as f64 - mean[c]).powi(2);
        }
    }
    let inv: Vec<f32> = var.iter().map(|v| (1.0 / (v / n + 1e-5).sqrt()) as f32).collect();
    let mut ps = ParamSet::new();
    ps.insert("norm.mean", Tensor::row_vector(mean.iter().map(|&m| m as f32).collect()), false);
    ps.insert("norm.inv_std", Tensor::row_vector(inv), false);
    let mut init = Init::new(cfg.seed);
    ps.insert("linear.w", init.weight(d, num_classes), true);
    ps.insert("linear.b", Tensor::zeros(1, num_classes), true);
    let mut head = TaskHead {
        num_classes,
        params: ps,
    };
    let xs = head.standardize(&x)?;
    let mut opt = AdamW::new(OptimConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let b = g.bind(&head.params);
        let xv = g.constant(xs.clone());
        let logits = g.linear(xv, b.get("linear.w")?, Some(b.get("linear.b")?))?;
        let loss = g.cross_entropy(logits, &y)?;
        let grads = g.backward(loss)?.into_named();
        opt.step(&mut head.params, grads)?;
    }
    Ok(head)
}
