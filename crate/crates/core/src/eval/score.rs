//! Best / mean scoring, reference bounds and mode coverage.

use serde::{Deserialize, Serialize};

use super::head::TaskHead;
use super::metrics::compute_miou;
use super::rollout::RolloutSet;
use crate::error::{Error, Result};
use crate::nn::{mse, Tensor};
use crate::toyvfm::FeatureGrid;

/// Mean squared feature error.
pub fn feature_loss(pred: &FeatureGrid, truth: &FeatureGrid) -> Result<f64> {
    Ok(mse(&pred.tokens, &truth.tokens)? as f64)
}

pub fn feature_rms(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    Ok(feature_loss(a, b)?.sqrt())
}

/// mIoU of the head applied to `grid` against patch labels.
pub fn head_miou(head: &TaskHead, grid: &FeatureGrid, labels: &[u8]) -> Result<f64> {
    let pred = head.predict(grid)?;
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} patch predictions for {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(compute_miou(&pred, labels, head.num_classes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Trajectory reported (for best); `None` for the averaged prediction.
    pub index: Option<usize>,
    pub feature_loss: f64,
    pub miou: f64,
}

/// The sample with the lowest final-step feature loss, ties to the lowest
/// index, scored with the head.
pub fn score_best(set: &RolloutSet, truth: &FeatureGrid, head: &TaskHead, labels: &[u8]) -> Result<Score> {
    let finals = set.final_grids();
    if finals.is_empty() {
        return Err(Error::Config("no trajectories to score".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, g) in finals.iter().enumerate() {
        let l = feature_loss(g, truth)?;
        if l < best.1 {
            best = (i, l);
        }
    }
    Ok(Score {
        index: Some(best.0),
        feature_loss: best.1,
        miou: head_miou(head, finals[best.0], labels)?,
    })
}

/// Elementwise mean of the final-step grids.
pub fn mean_grid(grids: &[&FeatureGrid]) -> Result<FeatureGrid> {
    let first = grids.first().ok_or_else(|| Error::Config("no grids to average".into()))?;
    let mut acc = vec![0.0f64; first.tokens.len()];
    for g in grids {
        if g.tokens.shape() != first.tokens.shape() {
            return Err(Error::Shape("grids to average differ in shape".into()));
        }
        for (a, &v) in acc.iter_mut().zip(g.tokens.data()) {
            *a += v as f64;
        }
    }
    let n = grids.len() as f64;
    Ok(FeatureGrid {
        h: first.h,
        w: first.w,
        tokens: Tensor::from_vec(
            first.tokens.rows(),
            first.tokens.cols(),
            acc.into_iter().map(|a| (a / n) as f32).collect(),
        ),
    })
}

/// The head applied once to the averaged final-step features.
pub fn score_mean(set: &RolloutSet, truth: &FeatureGrid, head: &TaskHead, labels: &[u8]) -> Result<Score> {
    let avg = mean_grid(&set.final_grids())?;
    Ok(Score {
        index: None,
        feature_loss: feature_loss(&avg, truth)?,
        miou: head_miou(head, &avg, labels)?,
    })
}

/// Last observed features used as the prediction.
pub fn copy_last(last_context: &FeatureGrid, truth: &FeatureGrid, head: &TaskHead, labels: &[u8]) -> Result<Score> {
    Ok(Score {
        index: None,
        feature_loss: feature_loss(last_context, truth)?,
        miou: head_miou(head, last_context, labels)?,
    })
}

/// The true future features: the head's own accuracy.
pub fn present(truth: &FeatureGrid, head: &TaskHead, labels: &[u8]) -> Result<f64> {
    head_miou(head, truth, labels)
}

/// Fraction of oracle branches matched by at least one sample. A sample
/// matches its nearest branch (RMS feature distance) when that distance is
/// below half the smallest distance between two distinct branches. With a
/// single distinct branch every sample matches it.
pub fn mode_coverage(samples: &[&FeatureGrid], branches: &[&FeatureGrid]) -> Result<f64> {
    if samples.is_empty() || branches.is_empty() {
        return Err(Error::Config("mode coverage needs samples and branches".into()));
    }
    let mut distinct: Vec<&FeatureGrid> = Vec::new();
    for b in branches {
        if !distinct.iter().any(|d| d.bit_eq(b)) {
            distinct.push(b);
        }
    }
    if distinct.len() == 1 {
        return Ok(1.0);
    }
    let threshold = 0.5 * coverage_separation(&distinct)?;
    let mut hit = vec![false; distinct.len()];
    for s in samples {
        let d: Vec<f64> = distinct.iter().map(|b| feature_rms(s, b)).collect::<Result<_>>()?;
        let (j, dj) = d
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |a, (j, v)| if v < a.1 { (j, v) } else { a });
        if dj < threshold {
            hit[j] = true;
        }
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / distinct.len() as f64)
}

/// Smallest RMS distance between two branches.
pub fn coverage_separation(branches: &[&FeatureGrid]) -> Result<f64> {
    let mut sep = f64::INFINITY;
    for i in 0..branches.len() {
        for j in i + 1..branches.len() {
            sep = sep.min(feature_rms(branches[i], branches[j])?);
        }
    }
    Ok(sep)
}

/// Probability-weighted centroid `(x, y)` in pixels of everything the head
/// does not call background (class 0).
pub fn predicted_centroid(head: &TaskHead, grid: &FeatureGrid, patch: usize) -> Result<Option<(f64, f64)>> {
    let probs = head.probs(grid)?;
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..grid.h {
        for c in 0..grid.w {
            let w = 1.0 - probs.get(r * grid.w + c, 0) as f64;
            sw += w;
            sx += w * ((c as f64 + 0.5) * patch as f64);
            sy += w * ((r as f64 + 0.5) * patch as f64);
        }
    }
    Ok((sw > 1e-9).then(|| (sx / sw, sy / sw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: &[f32]) -> FeatureGrid {
        FeatureGrid {
            h: 1,
            w: 1,
            tokens: Tensor::from_vec(1, v.len(), v.to_vec()),
        }
    }

    #[test]
    fn mean_grid_matches_elementwise_average() {
        let (a, b) = (grid(&[1.0, 2.0, -3.0]), grid(&[3.0, 0.5, 1.0]));
        let m = mean_grid(&[&a, &b]).unwrap();
        for i in 0..3 {
            let want = (a.tokens.data()[i] + b.tokens.data()[i]) / 2.0;
            assert_eq!(m.tokens.data()[i], want);
        }
    }

    #[test]
    fn coverage_of_two_branches() {
        let (l, r) = (grid(&[-1.0, 0.0]), grid(&[1.0, 0.0]));
        let near_l = grid(&[-0.9, 0.1]);
        let near_r = grid(&[0.8, 0.0]);
        let mid = grid(&[0.0, 0.0]);
        assert_eq!(mode_coverage(&[&near_l], &[&l, &r]).unwrap(), 0.5);
        assert_eq!(mode_coverage(&[&near_l, &near_r], &[&l, &r]).unwrap(), 1.0);
        assert_eq!(mode_coverage(&[&mid, &mid], &[&l, &r]).unwrap(), 0.0);
        assert_eq!(mode_coverage(&[&mid], &[&l, &l]).unwrap(), 1.0);
    }
}
