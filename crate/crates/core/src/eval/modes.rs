//! Mode recovery on branching corpora: coverage of the oracle futures and
//! where the averaged prediction puts the object.

use serde::{Deserialize, Serialize};

use super::head::TaskHead;
use super::protocol::{build_case, run_case, EvalConfig, Horizon};
use super::rollout::{QuerySource, WorldModel};
use super::score::{mean_grid, mode_coverage, predicted_centroid};
use crate::error::{Error, Result};
use crate::synthworld::{branch_futures, label_centroid, VideoSequence};
use crate::toyvfm::{FeatureGrid, FeatureSequence, ToyVfm};

/// Seed for enumerating the two oracle futures of a sequence.
const BRANCH_SEED: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeRecovery {
    /// Sequences with two distinct oracle futures at the mid target.
    pub n: usize,
    /// Mean per-sequence coverage.
    pub coverage: f64,
    /// Mean distance of the averaged prediction's object centroid from the
    /// midpoint of the two futures' centroids, over their separation.
    pub centroid_deviation: f64,
    /// Sequences where the head found no object in the averaged prediction.
    pub centroid_missing: usize,
}

impl ModeRecovery {
    pub const CSV_HEADER: &'static str = "n,coverage,centroid_deviation,centroid_missing";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{}",
            self.n, self.coverage, self.centroid_deviation, self.centroid_missing
        )
    }
}

/// Roll out the mid horizon of every sequence and compare the samples with
/// both oracle continuations from the branch frame. Sequences whose futures
/// coincide at the target are skipped.
#[allow(clippy::too_many_arguments)]
pub fn mode_recovery(
    model: &WorldModel<'_>,
    sequences: &[VideoSequence],
    features: &[FeatureSequence],
    vfm: &ToyVfm,
    head: &TaskHead,
    cfg: &EvalConfig,
    queries: &QuerySource,
    patch: usize,
) -> Result<ModeRecovery> {
    let (mut n, mut cov, mut dev, mut missing) = (0usize, 0.0, 0.0, 0usize);
    for (i, (seq, feats)) in sequences.iter().zip(features).enumerate() {
        let case = build_case(i, seq, feats, cfg, Horizon::Mid, patch)?;
        let last = *case.target_frames.last().unwrap();
        let futures = branch_futures(seq, seq.config.branch_frame(), 2, BRANCH_SEED)?;
        let size = seq.frame_size();
        let branches: Vec<FeatureGrid> = futures
            .iter()
            .map(|f| vfm.embed_frame(f.frame(last), size))
            .collect::<Result<_>>()?;
        if branches[0].bit_eq(&branches[1]) {
            continue;
        }
        let set = run_case(model, &case, cfg, queries)?;
        let samples = set.final_grids();
        cov += mode_coverage(&samples, &[&branches[0], &branches[1]])?;
        n += 1;

        let (a, b) = match (label_centroid(&futures[0], last), label_centroid(&futures[1], last)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config(format!("{}: a future has no object at frame {last}", seq.id))),
        };
        let mid = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
        let sep = (a.0 - b.0).hypot(a.1 - b.1);
        match predicted_centroid(head, &mean_grid(&samples)?, patch)? {
            Some(p) => dev += (p.0 - mid.0).hypot(p.1 - mid.1) / sep,
            None => missing += 1,
        }
    }
    if n == 0 {
        return Err(Error::Config("no sequence has two distinct futures".into()));
    }
    let found = (n - missing).max(1) as f64;
    Ok(ModeRecovery {
        n,
        coverage: cov / n as f64,
        centroid_deviation: dev / found,
        centroid_missing: missing,
    })
}
