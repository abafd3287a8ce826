//! Timestamp-offset sampling shared by tokenizer and predictor training.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform range of temporal offsets, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OffsetRange {
    pub min: f64,
    pub max: f64,
}

impl Default for OffsetRange {
    fn default() -> Self {
        Self {
            min: 1.0 / 25.0,
            max: 1.0 / 3.0,
        }
    }
}

impl OffsetRange {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Index of the timestamp closest to `t`; ties go to the earlier frame.
pub fn nearest_frame(timestamps: &[f64], t: f64) -> usize {
    let hi = timestamps.partition_point(|&x| x < t);
    if hi == 0 {
        return 0;
    }
    if hi == timestamps.len() {
        return hi - 1;
    }
    if t - timestamps[hi - 1] <= timestamps[hi] - t {
        hi - 1
    } else {
        hi
    }
}
