//! Segmentation metrics.

/// Confusion counts `counts[truth * n + pred]`, accumulated across frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    n: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        assert_eq!(pred.len(), truth.len(), "prediction/label length");
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * self.n + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Intersection over union per class; `None` for classes absent from
    /// both predictions and labels.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let tp = self.counts[c * self.n + c];
                let row: u64 = self.counts[c * self.n..(c + 1) * self.n].iter().sum();
                let col: u64 = (0..self.n).map(|t| self.counts[t * self.n + c]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes (1.0 when nothing is present).
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

pub fn compute_miou(pred: &[u8], truth: &[u8], num_classes: usize) -> f64 {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth);
    c.miou()
}

/// Majority class of each `patch × patch` block of a `(size, size)` label
/// mask; ties go to the lowest class id.
pub fn patch_labels(labels: &[u8], size: usize, patch: usize, num_classes: usize) -> Vec<u8> {
    let side = size / patch;
    let mut out = Vec::with_capacity(side * side);
    let mut hist = vec![0usize; num_classes];
    for pr in 0..side {
        for pc in 0..side {
            hist.fill(0);
            for y in 0..patch {
                for x in 0..patch {
                    hist[labels[(pr * patch + y) * size + pc * patch + x] as usize] += 1;
                }
            }
            let mut best = 0;
            for (c, &h) in hist.iter().enumerate() {
                if h > hist[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_disjoint() {
        assert_eq!(compute_miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 1.0);
        assert_eq!(compute_miou(&[1, 1], &[0, 0], 2), 0.0);
    }

    #[test]
    fn two_by_two_with_one_error() {
        // truth [[0,0],[1,1]], prediction flips the last cell to 0
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 1, 0];
        // brute force: class 0 tp=2 union=3, class 1 tp=1 union=2
        let mut ious = Vec::new();
        for c in 0..2u8 {
            let inter = truth.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count();
            let union = truth.iter().zip(&pred).filter(|(t, p)| **t == c || **p == c).count();
            ious.push(inter as f64 / union as f64);
        }
        let expected = (ious[0] + ious[1]) / 2.0;
        assert!((compute_miou(&pred, &truth, 2) - expected).abs() < 1e-15);
        assert!((expected - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_ignored() {
        assert_eq!(compute_miou(&[2, 2], &[2, 2], 5), 1.0);
    }

    #[test]
    fn majority_with_ties() {
        // 2x2 patches over a 4x4 mask
        #[rustfmt::skip]
        let labels = [
            1, 1, 0, 2,
            1, 0, 2, 0,
            0, 0, 3, 3,
            0, 0, 3, 3,
        ];
        assert_eq!(patch_labels(&labels, 4, 2, 4), vec![1, 0, 0, 3]);
    }
}
