//! Axial rotary position encodings.
//!
//! Each head's first `rotated` channels are split into contiguous per-axis
//! bands; within a band, adjacent channel pairs `(2j, 2j+1)` rotate by
//! `pos_axis · base^(-2j / band)`. The trailing channels are left untouched.
//! For `head_dim = 16` this gives 4+4+4 (+4 unrotated) in 3-D, 6+6 (+4) in
//! 2-D and 12 (+4) in 1-D.

use serde::{Deserialize, Serialize};

use super::tensor::Real;

/// Frequency base and the scale applied to continuous timestamps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    /// Temporal positions are `seconds * time_scale`.
    pub time_scale: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            base: 100.0,
            time_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeLayout {
    head_dim: usize,
    axis_dims: Vec<usize>,
}

impl RopeLayout {
    /// Explicit per-axis band widths; each must be even and they must fit.
    pub fn new(head_dim: usize, axis_dims: Vec<usize>) -> Self {
        assert!(axis_dims.iter().all(|d| d % 2 == 0), "rotary bands must be even");
        assert!(axis_dims.iter().sum::<usize>() <= head_dim, "rotary bands exceed head_dim");
        Self { head_dim, axis_dims }
    }

    /// Leave `min(4, head_dim / 4)` trailing channels unrotated and split the
    /// rest evenly (rounded down to even) across `n_axes` bands.
    pub fn proportional(head_dim: usize, n_axes: usize) -> Self {
        let unrotated = 4.min(head_dim / 4);
        let band = ((head_dim - unrotated) / (2 * n_axes)) * 2;
        Self::new(head_dim, vec![band; n_axes])
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn n_axes(&self) -> usize {
        self.axis_dims.len()
    }

    pub fn axis_dims(&self) -> &[usize] {
        &self.axis_dims
    }

    pub fn unrotated(&self) -> usize {
        self.head_dim - self.axis_dims.iter().sum::<usize>()
    }

    /// `(first channel of the pair, axis, frequency)` for every rotated pair.
    fn pairs(&self, base: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (axis, &dims) in self.axis_dims.iter().enumerate() {
            for j in 0..dims / 2 {
                let freq = base.powf(-(2.0 * j as f64) / dims as f64);
                out.push((offset + 2 * j, axis, freq));
            }
            offset += dims;
        }
        out
    }

    /// Rotate a vector made of whole heads in place.
    pub fn rotate(&self, v: &mut [f64], pos: &[f64], base: f64) {
        assert_eq!(pos.len(), self.n_axes(), "position arity");
        assert_eq!(v.len() % self.head_dim, 0, "vector is not a whole number of heads");
        let pairs = self.pairs(base);
        for head in v.chunks_mut(self.head_dim) {
            for &(c, axis, freq) in &pairs {
                let (s, co) = (pos[axis] * freq).sin_cos();
                let (a, b) = (head[c], head[c + 1]);
                head[c] = a * co - b * s;
                head[c + 1] = a * s + b * co;
            }
        }
    }
}

fn rotate_pair(
    layout: &RopeLayout,
    q: &[f64],
    k: &[f64],
    pos: &[f64],
    base: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut q = q.to_vec();
    let mut k = k.to_vec();
    layout.rotate(&mut q, pos, base);
    layout.rotate(&mut k, pos, base);
    (q, k)
}

/// Rotate query/key head vectors by a `(t, h, w)` position.
pub fn rope_3d(q: &[f64], k: &[f64], pos: [f64; 3], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    rotate_pair(&RopeLayout::proportional(head_dim, 3), q, k, &pos, base)
}

/// Rotate query/key head vectors by a temporal position.
pub fn rope_1d(q: &[f64], k: &[f64], pos: f64, head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    rotate_pair(&RopeLayout::proportional(head_dim, 1), q, k, &[pos], base)
}

/// Precomputed per-token rotations for a token set, consumed by
/// [`Graph::rope`](super::graph::Graph::rope).
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    head_dim: usize,
    n_tokens: usize,
    pair_channels: Vec<usize>,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    /// `positions` is row-major `[n_tokens, n_axes]`, already scaled.
    pub fn new(layout: &RopeLayout, base: f64, positions: &[f64]) -> Self {
        let axes = layout.n_axes();
        assert!(axes > 0 && positions.len() % axes == 0, "position arity");
        let n_tokens = positions.len() / axes;
        let pairs = layout.pairs(base);
        let mut cos = Vec::with_capacity(n_tokens * pairs.len());
        let mut sin = Vec::with_capacity(n_tokens * pairs.len());
        for pos in positions.chunks(axes) {
            for &(_, axis, freq) in &pairs {
                let (s, c) = (pos[axis] * freq).sin_cos();
                cos.push(T::from_f64_lossy(c));
                sin.push(T::from_f64_lossy(s));
            }
        }
        Self {
            head_dim: layout.head_dim,
            n_tokens,
            pair_channels: pairs.iter().map(|p| p.0).collect(),
            cos,
            sin,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotate `[n_tokens, heads * head_dim]` rows forward (`inverse = false`)
    /// or by the transpose rotation (used for gradients).
    pub(crate) fn apply(&self, data: &mut [T], cols: usize, inverse: bool) {
        let np = self.pair_channels.len();
        for (t, row) in data.chunks_mut(cols).enumerate() {
            let cs = &self.cos[t * np..(t + 1) * np];
            let sn = &self.sin[t * np..(t + 1) * np];
            for head in row.chunks_mut(self.head_dim) {
                for (p, &c) in self.pair_channels.iter().enumerate() {
                    let (a, b) = (head[c], head[c + 1]);
                    let s = if inverse { -sn[p] } else { sn[p] };
                    head[c] = a * cs[p] - b * s;
                    head[c + 1] = a * s + b * cs[p];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    #[test]
    fn desk_splits() {
        let l3 = RopeLayout::proportional(16, 3);
        assert_eq!(l3.axis_dims(), &[4, 4, 4]);
        assert_eq!(l3.unrotated(), 4);
        let l1 = RopeLayout::proportional(16, 1);
        assert_eq!(l1.axis_dims(), &[12]);
        assert_eq!(l1.unrotated(), 4);
        let l2 = RopeLayout::proportional(16, 2);
        assert_eq!(l2.axis_dims(), &[6, 6]);
        // ViT-B head size reproduces 20+20+20 / 60 with 4 unrotated
        assert_eq!(RopeLayout::proportional(64, 3).axis_dims(), &[20, 20, 20]);
        assert_eq!(RopeLayout::proportional(64, 1).axis_dims(), &[60]);
    }

    #[test]
    fn origin_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = randv(&mut rng, 16);
        let k = randv(&mut rng, 16);
        let (q3, k3) = rope_3d(&q, &k, [0.0; 3], 16, 100.0);
        assert_eq!(q3, q);
        assert_eq!(k3, k);
        let (q1, k1) = rope_1d(&q, &k, 0.0, 16, 100.0);
        assert_eq!(q1, q);
        assert_eq!(k1, k);
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let q = randv(&mut rng, 16);
            let k = randv(&mut rng, 16);
            let p = [rng.gen_range(-5.0..5.0), rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)];
            let (q3, k3) = rope_3d(&q, &k, p, 16, 100.0);
            assert!((norm(&q3) - norm(&q)).abs() < 1e-6);
            assert!((norm(&k3) - norm(&k)).abs() < 1e-6);
            let (q1, _) = rope_1d(&q, &k, p[0], 16, 100.0);
            assert!((norm(&q1) - norm(&q)).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_depend_on_relative_position_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randv(&mut rng, 16);
        let k = randv(&mut rng, 16);
        let diff = [0.7, -2.0, 3.0];
        let mut scores3 = Vec::new();
        let mut scores1 = Vec::new();
        for base_pos in [[0.0, 0.0, 0.0], [1.3, 4.0, 2.0], [-3.1, 7.0, 5.0]] {
            let p1 = base_pos;
            let p2 = [p1[0] - diff[0], p1[1] - diff[1], p1[2] - diff[2]];
            let (rq, _) = rope_3d(&q, &q, p1, 16, 100.0);
            let (_, rk) = rope_3d(&k, &k, p2, 16, 100.0);
            scores3.push(dot(&rq, &rk));
            let (rq1, _) = rope_1d(&q, &q, p1[0], 16, 100.0);
            let (_, rk1) = rope_1d(&k, &k, p2[0], 16, 100.0);
            scores1.push(dot(&rq1, &rk1));
        }
        for s in [&scores3, &scores1] {
            assert!((s[0] - s[1]).abs() < 1e-9, "{s:?}");
            assert!((s[0] - s[2]).abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn table_matches_reference_rotation() {
        let layout = RopeLayout::proportional(16, 3);
        let positions = [0.5, 1.0, 2.0, 3.0, 0.0, 7.0];
        let table = RopeTable::<f64>::new(&layout, 100.0, &positions);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randv(&mut rng, 2 * 32);
        let mut y = x.clone();
        table.apply(&mut y, 32, false);
        for t in 0..2 {
            let mut r = x[t * 32..(t + 1) * 32].to_vec();
            layout.rotate(&mut r, &positions[t * 3..(t + 1) * 3], 100.0);
            for (a, b) in r.iter().zip(&y[t * 32..(t + 1) * 32]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        table.apply(&mut y, 32, true);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
