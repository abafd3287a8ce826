//! Sparse self-attention masks: for every query row, the sorted list of key
//! rows it may attend to. Keys not listed are never read, so masked tokens
//! cannot influence the row even through rounding.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    allowed: Vec<Vec<u32>>,
}

impl AttnMask {
    pub fn from_rows(allowed: Vec<Vec<u32>>) -> Self {
        Self { allowed }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..n)
            .map(|i| (0..n).filter(|&j| f(i, j)).map(|j| j as u32).collect())
            .collect();
        Self { allowed }
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    /// Disjoint groups of consecutive rows with full attention inside each.
    pub fn block_diagonal(sizes: &[usize]) -> Self {
        let mut allowed = Vec::new();
        let mut start = 0u32;
        for &s in sizes {
            let keys: Vec<u32> = (start..start + s as u32).collect();
            for _ in 0..s {
                allowed.push(keys.clone());
            }
            start += s as u32;
        }
        Self { allowed }
    }

    /// Place independent masks side by side, offsetting their key indices.
    pub fn concat_diagonal(parts: &[AttnMask]) -> Self {
        let mut allowed = Vec::new();
        let mut offset = 0u32;
        for p in parts {
            for row in &p.allowed {
                allowed.push(row.iter().map(|&k| k + offset).collect());
            }
            offset += p.len() as u32;
        }
        Self { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.allowed[i]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i].binary_search(&(j as u32)).is_ok()
    }

    /// Number of allowed (query, key) pairs.
    pub fn pair_count(&self) -> u64 {
        self.allowed.iter().map(|r| r.len() as u64).sum()
    }

    pub fn max_key(&self) -> Option<u32> {
        self.allowed.iter().filter_map(|r| r.last().copied()).max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_pairs() {
        let m = AttnMask::causal(4);
        assert_eq!(m.pair_count(), 10);
        assert!(m.allows(2, 1));
        assert!(!m.allows(1, 2));
    }

    #[test]
    fn block_diagonal_offsets() {
        let m = AttnMask::block_diagonal(&[2, 3]);
        assert_eq!(m.row(0), &[0, 1]);
        assert_eq!(m.row(4), &[2, 3, 4]);
        let c = AttnMask::concat_diagonal(&[AttnMask::causal(2), AttnMask::full(2)]);
        assert_eq!(c.row(1), &[0, 1]);
        assert_eq!(c.row(2), &[2, 3]);
    }
}
