//! Named parameter collections and their initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;
/// Initial value of every Layer Scale entry.
pub const LAYER_SCALE_INIT: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.map.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Mark every tensor frozen.
    pub fn freeze(&mut self) {
        for p in self.map.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries (trainable and frozen).
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|p| p.value.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copy every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (k, p) in &other.map {
            self.map.insert(format!("{prefix}{k}"), p.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(prefix).map(|s| (s.to_string(), p.clone())))
                .collect(),
        }
    }
}

/// Seeded initializer shared by every trainable module.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Normal(0, std²) samples redrawn until they fall within ±2·std.
    pub fn trunc_normal<T: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<T> {
        if std == 0.0 {
            return Tensor::zeros(rows, cols);
        }
        let normal = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(rows, cols, |_, _| loop {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
    }

    pub fn weight<T: Real>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        self.trunc_normal(rows, cols, INIT_STD)
    }

    pub fn uniform<T: Real>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(rows, cols, |_, _| T::from_f64_lossy(self.rng.gen_range(lo..hi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_moments_and_bounds() {
        let mut init = Init::new(7);
        let w: Tensor<f64> = init.weight(100, 200);
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        // oracle: std of N(0, s²) truncated at ±2s is s·sqrt(1 - 2·2·φ(2)/(2Φ(2)-1))
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 0.954_499_736_103_641_6;
        let expected = INIT_STD * (1.0 - 4.0 * phi2 / mass).sqrt();
        assert!((std - expected).abs() < 5e-4, "std {std} vs {expected}");
        assert!((0.015..=0.025).contains(&std));
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn prefix_roundtrip() {
        let mut a = ParamSet::<f32>::new();
        a.insert("w", Tensor::ones(2, 2), true);
        let mut b = ParamSet::new();
        b.extend_prefixed("enc.", &a);
        assert!(b.contains("enc.w"));
        assert_eq!(b.sub("enc."), a);
    }
}
