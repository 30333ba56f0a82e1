use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Key columns hidden from attention. Position 0 (the condition) is never
/// masked.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    pub seq_len: usize,
    pub ratio: f64,
    /// Sorted ascending.
    pub masked_keys: Vec<usize>,
}

impl KeyMask {
    pub fn empty(seq_len: usize) -> Self {
        KeyMask { seq_len, ratio: 0.0, masked_keys: Vec::new() }
    }

    pub fn from_keys(seq_len: usize, mut keys: Vec<usize>) -> Result<Self> {
        keys.sort_unstable();
        keys.dedup();
        if keys.first() == Some(&0) || keys.last().is_some_and(|&k| k >= seq_len) {
            return Err(Error::invalid(format!("masked keys {keys:?} must lie in 1..{seq_len}")));
        }
        let ratio = keys.len() as f64 / seq_len as f64;
        Ok(KeyMask { seq_len, ratio, masked_keys: keys })
    }

    pub fn is_masked(&self, key: usize) -> bool {
        self.masked_keys.binary_search(&key).is_ok()
    }

    /// Causal mask plus the masked columns, `[T × T]`, sentinel for −∞.
    pub fn additive<F: Real>(&self) -> Tensor<F> {
        let t = self.seq_len;
        let mut m = causal_mask::<F>(t).into_data();
        for &k in &self.masked_keys {
            for row in 0..t {
                m[row * t + k] = F::MASK_SENTINEL;
            }
        }
        Tensor::new(vec![t, t], m).expect("square mask")
    }
}

pub fn causal_mask<F: Real>(t: usize) -> Tensor<F> {
    let mut m = vec![F::zero(); t * t];
    for i in 0..t {
        for v in &mut m[i * t + i + 1..(i + 1) * t] {
            *v = F::MASK_SENTINEL;
        }
    }
    Tensor::new(vec![t, t], m).expect("square mask")
}

/// Masks `round(r·T)` distinct keys drawn uniformly from `1..T`.
pub fn build_key_mask(seq_len: usize, ratio: f64, seed: u64) -> Result<KeyMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = ((ratio * seq_len as f64).round() as usize).min(seq_len.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<usize> = sample(&mut rng, seq_len.saturating_sub(1), n).into_iter().map(|k| k + 1).collect();
    keys.sort_unstable();
    Ok(KeyMask { seq_len, ratio, masked_keys: keys })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_of_sixteen_is_four() {
        for seed in 0..50 {
            let m = build_key_mask(16, 0.25, seed).unwrap();
            assert_eq!(m.masked_keys.len(), 4);
            assert!(!m.masked_keys.contains(&0));
        }
        assert_eq!(build_key_mask(16, 0.25, 9).unwrap(), build_key_mask(16, 0.25, 9).unwrap());
    }

    #[test]
    fn zero_ratio_is_pure_causal() {
        let m = build_key_mask(64, 0.0, 1).unwrap();
        assert!(m.masked_keys.is_empty());
        assert_eq!(m.additive::<f32>(), causal_mask::<f32>(64));
        assert!(build_key_mask(8, 1.0, 0).is_err());
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        let n = 10_000;
        let mut hits = [0usize; 16];
        for seed in 0..n {
            for k in build_key_mask(16, 0.25, seed).unwrap().masked_keys {
                hits[k] += 1;
            }
        }
        assert_eq!(hits[0], 0);
        for &h in &hits[1..] {
            let f = h as f64 / n as f64;
            assert!((f - 4.0 / 15.0).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn additive_form_keeps_condition_column() {
        let m = KeyMask::from_keys(5, vec![2, 4]).unwrap();
        let a = m.additive::<f64>();
        for i in 0..5 {
            assert_eq!(a.data()[i * 5], 0.0);
            for j in 0..5 {
                let masked = j > i || j == 2 || j == 4;
                assert_eq!(a.data()[i * 5 + j] != 0.0, masked, "({i},{j})");
            }
        }
        assert!(KeyMask::from_keys(5, vec![0]).is_err());
    }
}
