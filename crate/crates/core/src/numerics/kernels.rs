//! Forward kernels shared by the tape and by inference-only code paths.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// An additive mask entry counts as masked when it is −∞ or at/below half the
/// sentinel.
#[inline]
pub fn is_masked<F: Real>(m: F) -> bool {
    m <= F::MASK_SENTINEL / F::lit(2.0)
}

/// Softmax over the admissible entries of one row; masked entries become
/// exactly zero. Returns `false` when the row has no admissible entry.
pub fn masked_softmax_row<F: Real>(logits: &[F], mask: &[F], out: &mut [F]) -> bool {
    let mut max = F::neg_infinity();
    let mut any = false;
    for (&x, &m) in logits.iter().zip(mask) {
        if !is_masked(m) {
            any = true;
            let z = x + m;
            if z > max {
                max = z;
            }
        }
    }
    if !any {
        return false;
    }
    let mut sum = F::zero();
    for ((o, &x), &m) in out.iter_mut().zip(logits).zip(mask) {
        *o = if is_masked(m) { F::zero() } else { (x + m - max).exp() };
        sum = sum + *o;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    true
}

/// Row-wise softmax of `logits + additive_mask` with masked positions forced
/// to exactly zero.
pub fn masked_softmax<F: Real>(logits: &Tensor<F>, additive_mask: &Tensor<F>) -> Result<Tensor<F>> {
    if logits.shape() != additive_mask.shape() {
        return Err(Error::shape(
            "masked_softmax",
            format!("logits {:?} vs mask {:?}", logits.shape(), additive_mask.shape()),
        ));
    }
    let (rows, cols) = logits.dims2();
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        if !masked_softmax_row(
            &logits.data()[span.clone()],
            &additive_mask.data()[span.clone()],
            &mut out[span],
        ) {
            return Err(Error::EmptyAttentionRow { row: r });
        }
    }
    let out = Tensor::new(logits.shape().to_vec(), out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "masked_softmax" });
    }
    Ok(out)
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `1 − cos(a, b)` given both norms, evaluated as `½‖a/‖a‖ − b/‖b‖‖²` so
/// identical directions give exactly zero.
pub fn unit_half_sq_dist<F: Real>(a: &[F], b: &[F], na: F, nb: F) -> F {
    let s: F = a.iter().zip(b).map(|(&x, &y)| {
        let d = x / na - y / nb;
        d * d
    }).sum();
    F::lit(0.5) * s
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_distance", format!("{} vs {}", a.len(), b.len())));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if !(na > F::zero()) {
        return Err(Error::DegenerateFeature { row: 0 });
    }
    if !(nb > F::zero()) {
        return Err(Error::DegenerateFeature { row: 1 });
    }
    Ok(unit_half_sq_dist(a, b, na, nb).min(F::lit(2.0)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = F::lit(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

pub const RMS_EPS: f64 = 1e-8;

/// Rotary embedding tables: `(cos, sin)` of shape `[seq_len × head_dim/2]`.
pub fn rope_tables<F: Real>(seq_len: usize, head_dim: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for p in 0..seq_len {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(F::lit(angle.cos()));
            sin.push(F::lit(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of `x` (one head, one position) in place.
#[inline]
pub fn rope_rotate<F: Real>(x: &mut [F], cos: &[F], sin: &[F]) {
    for i in 0..cos.len() {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos[i] - b * sin[i];
        x[2 * i + 1] = a * sin[i] + b * cos[i];
    }
}

/// Inverse rotation; the adjoint of [`rope_rotate`].
#[inline]
pub fn rope_unrotate<F: Real>(x: &mut [F], cos: &[F], sin: &[F]) {
    for i in 0..cos.len() {
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos[i] + b * sin[i];
        x[2 * i + 1] = -a * sin[i] + b * cos[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(logits: &[f64], mask: &[f64]) -> Vec<f64> {
        let n = logits.len();
        let l = Tensor::<f64>::from_f64(&[1, n], logits).unwrap();
        let m = Tensor::<f64>::from_f64(&[1, n], mask).unwrap();
        masked_softmax(&l, &m).unwrap().into_data()
    }

    #[test]
    fn uniform_logits_give_uniform_row() {
        let p = row(&[1.0; 4], &[0.0; 4]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_is_zero_and_rest_renormalized() {
        let p = row(&[5.0, 2.0, 9.0], &[0.0, f64::NEG_INFINITY, 0.0]);
        let z = 5f64.exp() + 9f64.exp();
        assert_eq!(p[1], 0.0);
        assert!((p[0] - 5f64.exp() / z).abs() < 1e-15);
        assert!((p[2] - 9f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn matches_direct_normalization_oracle() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let mask = [0.0, 0.0, f64::MASK_SENTINEL, 0.0];
        let p = row(&logits, &mask);
        // oracle: exponentiate the unmasked entries and normalize
        let kept = [0usize, 1, 3];
        let z: f64 = kept.iter().map(|&i| logits[i].exp()).sum();
        for i in 0..4 {
            let want = if kept.contains(&i) { logits[i].exp() / z } else { 0.0 };
            assert!((p[i] - want).abs() < 1e-6, "{i}: {} vs {want}", p[i]);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = row(&[1e4, -1e4, 1e4 - 1.0], &[0.0; 3]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p32 = {
            let l = Tensor::<f32>::from_f64(&[1, 2], &[1e4, -1e4]).unwrap();
            let m = Tensor::<f32>::zeros(&[1, 2]);
            masked_softmax(&l, &m).unwrap()
        };
        assert_eq!(p32.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_names_the_row() {
        let l = Tensor::<f64>::from_f64(&[2, 2], &[0.0; 4]).unwrap();
        let m = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 0.0, -1e18, -1e18]).unwrap();
        match masked_softmax(&l, &m) {
            Err(Error::EmptyAttentionRow { row }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cosine_distance_cases() {
        assert!(cosine_distance::<f64>(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateFeature { .. })
        ));
    }

    #[test]
    fn rope_unrotate_inverts_rotate() {
        let (cos, sin) = rope_tables::<f64>(5, 4, 10000.0);
        let mut x = vec![0.3, -0.7, 1.1, 0.2];
        let orig = x.clone();
        rope_rotate(&mut x, &cos[8..10], &sin[8..10]);
        rope_unrotate(&mut x, &cos[8..10], &sin[8..10]);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn row_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
            (1usize..12).prop_flat_map(|n| {
                (
                    proptest::collection::vec(-50.0f64..50.0, n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
        }

        proptest! {
            #[test]
            fn rows_sum_to_one((logits, masked) in row_and_mask(), keep in 0usize..12) {
                let n = logits.len();
                let mut mask: Vec<f64> = masked.iter().map(|&m| if m { f64::MASK_SENTINEL } else { 0.0 }).collect();
                mask[keep % n] = 0.0;
                let p = row(&logits, &mask);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for (v, m) in p.iter().zip(&mask) {
                    if *m != 0.0 { prop_assert_eq!(*v, 0.0); }
                }
            }

            #[test]
            fn shift_invariant((logits, masked) in row_and_mask(), shift in -100.0f64..100.0) {
                let n = logits.len();
                let mut mask: Vec<f64> = masked.iter().map(|&m| if m { f64::MASK_SENTINEL } else { 0.0 }).collect();
                mask[0] = 0.0;
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let a = row(&logits, &mask);
                let b = row(&shifted, &mask);
                for i in 0..n {
                    prop_assert!((a[i] - b[i]).abs() < 1e-6);
                }
            }

            #[test]
            fn cosine_distance_scale_free(a in proptest::collection::vec(-5.0f64..5.0, 1..10), lambda in 0.01f64..100.0) {
                prop_assume!(dot(&a, &a) > 1e-6);
                let b: Vec<f64> = a.iter().map(|v| v * lambda).collect();
                prop_assert!(cosine_distance(&a, &b).unwrap().abs() < 1e-12);
            }
        }
    }
}
