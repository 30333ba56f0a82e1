//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so true-zero gradients compare
/// on absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct InputReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst relative error.
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
    pub pass: bool,
    pub tolerance: f64,
    pub epsilon: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of a scalar objective against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε`, coordinate by coordinate.
///
/// `objective` receives a fresh tape and the input vars in the order of
/// `inputs`; it must return a scalar var and must be deterministic.
pub fn gradient_check<Obj>(
    objective: Obj,
    inputs: &[(String, Tensor<f64>)],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradReport>
where
    Obj: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = objective(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(out)?;
        Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval(&values, true)?;
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let mut report = InputReport { name: name.clone(), max_rel_err: 0.0, max_abs_err: 0.0, worst_index: 0 };
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + epsilon;
            let plus = eval(&values, false)?.0;
            values[k].data_mut()[i] = orig - epsilon;
            let minus = eval(&values, false)?.0;
            values[k].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteProbe { input: name.clone(), index: i });
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        reports.push(report);
    }
    let pass = reports.iter().all(|r| r.max_rel_err <= tolerance);
    Ok(GradReport { inputs: reports, pass, tolerance, epsilon })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::AttentionLayout;
    use crate::numerics::tensor::Real;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
        ts.into_iter().enumerate().map(|(i, t)| (format!("x{i}"), t)).collect()
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap();
        let report = gradient_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let m = tape.mean(sq)?;
                tape.scale(m, 2.0)
            },
            &[("x".into(), x.clone())],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        // analytic gradient of x0²+x1² is [6, −2]
        let mut tape = Tape::new();
        let v = tape.param(x);
        let sq = tape.mul(v, v).unwrap();
        let m = tape.mean(sq).unwrap();
        let s = tape.scale(m, 2.0).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn masked_softmax_then_cross_entropy() {
        let logits = Tensor::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.0]).unwrap();
        let mask = Tensor::from_f64(&[1, 4], &[0.0, 0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        let report = gradient_check(
            |tape, v| {
                let p = tape.masked_softmax(v[0], &mask)?;
                let ce = tape.cross_entropy(p, &[1])?;
                tape.mean(ce)
            },
            &[("logits".into(), logits)],
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let x = Tensor::from_f64(&[2], &[0.0, 700.0]).unwrap();
        let err = gradient_check(
            |tape, v| {
                let e = tape.exp(v[0])?;
                tape.mean(e)
            },
            &[("x".into(), x)],
            10.0,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. } | Error::NonFiniteProbe { .. }), "{err:?}");
    }

    /// Every kernel on the tape, randomized over 20 seeds.
    #[test]
    fn every_kernel_passes_on_random_shapes() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(1..4usize);
            let k = rng.random_range(1..5usize);
            let n = rng.random_range(2..5usize);
            let tol = 1e-4;
            let eps = 1e-5;

            let a = rand_tensor(&mut rng, &[r, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let w = rand_tensor(&mut rng, &[r, n]);
            let check = |report: GradReport, what: &str| assert!(report.pass, "seed {seed} {what}: {report:?}");

            let wv = w.clone();
            check(
                gradient_check(
                    |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        let c = t.constant(wv.clone());
                        let z = t.mul(y, c)?;
                        t.mean(z)
                    },
                    &named(vec![a.clone(), b.clone()]),
                    eps,
                    tol,
                )
                .unwrap(),
                "matmul",
            );
            let bt = rand_tensor(&mut rng, &[n, k]);
            let wv = w.clone();
            check(
                gradient_check(
                    |t, v| {
                        let y = t.matmul_nt(v[0], v[1])?;
                        let c = t.constant(wv.clone());
                        let z = t.mul(y, c)?;
                        t.mean(z)
                    },
                    &named(vec![a.clone(), bt]),
                    eps,
                    tol,
                )
                .unwrap(),
                "matmul_nt",
            );
            let bias = rand_tensor(&mut rng, &[n]);
            let gain = rand_tensor(&mut rng, &[n]);
            let wv = w.clone();
            check(
                gradient_check(
                    |t, v| {
                        let y = t.add_bias(v[0], v[1])?;
                        let y = t.rms_norm(y, v[2])?;
                        let y = t.gelu(y)?;
                        let y = t.add(y, v[0])?;
                        let c = t.constant(wv.clone());
                        let z = t.mul(y, c)?;
                        let z = t.scale(z, 0.7)?;
                        let z = t.exp(z)?;
                        t.mean(z)
                    },
                    &named(vec![w.clone(), bias, gain]),
                    eps,
                    tol,
                )
                .unwrap(),
                "bias/rmsnorm/gelu/add/mul/scale/exp",
            );
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
            let mut mask = vec![0.0; r * n];
            for row in 0..r {
                for c in 0..n {
                    if c != row % n && rng.random_bool(0.3) {
                        mask[row * n + c] = f64::MASK_SENTINEL;
                    }
                }
            }
            let mask = Tensor::from_f64(&[r, n], &mask).unwrap();
            check(
                gradient_check(
                    |t, v| {
                        let p = t.masked_softmax(v[0], &mask)?;
                        let p = t.scale(p, 3.0)?;
                        let ce = t.cross_entropy(p, &targets)?;
                        t.mean(ce)
                    },
                    &named(vec![w.clone()]),
                    eps,
                    tol,
                )
                .unwrap(),
                "masked_softmax/cross_entropy",
            );
            let other = rand_tensor(&mut rng, &[r, n]);
            check(
                gradient_check(
                    |t, v| {
                        let d = t.cosine_distance(v[0], v[1])?;
                        let x = t.l2_normalize(v[0])?;
                        let sel = t.select_rows(&[x, v[1]], vec![(0, r - 1), (1, 0), (0, 0)])?;
                        let tk = t.take(sel, vec![0, 2, n + 1, 2], &[4])?;
                        let m1 = t.mean(d)?;
                        let m2 = t.mean(tk)?;
                        t.add(m1, m2)
                    },
                    &named(vec![w.clone(), other]),
                    eps,
                    tol,
                )
                .unwrap(),
                "cosine/l2norm/select/take",
            );

            // fused attention: 2 sequences, T = 3, 2 heads of width 2
            let (nseq, tl, heads, width) = (2usize, 3usize, 2usize, 4usize);
            let qkv = rand_tensor(&mut rng, &[nseq * tl, 3 * width]);
            let proj = rand_tensor(&mut rng, &[nseq * tl, width]);
            let mut m0 = vec![0.0; tl * tl];
            for i in 0..tl {
                for j in 0..tl {
                    if j > i || (j == 1 && i != 0 && seed % 2 == 0) {
                        m0[i * tl + j] = f64::MASK_SENTINEL;
                    }
                }
            }
            let mask_a = Tensor::from_f64(&[tl, tl], &m0).unwrap();
            let layout = AttentionLayout { heads, seq_len: tl, rope_base: 10000.0 };
            check(
                gradient_check(
                    |t, v| {
                        let o = t.attention(v[0], layout, &[&mask_a, &mask_a])?;
                        let c = t.constant(proj.clone());
                        let z = t.mul(o, c)?;
                        t.mean(z)
                    },
                    &named(vec![qkv]),
                    eps,
                    tol,
                )
                .unwrap(),
                "attention",
            );
        }
    }
}
