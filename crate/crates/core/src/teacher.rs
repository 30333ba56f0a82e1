//! EMA teacher: a gradient-free moving average of the student weights.

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{forward_batch, ForwardTrace, ModelConfig, ModelParams, TraceLevel};
use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<F: Real = f32> {
    pub params: ModelParams<F>,
    pub decay: f64,
    pub steps_applied: u64,
}

impl<F: Real> TeacherState<F> {
    /// Starts as an exact copy of the student.
    pub fn new(student: &ModelParams<F>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(TeacherState { params: student.clone(), decay, steps_applied: 0 })
    }

    /// `θ′ ← decay·θ′ + (1 − decay)·θ`, elementwise, evaluated in f64.
    pub fn ema_update(&mut self, student: &ModelParams<F>) -> Result<()> {
        ema_update(&mut self.params, student, self.decay)?;
        self.steps_applied += 1;
        Ok(())
    }

    /// Unmasked forward with the teacher weights. Nothing here is ever
    /// recorded as trainable, so outputs are constants to any loss.
    pub fn forward(&self, config: &ModelConfig, seqs: &[TokenSequence]) -> Result<Vec<ForwardTrace<F>>> {
        forward_batch(&self.params, config, seqs, &[], TraceLevel::Full)
    }
}

pub fn ema_update<F: Real>(teacher: &mut ModelParams<F>, student: &ModelParams<F>, decay: f64) -> Result<()> {
    if teacher.tensors.len() != student.tensors.len()
        || teacher.tensors.iter().zip(&student.tensors).any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::shape("ema_update", "teacher and student shapes differ"));
    }
    let keep = 1.0 - decay;
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            let (x, y) = (a.to_f64().unwrap(), b.to_f64().unwrap());
            *a = F::lit(decay * x + keep * y);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(v: f64) -> ModelParams<f64> {
        ModelParams { tensors: vec![Tensor::full(&[3], v), Tensor::full(&[2, 2], v)] }
    }

    fn random(rng: &mut ChaCha8Rng) -> ModelParams<f64> {
        ModelParams {
            tensors: vec![
                Tensor::new(vec![3], (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
                Tensor::new(vec![2, 2], (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
            ],
        }
    }

    #[test]
    fn one_step_arithmetic() {
        let mut t = TeacherState::new(&filled(0.0), 0.9).unwrap();
        t.ema_update(&filled(1.0)).unwrap();
        assert!(t.params.tensors.iter().all(|x| x.data().iter().all(|&v| (v - 0.1).abs() < 1e-15)));
        assert_eq!(t.steps_applied, 1);

        let mut fixed = TeacherState::new(&filled(0.5), 1.0).unwrap();
        fixed.ema_update(&filled(3.0)).unwrap();
        assert_eq!(fixed.params, filled(0.5));
    }

    #[test]
    fn fifty_steps_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let theta0 = random(&mut rng);
        let student = random(&mut rng);
        let decay = 0.97;
        let mut t = TeacherState::new(&theta0, decay).unwrap();
        for _ in 0..50 {
            t.ema_update(&student).unwrap();
        }
        for ((a, s), t0) in t.params.tensors.iter().zip(&student.tensors).zip(&theta0.tensors) {
            for i in 0..a.len() {
                let want = s.data()[i] + (t0.data()[i] - s.data()[i]) * decay.powi(50);
                assert!((a.data()[i] - want).abs() <= 1e-6 * want.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn ema_is_linear_in_the_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t0, s1, s2) = (random(&mut rng), random(&mut rng), random(&mut rng));
        let (a, b) = (0.3, 0.7);
        let mix = ModelParams {
            tensors: s1
                .tensors
                .iter()
                .zip(&s2.tensors)
                .map(|(x, y)| {
                    Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect())
                        .unwrap()
                })
                .collect(),
        };
        // with a + b = 1 the fixed teacher term splits the same way
        let run = |s: &ModelParams<f64>| {
            let mut t = t0.clone();
            ema_update(&mut t, s, 0.9).unwrap();
            t
        };
        let (e1, e2, em) = (run(&s1), run(&s2), run(&mix));
        for k in 0..em.tensors.len() {
            for i in 0..em.tensors[k].len() {
                let want = a * e1.tensors[k].data()[i] + b * e2.tensors[k].data()[i];
                assert!((em.tensors[k].data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut t = filled(0.0);
        let s = ModelParams { tensors: vec![Tensor::full(&[4], 1.0), Tensor::full(&[2, 2], 1.0)] };
        assert!(ema_update(&mut t, &s, 0.5).is_err());
    }

    #[test]
    fn fresh_teacher_matches_student_bitwise() {
        let c = ModelConfig::micro();
        let p = ModelParams::<f32>::init(&c, 2).unwrap();
        let t = TeacherState::new(&p, 0.9999).unwrap();
        let seq = TokenSequence::new((0..c.seq_len).map(|i| i % c.vocab).collect(), 1);
        let a = t.forward(&c, std::slice::from_ref(&seq)).unwrap().remove(0);
        let b = crate::model::forward(&p, &c, &seq, None, TraceLevel::Full).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.hidden, b.hidden);
    }
}
