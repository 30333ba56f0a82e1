//! AdamW with decoupled weight decay, global-norm clipping and the linear
//! warmup schedule.

use crate::error::{Error, Result};
use crate::model::{param_specs, ModelConfig, ModelParams};
use crate::numerics::Tensor;

use super::config::OptimConfig;

/// Learning rate at 1-based `step`: the base rate scaled by `batch/256`,
/// ramped linearly over `warmup` steps, then constant.
pub fn lr_at(cfg: &OptimConfig, step: u64) -> f64 {
    let peak = cfg.lr * cfg.batch as f64 / 256.0;
    if cfg.warmup == 0 {
        peak
    } else {
        peak * step.min(cfg.warmup) as f64 / cfg.warmup as f64
    }
}

pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = (f64::from(*x) * s) as f32;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    /// Updates applied so far.
    pub t: u64,
    decays: Vec<bool>,
}

impl AdamW {
    pub fn new(config: &ModelConfig, params: &ModelParams<f32>) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            decays: param_specs(config).iter().map(|s| s.kind.decays()).collect(),
        }
    }

    pub fn from_state(config: &ModelConfig, m: ModelParams<f32>, v: ModelParams<f32>, t: u64) -> Self {
        AdamW { m, v, t, decays: param_specs(config).iter().map(|s| s.kind.decays()).collect() }
    }

    /// One update. Weight decay touches only matrices and is applied to the
    /// weights directly rather than through the gradient.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if grads.len() != params.tensors.len() || grads.iter().zip(&params.tensors).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::shape("adamw", "gradients do not match parameters"));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for k in 0..grads.len() {
            let wd = if self.decays[k] { cfg.weight_decay } else { 0.0 };
            let p = params.tensors[k].data_mut();
            let m = self.m.tensors[k].data_mut();
            let v = self.v.tensors[k].data_mut();
            for (i, &g) in grads[k].data().iter().enumerate() {
                let g = f64::from(g);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                let w = f64::from(p[i]);
                p[i] = (w - lr * (step + wd * w)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn warmup_is_linear() {
        let cfg = OptimConfig { lr: 2.56e-2, batch: 10, warmup: 500, ..OptimConfig::default() };
        let peak = 2.56e-2 * 10.0 / 256.0;
        for s in [1u64, 7, 250, 499, 500] {
            assert!((lr_at(&cfg, s) - peak * s as f64 / 500.0).abs() < 1e-15);
        }
        assert_eq!(lr_at(&cfg, 501), peak);
        assert_eq!(lr_at(&cfg, 9000), peak);
        let flat = OptimConfig { warmup: 0, ..cfg };
        assert_eq!(lr_at(&flat, 1), peak);
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // with bias correction the first Adam step is lr·sign(g)
        let c = ModelConfig::micro();
        let mut p = ModelParams::<f32>::init(&c, 0).unwrap();
        let before = p.clone();
        let grads: Vec<_> = p.tensors.iter().map(|t| Tensor::full(t.shape(), -0.3f32)).collect();
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(&c, &p);
        opt.step(&mut p, &grads, 1e-3, &cfg).unwrap();
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((f64::from(*x) - f64::from(*y) - 1e-3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decay_reaches_matrices_only() {
        let c = ModelConfig::micro();
        let p0 = ModelParams::<f32>::init(&c, 3).unwrap();
        let grads: Vec<_> = p0.tensors.iter().map(|t| Tensor::full(t.shape(), 0.1f32)).collect();
        let run = |wd: f64| {
            let mut p = p0.clone();
            let cfg = OptimConfig { weight_decay: wd, ..OptimConfig::default() };
            AdamW::new(&c, &p).step(&mut p, &grads, 1e-2, &cfg).unwrap();
            p
        };
        let (off, on) = (run(0.0), run(0.5));
        for (s, (a, b)) in param_specs(&c).iter().zip(off.tensors.iter().zip(&on.tensors)) {
            if s.kind.decays() {
                assert_ne!(a, b, "{}", s.name);
            } else {
                assert_eq!(a, b, "{}", s.name);
            }
        }
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            vals in proptest::collection::vec(-50.0f32..50.0, 1..64),
            clip in 0.01f64..5.0,
        ) {
            let half = vals.len() / 2;
            let mut g = vec![
                Tensor::new(vec![half], vals[..half].to_vec()).unwrap(),
                Tensor::new(vec![vals.len() - half], vals[half..].to_vec()).unwrap(),
            ];
            let before = clip_grad_norm(&mut g, clip);
            let after = global_norm(&g);
            prop_assert!(after <= clip + 1e-6);
            if before <= clip {
                prop_assert!((after - before).abs() < 1e-12);
            }
        }
    }
}
