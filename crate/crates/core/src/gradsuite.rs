//! Finite-difference checks of every registered loss on a micro model.

use serde::Serialize;

use crate::data::TokenSequence;
use crate::error::Result;
use crate::losses::{record_objective, sample_positions, LossConfig, ObjectiveBatch, ObjectiveVars};
use crate::model::{
    build_key_mask, forward_batch, param_specs, push_params, ModelConfig, ModelParams, ParamKind, TraceLevel,
};
use crate::numerics::{gradient_check, GradReport, Tape, Tensor, Var};
use crate::rng::{derive_seed, stream_rng};

pub const COMPONENT_TOLERANCE: f64 = 1e-4;
pub const TOTAL_TOLERANCE: f64 = 1e-3;
pub const EPSILON: f64 = 1e-4;
pub const MICRO_BATCH: usize = 2;
pub const MICRO_VIEWS: usize = 2;
pub const MICRO_K: usize = 2;

/// Fixed student, teacher targets, masks and positions for the checks.
pub struct MicroProblem {
    pub config: ModelConfig,
    pub student: ModelParams<f64>,
    pub batch: ObjectiveBatch<f64>,
    pub losses: LossConfig,
}

fn concat_rows(ts: impl Iterator<Item = Tensor<f64>>, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = ts.flat_map(Tensor::into_data).collect();
    let rows = data.len() / cols;
    Tensor::new(vec![rows, cols], data).expect("row concat")
}

/// A generic evaluation point: unit-scale embeddings, fan-in scaled
/// matrices, gains in `[0.5, 1.5]` and small nonzero biases.
pub fn check_point(config: &ModelConfig, seed: u64) -> Result<ModelParams<f64>> {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let specs = param_specs(config);
    let tensors = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(seed, "check-point", i as u64);
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.kind {
                ParamKind::Embedding => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                ParamKind::Matrix => {
                    let normal = Normal::new(0.0, 1.0 / (s.shape[0] as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::Gain => (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
                ParamKind::Bias => (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
            };
            Tensor::new(s.shape.clone(), data)
        })
        .collect::<Result<_>>()?;
    Ok(ModelParams { tensors })
}

impl MicroProblem {
    pub fn new(seed: u64) -> Result<Self> {
        use rand::Rng;
        let config = ModelConfig::micro();
        let student = check_point(&config, seed)?;
        let teacher = check_point(&config, seed ^ 0x5eed)?;
        let mut rng = stream_rng(seed, "data", 0);
        let mut seqs = Vec::new();
        for _ in 0..MICRO_BATCH {
            let cond = rng.random_range(0..=config.classes);
            let base: Vec<usize> = (0..config.seq_len).map(|_| rng.random_range(0..config.vocab)).collect();
            for m in 0..MICRO_VIEWS {
                let mut tokens = base.clone();
                // the second view differs in a couple of tokens
                if m > 0 {
                    for _ in 0..2 {
                        let i = rng.random_range(0..config.seq_len);
                        tokens[i] = rng.random_range(0..config.vocab);
                    }
                }
                seqs.push(TokenSequence::new(tokens, cond));
            }
        }
        let masks = (0..seqs.len())
            .map(|n| Ok(vec![build_key_mask(config.seq_len, config.mask_ratio, derive_seed(seed, "mask", n as u64))?]))
            .collect::<Result<Vec<_>>>()?;
        let positions = sample_positions(MICRO_K, config.seq_len, derive_seed(seed, "positions", 0))?.indices;
        let traces = forward_batch(&teacher, &config, &seqs, &[], TraceLevel::Full)?;
        let d = config.width;
        let teacher_final = concat_rows(traces.iter().map(|t| t.final_hidden.clone()), d);
        let teacher_tap = concat_rows(traces.iter().map(|t| t.hidden[config.tap_depth - 1].clone()), d);
        let batch = ObjectiveBatch {
            seqs,
            batch: MICRO_BATCH,
            views: MICRO_VIEWS,
            masks,
            positions,
            teacher_final: Some(teacher_final),
            teacher_tap: Some(teacher_tap),
        };
        let losses = LossConfig { k_steps: MICRO_K, ..LossConfig::default() };
        Ok(MicroProblem { config, student, batch, losses })
    }

    pub fn record(&self, tape: &mut Tape<f64>, pv: &[Var]) -> Result<ObjectiveVars> {
        record_objective(tape, &self.config, pv, &self.batch, &self.losses)
    }

    pub fn named_inputs(&self) -> Vec<(String, Tensor<f64>)> {
        param_specs(&self.config).into_iter().map(|s| s.name).zip(self.student.tensors.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LAr,
    LMim,
    LStep,
    LView,
    LTotal,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::LAr, Component::LMim, Component::LStep, Component::LView, Component::LTotal];

    pub fn name(self) -> &'static str {
        match self {
            Component::LAr => "l_ar",
            Component::LMim => "l_mim",
            Component::LStep => "l_step",
            Component::LView => "l_view",
            Component::LTotal => "l_total",
        }
    }

    pub fn tolerance(self) -> f64 {
        if self == Component::LTotal {
            TOTAL_TOLERANCE
        } else {
            COMPONENT_TOLERANCE
        }
    }

    pub fn pick(self, v: &ObjectiveVars) -> Var {
        match self {
            Component::LAr => v.l_ar,
            Component::LMim => v.l_mim.expect("alignment loss active"),
            Component::LStep => v.l_step.expect("inter-step loss active"),
            Component::LView => v.l_view.expect("inter-view loss active"),
            Component::LTotal => v.total,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: Component,
    pub value: f64,
    pub report: GradReport,
}

/// Checks one component with respect to every student parameter.
pub fn check_component(problem: &MicroProblem, component: Component, epsilon: f64) -> Result<ComponentCheck> {
    let objective = |tape: &mut Tape<f64>, pv: &[Var]| -> Result<Var> { Ok(component.pick(&problem.record(tape, pv)?)) };
    let report = gradient_check(objective, &problem.named_inputs(), epsilon, component.tolerance())?;
    let mut tape = Tape::new();
    let pv = push_params(&mut tape, &problem.student, true);
    let vars = problem.record(&mut tape, &pv)?;
    let value = tape.value(component.pick(&vars)).item();
    Ok(ComponentCheck { component, value, report })
}

pub fn run_suite(seed: u64, epsilon: f64) -> Result<Vec<ComponentCheck>> {
    let problem = MicroProblem::new(seed)?;
    Component::ALL.iter().map(|&c| check_component(&problem, c, epsilon)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for check in run_suite(0, EPSILON).unwrap() {
            assert!(check.report.pass, "{}: {:?}", check.component.name(), check.report);
            assert!(check.value.is_finite() && check.value > 0.0);
        }
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_components() {
        let p = MicroProblem::new(1).unwrap();
        let grads = |c: Component| {
            let mut tape = Tape::new();
            let pv = push_params(&mut tape, &p.student, true);
            let v = p.record(&mut tape, &pv).unwrap();
            let mut g = tape.backward(c.pick(&v)).unwrap();
            pv.iter().map(|&x| g.take(x).map(Tensor::into_data)).collect::<Vec<_>>()
        };
        let total = grads(Component::LTotal);
        let parts: Vec<_> = [Component::LAr, Component::LMim, Component::LStep, Component::LView].map(grads).into();
        let (a, b) = (p.losses.alpha, p.losses.beta);
        let weights = [1.0, a, 0.5 * b, 0.5 * b];
        for k in 0..total.len() {
            let n = total[k].as_ref().map_or(0, Vec::len);
            for i in 0..n {
                let want: f64 = parts.iter().zip(weights).map(|(g, w)| w * g[k].as_ref().map_or(0.0, |g| g[i])).sum();
                let got = total[k].as_ref().unwrap()[i];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "param {k}[{i}]");
            }
        }
    }

    #[test]
    fn teacher_parameters_receive_no_gradient() {
        let p = MicroProblem::new(2).unwrap();
        let mut tape = Tape::new();
        let teacher = ModelParams::<f64>::init(&p.config, 99).unwrap();
        let tv = push_params(&mut tape, &teacher, false);
        let pv = push_params(&mut tape, &p.student, true);
        let v = p.record(&mut tape, &pv).unwrap();
        let g = tape.backward(v.total).unwrap();
        assert!(tv.iter().all(|&t| g.get(t).is_none() && !tape.requires_grad(t)));
        assert!(pv.iter().any(|&s| g.get(s).is_some()));
    }
}
