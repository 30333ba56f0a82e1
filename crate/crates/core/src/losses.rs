//! Next-token, feature-alignment and contrastive objectives.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{forward_tape, project_tape, LayerMasks, ModelConfig, ProjectorMode};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Unweighted components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ar: f64,
    pub l_mim: f64,
    pub l_step: f64,
    pub l_view: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `l_ar + α·l_mim + (β/2)·(l_step + l_view)`.
pub fn loss_total(l_ar: f64, l_mim: f64, l_step: f64, l_view: f64, alpha: f64, beta: f64) -> Result<LossBundle> {
    for (v, component) in [(l_ar, "l_ar"), (l_mim, "l_mim"), (l_step, "l_step"), (l_view, "l_view")] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component });
        }
    }
    let total = l_ar + alpha * l_mim + 0.5 * beta * (l_step + l_view);
    Ok(LossBundle { l_ar, l_mim, l_step, l_view, total, alpha, beta })
}

/// The `K` positions shared by both contrastive terms of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionDraw {
    pub indices: Vec<usize>,
}

/// `K` distinct positions of `0..T`, uniform without replacement.
pub fn sample_positions(k: usize, t: usize, seed: u64) -> Result<PositionDraw> {
    if k < 2 || k > t {
        return Err(Error::invalid(format!("need 2 <= K <= T, got K={k}, T={t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PositionDraw { indices: sample(&mut rng, t, k).into_vec() })
}

/// Batch layout of contrastive features: row `(b·M + m)·K + k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastLayout {
    pub batch: usize,
    pub views: usize,
    pub k: usize,
}

impl ContrastLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.views * self.k
    }

    fn row(&self, b: usize, m: usize, k: usize) -> usize {
        (b * self.views + m) * self.k + k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastKind {
    /// Positives: other positions of the same view.
    Step,
    /// Positives: the same position in the other views.
    View,
}

/// Flat indices into the `[R × R]` similarity matrix, `B` candidates per
/// term, and the index of the positive among them.
fn contrast_terms(layout: ContrastLayout, kind: ContrastKind) -> (Vec<usize>, Vec<usize>) {
    let r = layout.rows();
    let (bn, mn, kn) = (layout.batch, layout.views, layout.k);
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    for b in 0..bn {
        match kind {
            ContrastKind::Step => {
                for m in 0..mn {
                    for i in 0..kn {
                        for j in (0..kn).filter(|&j| j != i) {
                            let anchor = layout.row(b, m, i);
                            idx.extend((0..bn).map(|v| anchor * r + layout.row(v, m, j)));
                            targets.push(b);
                        }
                    }
                }
            }
            ContrastKind::View => {
                for i in 0..mn {
                    for k in 0..kn {
                        for j in (0..mn).filter(|&j| j != i) {
                            let anchor = layout.row(b, i, k);
                            idx.extend((0..bn).map(|v| anchor * r + layout.row(v, j, k)));
                            targets.push(b);
                        }
                    }
                }
            }
        }
    }
    (idx, targets)
}

/// `S = normalize(z)·normalize(h)ᵀ / τ`; `h` is expected to be constant.
pub fn similarity_tape<F: Real>(tape: &mut Tape<F>, z: Var, h: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let zn = tape.l2_normalize(z)?;
    let hn = tape.l2_normalize(h)?;
    let s = tape.matmul_nt(zn, hn)?;
    tape.scale(s, F::lit(1.0 / tau))
}

/// InfoNCE over the terms of `kind`, averaged over terms. With `literal`
/// each term is `−exp(−ce)` instead of `ce`.
pub fn info_nce_tape<F: Real>(
    tape: &mut Tape<F>,
    sim: Var,
    layout: ContrastLayout,
    kind: ContrastKind,
    literal: bool,
) -> Result<Var> {
    match kind {
        ContrastKind::Step if layout.k < 2 => return Err(Error::invalid("inter-step loss needs K >= 2: no positive pair")),
        ContrastKind::View if layout.views < 2 => return Err(Error::invalid("inter-view loss needs M >= 2")),
        _ => {}
    }
    let (idx, targets) = contrast_terms(layout, kind);
    let n = targets.len();
    let logits = tape.take(sim, idx, &[n, layout.batch])?;
    let ce = tape.cross_entropy(logits, &targets)?;
    if literal {
        let neg = tape.scale(ce, F::lit(-1.0))?;
        let p = tape.exp(neg)?;
        let m = tape.mean(p)?;
        tape.scale(m, F::lit(-1.0))
    } else {
        tape.mean(ce)
    }
}

pub fn loss_ar_tape<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let vocab = tape.value(logits).dims2().1;
    if let Some((i, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(Error::VocabOverflow { token: t, position: i, vocab });
    }
    let ce = tape.cross_entropy(logits, targets)?;
    tape.mean(ce)
}

pub fn loss_mim_tape<F: Real>(tape: &mut Tape<F>, student_h: Var, teacher_h: Var) -> Result<Var> {
    let d = tape.cosine_distance(student_h, teacher_h)?;
    tape.mean(d)
}

/// Mean next-token cross-entropy of `[N × V]` logits.
pub fn loss_ar<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> Result<F> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = loss_ar_tape(&mut tape, l, targets)?;
    Ok(tape.value(v).item())
}

/// Mean row-wise cosine distance of `[N × D]` features.
pub fn loss_mim<F: Real>(student_h: &Tensor<F>, teacher_h: &Tensor<F>) -> Result<F> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(student_h.clone()), tape.constant(teacher_h.clone()));
    let v = loss_mim_tape(&mut tape, a, b)?;
    Ok(tape.value(v).item())
}

fn contrastive<F: Real>(z: &Tensor<F>, h: &Tensor<F>, layout: ContrastLayout, tau: f64, kind: ContrastKind) -> Result<F> {
    if z.dims2().0 != layout.rows() || h.dims2().0 != layout.rows() {
        return Err(Error::shape("contrastive", format!("{} / {} rows for layout {layout:?}", z.dims2().0, h.dims2().0)));
    }
    let mut tape = Tape::new();
    let (zv, hv) = (tape.constant(z.clone()), tape.constant(h.clone()));
    let s = similarity_tape(&mut tape, zv, hv, tau)?;
    let v = info_nce_tape(&mut tape, s, layout, kind, false)?;
    Ok(tape.value(v).item())
}

/// Inter-step InfoNCE. `z_s` and `h_t` are `[B·M·K × D]` in layout order.
pub fn loss_step<F: Real>(z_s: &Tensor<F>, h_t: &Tensor<F>, layout: ContrastLayout, tau: f64) -> Result<F> {
    contrastive(z_s, h_t, layout, tau, ContrastKind::Step)
}

/// Inter-view InfoNCE. `z_s` and `h_t` are `[B·M·K × D]` in layout order.
pub fn loss_view<F: Real>(z_s: &Tensor<F>, h_t: &Tensor<F>, layout: ContrastLayout, tau: f64) -> Result<F> {
    contrastive(z_s, h_t, layout, tau, ContrastKind::View)
}

/// Loss weights and switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub k_steps: usize,
    pub use_mim: bool,
    pub use_step: bool,
    pub use_view: bool,
    /// Per-term `−exp(−ce)` instead of the log form.
    pub literal_eq67: bool,
    /// Next-token loss on an extra unmasked student pass.
    pub ar_on_unmasked: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 0.5,
            tau: 0.2,
            k_steps: 4,
            use_mim: true,
            use_step: true,
            use_view: true,
            literal_eq67: false,
            ar_on_unmasked: false,
        }
    }
}

impl LossConfig {
    pub fn mim_active(&self) -> bool {
        self.use_mim && self.alpha != 0.0
    }

    pub fn step_active(&self) -> bool {
        self.use_step && self.beta != 0.0
    }

    pub fn view_active(&self) -> bool {
        self.use_view && self.beta != 0.0
    }

    pub fn needs_teacher(&self) -> bool {
        self.mim_active() || self.step_active() || self.view_active()
    }
}

/// Everything one objective evaluation needs besides the weights. Sequence
/// `n = b·M + m` is view `m` of sample `b`.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch<F: Real> {
    pub seqs: Vec<TokenSequence>,
    pub batch: usize,
    pub views: usize,
    /// One entry per sequence, or empty for no masking.
    pub masks: Vec<LayerMasks>,
    pub positions: Vec<usize>,
    /// Teacher final hidden states `[N·T × D]`.
    pub teacher_final: Option<Tensor<F>>,
    /// Teacher tap-layer hidden states `[N·T × D]`.
    pub teacher_tap: Option<Tensor<F>>,
}

/// Vars of the recorded objective. Inactive components are `None`.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub total: Var,
    pub l_ar: Var,
    pub l_mim: Option<Var>,
    pub l_step: Option<Var>,
    pub l_view: Option<Var>,
}

fn named<T>(component: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { component },
        other => other,
    })
}

/// Records the full training objective for the student parameters `pv`.
pub fn record_objective<F: Real>(
    tape: &mut Tape<F>,
    config: &ModelConfig,
    pv: &[Var],
    batch: &ObjectiveBatch<F>,
    lc: &LossConfig,
) -> Result<ObjectiveVars> {
    let n = batch.seqs.len();
    if n != batch.batch * batch.views || n == 0 {
        return Err(Error::shape("objective", format!("{n} sequences for B={} M={}", batch.batch, batch.views)));
    }
    let t = config.seq_len;
    let out = forward_tape(tape, config, pv, &batch.seqs, &batch.masks)?;
    let targets: Vec<usize> = batch.seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();

    let l_ar = if lc.ar_on_unmasked && !batch.masks.is_empty() {
        let clean = forward_tape(tape, config, pv, &batch.seqs, &[])?;
        named("l_ar", loss_ar_tape(tape, clean.logits, &targets))?
    } else {
        named("l_ar", loss_ar_tape(tape, out.logits, &targets))?
    };

    let l_mim = if lc.mim_active() {
        let th = batch.teacher_final.as_ref().ok_or_else(|| Error::invalid("alignment loss needs teacher states"))?;
        let th = tape.constant(th.clone());
        let last = *out.layers.last().expect("layers");
        Some(named("l_mim", loss_mim_tape(tape, last, th))?)
    } else {
        None
    };

    let (mut l_step, mut l_view) = (None, None);
    if lc.step_active() || lc.view_active() {
        let k = batch.positions.len();
        let layout = ContrastLayout { batch: batch.batch, views: batch.views, k };
        let picks: Vec<(usize, usize)> =
            (0..n).flat_map(|s| batch.positions.iter().map(move |&p| (0, s * t + p))).collect();
        if batch.positions.iter().any(|&p| p >= t) {
            return Err(Error::invalid("contrastive position outside the sequence"));
        }
        let tap = out.layers[config.tap_depth - 1];
        let hs = tape.select_rows(&[tap], picks.clone())?;
        let z = project_tape(tape, config, pv, hs, ProjectorMode::Mlp)?;
        let tt = batch.teacher_tap.as_ref().ok_or_else(|| Error::invalid("contrastive losses need teacher states"))?;
        let tt = tape.constant(tt.clone());
        let ht = tape.select_rows(&[tt], picks)?;
        let sim = similarity_tape(tape, z, ht, lc.tau)?;
        if lc.step_active() {
            l_step = Some(named("l_step", info_nce_tape(tape, sim, layout, ContrastKind::Step, lc.literal_eq67))?);
        }
        if lc.view_active() {
            l_view = Some(named("l_view", info_nce_tape(tape, sim, layout, ContrastKind::View, lc.literal_eq67))?);
        }
    }

    let mut total = l_ar;
    if let Some(m) = l_mim {
        let w = tape.scale(m, F::lit(lc.alpha))?;
        total = tape.add(total, w)?;
    }
    for c in [l_step, l_view].into_iter().flatten() {
        let w = tape.scale(c, F::lit(0.5 * lc.beta))?;
        total = tape.add(total, w)?;
    }
    Ok(ObjectiveVars { total, l_ar, l_mim, l_step, l_view })
}

/// Reads the component values of a recorded objective.
pub fn bundle_of<F: Real>(tape: &Tape<F>, vars: &ObjectiveVars, lc: &LossConfig) -> Result<LossBundle> {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64().unwrap_or(f64::NAN));
    let b = loss_total(get(Some(vars.l_ar)), get(vars.l_mim), get(vars.l_step), get(vars.l_view), lc.alpha, lc.beta)?;
    Ok(LossBundle { total: get(Some(vars.total)), ..b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_t(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ar_closed_forms() {
        let v = 64;
        let uniform = Tensor::<f64>::zeros(&[5, v]);
        let l = loss_ar(&uniform, &[0, 1, 2, 3, 63]).unwrap();
        assert!((l - (64f64).ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 2 * v];
        peaked[3] = 1e4;
        peaked[v + 7] = 1e4;
        let peaked = Tensor::new(vec![2, v], peaked).unwrap();
        assert!(loss_ar(&peaked, &[3, 7]).unwrap() < 1e-3);
        assert!(matches!(loss_ar(&peaked, &[3, 64]), Err(Error::VocabOverflow { .. })));
    }

    #[test]
    fn ar_matches_explicit_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rows, v) = (8, 8); // B=2, T=4
        let logits = rand_t(&mut rng, rows, v);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
        let mut oracle = 0.0;
        for r in 0..rows {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            oracle -= (row[targets[r]].exp() / z).ln();
        }
        oracle /= rows as f64;
        assert!((loss_ar(&logits, &targets).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn ar_decreases_after_one_gradient_step() {
        // one-parameter model: logits = [w, 0], target 0
        let loss = |w: f64| loss_ar(&Tensor::new(vec![1, 2], vec![w, 0.0]).unwrap(), &[0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![1, 2], vec![0.3, 0.0]).unwrap());
        let l = loss_ar_tape(&mut tape, w, &[0]).unwrap();
        let g = tape.backward(l).unwrap().get(w).unwrap().data()[0];
        assert!(g < 0.0);
        assert!(loss(0.3 - 0.5 * g) < loss(0.3));
    }

    #[test]
    fn mim_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = rand_t(&mut rng, 6, 4);
        assert_eq!(loss_mim(&h, &h.clone()).unwrap(), 0.0);
        let a = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[2, 2], &[0.0, 3.0, -1.0, 0.0]).unwrap();
        assert!((loss_mim::<f64>(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let s = Tensor::from_f64(&[3, 3], &[1.0, 2.0, 0.5, -1.0, 0.0, 2.0, 0.3, 0.3, -0.9]).unwrap();
        let t = Tensor::from_f64(&[3, 3], &[0.5, 2.0, 1.0, 1.0, 1.0, 1.0, -0.2, 0.4, 0.1]).unwrap();
        let oracle: f64 = (0..3)
            .map(|r| {
                let (x, y) = (s.row(r), t.row(r));
                let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let ny = y.iter().map(|p| p * p).sum::<f64>().sqrt();
                1.0 - d / (nx * ny)
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss_mim::<f64>(&s, &t).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn positions_are_distinct_and_replayable() {
        let d = sample_positions(4, 64, 11).unwrap();
        assert_eq!(d, sample_positions(4, 64, 11).unwrap());
        let mut sorted = d.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        let mut all = sample_positions(9, 9, 2).unwrap().indices;
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert!(sample_positions(1, 9, 0).is_err());
        assert!(sample_positions(10, 9, 0).is_err());
    }

    #[test]
    fn position_inclusion_is_uniform() {
        let mut hits = [0usize; 64];
        for seed in 0..10_000 {
            for i in sample_positions(4, 64, seed).unwrap().indices {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 1e4 - 4.0 / 64.0).abs() < 0.02);
        }
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = ContrastLayout { batch: 1, views: 2, k: 3 };
        let (z, h) = (rand_t(&mut rng, one.rows(), 5), rand_t(&mut rng, one.rows(), 5));
        assert_eq!(loss_step(&z, &h, one, 0.2).unwrap(), 0.0);
        assert_eq!(loss_view(&z, &h, one, 0.2).unwrap(), 0.0);

        let four = ContrastLayout { batch: 4, views: 2, k: 3 };
        let row = [0.3, -0.2, 0.9, 0.1, 0.5];
        let same = Tensor::new(vec![four.rows(), 5], row.iter().cycle().take(four.rows() * 5).copied().collect()).unwrap();
        assert!((loss_step(&same, &same, four, 0.2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((loss_view(&same, &same, four, 0.2).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    fn norm(x: &[f64]) -> Vec<f64> {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter().map(|v| v / n).collect()
    }

    fn sim(z: &Tensor<f64>, h: &Tensor<f64>, a: usize, b: usize, tau: f64) -> f64 {
        norm(z.row(a)).iter().zip(norm(h.row(b))).map(|(p, q)| p * q).sum::<f64>() / tau
    }

    #[test]
    fn step_matches_loop_oracle() {
        let l = ContrastLayout { batch: 2, views: 2, k: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (z, h) = (rand_t(&mut rng, 8, 3), rand_t(&mut rng, 8, 3));
        let tau = 0.2;
        let (mut sum, mut count) = (0.0, 0);
        for b in 0..2 {
            for m in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        if i == j {
                            continue;
                        }
                        let a = (b * 2 + m) * 2 + i;
                        let den: f64 = (0..2).map(|v| sim(&z, &h, a, (v * 2 + m) * 2 + j, tau).exp()).sum();
                        sum -= (sim(&z, &h, a, (b * 2 + m) * 2 + j, tau).exp() / den).ln();
                        count += 1;
                    }
                }
            }
        }
        assert!((loss_step(&z, &h, l, tau).unwrap() - sum / count as f64).abs() < 1e-6);
    }

    #[test]
    fn view_matches_loop_oracle() {
        let l = ContrastLayout { batch: 2, views: 2, k: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, h) = (rand_t(&mut rng, 4, 3), rand_t(&mut rng, 4, 3));
        let tau = 0.2;
        let (mut sum, mut count) = (0.0, 0);
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    if i == j {
                        continue;
                    }
                    let a = b * 2 + i;
                    let den: f64 = (0..2).map(|v| sim(&z, &h, a, v * 2 + j, tau).exp()).sum();
                    sum -= (sim(&z, &h, a, b * 2 + j, tau).exp() / den).ln();
                    count += 1;
                }
            }
        }
        assert!((loss_view(&z, &h, l, tau).unwrap() - sum / count as f64).abs() < 1e-6);
    }

    #[test]
    fn degenerate_layouts_are_rejected() {
        let z = Tensor::<f64>::full(&[2, 3], 1.0);
        assert!(loss_step(&z, &z, ContrastLayout { batch: 1, views: 2, k: 1 }, 0.2).is_err());
        assert!(loss_view(&z, &z, ContrastLayout { batch: 1, views: 1, k: 2 }, 0.2).is_err());
    }

    #[test]
    fn total_combines_with_half_beta() {
        let b = loss_total(4.0, 1.0, 2.0, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(b.total, 5.5);
        assert_eq!(loss_total(3.25, 9.0, 9.0, 9.0, 0.0, 0.0).unwrap().total, 3.25);
        assert!(matches!(
            loss_total(1.0, f64::NAN, 0.0, 0.0, 1.0, 0.5),
            Err(Error::NonFiniteLoss { component: "l_mim" })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn contrastive_losses_are_scale_free_and_nonnegative(seed in 0u64..1000, b in 1usize..4) {
                let l = ContrastLayout { batch: b, views: 2, k: 3 };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (z, h) = (rand_t(&mut rng, l.rows(), 4), rand_t(&mut rng, l.rows(), 4));
                let scale = |t: &Tensor<f64>| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 3.0 * v).collect()).unwrap();
                for f in [loss_step::<f64>, loss_view::<f64>] {
                    let a = f(&z, &h, l, 0.2).unwrap();
                    prop_assert!(a >= 0.0);
                    prop_assert!((a - f(&scale(&z), &scale(&h), l, 0.2).unwrap()).abs() < 1e-6);
                }
            }
        }
    }
}
