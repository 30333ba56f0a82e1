//! Training loop: batch assembly, the joint objective step, AdamW, EMA,
//! metrics and checkpoints.

mod config;
mod optim;

pub use config::{DataConfig, LogConfig, OptimConfig, TrainConfig};
pub use optim::{clip_grad_norm, global_norm, lr_at, AdamW};

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{quantize, ToyData};
use crate::error::{Error, Result};
use crate::losses::{bundle_of, record_objective, sample_positions, LossBundle, ObjectiveBatch};
use crate::model::{push_params, sample_layer_masks, Checkpoint, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::rng::{derive_seed, pair_index, stream_rng};
use crate::teacher::TeacherState;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CHECKPOINT_DIR: &str = "ckpt";
pub const METRICS_VERSION: u32 = 1;

/// Replaces the condition by the null class with probability `p`.
pub fn cfg_dropout(condition: usize, null_class: usize, p: f64, seed: u64) -> usize {
    let mut rng = stream_rng(seed, "dropout", 0);
    if rng.random::<f64>() < p {
        null_class
    } else {
        condition
    }
}

/// Training examples: a generated (or reloaded) dataset, optionally frozen
/// to its unaugmented tokens and thinned to a subset.
pub struct TrainSource {
    pub data: ToyData,
    pub frozen: bool,
    /// Image indices in use.
    pub indices: Vec<usize>,
}

impl TrainSource {
    /// Loads `data.dir` when set, copying its stored spec into `cfg.data`;
    /// otherwise synthesizes from `cfg.data`.
    pub fn open(cfg: &mut TrainConfig) -> Result<Self> {
        let data = if cfg.data.dir.is_empty() {
            ToyData::generate(&cfg.data.spec(cfg.model.vocab))?
        } else {
            let d = ToyData::load_dir(Path::new(&cfg.data.dir))?;
            if d.spec.vocab != cfg.model.vocab {
                return Err(Error::ConfigMismatch {
                    field: "model.vocab".into(),
                    expected: d.spec.vocab.to_string(),
                    found: cfg.model.vocab.to_string(),
                });
            }
            let s = &d.spec;
            cfg.data.classes = s.classes;
            cfg.data.per_class = s.per_class;
            cfg.data.image_side = s.image_side;
            cfg.data.patch = s.patch;
            cfg.data.seed = s.seed;
            d
        };
        cfg.validate()?;
        Ok(Self::from_data(data, &cfg.data))
    }

    pub fn from_data(data: ToyData, cfg: &DataConfig) -> Self {
        let n = data.images.len();
        let indices = if cfg.limit == 0 || cfg.limit >= n {
            (0..n).collect()
        } else {
            (0..cfg.limit).map(|i| i * n / cfg.limit).collect()
        };
        TrainSource { data, frozen: cfg.frozen, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Image drawn for the `g`-th sample of the run: a fresh permutation of
    /// the subset every epoch.
    pub fn pick(&self, seed: u64, g: u64) -> usize {
        let n = self.len() as u64;
        let mut order = self.indices.clone();
        order.shuffle(&mut stream_rng(seed, "data", g / n));
        order[(g % n) as usize]
    }

    pub fn epoch(&self, step: u64, batch: usize) -> u64 {
        step.saturating_sub(1) * batch as u64 / self.len() as u64
    }
}

/// Sequences, masks and positions for 1-based `step`. Teacher states are
/// filled in by [`train_step`].
pub fn assemble(source: &TrainSource, cfg: &TrainConfig, step: u64) -> Result<ObjectiveBatch<f32>> {
    let (b_n, m_n) = (cfg.train.batch, cfg.train.views);
    let seed = cfg.train.seed;
    let mc = &cfg.model;
    let mut seqs = Vec::with_capacity(b_n * m_n);
    for b in 0..b_n {
        let idx = source.pick(seed, (step - 1) * b_n as u64 + b as u64);
        let cond = cfg_dropout(
            source.data.images[idx].class_label,
            mc.null_class(),
            cfg.train.cfg_dropout,
            derive_seed(seed, "dropout", pair_index(step, b as u64)),
        );
        if source.frozen {
            let s = source.data.tokens.records[idx].with_condition(cond);
            seqs.extend(std::iter::repeat_n(s, m_n));
        } else {
            let pair = source.data.augmented_pair(idx, m_n, |m| {
                derive_seed(seed, "augment", pair_index(step, (b * m_n + m) as u64))
            });
            for v in &pair.views {
                seqs.push(quantize(v, &source.data.codebook, source.data.spec.patch)?.with_condition(cond));
            }
        }
    }
    let l_n = mc.layers as u64;
    let masks = if mc.mask_ratio > 0.0 {
        (0..seqs.len() as u64)
            .map(|n| {
                sample_layer_masks(mc, mc.mask_ratio, |l| derive_seed(seed, "mask", pair_index(step, n * l_n + l as u64)))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let positions = if cfg.loss.step_active() || cfg.loss.view_active() {
        sample_positions(cfg.loss.k_steps, mc.seq_len, derive_seed(seed, "positions", step))?.indices
    } else {
        Vec::new()
    };
    Ok(ObjectiveBatch { seqs, batch: b_n, views: m_n, masks, positions, teacher_final: None, teacher_tap: None })
}

/// Student, teacher and optimizer state after `step` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ModelParams<f32>,
    pub teacher: TeacherState<f32>,
    pub optim: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let student = ModelParams::init(&cfg.model, cfg.train.seed)?;
        let teacher = TeacherState::new(&student, cfg.train.ema_decay)?;
        let optim = AdamW::new(&cfg.model, &student);
        Ok(TrainState { student, teacher, optim, step: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            step: self.step,
            config: serde_json::to_value(cfg)?,
            meta: serde_json::json!({ "optim_t": self.optim.t, "teacher_steps": self.teacher.steps_applied }),
            tensors: Vec::new(),
        };
        ck.push_params("", &cfg.model, &self.student);
        ck.push_params("teacher/", &cfg.model, &self.teacher.params);
        ck.push_params("optim.m/", &cfg.model, &self.optim.m);
        ck.push_params("optim.v/", &cfg.model, &self.optim.v);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let student = ck.params("", &cfg.model)?;
        let mut teacher = TeacherState::new(&ck.params("teacher/", &cfg.model)?, cfg.train.ema_decay)?;
        teacher.steps_applied = ck.meta["teacher_steps"].as_u64().unwrap_or(ck.step);
        let t = ck.meta["optim_t"].as_u64().unwrap_or(ck.step);
        let optim = AdamW::from_state(&cfg.model, ck.params("optim.m/", &cfg.model)?, ck.params("optim.v/", &cfg.model)?, t);
        Ok(TrainState { student, teacher, optim, step: ck.step })
    }
}

/// Configuration stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::invalid(format!("checkpoint config does not parse: {e}")))
}

/// Keys that may change when resuming.
fn resumable_key(k: &str) -> bool {
    !(k == "train.steps" || k == "train.checkpoint_every" || k == "data.dir" || k.starts_with("log."))
}

/// Errors with the first setting that would change the resumed trajectory.
pub fn check_resumable(cfg: &TrainConfig, saved: &TrainConfig) -> Result<()> {
    cfg.check_matches(saved, resumable_key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub losses: LossBundle,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

fn as_loss_error<T>(component: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { component },
        other => other,
    })
}

/// One optimizer step: teacher states, objective, backward, clipping,
/// AdamW, then the EMA update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, mut batch: ObjectiveBatch<f32>) -> Result<StepOutcome> {
    let mc = &cfg.model;
    let step = state.step + 1;
    if cfg.loss.needs_teacher() {
        let traces = as_loss_error("teacher", state.teacher.forward(mc, &batch.seqs))?;
        let rows = batch.seqs.len() * mc.seq_len;
        let cat = |f: &dyn Fn(&crate::model::ForwardTrace<f32>) -> &Tensor<f32>| {
            Tensor::new(vec![rows, mc.width], traces.iter().flat_map(|t| f(t).data().iter().copied()).collect())
        };
        batch.teacher_final = Some(cat(&|t| &t.final_hidden)?);
        batch.teacher_tap = Some(cat(&|t| &t.hidden[mc.tap_depth - 1])?);
    }
    let mut tape = Tape::new();
    let pv = push_params(&mut tape, &state.student, true);
    let vars = as_loss_error("forward", record_objective(&mut tape, mc, &pv, &batch, &cfg.loss))?;
    let losses = bundle_of(&tape, &vars, &cfg.loss)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss { component: "total" });
    }
    let mut g = tape.backward(vars.total)?;
    let mut grads: Vec<Tensor<f32>> = pv
        .iter()
        .zip(&state.student.tensors)
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);
    let grad_norm = clip_grad_norm(&mut grads, cfg.train.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { component: "gradient" });
    }
    let lr = lr_at(&cfg.train, step);
    state.optim.step(&mut state.student, &grads, lr, &cfg.train)?;
    state.teacher.ema_update(&state.student)?;
    state.step = step;
    Ok(StepOutcome { losses, grad_norm, lr })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub v: u32,
    pub step: u64,
    pub epoch: u64,
    pub l_ar: f64,
    pub l_mim: f64,
    pub l_step: f64,
    pub l_view: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Null when `log.timing` is off.
    pub tokens_per_sec: Option<f64>,
    pub wall_time: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub last: Option<MetricsRecord>,
    pub checkpoint: PathBuf,
    pub student_checksum: String,
}

pub fn step_checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:08}.ckpt"))
}

/// Trains until `cfg.train.steps`, writing the resolved config, metrics and
/// checkpoints under `out_dir`. With `resume`, metrics after the resumed
/// step are discarded and rewritten. A non-finite loss stops the run with
/// [`Error::NonFiniteLoss`]; checkpoints already written are kept.
pub fn run(
    cfg: &TrainConfig,
    source: &TrainSource,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(out_dir, e))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()?).map_err(|e| Error::io(&cfg_path, e))?;

    let mut state = match resume {
        Some(ck) => {
            check_resumable(cfg, &checkpoint_config(ck)?)?;
            TrainState::from_checkpoint(ck, cfg)?
        }
        None => TrainState::new(cfg)?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    // earlier lines are kept verbatim so a resumed file is byte-identical
    let mut kept: Vec<(String, MetricsRecord)> = Vec::new();
    if resume.is_some() && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: MetricsRecord = serde_json::from_str(line)?;
            if r.step <= state.step {
                kept.push((line.to_string(), r));
            }
        }
    }
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    for (line, _) in &kept {
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }
    drop(metrics);
    let mut metrics =
        OpenOptions::new().append(true).open(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let started = Instant::now();
    let mut last = kept.pop().map(|(_, r)| r);
    let tokens = (cfg.train.batch * cfg.train.views * cfg.model.seq_len) as f64;
    while state.step < cfg.train.steps {
        let t0 = Instant::now();
        let step = state.step + 1;
        let batch = assemble(source, cfg, step)?;
        let out = train_step(&mut state, cfg, batch)?;
        let dt = t0.elapsed().as_secs_f64();
        let l = &out.losses;
        let rec = MetricsRecord {
            v: METRICS_VERSION,
            step,
            epoch: source.epoch(step, cfg.train.batch),
            l_ar: l.l_ar,
            l_mim: l.l_mim,
            l_step: l.l_step,
            l_view: l.l_view,
            total: l.total,
            lr: out.lr,
            grad_norm: out.grad_norm,
            tokens_per_sec: cfg.log.timing.then(|| tokens / dt.max(1e-9)),
            wall_time: cfg.log.timing.then(|| started.elapsed().as_secs_f64()),
        };
        writeln!(metrics, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(&rec);
        last = Some(rec);
        let every = cfg.train.checkpoint_every;
        if every > 0 && step % every == 0 {
            state.to_checkpoint(cfg)?.save(&step_checkpoint_path(out_dir, step))?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    state.to_checkpoint(cfg)?.save(&checkpoint)?;
    Ok(RunSummary { final_step: state.step, last, checkpoint, student_checksum: state.student.checksum() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::loss_ar_tape;
    use crate::model::{forward_tape, ModelConfig};

    /// Micro model on a tiny 8×8 / patch 2 dataset.
    fn micro_cfg() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model = ModelConfig { seq_len: 16, classes: 3, ..ModelConfig::micro() };
        c.data = DataConfig { classes: 3, per_class: 4, image_side: 8, patch: 2, seed: 1, ..DataConfig::default() };
        c.train.batch = 3;
        c.train.steps = 6;
        c.train.lr = 1.0;
        c.train.warmup = 2;
        c.train.ema_decay = 0.9;
        c.train.checkpoint_every = 3;
        c.loss.k_steps = 3;
        c.log.timing = false;
        c
    }

    fn source(cfg: &mut TrainConfig) -> TrainSource {
        TrainSource::open(cfg).unwrap()
    }

    #[test]
    fn dropout_rate_matches() {
        let n = 200_000u64;
        let dropped = (0..n).filter(|&i| cfg_dropout(3, 10, 0.1, derive_seed(9, "dropout", i)) == 10).count();
        let rate = dropped as f64 / n as f64;
        assert!((rate - 0.1).abs() < 0.005, "{rate}");
        assert_eq!(cfg_dropout(3, 10, 0.0, 1), 3);
        assert_eq!(cfg_dropout(3, 10, 1.0, 1), 10);
    }

    #[test]
    fn each_epoch_visits_every_sample_once() {
        let mut cfg = micro_cfg();
        cfg.data.limit = 5;
        let src = source(&mut cfg);
        assert_eq!(src.len(), 5);
        for e in 0..3u64 {
            let mut seen: Vec<usize> = (0..5).map(|i| src.pick(4, e * 5 + i)).collect();
            seen.sort();
            assert_eq!(seen, src.indices);
        }
    }

    #[test]
    fn batch_layout() {
        let mut cfg = micro_cfg();
        let src = source(&mut cfg);
        let b = assemble(&src, &cfg, 1).unwrap();
        assert_eq!(b.seqs.len(), 6);
        assert_eq!(b.masks.len(), 6);
        assert_eq!(b.positions.len(), 3);
        for pair in b.seqs.chunks(2) {
            assert_eq!(pair[0].condition, pair[1].condition);
        }
        assert_eq!(assemble(&src, &cfg, 1).unwrap().seqs, b.seqs);
        assert_ne!(assemble(&src, &cfg, 2).unwrap().seqs, b.seqs);

        cfg.data.frozen = true;
        let f = assemble(&TrainSource::from_data(src.data, &cfg.data), &cfg, 1).unwrap();
        assert!(f.seqs.chunks(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn baseline_step_matches_plain_next_token_step() {
        let mut cfg = micro_cfg();
        cfg.make_baseline();
        cfg.loss.use_mim = false;
        let src = source(&mut cfg);
        let batch = assemble(&src, &cfg, 1).unwrap();
        assert!(batch.masks.is_empty() && batch.positions.is_empty());

        let mut state = TrainState::new(&cfg).unwrap();
        let out = train_step(&mut state, &cfg, batch.clone()).unwrap();

        let mut tape = Tape::new();
        let pv = push_params(&mut tape, &TrainState::new(&cfg).unwrap().student, true);
        let f = forward_tape(&mut tape, &cfg.model, &pv, &batch.seqs, &[]).unwrap();
        let targets: Vec<usize> = batch.seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
        let l = loss_ar_tape(&mut tape, f.logits, &targets).unwrap();
        let want = f64::from(tape.value(l).item());
        assert_eq!(out.losses.total.to_bits(), want.to_bits());
        assert_eq!(out.losses.l_ar.to_bits(), want.to_bits());
        assert_eq!((out.losses.l_mim, out.losses.l_step, out.losses.l_view), (0.0, 0.0, 0.0));
    }

    #[test]
    fn teacher_moves_only_through_ema() {
        let mut cfg = micro_cfg();
        cfg.train.ema_decay = 1.0;
        let src = source(&mut cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.teacher.params.checksum();
        let student_before = state.student.checksum();
        for s in 1..=2 {
            train_step(&mut state, &cfg, assemble(&src, &cfg, s).unwrap()).unwrap();
        }
        assert_eq!(state.teacher.params.checksum(), before);
        assert_ne!(state.student.checksum(), student_before);
    }

    #[test]
    fn run_resume_reproduces_the_tail() {
        let mut cfg = micro_cfg();
        let src = source(&mut cfg);
        let dir = tempfile::tempdir().unwrap();
        let full = run(&cfg, &src, dir.path(), None, |_| {}).unwrap();
        let whole = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(whole.lines().count(), 6);

        let ck = Checkpoint::load(&step_checkpoint_path(dir.path(), 3)).unwrap();
        let again = run(&cfg, &src, dir.path(), Some(&ck), |_| {}).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), whole);
        assert_eq!(again.student_checksum, full.student_checksum);

        let mut other = cfg.clone();
        other.loss.tau = 0.5;
        match run(&other, &src, dir.path(), Some(&ck), |_| {}) {
            Err(Error::ConfigMismatch { field, .. }) => assert_eq!(field, "loss.tau"),
            r => panic!("{:?}", r.map(|s| s.final_step)),
        }
    }

    #[test]
    fn divergence_is_reported_by_component() {
        let mut cfg = micro_cfg();
        let src = source(&mut cfg);
        let mut state = TrainState::new(&cfg).unwrap();
        state.student.tensors[crate::model::CLS_EMBED].data_mut().fill(f32::NAN);
        let err = train_step(&mut state, &cfg, assemble(&src, &cfg, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }
}
