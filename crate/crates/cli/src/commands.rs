use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::{json, Value};

use star_core::data::{dequantize, DatasetSpec, ToyData, TokenDataset, TokenSequence, DATASET_FILE, TOKENS_FILE};
use star_core::diagnostics::{
    make_view_pairs, probe_with_labels, render_report, view_invariance, InvarianceRecord, LayerSummary,
    LocalityAccumulator, ProbeConfig, ProbeReport, ReportInput, EXTRACT_CHUNK,
};
use star_core::gradsuite::run_suite;
use star_core::losses::LossConfig;
use star_core::model::{forward_batch, Checkpoint, ModelConfig, ModelParams, TraceLevel};
use star_core::rng::stream_rng;
use star_core::sampler::{generate_many, SampleConfig};
use star_core::trainer::{
    checkpoint_config, run, MetricsRecord, TrainConfig, TrainSource, CHECKPOINT_DIR, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE,
};
use star_core::Error;

use crate::args::*;
use crate::exit::{self, numeric, usage};
use crate::manifest::{write_completion, RunManifest, MANIFEST_FILE};

pub const SAMPLES_FILE: &str = "samples.startok";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn abs_string(p: &Path) -> Result<String> {
    let abs = fs::canonicalize(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    Ok(abs.to_string_lossy().into_owned())
}

/// `count` indices spread evenly over `0..n` (all of them when `count` is 0
/// or at least `n`).
pub fn spread(n: usize, count: usize) -> Vec<usize> {
    if count == 0 || count >= n {
        (0..n).collect()
    } else {
        (0..count).map(|i| i * n / count).collect()
    }
}

fn flat_config(cfg: &TrainConfig) -> Result<Value> {
    let map: serde_json::Map<String, Value> = cfg.to_flat()?.into_iter().collect();
    Ok(Value::Object(map))
}

pub fn make_data(a: &MakeDataArgs) -> Result<()> {
    if a.classes == 0 || a.per_class == 0 {
        return Err(usage("--classes and --per-class must be at least 1"));
    }
    if a.patch == 0 || a.image_side == 0 || a.image_side % a.patch != 0 {
        return Err(usage(format!("--image-side {} must be a positive multiple of --patch {}", a.image_side, a.patch)));
    }
    if a.vocab < 2 {
        return Err(usage("--vocab must be at least 2"));
    }
    let patches = a.classes * a.per_class * (a.image_side / a.patch).pow(2);
    if patches < a.vocab {
        return Err(usage(format!("{patches} patches cannot fill a codebook of {}", a.vocab)));
    }
    if a.out.join(TOKENS_FILE).exists() || a.out.join(MANIFEST_FILE).exists() {
        return Err(usage(format!("{} already holds a dataset", a.out.display())));
    }
    let spec = DatasetSpec {
        classes: a.classes,
        per_class: a.per_class,
        image_side: a.image_side,
        patch: a.patch,
        vocab: a.vocab,
        seed: a.seed,
    };
    RunManifest::new("make-data", serde_json::to_value(&spec)?)
        .seed("data.seed", a.seed)
        .artifact("spec", DATASET_FILE)
        .artifact("codebook", star_core::data::CODEBOOK_FILE)
        .artifact("tokens", TOKENS_FILE)
        .write_new(&a.out, MANIFEST_FILE)?;
    let data = ToyData::generate(&spec)?;
    data.save_dir(&a.out)?;
    // the summary is read back from disk, not from memory
    let stored = TokenDataset::load(&a.out.join(TOKENS_FILE))?;
    let mut counts = stored.class_counts();
    counts.truncate(stored.classes);
    println!("classes {}  vocab {}  seq_len {}  sequences {}", stored.classes, stored.vocab, stored.seq_len, stored.records.len());
    for (c, n) in counts.iter().enumerate() {
        println!("class {c:>3}: {n}");
    }
    write_completion(&a.out, json!({ "sequences": stored.records.len(), "class_counts": counts }))
}

fn base_config(preset: Preset) -> TrainConfig {
    match preset {
        Preset::StarNano => TrainConfig::star_nano(),
        Preset::Full => TrainConfig::default(),
    }
}

/// Applies the layered sources of `a` on top of `base`.
pub fn resolve_config(a: &ConfigArgs, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p, base)?,
        None => base,
    };
    if a.baseline {
        cfg.make_baseline();
    } else if a.star {
        let d = LossConfig::default();
        cfg.loss.alpha = d.alpha;
        cfg.loss.beta = d.beta;
        cfg.loss.use_mim = d.use_mim;
        cfg.loss.use_step = d.use_step;
        cfg.loss.use_view = d.use_view;
        cfg.model.mask_ratio = ModelConfig::default().mask_ratio;
    }
    if let Some(dir) = &a.data {
        let spec = DatasetSpec::load(&dir.join(DATASET_FILE))?;
        cfg.model.vocab = spec.vocab;
        cfg.model.classes = spec.classes;
        cfg.model.seq_len = spec.seq_len();
        cfg.data.classes = spec.classes;
        cfg.data.per_class = spec.per_class;
        cfg.data.image_side = spec.image_side;
        cfg.data.patch = spec.patch;
        cfg.data.seed = spec.seed;
        cfg.data.dir = abs_string(dir)?;
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn fresh_config(a: &ConfigArgs) -> Result<TrainConfig> {
    resolve_config(a, base_config(a.preset))
}

/// A loaded checkpoint together with its configuration and run directory.
pub struct Opened {
    pub path: PathBuf,
    pub ck: Checkpoint,
    pub cfg: TrainConfig,
    pub run_dir: PathBuf,
}

impl Opened {
    pub fn open(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        let ck = Checkpoint::load(&path)?;
        let cfg = checkpoint_config(&ck).map_err(|e| exit::artifact(format!("{}: {e}", path.display())))?;
        let parent = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let run_dir = if parent.file_name().is_some_and(|n| n == CHECKPOINT_DIR) {
            parent.parent().unwrap_or(Path::new(".")).to_path_buf()
        } else {
            parent
        };
        Ok(Opened { path, ck, cfg, run_dir })
    }

    pub fn params(&self) -> Result<ModelParams<f32>> {
        Ok(self.ck.params("", &self.cfg.model)?)
    }

    pub fn run_name(&self) -> String {
        fs::canonicalize(&self.run_dir)
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into())
    }

    /// The training dataset, or `dir` after checking it agrees with the
    /// checkpoint.
    pub fn dataset(&self, dir: Option<&Path>) -> Result<ToyData> {
        let (m, d) = (&self.cfg.model, &self.cfg.data);
        match dir {
            Some(dir) => {
                let data = ToyData::load_dir(dir)?;
                let s = &data.spec;
                for (field, found, expected) in [
                    ("model.vocab", s.vocab, m.vocab),
                    ("model.classes", s.classes, m.classes),
                    ("model.seq_len", s.seq_len(), m.seq_len),
                ] {
                    if found != expected {
                        return Err(Error::ConfigMismatch {
                            field: field.into(),
                            expected: expected.to_string(),
                            found: found.to_string(),
                        }
                        .into());
                    }
                }
                Ok(data)
            }
            None if !d.dir.is_empty() => Ok(ToyData::load_dir(Path::new(&d.dir))?),
            None => Ok(ToyData::generate(&d.spec(m.vocab))?),
        }
    }

    pub fn out_dir(&self, io: &CheckpointArgs, command: &str) -> PathBuf {
        io.out.clone().unwrap_or_else(|| self.run_dir.join(command))
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (mut cfg, resume, out) = match &a.resume {
        Some(p) => {
            let opened = Opened::open(p)?;
            let cfg = resolve_config(&a.config, opened.cfg.clone())?;
            let out = a.out.clone().unwrap_or_else(|| opened.run_dir.clone());
            (cfg, Some(opened), out)
        }
        None => (fresh_config(&a.config)?, None, a.out.clone().expect("clap requires --out without --resume")),
    };
    if resume.is_none() && (out.join(MANIFEST_FILE).exists() || out.join(METRICS_FILE).exists()) {
        return Err(usage(format!("{} already holds a run; pass a fresh --out or --resume", out.display())));
    }
    let source = TrainSource::open(&mut cfg)?;
    let manifest_file = match &resume {
        Some(o) => format!("manifest.resume-{:08}.json", o.ck.step),
        None => MANIFEST_FILE.to_string(),
    };
    let mut m = RunManifest::new("train", flat_config(&cfg)?)
        .seed("train.seed", cfg.train.seed)
        .seed("data.seed", cfg.data.seed)
        .artifact("config", CONFIG_FILE)
        .artifact("metrics", METRICS_FILE)
        .artifact("checkpoint", CHECKPOINT_FILE)
        .artifact("checkpoints", CHECKPOINT_DIR);
    if let Some(o) = &resume {
        m.extra.insert("resumed_from".into(), json!({ "path": o.path, "step": o.ck.step }));
    }
    m.write_new(&out, &manifest_file)?;

    let every = a.log_every;
    let log = |r: &MetricsRecord| {
        if every > 0 && (r.step % every == 0 || r.step == 1) {
            eprintln!(
                "step {:>6}  l_ar {:.4}  l_mim {:.4}  l_step {:.4}  l_view {:.4}  total {:.4}  lr {:.2e}  |g| {:.3}",
                r.step, r.l_ar, r.l_mim, r.l_step, r.l_view, r.total, r.lr, r.grad_norm
            );
        }
    };
    let summary = run(&cfg, &source, &out, resume.as_ref().map(|o| &o.ck), log).map_err(|e| {
        let nan = matches!(e, Error::NonFiniteLoss { .. } | Error::NonFinite { .. });
        let err = anyhow::Error::from(e);
        if nan {
            err.context(format!("training stopped; periodic checkpoints under {} are kept", out.join(CHECKPOINT_DIR).display()))
        } else {
            err
        }
    })?;
    write_completion(
        &out,
        json!({
            "final_step": summary.final_step,
            "student_checksum": summary.student_checksum,
            "checkpoint": CHECKPOINT_FILE,
            "last": summary.last,
        }),
    )?;
    println!("{}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let o = Opened::open(&a.io.checkpoint)?;
    let c = &o.cfg.model;
    if a.class >= c.classes {
        return Err(usage(format!("--class {} outside 0..{}", a.class, c.classes)));
    }
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let sc = SampleConfig { cfg_scale: a.cfg_scale, temperature: a.temperature, top_k: a.top_k, seed: a.seed, count: a.count };
    sc.validate(c.vocab)?;
    let params = o.params()?;
    let out = o.out_dir(&a.io, "sample");
    RunManifest::new("sample", json!({ "checkpoint": o.path, "class": a.class, "sampler": sc, "png": a.png }))
        .seed("sample.seed", a.seed)
        .artifact("samples", SAMPLES_FILE)
        .write_new(&out, MANIFEST_FILE)?;
    let records = generate_many(&params, c, a.class, &sc)?;
    let ds = TokenDataset { vocab: c.vocab, seq_len: c.seq_len, classes: c.classes, records };
    ds.save(&out.join(SAMPLES_FILE))?;
    if a.png {
        let data = o.dataset(a.io.data.as_deref())?;
        for (i, seq) in ds.records.iter().enumerate() {
            let im = dequantize(seq, &data.codebook, data.spec.patch)?;
            let side = im.side as u32;
            let bytes: Vec<u8> = im.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let img = image::RgbImage::from_raw(side, side, bytes).expect("pixel buffer matches the image side");
            let path = out.join(format!("sample-{i:04}.png"));
            img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    write_completion(&out, json!({ "samples": ds.records.len() }))?;
    println!("{}", out.join(SAMPLES_FILE).display());
    Ok(())
}

/// Probe, locality and invariance options shared by the single commands and
/// the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeOptions {
    pub count: usize,
    pub layer: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle_labels: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutput {
    pub run: String,
    pub chance: f64,
    pub shuffled_labels: bool,
    pub sequences: usize,
    #[serde(flatten)]
    pub report: ProbeReport,
}

pub fn probe_run(o: &Opened, data: Option<&Path>, out: &Path, opt: &ProbeOptions) -> Result<ProbeOutput> {
    let c = &o.cfg.model;
    let mut pc = ProbeConfig::for_model(c);
    pc.layer = opt.layer.unwrap_or(pc.layer);
    pc.epochs = opt.epochs;
    pc.seed = opt.seed;
    RunManifest::new("probe", json!({ "checkpoint": o.path, "options": opt, "probe": pc }))
        .seed("probe.seed", opt.seed)
        .artifact("report", "probe.json")
        .artifact("table", "probe.csv")
        .write_new(out, MANIFEST_FILE)?;
    let ds = o.dataset(data)?;
    let seqs: Vec<TokenSequence> = spread(ds.tokens.records.len(), opt.count).into_iter().map(|i| ds.tokens.records[i].clone()).collect();
    let mut labels: Vec<usize> = seqs.iter().map(|s| s.condition).collect();
    if opt.shuffle_labels {
        labels.shuffle(&mut stream_rng(opt.seed, "probe-labels", 0));
    }
    let params = o.params()?;
    let report = probe_with_labels(&params, c, &seqs, &labels, &pc)?;
    let run = o.run_name();
    let result = ProbeOutput {
        run: run.clone(),
        chance: 1.0 / c.classes as f64,
        shuffled_labels: opt.shuffle_labels,
        sequences: seqs.len(),
        report: report.clone(),
    };
    write_json(&out.join("probe.json"), &result)?;
    render_report(&ReportInput { probes: vec![(run, report)], ..Default::default() }, out)?;
    Ok(result)
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let o = Opened::open(&a.io.checkpoint)?;
    let opt = ProbeOptions { count: a.count, layer: a.layer, epochs: a.epochs, seed: a.seed, shuffle_labels: a.shuffle_labels };
    let out = o.out_dir(&a.io, "probe");
    let r = probe_run(&o, a.io.data.as_deref(), &out, &opt)?;
    println!("probe layer {} over {} sequences (chance {:.3})", r.report.layer, r.sequences, r.chance);
    for (s, acc) in r.report.steps.iter().zip(&r.report.accuracy) {
        println!("step {s:>4}: {acc:.4}");
    }
    write_completion(&out, json!({ "accuracy": r.report.accuracy }))
}

#[derive(Debug, Clone, Serialize)]
pub struct AttnOutput {
    pub run: String,
    pub traces: usize,
    pub grid_side: usize,
    pub layers: Vec<LayerSummary>,
}

pub fn attn_run(o: &Opened, data: Option<&Path>, out: &Path, traces: usize) -> Result<AttnOutput> {
    let c = &o.cfg.model;
    let grid = (c.seq_len as f64).sqrt().round() as usize;
    if grid * grid != c.seq_len {
        return Err(usage(format!("seq_len {} is not a square grid", c.seq_len)));
    }
    if traces == 0 {
        return Err(usage("--traces must be at least 1"));
    }
    RunManifest::new("attn", json!({ "checkpoint": o.path, "traces": traces }))
        .artifact("summary", "attn.json")
        .artifact("table", "locality.csv")
        .write_new(out, MANIFEST_FILE)?;
    let ds = o.dataset(data)?;
    let idx = spread(ds.tokens.records.len(), traces);
    let seqs: Vec<TokenSequence> = idx.iter().map(|&i| ds.tokens.records[i].clone()).collect();
    let params = o.params()?;
    let mut acc = LocalityAccumulator::new(grid, c.layers);
    for chunk in seqs.chunks(EXTRACT_CHUNK) {
        for t in forward_batch(&params, c, chunk, &[], TraceLevel::Full)? {
            acc.add(&t)?;
        }
    }
    let profile = acc.finish()?;
    let run = o.run_name();
    let result = AttnOutput {
        run: run.clone(),
        traces: profile.traces,
        grid_side: grid,
        layers: (1..=profile.layers()).map(|l| profile.summary(l)).collect(),
    };
    write_json(&out.join("attn.json"), &result)?;
    render_report(&ReportInput { profiles: vec![(run, profile)], ..Default::default() }, out)?;
    Ok(result)
}

pub fn attn(a: &AttnArgs) -> Result<()> {
    let o = Opened::open(&a.io.checkpoint)?;
    let out = o.out_dir(&a.io, "attn");
    let r = attn_run(&o, a.io.data.as_deref(), &out, a.traces)?;
    println!("layer  condition  neighbors  elsewhere  distance   ({} traces)", r.traces);
    for s in &r.layers {
        println!(
            "{:>5}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8.4}",
            s.layer, s.mass_on_condition, s.mass_on_neighbors, s.mass_elsewhere, s.mean_distance
        );
    }
    write_completion(&out, serde_json::to_value(&r.layers)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceOutput {
    pub run: String,
    pub seed: u64,
    #[serde(flatten)]
    pub record: InvarianceRecord,
}

pub fn invariance_run(
    o: &Opened,
    data: Option<&Path>,
    out: &Path,
    pairs: usize,
    layer: Option<usize>,
    seed: u64,
) -> Result<InvarianceOutput> {
    let c = &o.cfg.model;
    if pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    let layer = layer.unwrap_or(c.tap_depth);
    RunManifest::new("invariance", json!({ "checkpoint": o.path, "pairs": pairs, "layer": layer }))
        .seed("invariance.seed", seed)
        .artifact("summary", "invariance.json")
        .artifact("table", "invariance.csv")
        .write_new(out, MANIFEST_FILE)?;
    let ds = o.dataset(data)?;
    let view_pairs = make_view_pairs(&ds, pairs, seed)?;
    let params = o.params()?;
    let record = view_invariance(Some((&params, c)), &view_pairs, layer)?;
    let run = o.run_name();
    let result = InvarianceOutput { run: run.clone(), seed, record: record.clone() };
    write_json(&out.join("invariance.json"), &result)?;
    render_report(&ReportInput { invariance: vec![(run, record)], ..Default::default() }, out)?;
    Ok(result)
}

pub fn invariance(a: &InvarianceArgs) -> Result<()> {
    let o = Opened::open(&a.io.checkpoint)?;
    let out = o.out_dir(&a.io, "invariance");
    let r = invariance_run(&o, a.io.data.as_deref(), &out, a.pairs, a.layer, a.seed)?;
    println!(
        "pairs {}  layer {}  token_change_rate {:.4}  feature_cosine {:.4}",
        r.record.pairs,
        r.record.layer,
        r.record.token_change_rate,
        r.record.feature_cosine.unwrap_or(f64::NAN)
    );
    write_completion(&out, serde_json::to_value(&r.record)?)
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if !(a.epsilon > 0.0) {
        return Err(usage("--epsilon must be positive"));
    }
    let t0 = Instant::now();
    let checks = run_suite(a.seed, a.epsilon)?;
    let secs = t0.elapsed().as_secs_f64();
    println!("{:<8} {:>12} {:>12} {:>10}  result", "loss", "value", "max rel err", "tolerance");
    for ch in &checks {
        println!(
            "{:<8} {:>12.6} {:>12.3e} {:>10.0e}  {}",
            ch.component.name(),
            ch.value,
            ch.report.max_rel_err(),
            ch.report.tolerance,
            if ch.report.pass { "pass" } else { "FAIL" }
        );
    }
    println!("{} checks in {secs:.1}s (64-bit, epsilon {:e})", checks.len(), a.epsilon);
    if let Some(out) = &a.out {
        RunManifest::new("gradcheck", json!({ "epsilon": a.epsilon }))
            .seed("gradcheck.seed", a.seed)
            .artifact("report", "gradcheck.json")
            .write_new(out, MANIFEST_FILE)?;
        write_json(&out.join("gradcheck.json"), &json!({ "seconds": secs, "checks": checks }))?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.report.pass).map(|c| c.component.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
