use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use star_core::losses::LossConfig;
use star_core::model::ModelConfig;
use star_core::trainer::{read_metrics, run, TrainConfig, TrainSource, CHECKPOINT_FILE, METRICS_FILE};

use crate::args::{Axis, SweepArgs};
use crate::commands::{attn_run, fresh_config, invariance_run, probe_run, Opened, ProbeOptions};
use crate::exit::usage;
use crate::manifest::{write_completion, RunManifest, MANIFEST_FILE};

pub const SWEEP_CSV: &str = "sweep.csv";

pub const LOSS_GRID: [&str; 5] = ["ar", "ar+mim", "ar+mim+step", "ar+mim+view", "ar+mim+step+view"];

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::TapDepth => "tap_depth",
            Axis::KSteps => "k_steps",
            Axis::Losses => "losses",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::MaskRatio => &["0.15", "0.25", "0.35", "0.45"],
            Axis::TapDepth => &["0.25", "0.5", "0.75", "1"],
            Axis::KSteps => &["2", "4", "8", "16"],
            Axis::Losses => &LOSS_GRID,
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

/// Tap depth for a fraction of the layer count, at least 1.
pub fn depth_of(fraction: f64, layers: usize) -> usize {
    ((fraction * layers as f64).round() as usize).clamp(1, layers)
}

/// `base` with one axis value applied; also returns the settings it changed.
pub fn member_config(base: &TrainConfig, axis: Axis, value: &str) -> Result<(TrainConfig, String)> {
    let mut cfg = base.clone();
    let bad = |what: &str| usage(format!("{} value {value:?}: {what}", axis.name()));
    let setting = match axis {
        Axis::MaskRatio => {
            let r: f64 = value.parse().map_err(|_| bad("expected a number"))?;
            cfg.model.mask_ratio = r;
            format!("model.mask_ratio={r}")
        }
        Axis::TapDepth => {
            let f: f64 = value.parse().map_err(|_| bad("expected a fraction of the layer count"))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad("fraction must lie in (0, 1]"));
            }
            cfg.model.tap_depth = depth_of(f, cfg.model.layers);
            format!("model.tap_depth={}", cfg.model.tap_depth)
        }
        Axis::KSteps => {
            let k: usize = value.parse().map_err(|_| bad("expected an integer"))?;
            cfg.loss.k_steps = k;
            format!("loss.k_steps={k}")
        }
        Axis::Losses => {
            let parts: Vec<&str> = value.split('+').map(str::trim).collect();
            if parts.first() != Some(&"ar") || parts.iter().any(|p| !["ar", "mim", "step", "view"].contains(p)) {
                return Err(bad("expected `ar` followed by any of +mim, +step, +view"));
            }
            let d = LossConfig::default();
            let l = &mut cfg.loss;
            l.use_mim = parts.contains(&"mim");
            l.use_step = parts.contains(&"step");
            l.use_view = parts.contains(&"view");
            if l.use_mim && l.alpha == 0.0 {
                l.alpha = d.alpha;
            }
            if (l.use_step || l.use_view) && l.beta == 0.0 {
                l.beta = d.beta;
            }
            // attention masking belongs to the MIM branch
            if !l.use_mim {
                cfg.model.mask_ratio = 0.0;
            } else if cfg.model.mask_ratio == 0.0 {
                cfg.model.mask_ratio = ModelConfig::default().mask_ratio;
            }
            format!(
                "loss.use_mim={} loss.use_step={} loss.use_view={} model.mask_ratio={}",
                l.use_mim, l.use_step, l.use_view, cfg.model.mask_ratio
            )
        }
    };
    cfg.validate()?;
    Ok((cfg, setting))
}

fn member_dir(out: &Path, axis: Axis, value: &str) -> PathBuf {
    let label: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    out.join(format!("{}-{label}", axis.name()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub setting: String,
    pub run_dir: String,
    pub final_step: u64,
    pub l_ar: f64,
    pub l_mim: f64,
    pub l_step: f64,
    pub l_view: f64,
    pub total: f64,
    pub final_layer_mean_distance: f64,
    pub final_layer_mass_elsewhere: f64,
    pub probe_mean_accuracy: f64,
    pub probe_last_accuracy: f64,
    pub feature_cosine: f64,
    pub token_change_rate: f64,
}

struct Member {
    value: String,
    setting: String,
    cfg: TrainConfig,
    dir: PathBuf,
}

fn run_member(m: &Member, axis: Axis, a: &SweepArgs) -> Result<SweepRow> {
    let mut cfg = m.cfg.clone();
    let source = TrainSource::open(&mut cfg)?;
    RunManifest::new("train", serde_json::Value::Object(cfg.to_flat()?.into_iter().collect()))
        .seed("train.seed", cfg.train.seed)
        .seed("data.seed", cfg.data.seed)
        .artifact("metrics", METRICS_FILE)
        .artifact("checkpoint", CHECKPOINT_FILE)
        .write_new(&m.dir, MANIFEST_FILE)?;
    let summary = run(&cfg, &source, &m.dir, None, |_| {}).with_context(|| format!("member {}", m.dir.display()))?;
    write_completion(&m.dir, json!({ "final_step": summary.final_step, "student_checksum": summary.student_checksum }))?;
    let last = read_metrics(&m.dir.join(METRICS_FILE))?.pop().context("member wrote no metrics")?;

    let o = Opened::open(&m.dir)?;
    let data = a.config.data.as_deref();
    let at = attn_run(&o, data, &m.dir.join("attn"), a.traces)?;
    let opt = ProbeOptions { count: a.probe_count, layer: None, epochs: 90, seed: 0, shuffle_labels: false };
    let pr = probe_run(&o, data, &m.dir.join("probe"), &opt)?;
    let inv = invariance_run(&o, data, &m.dir.join("invariance"), a.pairs, None, 1)?;
    let fin = at.layers.last().expect("at least one layer");
    let acc = &pr.report.accuracy;
    eprintln!("{} {}: done at step {}", axis.name(), m.value, summary.final_step);
    Ok(SweepRow {
        axis: axis.name().into(),
        value: m.value.clone(),
        setting: m.setting.clone(),
        run_dir: m.dir.file_name().unwrap().to_string_lossy().into_owned(),
        final_step: summary.final_step,
        l_ar: last.l_ar,
        l_mim: last.l_mim,
        l_step: last.l_step,
        l_view: last.l_view,
        total: last.total,
        final_layer_mean_distance: fin.mean_distance,
        final_layer_mass_elsewhere: fin.mass_elsewhere,
        probe_mean_accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
        probe_last_accuracy: *acc.last().unwrap(),
        feature_cosine: inv.record.feature_cosine.unwrap_or(f64::NAN),
        token_change_rate: inv.record.token_change_rate,
    })
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let values = if a.values.is_empty() { a.axis.default_values() } else { a.values.clone() };
    let base = fresh_config(&a.config)?;
    let mut members = Vec::new();
    for v in &values {
        let (cfg, setting) = member_config(&base, a.axis, v)?;
        let dir = member_dir(&a.out, a.axis, v);
        if members.iter().any(|m: &Member| m.dir == dir) {
            return Err(usage(format!("values {v:?} and another map to the same run directory")));
        }
        if dir.exists() {
            return Err(usage(format!("{} already exists; sweeps never overwrite runs", dir.display())));
        }
        members.push(Member { value: v.clone(), setting, cfg, dir });
    }
    if a.out.join(MANIFEST_FILE).exists() || a.out.join(SWEEP_CSV).exists() {
        return Err(usage(format!("{} already holds a sweep", a.out.display())));
    }
    let mut m = RunManifest::new("sweep", serde_json::Value::Object(base.to_flat()?.into_iter().collect()))
        .seed("train.seed", base.train.seed)
        .seed("data.seed", base.data.seed)
        .seed("probe.seed", 0)
        .seed("invariance.seed", 1)
        .artifact("table", SWEEP_CSV);
    m.extra.insert("axis".into(), json!(a.axis.name()));
    m.extra.insert("values".into(), json!(values));
    m.extra.insert("jobs".into(), json!(a.jobs));
    m.extra.insert(
        "diagnostics".into(),
        json!({ "traces": a.traces, "probe_count": a.probe_count, "pairs": a.pairs }),
    );
    for mem in &members {
        m.artifacts.insert(format!("run:{}", mem.value), mem.dir.file_name().unwrap().to_string_lossy().into_owned());
    }
    m.write_new(&a.out, MANIFEST_FILE)?;

    let rows: Vec<SweepRow> = if a.jobs == 1 {
        members.iter().map(|mem| run_member(mem, a.axis, a)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build().context("building the sweep pool")?;
        pool.install(|| members.par_iter().map(|mem| run_member(mem, a.axis, a)).collect::<Result<_>>())?
    };

    let path = a.out.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_completion(&a.out, json!({ "rows": rows.len() }))?;
    println!("{}", path.display());
    Ok(())
}
