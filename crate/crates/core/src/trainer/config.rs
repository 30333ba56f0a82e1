//! Run configuration and its flat `section.key=value` text form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory written by `make-data`; empty means synthesize in memory.
    pub dir: String,
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub patch: usize,
    pub seed: u64,
    /// Train on the stored unaugmented tokens; every view is identical.
    pub frozen: bool,
    /// Keep only this many records, spread evenly over the set (0 keeps all).
    pub limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: String::new(), classes: 10, per_class: 100, image_side: 32, patch: 4, seed: 0, frozen: false, limit: 0 }
    }
}

impl DataConfig {
    pub fn spec(&self, vocab: usize) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            per_class: self.per_class,
            image_side: self.image_side,
            patch: self.patch,
            vocab,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub batch: usize,
    pub views: usize,
    pub steps: u64,
    /// Base learning rate per 256 samples; scaled linearly by the batch.
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    /// 0.95 by default; 0.05 is accepted and makes the second moment track only the last step.
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub cfg_dropout: f64,
    pub seed: u64,
    /// Steps between checkpoints (0 writes only the final one).
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch: 8,
            views: 2,
            steps: 5000,
            lr: 1e-4,
            warmup: 500,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            ema_decay: 0.9999,
            cfg_dropout: 0.1,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    /// Record wall time and throughput; off makes metrics byte-reproducible.
    pub timing: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig { timing: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: OptimConfig,
    pub loss: LossConfig,
    pub log: LogConfig,
}

/// Sections in file order.
const SECTIONS: [&str; 5] = ["model", "data", "train", "loss", "log"];

impl TrainConfig {
    /// Toy-scale schedule: a learning rate and EMA decay sized for a few
    /// thousand steps at batch 8.
    pub fn star_nano() -> Self {
        let mut c = TrainConfig::default();
        c.train.lr = 3e-2;
        c.train.warmup = 200;
        c.train.ema_decay = 0.995;
        c
    }

    /// Plain next-token training: no alignment, no contrast, no masking.
    pub fn make_baseline(&mut self) {
        self.loss.alpha = 0.0;
        self.loss.beta = 0.0;
        self.model.mask_ratio = 0.0;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::invalid(m));
        if t.batch == 0 {
            return bad("train.batch must be at least 1".into());
        }
        if t.views == 0 || (self.loss.view_active() && t.views < 2) {
            return bad(format!("train.views={} but the inter-view loss needs at least 2", t.views));
        }
        if self.loss.step_active() && (self.loss.k_steps < 2 || self.loss.k_steps > self.model.seq_len) {
            return bad(format!("loss.k_steps={} outside 2..={}", self.loss.k_steps, self.model.seq_len));
        }
        for (v, name) in [
            (t.lr, "train.lr"),
            (t.weight_decay, "train.weight_decay"),
            (t.grad_clip, "train.grad_clip"),
            (self.loss.alpha, "loss.alpha"),
            (self.loss.beta, "loss.beta"),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name}={v} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&t.ema_decay) || !(0.0..=1.0).contains(&t.cfg_dropout) {
            return bad("train.ema_decay and train.cfg_dropout must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.loss.tau > 0.0) {
            return bad("loss.tau must be positive".into());
        }
        let d = &self.data;
        if d.patch == 0 || d.image_side % d.patch != 0 {
            return bad(format!("data.image_side={} not divisible by data.patch={}", d.image_side, d.patch));
        }
        let g = d.image_side / d.patch;
        if g * g != self.model.seq_len {
            return bad(format!("{g}x{g} token grid does not match model.seq_len={}", self.model.seq_len));
        }
        if d.classes != self.model.classes {
            return bad(format!("data.classes={} but model.classes={}", d.classes, self.model.classes));
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_flat(&self) -> Result<Vec<(String, Value)>> {
        let v = serde_json::to_value(self)?;
        let mut out = Vec::new();
        for s in SECTIONS {
            let obj = v[s].as_object().expect("section object");
            let sorted: BTreeMap<_, _> = obj.iter().collect();
            for (k, val) in sorted {
                out.push((format!("{s}.{k}"), val.clone()));
            }
        }
        Ok(out)
    }

    /// Resolved `key=value` listing, one per line.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.to_flat()? {
            let shown = match &v {
                Value::String(x) => x.clone(),
                other => other.to_string(),
            };
            s.push_str(&format!("{k}={shown}\n"));
        }
        Ok(s)
    }

    /// Sets one key from its text form, typed after the current value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::invalid(format!("config key {key:?} needs a section prefix")))?;
        let slot = v
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::invalid(format!("unknown config key {key:?}")))?;
        let raw = raw.trim();
        let parsed = match slot {
            Value::Bool(_) => match raw {
                "true" | "1" | "yes" | "on" => Value::Bool(true),
                "false" | "0" | "no" | "off" => Value::Bool(false),
                _ => return Err(Error::invalid(format!("{key}: expected a boolean, got {raw:?}"))),
            },
            Value::Number(n) if n.is_u64() => Value::from(
                raw.parse::<u64>().map_err(|_| Error::invalid(format!("{key}: expected an unsigned integer, got {raw:?}")))?,
            ),
            Value::Number(_) => {
                let f: f64 = raw.parse().map_err(|_| Error::invalid(format!("{key}: expected a number, got {raw:?}")))?;
                serde_json::Number::from_f64(f)
                    .map(Value::Number)
                    .ok_or_else(|| Error::invalid(format!("{key}: value must be finite")))?
            }
            Value::String(_) => Value::String(raw.to_string()),
            _ => return Err(Error::invalid(format!("config key {key:?} is not settable"))),
        };
        *slot = parsed;
        *self = serde_json::from_value(v).map_err(|e| Error::invalid(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path, base: TrainConfig) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = base;
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Errors on the first key whose value differs from `expected`.
    pub fn check_matches(&self, expected: &TrainConfig, keys: impl Fn(&str) -> bool) -> Result<()> {
        let mine: BTreeMap<String, Value> = self.to_flat()?.into_iter().collect();
        for (k, want) in expected.to_flat()? {
            if !keys(&k) {
                continue;
            }
            let found = mine.get(&k).cloned().unwrap_or(Value::Null);
            if found != want {
                return Err(Error::ConfigMismatch { field: k, expected: want.to_string(), found: found.to_string() });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::star_nano();
        c.loss.beta = 0.25;
        c.data.dir = "runs/data".into();
        let text = c.to_text().unwrap();
        assert!(text.contains("model.layers=6\n"));
        assert!(text.contains("model.mask_scope=all_layers\n"));
        let mut back = TrainConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_types() {
        let mut c = TrainConfig::default();
        c.apply_text("# header\nmodel.layers = 2  # small\nloss.use_view=false\nmodel.mask_scope=per_layer\ntrain.lr=3e-4\n")
            .unwrap();
        assert_eq!(c.model.layers, 2);
        assert!(!c.loss.use_view);
        assert_eq!(c.model.mask_scope, crate::model::MaskScope::PerLayer);
        assert_eq!(c.train.lr, 3e-4);
        assert!(c.set("model.layers", "2.5").is_err());
        assert!(c.set("model.nope", "1").is_err());
        assert!(c.set("layers", "1").is_err());
        assert!(c.set("model.mask_scope", "sideways").is_err());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::star_nano().validate().unwrap();
        let mut c = TrainConfig::default();
        c.train.views = 1;
        assert!(c.validate().is_err());
        c.make_baseline();
        c.validate().unwrap();
    }
}
