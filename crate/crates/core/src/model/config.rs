use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether one sampled key mask is shared by every layer or drawn per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    #[default]
    AllLayers,
    PerLayer,
}

impl MaskScope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all_layers" => Ok(MaskScope::AllLayers),
            "per_layer" => Ok(MaskScope::PerLayer),
            _ => Err(Error::invalid(format!("unknown mask scope {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskScope::AllLayers => "all_layers",
            MaskScope::PerLayer => "per_layer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    /// 1-based layer whose output feeds the contrastive losses.
    pub tap_depth: usize,
    pub mask_ratio: f64,
    pub mask_scope: MaskScope,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::star_nano()
    }
}

impl ModelConfig {
    /// The toy configuration: 6 layers of width 128 over 8×8 token grids.
    pub fn star_nano() -> Self {
        ModelConfig {
            layers: 6,
            width: 128,
            heads: 4,
            vocab: 64,
            seq_len: 64,
            classes: 10,
            tap_depth: 3,
            mask_ratio: 0.25,
            mask_scope: MaskScope::AllLayers,
            rope_base: 10000.0,
        }
    }

    /// Two-layer, width-16 model used by the gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            layers: 2,
            width: 16,
            heads: 2,
            vocab: 16,
            seq_len: 8,
            classes: 4,
            tap_depth: 1,
            mask_ratio: 0.25,
            mask_scope: MaskScope::AllLayers,
            rope_base: 10000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Condition id that stands for "no class".
    pub fn null_class(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.seq_len == 0 {
            return bad("layers, width, heads and seq_len must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary positions", self.head_dim()));
        }
        if self.vocab < 2 || self.classes < 1 {
            return bad("need vocab >= 2 and classes >= 1".into());
        }
        if !(1..=self.layers).contains(&self.tap_depth) {
            return bad(format!("tap_depth {} outside 1..={}", self.tap_depth, self.layers));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        Ok(())
    }

    /// Exact number of scalar parameters, projector included.
    pub fn param_count(&self) -> usize {
        let (v, d, c, l) = (self.vocab, self.width, self.classes, self.layers);
        let embed = v * d + (c + 1) * d;
        let block = 2 * d + 3 * d * d + d * d + 8 * d * d;
        let head = d + d * v;
        let projector = 3 * (d * d + 2 * d) + d * d + d;
        embed + l * block + head + projector
    }

    /// Errors on the first field that differs from `expected`.
    pub fn check_matches(&self, expected: &ModelConfig) -> Result<()> {
        let (a, b) = (serde_json::to_value(self)?, serde_json::to_value(expected)?);
        if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
            for (k, want) in b {
                let found = a.get(k).cloned().unwrap_or(serde_json::Value::Null);
                if &found != want {
                    return Err(Error::ConfigMismatch {
                        field: format!("model.{k}"),
                        expected: want.to_string(),
                        found: found.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}
