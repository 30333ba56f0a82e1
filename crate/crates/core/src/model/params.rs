use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::stream_rng;

pub const INIT_STD: f64 = 0.02;
pub const PROJECTOR_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Matrix,
    Gain,
    Bias,
}

impl ParamKind {
    /// Weight decay only touches matrices.
    pub fn decays(self) -> bool {
        self == ParamKind::Matrix
    }
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

pub const TOK_EMBED: usize = 0;
pub const CLS_EMBED: usize = 1;
const PER_LAYER: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct LayerIdx {
    pub attn_norm: usize,
    pub wqkv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w1: usize,
    pub w2: usize,
}

pub fn layer_idx(l: usize) -> LayerIdx {
    let b = 2 + PER_LAYER * l;
    LayerIdx { attn_norm: b, wqkv: b + 1, wo: b + 2, mlp_norm: b + 3, w1: b + 4, w2: b + 5 }
}

pub fn final_norm_idx(layers: usize) -> usize {
    2 + PER_LAYER * layers
}

pub fn head_idx(layers: usize) -> usize {
    3 + PER_LAYER * layers
}

#[derive(Debug, Clone, Copy)]
pub struct ProjIdx {
    /// `(weight, bias, norm gain)` per hidden block.
    pub blocks: [(usize, usize, usize); PROJECTOR_BLOCKS],
    pub out_w: usize,
    pub out_b: usize,
}

pub fn proj_idx(layers: usize) -> ProjIdx {
    let p = 4 + PER_LAYER * layers;
    ProjIdx {
        blocks: std::array::from_fn(|i| (p + 3 * i, p + 3 * i + 1, p + 3 * i + 2)),
        out_w: p + 3 * PROJECTOR_BLOCKS,
        out_b: p + 3 * PROJECTOR_BLOCKS + 1,
    }
}

/// Every tensor of the model in storage order.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    let d = c.width;
    let spec = |name: String, shape: Vec<usize>, kind| ParamSpec { name, shape, kind };
    let mut out = vec![
        spec("tok_embed".into(), vec![c.vocab, d], ParamKind::Embedding),
        spec("cls_embed".into(), vec![c.classes + 1, d], ParamKind::Embedding),
    ];
    for l in 0..c.layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        out.push(spec(n("attn_norm"), vec![d], ParamKind::Gain));
        out.push(spec(n("wqkv"), vec![d, 3 * d], ParamKind::Matrix));
        out.push(spec(n("wo"), vec![d, d], ParamKind::Matrix));
        out.push(spec(n("mlp_norm"), vec![d], ParamKind::Gain));
        out.push(spec(n("w1"), vec![d, 4 * d], ParamKind::Matrix));
        out.push(spec(n("w2"), vec![4 * d, d], ParamKind::Matrix));
    }
    out.push(spec("final_norm".into(), vec![d], ParamKind::Gain));
    out.push(spec("head".into(), vec![d, c.vocab], ParamKind::Matrix));
    for i in 0..PROJECTOR_BLOCKS {
        out.push(spec(format!("proj.{i}.w"), vec![d, d], ParamKind::Matrix));
        out.push(spec(format!("proj.{i}.b"), vec![d], ParamKind::Bias));
        out.push(spec(format!("proj.{i}.norm"), vec![d], ParamKind::Gain));
    }
    out.push(spec("proj.out.w".into(), vec![d, d], ParamKind::Matrix));
    out.push(spec("proj.out.b".into(), vec![d], ParamKind::Bias));
    out
}

/// All weights of one model, in [`param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    pub tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Normal(0, 0.02) for embeddings and matrices, ones for gains, zeros
    /// for biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = param_specs(config)
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.shape.iter().product();
                let data = match s.kind {
                    ParamKind::Embedding | ParamKind::Matrix => {
                        let mut rng = stream_rng(seed, "init", i as u64);
                        (0..n).map(|_| F::lit(normal.sample(&mut rng))).collect()
                    }
                    ParamKind::Gain => vec![F::one(); n],
                    ParamKind::Bias => vec![F::zero(); n],
                };
                Tensor::new(s.shape.clone(), data)
            })
            .collect::<Result<_>>()?;
        Ok(ModelParams { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams { tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams { tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Shapes agree with `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let specs = param_specs(config);
        if specs.len() != self.tensors.len() {
            return Err(Error::shape("params", format!("{} tensors, expected {}", self.tensors.len(), specs.len())));
        }
        for (s, t) in specs.iter().zip(&self.tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape("params", format!("{} is {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Hex SHA-256 over the little-endian f64 widening of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_closed_form() {
        for c in [ModelConfig::star_nano(), ModelConfig::micro()] {
            let p = ModelParams::<f32>::init(&c, 0).unwrap();
            assert_eq!(p.count(), c.param_count());
            p.check_shapes(&c).unwrap();
        }
        // 6·(12·128² + 2·128) + 2·64·128 + 11·128 + 128 + 4·128² + 7·128
        assert_eq!(ModelConfig::star_nano().param_count(), 1_265_536);
    }

    #[test]
    fn index_helpers_match_names() {
        let c = ModelConfig::star_nano();
        let specs = param_specs(&c);
        assert_eq!(specs[layer_idx(2).w1].name, "layers.2.w1");
        assert_eq!(specs[head_idx(c.layers)].name, "head");
        assert_eq!(specs[final_norm_idx(c.layers)].name, "final_norm");
        let p = proj_idx(c.layers);
        assert_eq!(specs[p.blocks[1].2].name, "proj.1.norm");
        assert_eq!(specs[p.out_b].name, "proj.out.b");
        assert_eq!(p.out_b + 1, specs.len());
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::micro();
        let a = ModelParams::<f32>::init(&c, 3).unwrap();
        assert_eq!(a, ModelParams::init(&c, 3).unwrap());
        assert_ne!(a.checksum(), ModelParams::<f32>::init(&c, 4).unwrap().checksum());
    }
}
