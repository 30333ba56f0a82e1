//! Autoregressive decoding with classifier-free guidance, temperature and
//! top-k truncation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{
    final_norm_idx, forward_batch, head_idx, layer_idx, ModelConfig, ModelParams, TraceLevel, CLS_EMBED, TOK_EMBED,
};
use crate::numerics::kernels::{dot, gelu, rope_rotate, rope_tables, RMS_EPS};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, stream_rng, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub cfg_scale: f64,
    pub temperature: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub seed: u64,
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { cfg_scale: 2.0, temperature: 1.0, top_k: None, seed: 0, count: 1 }
    }
}

impl SampleConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.cfg_scale >= 1.0) {
            return Err(Error::invalid(format!("cfg scale {} must be at least 1", self.cfg_scale)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab {
                return Err(Error::invalid(format!("top-k {k} outside 1..={vocab}")));
            }
        }
        Ok(())
    }
}

/// `uncond + s·(cond − uncond)`, evaluated as `s·cond + (1 − s)·uncond` so
/// `s = 1` and `s = 0` return an input exactly.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::shape("cfg_combine", format!("{} vs {}", cond.len(), uncond.len())));
    }
    let r = 1.0 - s;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| (s * f64::from(c) + r * f64::from(u)) as f32).collect())
}

/// Temperature, then top-k, then a categorical draw from the renormalized
/// softmax. Ties at the top-k boundary keep the lower token ids.
pub fn sample_token(logits: &[f32], temperature: f64, top_k: Option<usize>, rng: &mut StreamRng) -> usize {
    let z: Vec<f64> = logits.iter().map(|&x| f64::from(x) / temperature).collect();
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(top_k.unwrap_or(z.len()).min(z.len()));
    if order.len() == 1 {
        return order[0];
    }
    let max = z[order[0]];
    let w: Vec<f64> = order.iter().map(|&i| (z[i] - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (&i, &wi) in order.iter().zip(&w) {
        acc += wi;
        if u < acc {
            return i;
        }
    }
    *order.last().expect("non-empty")
}

/// Incremental decoder holding rotated keys and values of every layer.
pub struct KvDecoder<'a> {
    params: &'a ModelParams<f32>,
    config: &'a ModelConfig,
    cos: Vec<f32>,
    sin: Vec<f32>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
}

fn rms_norm_row(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let inv = 1.0 / (dot(x, x) / x.len() as f32 + RMS_EPS as f32).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// Row vector times a `[rows × cols]` matrix.
fn vec_mat(x: &[f32], m: &Tensor<f32>) -> Vec<f32> {
    let (_, cols) = m.dims2();
    let mut out = vec![0.0f32; cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
    out
}

impl<'a> KvDecoder<'a> {
    pub fn new(params: &'a ModelParams<f32>, config: &'a ModelConfig) -> Self {
        let (cos, sin) = rope_tables(config.seq_len, config.head_dim(), config.rope_base);
        let cap = config.seq_len * config.width;
        KvDecoder {
            params,
            config,
            cos,
            sin,
            keys: (0..config.layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..config.layers).map(|_| Vec::with_capacity(cap)).collect(),
            pos: 0,
        }
    }

    /// Feeds the next input row (the condition first, then tokens) and
    /// returns the logits predicting the token at this position.
    fn push(&mut self, x0: &[f32]) -> Result<Vec<f32>> {
        let c = self.config;
        if self.pos >= c.seq_len {
            return Err(Error::invalid("decoder is already at full length"));
        }
        let (d, heads, dk) = (c.width, c.heads, c.head_dim());
        let half = dk / 2;
        let p = self.pos;
        let (cos, sin) = (&self.cos[p * half..(p + 1) * half], &self.sin[p * half..(p + 1) * half]);
        let scale = 1.0 / (dk as f32).sqrt();
        let mut x = x0.to_vec();
        let t = &self.params.tensors;
        for l in 0..c.layers {
            let li = layer_idx(l);
            let a = rms_norm_row(&x, t[li.attn_norm].data());
            let qkv = vec_mat(&a, &t[li.wqkv]);
            let mut q = qkv[..d].to_vec();
            let mut k = qkv[d..2 * d].to_vec();
            for h in 0..heads {
                rope_rotate(&mut q[h * dk..(h + 1) * dk], cos, sin);
                rope_rotate(&mut k[h * dk..(h + 1) * dk], cos, sin);
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut att = vec![0.0f32; d];
            for h in 0..heads {
                let qh = &q[h * dk..(h + 1) * dk];
                let scores: Vec<f32> =
                    (0..=p).map(|j| dot(qh, &keys[j * d + h * dk..j * d + (h + 1) * dk]) * scale).collect();
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let w: Vec<f32> = scores.iter().map(|&s| (s - max).exp()).collect();
                let inv = 1.0 / w.iter().sum::<f32>();
                for (j, &wj) in w.iter().enumerate() {
                    let v = &values[j * d + h * dk..j * d + (h + 1) * dk];
                    for (o, &vv) in att[h * dk..(h + 1) * dk].iter_mut().zip(v) {
                        *o += wj * inv * vv;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(vec_mat(&att, &t[li.wo])) {
                *xi += o;
            }
            let m = rms_norm_row(&x, t[li.mlp_norm].data());
            let hdn: Vec<f32> = vec_mat(&m, &t[li.w1]).into_iter().map(gelu).collect();
            for (xi, o) in x.iter_mut().zip(vec_mat(&hdn, &t[li.w2])) {
                *xi += o;
            }
        }
        self.pos += 1;
        let f = rms_norm_row(&x, t[final_norm_idx(c.layers)].data());
        let logits = vec_mat(&f, &t[head_idx(c.layers)]);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok(logits)
    }

    pub fn push_condition(&mut self, condition: usize) -> Result<Vec<f32>> {
        if condition > self.config.classes {
            return Err(Error::InvalidCondition { condition, classes: self.config.classes });
        }
        let row = self.params.tensors[CLS_EMBED].row(condition).to_vec();
        self.push(&row)
    }

    pub fn push_token(&mut self, token: usize) -> Result<Vec<f32>> {
        if token >= self.config.vocab {
            return Err(Error::VocabOverflow { token, position: self.pos, vocab: self.config.vocab });
        }
        let row = self.params.tensors[TOK_EMBED].row(token).to_vec();
        self.push(&row)
    }
}

fn check_class(config: &ModelConfig, class_label: usize) -> Result<()> {
    if class_label >= config.classes {
        return Err(Error::InvalidCondition { condition: class_label, classes: config.classes });
    }
    Ok(())
}

/// One sequence with cached keys and values. The unconditional pass is
/// skipped at `s = 1`, where it has no effect.
pub fn generate(params: &ModelParams<f32>, config: &ModelConfig, class_label: usize, sc: &SampleConfig) -> Result<TokenSequence> {
    check_class(config, class_label)?;
    sc.validate(config.vocab)?;
    let mut rng = stream_rng(sc.seed, "sample", 0);
    let guided = sc.cfg_scale != 1.0;
    let mut cond = KvDecoder::new(params, config);
    let mut uncond = KvDecoder::new(params, config);
    let mut lc = cond.push_condition(class_label)?;
    let mut lu = if guided { uncond.push_condition(config.null_class())? } else { Vec::new() };
    let mut tokens = Vec::with_capacity(config.seq_len);
    for t in 0..config.seq_len {
        let z = if guided { cfg_combine(&lc, &lu, sc.cfg_scale)? } else { lc };
        let tok = sample_token(&z, sc.temperature, sc.top_k, &mut rng);
        tokens.push(tok);
        if t + 1 < config.seq_len {
            lc = cond.push_token(tok)?;
            if guided {
                lu = uncond.push_token(tok)?;
            }
        } else {
            lc = Vec::new();
        }
    }
    Ok(TokenSequence::new(tokens, class_label))
}

/// Same contract as [`generate`], recomputing the whole prefix with the
/// batched forward at every step. Reference for the cached decoder.
pub fn generate_full_prefix(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    class_label: usize,
    sc: &SampleConfig,
) -> Result<TokenSequence> {
    check_class(config, class_label)?;
    sc.validate(config.vocab)?;
    let mut rng = stream_rng(sc.seed, "sample", 0);
    let guided = sc.cfg_scale != 1.0;
    let mut tokens = vec![0usize; config.seq_len];
    for t in 0..config.seq_len {
        // positions after t are padding; causality keeps them out of row t
        let mut seqs = vec![TokenSequence::new(tokens.clone(), class_label)];
        if guided {
            seqs.push(TokenSequence::new(tokens.clone(), config.null_class()));
        }
        let traces = forward_batch(params, config, &seqs, &[], TraceLevel::LogitsOnly)?;
        let lc = traces[0].logits.row(t);
        let z = if guided { cfg_combine(lc, traces[1].logits.row(t), sc.cfg_scale)? } else { lc.to_vec() };
        tokens[t] = sample_token(&z, sc.temperature, sc.top_k, &mut rng);
    }
    Ok(TokenSequence::new(tokens, class_label))
}

/// `sc.count` sequences; sample `i` uses seed `derive_seed(sc.seed, "sample", i)`.
pub fn generate_many(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    class_label: usize,
    sc: &SampleConfig,
) -> Result<Vec<TokenSequence>> {
    (0..sc.count)
        .map(|i| {
            let one = SampleConfig { seed: derive_seed(sc.seed, "sample", i as u64), count: 1, ..sc.clone() };
            generate(params, config, class_label, &one)
        })
        .collect()
}
