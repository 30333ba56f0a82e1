use super::config::{MaskScope, ModelConfig};
use super::mask::{causal_mask, KeyMask};
use super::params::{final_norm_idx, head_idx, layer_idx, proj_idx, ModelParams, CLS_EMBED, TOK_EMBED};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, Real, Tape, Tensor, Var};

/// Key masks of one sequence: empty for none, one entry shared by every
/// layer, or one entry per layer.
pub type LayerMasks = Vec<KeyMask>;

/// Handles to the interesting nodes of a batched forward on a tape. Row
/// `s·T + t` of every matrix belongs to sequence `s`, position `t`.
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub nseq: usize,
    /// Residual stream after each block, `[N·T × D]`.
    pub layers: Vec<Var>,
    /// Attention nodes, one per layer; probabilities via `Tape::attention_probs`.
    pub attention: Vec<Var>,
    pub final_norm: Var,
    /// `[N·T × V]`
    pub logits: Var,
}

/// Records every parameter on the tape, as trainable leaves or constants.
pub fn push_params<F: Real>(tape: &mut Tape<F>, params: &ModelParams<F>, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

pub fn validate_sequence(config: &ModelConfig, seq: &TokenSequence) -> Result<()> {
    if seq.len() != config.seq_len {
        return Err(Error::shape("forward", format!("sequence of {} tokens, expected {}", seq.len(), config.seq_len)));
    }
    if seq.condition > config.classes {
        return Err(Error::InvalidCondition { condition: seq.condition, classes: config.classes });
    }
    if let Some((i, &t)) = seq.tokens.iter().enumerate().find(|(_, &t)| t >= config.vocab) {
        return Err(Error::VocabOverflow { token: t, position: i, vocab: config.vocab });
    }
    Ok(())
}

fn mask_tensors<F: Real>(config: &ModelConfig, nseq: usize, masks: &[LayerMasks]) -> Result<Vec<Vec<Tensor<F>>>> {
    let (t, l) = (config.seq_len, config.layers);
    if !masks.is_empty() && masks.len() != nseq {
        return Err(Error::shape("forward", format!("{} mask sets for {nseq} sequences", masks.len())));
    }
    let causal = causal_mask::<F>(t);
    let mut per_layer: Vec<Vec<Tensor<F>>> = vec![Vec::with_capacity(nseq); l];
    for s in 0..nseq {
        let set = masks.get(s).map(Vec::as_slice).unwrap_or(&[]);
        if set.iter().any(|m| m.seq_len != t) {
            return Err(Error::shape("forward", format!("key mask length differs from T={t}")));
        }
        match set.len() {
            0 => per_layer.iter_mut().for_each(|v| v.push(causal.clone())),
            1 => {
                let m = set[0].additive::<F>();
                per_layer.iter_mut().for_each(|v| v.push(m.clone()));
            }
            n if n == l => per_layer.iter_mut().zip(set).for_each(|(v, m)| v.push(m.additive())),
            n => return Err(Error::shape("forward", format!("{n} key masks for {l} layers"))),
        }
    }
    Ok(per_layer)
}

/// Batched decoder forward. Input rows are the condition embedding followed
/// by the embeddings of tokens `0..T−1`, so logits row `t` predicts token `t`.
pub fn forward_tape<F: Real>(
    tape: &mut Tape<F>,
    config: &ModelConfig,
    pv: &[Var],
    seqs: &[TokenSequence],
    masks: &[LayerMasks],
) -> Result<TapeForward> {
    if seqs.is_empty() {
        return Err(Error::invalid("forward on an empty batch"));
    }
    for s in seqs {
        validate_sequence(config, s)?;
    }
    let t = config.seq_len;
    let nseq = seqs.len();
    let per_layer = mask_tensors::<F>(config, nseq, masks)?;

    let mut picks = Vec::with_capacity(nseq * t);
    for s in seqs {
        picks.push((1, s.condition));
        picks.extend(s.tokens[..t - 1].iter().map(|&x| (0, x)));
    }
    let mut x = tape.select_rows(&[pv[TOK_EMBED], pv[CLS_EMBED]], picks)?;
    let layout = AttentionLayout { heads: config.heads, seq_len: t, rope_base: config.rope_base };
    let mut layers = Vec::with_capacity(config.layers);
    let mut attention = Vec::with_capacity(config.layers);
    for (l, masks_l) in per_layer.iter().enumerate() {
        let li = layer_idx(l);
        let a = tape.rms_norm(x, pv[li.attn_norm])?;
        let qkv = tape.matmul(a, pv[li.wqkv])?;
        let refs: Vec<&Tensor<F>> = masks_l.iter().collect();
        let att = tape.attention(qkv, layout, &refs)?;
        attention.push(att);
        let o = tape.matmul(att, pv[li.wo])?;
        x = tape.add(x, o)?;
        let m = tape.rms_norm(x, pv[li.mlp_norm])?;
        let h = tape.matmul(m, pv[li.w1])?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, pv[li.w2])?;
        x = tape.add(x, h)?;
        layers.push(x);
    }
    let final_norm = tape.rms_norm(x, pv[final_norm_idx(config.layers)])?;
    let logits = tape.matmul(final_norm, pv[head_idx(config.layers)])?;
    Ok(TapeForward { nseq, layers, attention, final_norm, logits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorMode {
    Mlp,
    /// Linear layers only; used to check the projector wiring.
    Linear,
}

/// `f(h)`: three (linear, RMS norm, GELU) blocks then a final linear.
pub fn project_tape<F: Real>(
    tape: &mut Tape<F>,
    config: &ModelConfig,
    pv: &[Var],
    h: Var,
    mode: ProjectorMode,
) -> Result<Var> {
    let p = proj_idx(config.layers);
    let mut z = h;
    for &(w, b, g) in &p.blocks {
        z = tape.matmul(z, pv[w])?;
        z = tape.add_bias(z, pv[b])?;
        if mode == ProjectorMode::Mlp {
            z = tape.rms_norm(z, pv[g])?;
            z = tape.gelu(z)?;
        }
    }
    let z = tape.matmul(z, pv[p.out_w])?;
    tape.add_bias(z, pv[p.out_b])
}

/// Projector on plain tensors, `[K × D] → [K × D]`.
pub fn project<F: Real>(params: &ModelParams<F>, config: &ModelConfig, h: &Tensor<F>, mode: ProjectorMode) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let pv = push_params(&mut tape, params, false);
    let hv = tape.constant(h.clone());
    let z = project_tape(&mut tape, config, &pv, hv, mode)?;
    Ok(tape.value(z).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceLevel {
    LogitsOnly,
    Full,
}

/// What one forward pass leaves behind for a single sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Real = f32> {
    pub level: TraceLevel,
    pub seq_len: usize,
    pub heads: usize,
    /// Residual stream after each block, `[T × D]` per layer (full traces only).
    pub hidden: Vec<Tensor<F>>,
    /// Attention probabilities `[heads × T × T]` per layer (full traces only).
    pub attention: Vec<Vec<F>>,
    /// Output of the last block, before the final norm.
    pub final_hidden: Tensor<F>,
    pub logits: Tensor<F>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn attention_weight(&self, layer: usize, head: usize, query: usize, key: usize) -> F {
        let t = self.seq_len;
        self.attention[layer][(head * t + query) * t + key]
    }
}

fn rows<F: Real>(t: &Tensor<F>, from: usize, count: usize) -> Tensor<F> {
    let c = t.dims2().1;
    Tensor::new(vec![count, c], t.data()[from * c..(from + count) * c].to_vec()).expect("row block")
}

/// Forward of several sequences with frozen parameters.
pub fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    seqs: &[TokenSequence],
    masks: &[LayerMasks],
    level: TraceLevel,
) -> Result<Vec<ForwardTrace<F>>> {
    let mut tape = Tape::new();
    let pv = push_params(&mut tape, params, false);
    let out = forward_tape(&mut tape, config, &pv, seqs, masks)?;
    let (t, heads) = (config.seq_len, config.heads);
    let last = *out.layers.last().expect("at least one layer");
    Ok((0..seqs.len())
        .map(|s| {
            let full = level == TraceLevel::Full;
            ForwardTrace {
                level,
                seq_len: t,
                heads,
                hidden: if full { out.layers.iter().map(|&v| rows(tape.value(v), s * t, t)).collect() } else { Vec::new() },
                attention: if full {
                    out.attention
                        .iter()
                        .map(|&a| {
                            let p = tape.attention_probs(a).expect("attention node");
                            p[s * heads * t * t..(s + 1) * heads * t * t].to_vec()
                        })
                        .collect()
                } else {
                    Vec::new()
                },
                final_hidden: rows(tape.value(last), s * t, t),
                logits: rows(tape.value(out.logits), s * t, t),
            }
        })
        .collect())
}

/// Single-sequence forward. `key_mask` applies to every layer.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    seq: &TokenSequence,
    key_mask: Option<&KeyMask>,
    level: TraceLevel,
) -> Result<ForwardTrace<F>> {
    let masks: Vec<LayerMasks> = key_mask.map(|m| vec![vec![m.clone()]]).unwrap_or_default();
    Ok(forward_batch(params, config, std::slice::from_ref(seq), &masks, level)?.remove(0))
}

/// Hidden states of layer `depth` (1-based) at `positions`.
pub fn tap<F: Real>(trace: &ForwardTrace<F>, depth: usize, positions: &[usize]) -> Result<Tensor<F>> {
    if trace.level != TraceLevel::Full {
        return Err(Error::invalid("tap needs a full trace"));
    }
    if depth == 0 || depth > trace.hidden.len() {
        return Err(Error::invalid(format!("tap depth {depth} outside 1..={}", trace.hidden.len())));
    }
    let h = &trace.hidden[depth - 1];
    let (t, d) = h.dims2();
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        if p >= t {
            return Err(Error::invalid(format!("tap position {p} outside 0..{t}")));
        }
        data.extend_from_slice(h.row(p));
    }
    Tensor::new(vec![positions.len(), d], data)
}

/// Samples the key masks of one sequence according to the mask scope.
pub fn sample_layer_masks(config: &ModelConfig, ratio: f64, mut seed_of_layer: impl FnMut(usize) -> u64) -> Result<LayerMasks> {
    if ratio == 0.0 {
        return Ok(Vec::new());
    }
    let n = match config.mask_scope {
        MaskScope::AllLayers => 1,
        MaskScope::PerLayer => config.layers,
    };
    (0..n).map(|l| super::mask::build_key_mask(config.seq_len, ratio, seed_of_layer(l))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mask::build_key_mask;
    use crate::model::params::param_specs;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { layers: 2, width: 16, heads: 2, vocab: 12, seq_len: 9, classes: 3, tap_depth: 1, ..ModelConfig::micro() }
    }

    fn random_seq(c: &ModelConfig, rng: &mut ChaCha8Rng) -> TokenSequence {
        TokenSequence::new((0..c.seq_len).map(|_| rng.random_range(0..c.vocab)).collect(), rng.random_range(0..=c.classes))
    }

    #[test]
    fn logits_are_causal() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..10u64 {
            let p = ModelParams::<f32>::init(&c, trial).unwrap();
            let seq = random_seq(&c, &mut rng);
            let j = rng.random_range(0..c.seq_len);
            let mut other = seq.clone();
            other.tokens[j] = (seq.tokens[j] + 1 + rng.random_range(0..c.vocab - 1)) % c.vocab;
            let a = forward(&p, &c, &seq, None, TraceLevel::LogitsOnly).unwrap();
            let b = forward(&p, &c, &other, None, TraceLevel::LogitsOnly).unwrap();
            for r in 0..c.seq_len {
                let same = a.logits.row(r) == b.logits.row(r);
                // logits row r predicts token r, so token j only reaches rows > j
                assert_eq!(same, r <= j, "trial {trial} j {j} row {r}");
            }
        }
    }

    #[test]
    fn empty_mask_is_bitwise_identity() {
        let c = small();
        let p = ModelParams::<f32>::init(&c, 2).unwrap();
        let seq = random_seq(&c, &mut ChaCha8Rng::seed_from_u64(5));
        let m = build_key_mask(c.seq_len, 0.0, 3).unwrap();
        let a = forward(&p, &c, &seq, None, TraceLevel::Full).unwrap();
        let b = forward(&p, &c, &seq, Some(&m), TraceLevel::Full).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.attention, b.attention);
    }

    #[test]
    fn masked_column_gets_zero_weight() {
        let c = small();
        let p = ModelParams::<f32>::init(&c, 4).unwrap();
        let seq = random_seq(&c, &mut ChaCha8Rng::seed_from_u64(6));
        let m = KeyMask::from_keys(c.seq_len, vec![3, 7]).unwrap();
        let tr = forward(&p, &c, &seq, Some(&m), TraceLevel::Full).unwrap();
        for l in 0..c.layers {
            for h in 0..c.heads {
                for q in 0..c.seq_len {
                    let mut sum = 0.0f64;
                    for k in 0..c.seq_len {
                        let w = tr.attention_weight(l, h, q, k);
                        if k > q || m.is_masked(k) {
                            assert_eq!(w, 0.0);
                        }
                        sum += f64::from(w);
                    }
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn final_norm_rows_have_unit_rms() {
        let c = small();
        let p = ModelParams::<f64>::init(&c, 7).unwrap();
        let seq = random_seq(&c, &mut ChaCha8Rng::seed_from_u64(8));
        let mut tape = Tape::new();
        let pv = push_params(&mut tape, &p, false);
        let out = forward_tape(&mut tape, &c, &pv, &[seq], &[]).unwrap();
        let v = tape.value(out.final_norm);
        for r in 0..c.seq_len {
            let row = v.row(r);
            let rms = (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64).sqrt();
            assert!((rms - 1.0).abs() < 1e-4, "rms {rms}");
        }
    }

    #[test]
    fn batch_matches_single_sequence_forward() {
        let c = small();
        let p = ModelParams::<f32>::init(&c, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let seqs: Vec<_> = (0..3).map(|_| random_seq(&c, &mut rng)).collect();
        let batch = forward_batch(&p, &c, &seqs, &[], TraceLevel::Full).unwrap();
        for (s, tr) in seqs.iter().zip(&batch) {
            let one = forward(&p, &c, s, None, TraceLevel::Full).unwrap();
            assert_eq!(one.logits, tr.logits);
            assert_eq!(one.hidden, tr.hidden);
        }
    }

    #[test]
    fn tap_is_a_gather() {
        let c = small();
        let p = ModelParams::<f32>::init(&c, 11).unwrap();
        let seq = random_seq(&c, &mut ChaCha8Rng::seed_from_u64(12));
        let tr = forward(&p, &c, &seq, None, TraceLevel::Full).unwrap();
        let all: Vec<usize> = (0..c.seq_len).collect();
        assert_eq!(tap(&tr, c.layers, &all).unwrap(), tr.final_hidden);
        let pos = [4, 0, 8, 4];
        let g = tap(&tr, 1, &pos).unwrap();
        for (i, &p) in pos.iter().enumerate() {
            for d in 0..c.width {
                assert_eq!(g.data()[i * c.width + d], tr.hidden[0].data()[p * c.width + d]);
            }
        }
        let perm = [8, 4, 4, 0];
        let gp = tap(&tr, 1, &perm).unwrap();
        assert_eq!(gp.row(0), g.row(2));
        assert_eq!(gp.row(3), g.row(1));
        assert!(tap(&tr, 0, &[0]).is_err());
        assert!(tap(&tr, 1, &[9]).is_err());
    }

    #[test]
    fn vocab_overflow_is_rejected() {
        let c = small();
        let p = ModelParams::<f32>::init(&c, 0).unwrap();
        let mut seq = TokenSequence::new(vec![0; c.seq_len], 0);
        seq.tokens[5] = c.vocab;
        assert!(matches!(
            forward(&p, &c, &seq, None, TraceLevel::LogitsOnly),
            Err(Error::VocabOverflow { position: 5, .. })
        ));
    }

    #[test]
    fn linear_identity_projector_is_identity() {
        let c = small();
        let mut p = ModelParams::<f64>::init(&c, 0).unwrap();
        let specs = param_specs(&c);
        let pi = proj_idx(c.layers);
        let eye = |d: usize| {
            let mut v = vec![0.0; d * d];
            (0..d).for_each(|i| v[i * d + i] = 1.0);
            Tensor::new(vec![d, d], v).unwrap()
        };
        for &(w, _, _) in &pi.blocks {
            p.tensors[w] = eye(c.width);
        }
        p.tensors[pi.out_w] = eye(c.width);
        assert_eq!(specs[pi.out_w].shape, vec![c.width, c.width]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::new(vec![5, c.width], (0..5 * c.width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let z = project(&p, &c, &h, ProjectorMode::Linear).unwrap();
        assert_eq!(z, h);
        let z = project(&p, &c, &h, ProjectorMode::Mlp).unwrap();
        assert_eq!(z.shape(), &[5, c.width]);
    }

    #[test]
    fn projector_passes_gradient_to_input() {
        let c = small();
        let p = ModelParams::<f64>::init(&c, 1).unwrap();
        let mut tape = Tape::new();
        let pv = push_params(&mut tape, &p, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = tape.param(Tensor::new(vec![3, c.width], (0..3 * c.width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let z = project_tape(&mut tape, &c, &pv, h, ProjectorMode::Mlp).unwrap();
        let z2 = tape.mul(z, z).unwrap();
        let m = tape.mean(z2).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.get(h).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
