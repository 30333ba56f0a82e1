//! How much tokens and features move between augmented views of one image.

use serde::{Deserialize, Serialize};

use crate::data::{quantize, token_invariance, ToyData, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{forward_batch, ModelConfig, ModelParams, TraceLevel};
use crate::numerics::kernels::cosine_distance;
use crate::rng::{derive_seed, pair_index};

use super::probe::EXTRACT_CHUNK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub pairs: usize,
    pub layer: usize,
    /// Mean fraction of positions whose token differs between the views.
    pub token_change_rate: f64,
    /// Mean cosine similarity of layer features at matched positions;
    /// absent when only the tokenizer is measured.
    pub feature_cosine: Option<f64>,
}

/// Two augmented, quantized views of `count` images spread over the set.
/// Both views keep the image's class as their condition.
pub fn make_view_pairs(data: &ToyData, count: usize, seed: u64) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    let n = data.images.len();
    if n == 0 {
        return Err(Error::invalid("no images to pair"));
    }
    (0..count)
        .map(|k| {
            let idx = (k * n / count.max(1)) % n;
            let pair = data.augmented_pair(idx, 2, |m| derive_seed(seed, "invariance", pair_index(k as u64, m as u64)));
            let a = quantize(&pair.views[0], &data.codebook, data.spec.patch)?;
            let b = quantize(&pair.views[1], &data.codebook, data.spec.patch)?;
            Ok((a, b))
        })
        .collect()
}

/// Token change rate of the tokenizer, plus the feature cosine of `model`
/// at 1-based `layer` when a model is given.
pub fn view_invariance(
    model: Option<(&ModelParams<f32>, &ModelConfig)>,
    pairs: &[(TokenSequence, TokenSequence)],
    layer: usize,
) -> Result<InvarianceRecord> {
    if pairs.is_empty() {
        return Err(Error::invalid("view invariance over no pairs"));
    }
    let mut change = 0.0;
    for (a, b) in pairs {
        change += token_invariance(a, b)?;
    }
    let token_change_rate = change / pairs.len() as f64;
    let feature_cosine = match model {
        None => None,
        Some((params, config)) => {
            if layer == 0 || layer > config.layers {
                return Err(Error::invalid(format!("layer {layer} outside 1..={}", config.layers)));
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for chunk in pairs.chunks(EXTRACT_CHUNK / 2) {
                let seqs: Vec<TokenSequence> = chunk.iter().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
                let traces = forward_batch(params, config, &seqs, &[], TraceLevel::Full)?;
                for two in traces.chunks(2) {
                    let (ha, hb) = (&two[0].hidden[layer - 1], &two[1].hidden[layer - 1]);
                    for t in 0..config.seq_len {
                        sum += 1.0 - f64::from(cosine_distance(ha.row(t), hb.row(t))?);
                        count += 1;
                    }
                }
            }
            Some(sum / count as f64)
        }
    };
    Ok(InvarianceRecord { pairs: pairs.len(), layer, token_change_rate, feature_cosine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    #[test]
    fn identical_views() {
        let c = ModelConfig::micro();
        let p = crate::gradsuite::check_point(&c, 1).unwrap().cast::<f32>();
        let mut rng = stream_rng(0, "t", 0);
        let pairs: Vec<_> = (0..5)
            .map(|_| {
                let s = TokenSequence::new((0..c.seq_len).map(|_| rng.random_range(0..c.vocab)).collect(), 1);
                (s.clone(), s)
            })
            .collect();
        let r = view_invariance(Some((&p, &c)), &pairs, 1).unwrap();
        assert_eq!(r.token_change_rate, 0.0);
        assert_eq!(r.feature_cosine, Some(1.0));
    }

    #[test]
    fn independent_sequences_change_almost_everywhere() {
        let (v, t, n) = (64usize, 64usize, 4000usize);
        let mut rng = stream_rng(1, "t", 0);
        let mut draw = || TokenSequence::new((0..t).map(|_| rng.random_range(0..v)).collect(), 0);
        let pairs: Vec<_> = (0..n).map(|_| (draw(), draw())).collect();
        let r = view_invariance(None, &pairs, 1).unwrap();
        let p = 1.0 - 1.0 / v as f64;
        let sigma = (p * (1.0 - p) / (n * t) as f64).sqrt();
        assert!((r.token_change_rate - p).abs() < 4.0 * sigma, "{}", r.token_change_rate);
        assert_eq!(r.feature_cosine, None);
    }
}
