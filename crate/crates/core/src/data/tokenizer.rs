//! Patch-feature nearest-neighbour quantizer standing in for a learned
//! image tokenizer.

use rand::seq::index::sample;

use super::synth::ImageSample;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Mean RGB plus mean absolute horizontal and vertical luminance gradient.
pub const FEATURE_DIM: usize = 5;

pub const KMEANS_ITERS: usize = 50;

/// Discrete token ids plus the condition id (`classes` is the null id).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub condition: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, condition: usize) -> Self {
        TokenSequence { tokens, condition }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Side of the square token grid, when the length is a perfect square.
    pub fn grid_side(&self) -> Option<usize> {
        let g = (self.tokens.len() as f64).sqrt().round() as usize;
        (g * g == self.tokens.len()).then_some(g)
    }

    pub fn with_condition(&self, condition: usize) -> Self {
        TokenSequence { tokens: self.tokens.clone(), condition }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub entries: Vec<[f32; FEATURE_DIM]>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the Euclidean-nearest entry; ties go to the lowest index.
    pub fn nearest(&self, f: &[f32; FEATURE_DIM]) -> usize {
        let mut best = (f32::INFINITY, 0);
        for (i, e) in self.entries.iter().enumerate() {
            let d = sq_dist(e, f);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

#[inline]
pub fn sq_dist(a: &[f32; FEATURE_DIM], b: &[f32; FEATURE_DIM]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Feature of the patch whose top-left pixel is `(py·patch, px·patch)`.
pub fn patch_feature(image: &ImageSample, py: usize, px: usize, patch: usize) -> [f32; FEATURE_DIM] {
    let (y0, x0) = (py * patch, px * patch);
    let mut f = [0.0f32; FEATURE_DIM];
    for y in y0..y0 + patch {
        for x in x0..x0 + patch {
            let p = image.px(y, x);
            for k in 0..3 {
                f[k] += p[k];
            }
        }
    }
    let n = (patch * patch) as f32;
    for v in f.iter_mut().take(3) {
        *v /= n;
    }
    if patch > 1 {
        let (mut gx, mut gy) = (0.0f32, 0.0f32);
        for y in y0..y0 + patch {
            for x in x0..x0 + patch - 1 {
                gx += (luminance(image.px(y, x + 1)) - luminance(image.px(y, x))).abs();
            }
        }
        for y in y0..y0 + patch - 1 {
            for x in x0..x0 + patch {
                gy += (luminance(image.px(y + 1, x)) - luminance(image.px(y, x))).abs();
            }
        }
        let pairs = (patch * (patch - 1)) as f32;
        f[3] = gx / pairs;
        f[4] = gy / pairs;
    }
    f
}

/// Raster-order features of every patch.
pub fn patch_features(image: &ImageSample, patch: usize) -> Vec<[f32; FEATURE_DIM]> {
    let g = image.side / patch;
    let mut out = Vec::with_capacity(g * g);
    for py in 0..g {
        for px in 0..g {
            out.push(patch_feature(image, py, px, patch));
        }
    }
    out
}

/// Lloyd k-means over the patch features of `images` (at most `max_corpus`
/// patches drawn with the given seed), [`KMEANS_ITERS`] iterations.
pub fn build_codebook(images: &[ImageSample], vocab: usize, patch: usize, seed: u64, max_corpus: usize) -> Result<Codebook> {
    if vocab < 2 {
        return Err(Error::invalid("codebook needs at least 2 entries"));
    }
    let mut corpus: Vec<[f32; FEATURE_DIM]> = images.iter().flat_map(|im| patch_features(im, patch)).collect();
    if corpus.len() > max_corpus {
        let mut rng = stream_rng(seed, "codebook-corpus", 0);
        let mut keep: Vec<usize> = sample(&mut rng, corpus.len(), max_corpus).into_vec();
        keep.sort_unstable();
        corpus = keep.into_iter().map(|i| corpus[i]).collect();
    }
    if corpus.len() < vocab {
        return Err(Error::invalid(format!("{} patches cannot seed {vocab} entries", corpus.len())));
    }
    let mut rng = stream_rng(seed, "codebook-init", 0);
    let mut entries: Vec<[f32; FEATURE_DIM]> = sample(&mut rng, corpus.len(), vocab).into_iter().map(|i| corpus[i]).collect();
    let book = |entries: &Vec<[f32; FEATURE_DIM]>| Codebook { entries: entries.clone() };
    for _ in 0..KMEANS_ITERS {
        let cb = book(&entries);
        let mut sums = vec![[0.0f64; FEATURE_DIM]; vocab];
        let mut counts = vec![0usize; vocab];
        for f in &corpus {
            let k = cb.nearest(f);
            counts[k] += 1;
            for d in 0..FEATURE_DIM {
                sums[k][d] += f64::from(f[d]);
            }
        }
        for k in 0..vocab {
            // empty clusters keep their previous centroid
            if counts[k] > 0 {
                for d in 0..FEATURE_DIM {
                    entries[k][d] = (sums[k][d] / counts[k] as f64) as f32;
                }
            }
        }
    }
    Ok(Codebook { entries })
}

/// Row-major nearest-entry token ids of every patch; the condition is the
/// image's class label.
pub fn quantize(image: &ImageSample, codebook: &Codebook, patch: usize) -> Result<TokenSequence> {
    if patch == 0 || image.side % patch != 0 {
        return Err(Error::invalid(format!("image side {} not divisible by patch {patch}", image.side)));
    }
    if codebook.len() < 2 {
        return Err(Error::invalid("codebook needs at least 2 entries"));
    }
    let tokens = patch_features(image, patch).iter().map(|f| codebook.nearest(f)).collect();
    Ok(TokenSequence::new(tokens, image.class_label))
}

/// Renders each token as a flat patch of its codebook entry's mean colour.
pub fn dequantize(seq: &TokenSequence, codebook: &Codebook, patch: usize) -> Result<ImageSample> {
    let g = seq
        .grid_side()
        .ok_or_else(|| Error::invalid(format!("sequence length {} is not a square grid", seq.len())))?;
    let side = g * patch;
    let mut img = ImageSample::new(side, seq.condition, 0);
    for (i, &tok) in seq.tokens.iter().enumerate() {
        let e = codebook.entries.get(tok).ok_or(Error::VocabOverflow { token: tok, position: i, vocab: codebook.len() })?;
        let (py, px) = (i / g, i % g);
        for y in py * patch..(py + 1) * patch {
            for x in px * patch..(px + 1) * patch {
                let at = (y * side + x) * 3;
                img.pixels[at..at + 3].copy_from_slice(&[e[0], e[1], e[2]]);
            }
        }
    }
    Ok(img)
}

/// Fraction of positions at which the two sequences differ.
pub fn token_invariance(a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("token_invariance", format!("{} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.tokens.iter().zip(&b.tokens).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{augment, synth_dataset};
    use rand::Rng;

    fn constant_image(side: usize, rgb: [f32; 3]) -> ImageSample {
        let mut img = ImageSample::new(side, 0, 0);
        for p in img.pixels.chunks_mut(3) {
            p.copy_from_slice(&rgb);
        }
        img
    }

    #[test]
    fn exact_match_constant_image() {
        let cb = Codebook {
            entries: vec![[0.0, 0.0, 0.0, 0.0, 0.0], [0.25, 0.5, 0.75, 0.0, 0.0], [1.0, 1.0, 1.0, 0.0, 0.0]],
        };
        let seq = quantize(&constant_image(8, [0.25, 0.5, 0.75]), &cb, 4).unwrap();
        assert_eq!(seq.tokens, vec![1; 4]);
    }

    #[test]
    fn grid_arithmetic() {
        let img = constant_image(32, [0.5; 3]);
        let cb = Codebook { entries: vec![[0.0; 5], [1.0; 5]] };
        let seq = quantize(&img, &cb, 4).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.grid_side(), Some(8));
        assert!(quantize(&constant_image(30, [0.5; 3]), &cb, 4).is_err());
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let images = synth_dataset(4, 5, 32, 1);
        let cb = build_codebook(&images, 64, 4, 9, 4000).unwrap();
        let mut rng = stream_rng(0, "test", 0);
        for _ in 0..1000 {
            let f: [f32; FEATURE_DIM] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            // oracle: full scan, first minimum
            let mut best = 0;
            for k in 1..cb.len() {
                if sq_dist(&cb.entries[k], &f) < sq_dist(&cb.entries[best], &f) {
                    best = k;
                }
            }
            assert_eq!(cb.nearest(&f), best);
        }
    }

    #[test]
    fn codebook_is_deterministic() {
        let images = synth_dataset(3, 4, 32, 2);
        let a = build_codebook(&images, 16, 4, 5, 500).unwrap();
        let b = build_codebook(&images, 16, 4, 5, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invariance_counting() {
        let a = TokenSequence::new((0..12).collect(), 0);
        assert_eq!(token_invariance(&a, &a).unwrap(), 0.0);
        let b = TokenSequence::new((100..112).collect(), 0);
        assert_eq!(token_invariance(&a, &b).unwrap(), 1.0);
        let mut c = a.clone();
        for i in [1, 5, 9] {
            c.tokens[i] += 50;
        }
        assert_eq!(token_invariance(&a, &c).unwrap(), 0.25);
        assert!(token_invariance(&a, &TokenSequence::new(vec![0; 3], 0)).is_err());
    }

    /// Empirical check over 100 augmented pairs: augmentation changes tokens
    /// at a substantial fraction of positions.
    #[test]
    fn augmented_views_change_tokens() {
        let images = synth_dataset(10, 10, 32, 4);
        let cb = build_codebook(&images, 64, 4, 4, 20_000).unwrap();
        let rates: Vec<f64> = images
            .iter()
            .map(|im| {
                let a = quantize(&augment(im, 1), &cb, 4).unwrap();
                let b = quantize(&augment(im, 2), &cb, 4).unwrap();
                token_invariance(&a, &b).unwrap()
            })
            .collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let positive = rates.iter().filter(|&&r| r > 0.0).count();
        assert!(positive >= 95, "{positive} of 100 pairs changed");
        assert!(mean > 0.2, "mean change rate {mean}");
    }

    #[test]
    fn dequantize_renders_codebook_colour() {
        let cb = Codebook { entries: vec![[0.1, 0.2, 0.3, 0.0, 0.0], [0.9, 0.8, 0.7, 0.0, 0.0]] };
        let seq = TokenSequence::new(vec![0, 1, 1, 0], 0);
        let img = dequantize(&seq, &cb, 2).unwrap();
        assert_eq!(img.side, 4);
        assert_eq!(img.px(0, 0), [0.1, 0.2, 0.3]);
        assert_eq!(img.px(0, 3), [0.9, 0.8, 0.7]);
        assert_eq!(quantize(&img, &cb, 2).unwrap().tokens, seq.tokens);
    }
}
