//! Synthetic class-conditional images, paired augmentations and the toy
//! quantizer that turns images into token grids.

mod formats;
mod synth;
mod tokenizer;

pub use formats::{DatasetSpec, TokenDataset, CODEBOOK_MAGIC, TOKENS_MAGIC};
pub use synth::{augment, hsv_to_rgb, render_scene, rgb_to_hsv, synth_dataset, AugmentedPair, ImageSample};
pub use tokenizer::{
    build_codebook, dequantize, patch_feature, patch_features, quantize, token_invariance, Codebook, TokenSequence,
    FEATURE_DIM, KMEANS_ITERS,
};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.json";
pub const CODEBOOK_FILE: &str = "codebook.starcb";
pub const TOKENS_FILE: &str = "tokens.startok";

/// Patches fed to k-means when building a codebook.
pub const CODEBOOK_CORPUS: usize = 20_000;

/// Images, codebook and unaugmented token sequences for one dataset spec.
pub struct ToyData {
    pub spec: DatasetSpec,
    pub images: Vec<ImageSample>,
    pub codebook: Codebook,
    pub tokens: TokenDataset,
}

impl ToyData {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let images = synth_dataset(spec.classes, spec.per_class, spec.image_side, spec.seed);
        let codebook = build_codebook(&images, spec.vocab, spec.patch, spec.seed, CODEBOOK_CORPUS)?;
        Self::with_codebook(spec, codebook)
    }

    /// Regenerates the images of `spec` and tokenizes them with an existing codebook.
    pub fn with_codebook(spec: &DatasetSpec, codebook: Codebook) -> Result<Self> {
        let images = synth_dataset(spec.classes, spec.per_class, spec.image_side, spec.seed);
        let records = images.iter().map(|im| quantize(im, &codebook, spec.patch)).collect::<Result<Vec<_>>>()?;
        let tokens = TokenDataset { vocab: spec.vocab, seq_len: spec.seq_len(), classes: spec.classes, records };
        Ok(ToyData { spec: spec.clone(), images, codebook, tokens })
    }

    /// Writes `dataset.json`, `codebook.starcb` and `tokens.startok` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.spec.save(&dir.join(DATASET_FILE))?;
        self.codebook.save(&dir.join(CODEBOOK_FILE))?;
        self.tokens.save(&dir.join(TOKENS_FILE))
    }

    /// Reloads a directory written by [`ToyData::save_dir`]. Images are
    /// regenerated from `dataset.json`; the stored tokens must match them.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let spec = DatasetSpec::load(&dir.join(DATASET_FILE))?;
        let codebook = Codebook::load(&dir.join(CODEBOOK_FILE))?;
        let data = Self::with_codebook(&spec, codebook)?;
        let path = dir.join(TOKENS_FILE);
        if TokenDataset::load(&path)? != data.tokens {
            return Err(Error::Format { path, detail: "tokens do not match the regenerated images".into() });
        }
        Ok(data)
    }

    /// `views` augmentations of image `index`, seeded per view.
    pub fn augmented_pair(&self, index: usize, views: usize, seed_of_view: impl Fn(usize) -> u64) -> AugmentedPair {
        let src = &self.images[index];
        AugmentedPair { source_id: src.sample_id, views: (0..views).map(|m| augment(src, seed_of_view(m))).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip() {
        let spec = DatasetSpec { classes: 3, per_class: 4, image_side: 16, patch: 4, vocab: 8, seed: 5 };
        let data = ToyData::generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.save_dir(dir.path()).unwrap();
        let back = ToyData::load_dir(dir.path()).unwrap();
        assert_eq!(back.tokens, data.tokens);
        assert_eq!(back.spec, spec);

        let mut other = data.tokens.clone();
        other.records[0].tokens[0] = (other.records[0].tokens[0] + 1) % 8;
        other.save(&dir.path().join(TOKENS_FILE)).unwrap();
        assert!(matches!(ToyData::load_dir(dir.path()), Err(Error::Format { .. })));
    }
}
