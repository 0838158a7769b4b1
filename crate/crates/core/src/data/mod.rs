//! Pixel and text data types, the synthetic paired corpus, persistence and
//! mini-batch sampling.

mod io;
mod synth;
mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{generate_dataset, render, SyntheticSpec};
pub use vocab::{TokenSeq, Vocabulary, BACKGROUNDS, COLORS, PAD_ID, SHAPES, TEMPLATES};

use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape};

/// H×W×C pixels in `[0, 1]`.
pub type ImageTensor = Grid<f32>;

/// Ground-truth attributes of a rendered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    pub color: String,
    pub shape: String,
    pub background: String,
    /// (row, column) of the shape centre in pixels.
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub image: ImageTensor,
    pub captions: Vec<TokenSeq>,
    pub image_id: u32,
    pub attributes: Attributes,
}

/// One entry of the caption-expanded pair pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub image: u32,
    pub caption: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub vocab: Vocabulary,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Shape {
        self.spec.image_shape()
    }

    pub fn captions_per_image(&self) -> usize {
        self.spec.captions_per_image
    }

    pub fn image(&self, id: u32) -> &ImageTensor {
        &self.samples[id as usize].image
    }

    pub fn caption(&self, key: PairKey) -> &TokenSeq {
        &self.samples[key.image as usize].captions[key.caption as usize]
    }

    /// All (image, caption) pairs, image-major.
    pub fn pair_pool(&self) -> Vec<PairKey> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.captions.len()).map(move |c| PairKey { image: i as u32, caption: c as u32 }))
            .collect()
    }

    /// Draws `m` distinct pool entries uniformly without replacement.
    pub fn sample_minibatch<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Vec<PairKey>> {
        let pool = self.pair_pool();
        if m > pool.len() {
            return Err(Error::Config(format!("mini-batch of {m} exceeds the pair pool of {}", pool.len())));
        }
        Ok(rand::seq::index::sample(rng, pool.len(), m).into_iter().map(|i| pool[i]).collect())
    }

    /// Splits by image into (first `n - held_out`, last `held_out`) images.
    /// Image ids are renumbered in each half.
    pub fn split(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        if held_out == 0 || held_out >= self.len() {
            return Err(Error::Config(format!("cannot hold out {held_out} of {} images", self.len())));
        }
        let cut = self.len() - held_out;
        let part = |range: std::ops::Range<usize>| {
            let samples: Vec<_> = self.samples[range]
                .iter()
                .enumerate()
                .map(|(i, s)| PairedSample { image_id: i as u32, ..s.clone() })
                .collect();
            let spec = SyntheticSpec { n_images: samples.len(), ..self.spec.clone() };
            Dataset { spec, vocab: self.vocab.clone(), samples }
        };
        Ok((part(0..cut), part(cut..self.len())))
    }

    /// Concatenates datasets that share image shape and vocabulary. Used to
    /// pretrain encoders on several corpora.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Config("nothing to concatenate".into()))?;
        let mut samples = Vec::new();
        for d in parts {
            if d.image_shape() != first.image_shape() || d.vocab != first.vocab {
                return Err(Error::Config("datasets differ in image shape or vocabulary".into()));
            }
            if d.captions_per_image() != first.captions_per_image() {
                return Err(Error::Config("datasets differ in captions per image".into()));
            }
            for s in &d.samples {
                samples.push(PairedSample { image_id: samples.len() as u32, ..s.clone() });
            }
        }
        let spec = SyntheticSpec { n_images: samples.len(), ..first.spec.clone() };
        Ok(Dataset { spec, vocab: first.vocab.clone(), samples })
    }

    /// Hex SHA-256 of the serialised dataset.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        io::write_dataset(self, &mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }

    /// Caption text of a pool entry.
    pub fn caption_text(&self, key: PairKey) -> String {
        self.vocab.detokenize(self.caption(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn corpus(n: usize) -> Dataset {
        generate_dataset(&SyntheticSpec::dataset_a(n, 11)).unwrap()
    }

    #[test]
    fn full_draw_is_a_permutation_of_the_pool() {
        let ds = corpus(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut keys = ds.sample_minibatch(18, &mut rng).unwrap();
        keys.sort();
        assert_eq!(keys, ds.pair_pool());
    }

    #[test]
    fn batch_of_sixteen_has_distinct_keys() {
        let ds = corpus(20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = ds.sample_minibatch(16, &mut rng).unwrap();
        assert_eq!(keys.iter().collect::<HashSet<_>>().len(), 16);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let ds = corpus(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(ds.sample_minibatch(7, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_deterministic_in_the_rng() {
        let ds = corpus(10);
        let a = ds.sample_minibatch(8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = ds.sample_minibatch(8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_images() {
        let ds = corpus(10);
        let (train, eval) = ds.split(3).unwrap();
        assert_eq!((train.len(), eval.len()), (7, 3));
        assert_eq!(eval.samples[0].image, ds.samples[7].image);
        assert_eq!(eval.samples[0].image_id, 0);
        assert!(ds.split(0).is_err());
        assert!(ds.split(10).is_err());
    }
}
