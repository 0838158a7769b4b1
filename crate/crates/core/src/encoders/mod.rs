//! Toy dual encoders: three image architectures and a bag-of-words text
//! encoder sharing a 32-dimensional, L2-normalised embedding space.

mod checkpoint;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pretrain::{pretrain_contrastive, PretrainConfig, PretrainReport};

use crate::data::{ImageTensor, TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{gaussian, glorot, Dims, Layer, Network, Trace};
use crate::tensor::{resize_bilinear, Real, Shape};

/// Embedding width shared by every encoder.
pub const EMBED_DIM: usize = 32;

/// Image encoder architecture tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    ConvSmall,
    ConvWide,
    PatchAttn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ConvSmall, Architecture::ConvWide, Architecture::PatchAttn];

    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::ConvSmall => "conv-small",
            Architecture::ConvWide => "conv-wide",
            Architecture::PatchAttn => "patch-attn",
        }
    }

    /// Native input resolution. The attention encoder reads 48×48 images, so
    /// perturbations crafted on the conv encoders must be resized for it.
    pub fn input_shape(&self) -> Shape {
        match self {
            Architecture::ConvSmall | Architecture::ConvWide => Shape::new(64, 64, 3),
            Architecture::PatchAttn => Shape::new(48, 48, 3),
        }
    }

    /// Freshly initialised network; the tag fully determines the layer stack.
    pub fn build(&self, seed: u64) -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a6e_0000 ^ (*self as u64) << 40);
        let input = self.input_shape();
        let d = EMBED_DIM;
        let layers = match self {
            Architecture::ConvSmall | Architecture::ConvWide => {
                let widths: [usize; 3] = if *self == Architecture::ConvSmall { [8, 16, 16] } else { [16, 32, 32] };
                let mut layers = Vec::new();
                let mut shape = input;
                for &out_c in &widths {
                    let fan_in = 9 * shape.c;
                    layers.push(Layer::Conv3x3 {
                        input: shape,
                        out_c,
                        stride: 2,
                        weight: glorot(&mut rng, fan_in, 9 * out_c, fan_in * out_c),
                        bias: vec![0.0; out_c],
                    });
                    layers.push(Layer::Tanh);
                    shape = Shape::new(shape.h.div_ceil(2), shape.w.div_ceil(2), out_c);
                }
                let flat = shape.len();
                layers.push(Layer::Flatten);
                layers.push(Layer::Dense { in_dim: flat, out_dim: d, weight: glorot(&mut rng, flat, d, flat * d), bias: vec![0.0; d] });
                layers
            }
            Architecture::PatchAttn => {
                let patch = 8;
                let tokens = (input.h / patch) * (input.w / patch);
                let patch_len = patch * patch * input.c;
                let hidden = d;
                let flat = tokens * hidden;
                vec![
                    Layer::Patchify { patch },
                    Layer::Dense { in_dim: patch_len, out_dim: d, weight: glorot(&mut rng, patch_len, d, patch_len * d), bias: vec![0.0; d] },
                    Layer::AddPositional { table: gaussian(&mut rng, 0.1, tokens * d) },
                    Layer::SelfAttention {
                        dim: d,
                        wq: glorot(&mut rng, d, d, d * d),
                        wk: glorot(&mut rng, d, d, d * d),
                        wv: glorot(&mut rng, d, d, d * d),
                        wo: glorot(&mut rng, d, d, d * d),
                    },
                    Layer::Dense { in_dim: d, out_dim: hidden, weight: glorot(&mut rng, d, hidden, d * hidden), bias: vec![0.0; hidden] },
                    Layer::Tanh,
                    Layer::Flatten,
                    Layer::Dense { in_dim: flat, out_dim: d, weight: glorot(&mut rng, flat, d, flat * d), bias: vec![0.0; d] },
                ]
            }
        };
        Network::new(Dims::Map(input), layers, true).expect("architecture layer stack is consistent")
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?} (expected conv-small, conv-wide or patch-attn)")))
    }
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let a: Vec<f64> = self.values.iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = other.values.iter().map(|&v| v as f64).collect();
        crate::tensor::cosine(&a, &b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub arch: Architecture,
    pub seed: u64,
    pub network: Network<f32>,
}

impl ImageEncoder {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        Self { arch, seed, network: arch.build(seed) }
    }

    pub fn input_shape(&self) -> Shape {
        self.arch.input_shape()
    }

    /// Resizes an image to this encoder's input resolution.
    pub fn prepare(&self, image: &ImageTensor) -> ImageTensor {
        let s = self.input_shape();
        resize_bilinear(image, s.h, s.w)
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<Embedding> {
        image.ensure_shape(self.input_shape(), "encode_image")?;
        Ok(Embedding { values: self.network.infer(image.as_slice())?, normalized: true })
    }

    /// Network at another precision (e.g. `f64` for gradient verification).
    pub fn network_as<T: Real>(&self) -> Network<T> {
        self.network.cast()
    }
}

/// Masked mean of token embeddings → tanh → affine → L2 normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<T = f32> {
    pub table: Vec<T>,
    pub vocab_size: usize,
    pub head: Network<T>,
}

/// Forward state of [`TextEncoder::forward`].
pub struct TextTrace<T> {
    ids: Vec<u32>,
    count: usize,
    head: Trace<T>,
}

impl<T: Real> TextTrace<T> {
    pub fn output(&self) -> &[T] {
        self.head.output()
    }
}

impl TextEncoder<f32> {
    pub fn new(vocab: &Vocabulary, seed: u64) -> Self {
        Self::sized(vocab.len(), seed)
    }

    pub fn sized(vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0000_0000);
        let d = EMBED_DIM;
        let table = gaussian(&mut rng, 1.0, vocab_size * d);
        let head = Network::new(
            Dims::Rows { rows: 1, width: d },
            vec![Layer::Tanh, Layer::Dense { in_dim: d, out_dim: d, weight: glorot(&mut rng, d, d, d * d), bias: vec![0.0; d] }],
            true,
        )
        .expect("text head is consistent");
        Self { table, vocab_size, head }
    }
}

impl<T: Real> TextEncoder<T> {
    pub fn cast<U: Real>(&self) -> TextEncoder<U> {
        TextEncoder { table: self.table.iter().map(|&v| U::cast_from(v)).collect(), vocab_size: self.vocab_size, head: self.head.cast() }
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut p = vec![self.table.as_slice()];
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut p = vec![&mut self.table];
        p.extend(self.head.params_mut());
        p
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn forward(&self, tokens: &TokenSeq) -> Result<TextTrace<T>> {
        let d = EMBED_DIM;
        let mut pooled = vec![T::zero(); d];
        let mut ids = Vec::new();
        for (&id, &m) in tokens.ids.iter().zip(&tokens.mask) {
            if !m {
                continue;
            }
            if id as usize >= self.vocab_size {
                return Err(Error::Contract(format!("token id {id} outside vocabulary of {}", self.vocab_size)));
            }
            ids.push(id);
            for (p, &v) in pooled.iter_mut().zip(&self.table[id as usize * d..(id as usize + 1) * d]) {
                *p += v;
            }
        }
        let count = ids.len();
        if count > 0 {
            let inv = T::lit(1.0 / count as f64);
            pooled.iter_mut().for_each(|p| *p = *p * inv);
        }
        Ok(TextTrace { ids, count, head: self.head.forward(&pooled)? })
    }

    /// Accumulates parameter gradients for an output gradient.
    pub fn backward(&self, trace: &TextTrace<T>, grad_out: &[T], grads: &mut [Vec<T>]) {
        let d = EMBED_DIM;
        let (table_grad, head_grads) = grads.split_first_mut().expect("text gradient blocks");
        let g_pooled = self.head.backward(&trace.head, grad_out, Some(head_grads), true);
        if trace.count == 0 {
            return;
        }
        let inv = T::lit(1.0 / trace.count as f64);
        for &id in &trace.ids {
            for (t, &g) in table_grad[id as usize * d..(id as usize + 1) * d].iter_mut().zip(&g_pooled) {
                *t += g * inv;
            }
        }
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Result<Vec<T>> {
        Ok(self.forward(tokens)?.output().to_vec())
    }
}

/// A pretrained (image, text) encoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub image: ImageEncoder,
    pub text: TextEncoder<f32>,
    /// Hash of the pretraining configuration and data.
    pub config_hash: String,
}

impl ModelPair {
    pub fn init(arch: Architecture, vocab: &Vocabulary, seed: u64) -> Self {
        Self { image: ImageEncoder::new(arch, seed), text: TextEncoder::new(vocab, seed), config_hash: "untrained".into() }
    }

    pub fn arch(&self) -> Architecture {
        self.image.arch
    }

    pub fn input_shape(&self) -> Shape {
        self.image.input_shape()
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Result<Embedding> {
        self.image.encode(image)
    }

    pub fn encode_text(&self, tokens: &TokenSeq) -> Result<Embedding> {
        Ok(Embedding { values: self.text.encode(tokens)?, normalized: true })
    }

    /// Short stable identifier of the parameters.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.arch().tag().as_bytes());
        for block in self.image.network.params().into_iter().chain(self.text.params()) {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Value and pixel gradient of `loss(f_x(pixels))`, where `loss` returns its
/// value and its gradient with respect to the embedding.
pub fn loss_gradient_wrt_pixels<T: Real>(
    network: &Network<T>,
    pixels: &[T],
    loss: impl FnOnce(&[T]) -> (T, Vec<T>),
) -> Result<(T, Vec<T>)> {
    let trace = network.forward(pixels)?;
    let (value, g_emb) = loss(trace.output());
    if g_emb.len() != network.output_dim() {
        return Err(Error::Contract(format!("loss gradient has {} entries, embedding has {}", g_emb.len(), network.output_dim())));
    }
    if !value.is_finite() || g_emb.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite loss or embedding gradient".into()));
    }
    if g_emb.iter().all(|&g| g == T::zero()) {
        return Ok((value, vec![T::zero(); pixels.len()]));
    }
    Ok((value, network.backward(&trace, &g_emb, None, true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use rand::{Rng, SeedableRng};

    fn image(shape: Shape, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_vec(shape, (0..shape.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        for arch in Architecture::ALL {
            let enc = ImageEncoder::new(arch, 3);
            let x = image(arch.input_shape(), 1);
            let a = enc.encode(&x).unwrap();
            let b = enc.encode(&x).unwrap();
            assert_eq!(a, b);
            assert!((a.norm() - 1.0).abs() < 1e-5, "{arch}: {}", a.norm());
            assert_eq!(a.values.len(), EMBED_DIM);
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let enc = ImageEncoder::new(Architecture::PatchAttn, 0);
        let x = image(Shape::new(64, 64, 3), 0);
        assert!(matches!(enc.encode(&x), Err(Error::Contract(_))));
        assert!(enc.encode(&enc.prepare(&x)).is_ok());
    }

    #[test]
    fn architectures_differ_in_parameter_count() {
        let counts: Vec<usize> = Architecture::ALL.iter().map(|a| a.build(0).param_count()).collect();
        assert!(counts[0] != counts[1] && counts[1] != counts[2] && counts[0] != counts[2], "{counts:?}");
    }

    #[test]
    fn architecture_tags_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
        }
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn pad_positions_do_not_affect_text_embedding() {
        let ds = generate_dataset(&SyntheticSpec::dataset_a(2, 1)).unwrap();
        let pair = ModelPair::init(Architecture::ConvSmall, &ds.vocab, 4);
        let t = ds.samples[0].captions[0].clone();
        let base = pair.encode_text(&t).unwrap();
        assert!((base.norm() - 1.0).abs() < 1e-5);
        let mut shuffled = t.clone();
        let n = shuffled.len();
        // Garbage ids behind the mask must be ignored.
        for i in n..shuffled.ids.len() {
            shuffled.ids[i] = ((i * 7) % ds.vocab.len()) as u32;
        }
        assert_eq!(pair.encode_text(&shuffled).unwrap(), base);
    }

    #[test]
    fn constant_loss_has_zero_pixel_gradient() {
        let enc = ImageEncoder::new(Architecture::ConvSmall, 1);
        let x = image(enc.input_shape(), 2);
        let (v, g) = loss_gradient_wrt_pixels(&enc.network, x.as_slice(), |e| (3.5, vec![0.0; e.len()])).unwrap();
        assert_eq!(v, 3.5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_gradients_match_finite_differences() {
        let ds = generate_dataset(&SyntheticSpec::dataset_a(1, 1)).unwrap();
        let text = TextEncoder::new(&ds.vocab, 9).cast::<f64>();
        let tokens = &ds.samples[0].captions[1];
        let w: Vec<f64> = (0..EMBED_DIM).map(|i| ((i as f64) * 0.7).sin()).collect();
        let tr = text.forward(tokens).unwrap();
        let mut grads = text.zero_grads();
        text.backward(&tr, &w, &mut grads);
        let id = tokens.ids[1] as usize;
        for j in [0usize, 5, 31] {
            let idx = id * EMBED_DIM + j;
            let eval = |h: f64| {
                let mut t = text.clone();
                t.table[idx] += h;
                t.encode(tokens).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - grads[0][idx]).abs() < 1e-7, "{fd} vs {}", grads[0][idx]);
        }
    }
}
