//! Symmetric InfoNCE alignment of an image encoder with the text encoder.
//!
//! Pairs in a batch whose images share the same (colour, shape, background)
//! triple carry identical caption text, so they are all treated as positives:
//! the target distribution of each row and column is uniform over them.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, ModelPair, EMBED_DIM};
use crate::data::{Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::eval::{clean_recall, Direction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Minimum clean image-to-text R@1 on the training corpus.
    pub recall_floor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 2e-3, temperature: 0.07, seed: 0, recall_floor: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub arch: Architecture,
    pub epoch_losses: Vec<f64>,
    pub recall_at_1: f64,
    pub matched_cosine_before: f64,
    pub matched_cosine_after: f64,
    pub param_count: usize,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self { m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &[Vec<f32>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            for i in 0..p.len() {
                let g = grads[k][i] as f64;
                let m = B1 * self.m[k][i] as f64 + (1.0 - B1) * g;
                let v = B2 * self.v[k][i] as f64 + (1.0 - B2) * g * g;
                self.m[k][i] = m as f32;
                self.v[k][i] = v as f32;
                p[i] -= (lr * (m / c1) / ((v / c2).sqrt() + 1e-8)) as f32;
            }
        }
    }
}

fn add_blocks(acc: &mut [Vec<f32>], other: &[Vec<f32>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn mean_matched_cosine(pair: &ModelPair, ds: &Dataset, images: &[ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    let pool = ds.pair_pool();
    for key in &pool {
        let a = pair.encode_image(&images[key.image as usize])?;
        let b = pair.encode_text(ds.caption(*key))?;
        total += a.cosine(&b);
    }
    Ok(total / pool.len() as f64)
}

pub fn config_hash(arch: Architecture, config: &PretrainConfig, data_digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(arch.tag().as_bytes());
    h.update(serde_json::to_vec(config).expect("config serialises"));
    h.update(data_digest.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Trains a fresh pair for `arch` on `dataset`. Deterministic in `config.seed`:
/// per-sample work runs in parallel but gradients are reduced in batch order.
pub fn pretrain_contrastive(dataset: &Dataset, arch: Architecture, config: &PretrainConfig) -> Result<(ModelPair, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty dataset".into()));
    }
    if config.batch_size < 2 || config.epochs == 0 || config.lr <= 0.0 || config.temperature <= 0.0 {
        return Err(Error::Config(format!("invalid pretraining config {config:?}")));
    }
    let mut pair = ModelPair::init(arch, &dataset.vocab, config.seed);
    pair.config_hash = config_hash(arch, config, &dataset.digest());
    let images: Vec<ImageTensor> = dataset.samples.iter().map(|s| pair.image.prepare(&s.image)).collect();
    let classes: Vec<(&str, &str, &str)> = dataset
        .samples
        .iter()
        .map(|s| (s.attributes.color.as_str(), s.attributes.shape.as_str(), s.attributes.background.as_str()))
        .collect();
    let cos_before = mean_matched_cosine(&pair, dataset, &images)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pool = dataset.pair_pool();
    let img_sizes: Vec<usize> = pair.image.network.params().iter().map(|p| p.len()).collect();
    let txt_sizes: Vec<usize> = pair.text.params().iter().map(|p| p.len()).collect();
    let mut img_opt = Adam::new(&img_sizes);
    let mut txt_opt = Adam::new(&txt_sizes);
    let inv_tau = 1.0 / config.temperature;
    let d = EMBED_DIM;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        pool.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in pool.chunks(config.batch_size) {
            let b = batch.len();
            if b < 2 {
                continue;
            }
            let img_traces = batch
                .par_iter()
                .map(|k| pair.image.network.forward(images[k.image as usize].as_slice()))
                .collect::<Result<Vec<_>>>()?;
            let txt_traces = batch.par_iter().map(|k| pair.text.forward(dataset.caption(*k))).collect::<Result<Vec<_>>>()?;

            let u: Vec<&[f32]> = img_traces.iter().map(|t| t.output()).collect();
            let v: Vec<&[f32]> = txt_traces.iter().map(|t| t.output()).collect();
            let mut logits = vec![0.0f64; b * b];
            for i in 0..b {
                for j in 0..b {
                    let dot: f64 = u[i].iter().zip(v[j]).map(|(&x, &y)| x as f64 * y as f64).sum();
                    logits[i * b + j] = dot * inv_tau;
                }
            }
            let positive = |i: usize, j: usize| classes[batch[i].image as usize] == classes[batch[j].image as usize];
            // dL/dlogits
            let mut g = vec![0.0f64; b * b];
            let mut loss = 0.0;
            for i in 0..b {
                let row = &logits[i * b..(i + 1) * b];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&s| (s - m).exp()).sum();
                let n_pos = (0..b).filter(|&j| positive(i, j)).count() as f64;
                for j in 0..b {
                    let p = (row[j] - m).exp() / z;
                    let t = if positive(i, j) { 1.0 / n_pos } else { 0.0 };
                    g[i * b + j] += (p - t) / (2.0 * b as f64);
                    if t > 0.0 {
                        loss -= t * (p.ln()) / (2.0 * b as f64);
                    }
                }
            }
            for j in 0..b {
                let m = (0..b).map(|i| logits[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..b).map(|i| (logits[i * b + j] - m).exp()).sum();
                let n_pos = (0..b).filter(|&i| positive(i, j)).count() as f64;
                for i in 0..b {
                    let p = (logits[i * b + j] - m).exp() / z;
                    let t = if positive(i, j) { 1.0 / n_pos } else { 0.0 };
                    g[i * b + j] += (p - t) / (2.0 * b as f64);
                    if t > 0.0 {
                        loss -= t * (p.ln()) / (2.0 * b as f64);
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence(format!("{arch}: non-finite loss at epoch {epoch}")));
            }
            epoch_loss += loss;
            batches += 1;

            let grad_u: Vec<Vec<f32>> = (0..b)
                .map(|i| (0..d).map(|c| ((0..b).map(|j| g[i * b + j] * v[j][c] as f64).sum::<f64>() * inv_tau) as f32).collect())
                .collect();
            let grad_v: Vec<Vec<f32>> = (0..b)
                .map(|j| (0..d).map(|c| ((0..b).map(|i| g[i * b + j] * u[i][c] as f64).sum::<f64>() * inv_tau) as f32).collect())
                .collect();

            let img_grads: Vec<Vec<Vec<f32>>> = (0..b)
                .into_par_iter()
                .map(|i| {
                    let mut gr = pair.image.network.zero_grads();
                    pair.image.network.backward(&img_traces[i], &grad_u[i], Some(&mut gr), false);
                    gr
                })
                .collect();
            let txt_grads: Vec<Vec<Vec<f32>>> = (0..b)
                .into_par_iter()
                .map(|j| {
                    let mut gr = pair.text.zero_grads();
                    pair.text.backward(&txt_traces[j], &grad_v[j], &mut gr);
                    gr
                })
                .collect();
            let mut img_total = pair.image.network.zero_grads();
            for gr in &img_grads {
                add_blocks(&mut img_total, gr);
            }
            let mut txt_total = pair.text.zero_grads();
            for gr in &txt_grads {
                add_blocks(&mut txt_total, gr);
            }
            drop(img_traces);
            drop(txt_traces);
            img_opt.step(pair.image.network.params_mut(), &img_total, config.lr);
            txt_opt.step(pair.text.params_mut(), &txt_total, config.lr);
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::debug!("{arch} epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }

    let recall = clean_recall(&pair, dataset, Direction::ImageToText, 1)?;
    let report = PretrainReport {
        arch,
        epoch_losses,
        recall_at_1: recall,
        matched_cosine_before: cos_before,
        matched_cosine_after: mean_matched_cosine(&pair, dataset, &images)?,
        param_count: pair.image.network.param_count(),
    };
    if recall < config.recall_floor {
        return Err(Error::TrainingDivergence(format!(
            "{arch}: image-to-text R@1 {recall:.3} < floor {:.3} after {} epochs (final loss {:.4})",
            config.recall_floor,
            config.epochs,
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok((pair, report))
}
