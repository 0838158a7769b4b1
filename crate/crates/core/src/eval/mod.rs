//! Image-text retrieval evaluation: cosine ranking, recall@K, attack success
//! rate, and the transfer grid over (target model, dataset, direction, K).
//!
//! Ground truth follows the multi-caption protocol: for image-to-text any of
//! an image's captions is a hit. Captions are rendered from attribute
//! templates, so different images with the same attributes share identical
//! caption text; every gallery entry whose text is identical to a true
//! caption counts as a hit as well (they are indistinguishable by content).

mod report;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, read_csv_cells, transfer_matrix, write_bar_svg, Cell, EvalReport, ModelEntry, DatasetEntry};

use crate::data::{Dataset, PairKey};
use crate::encoders::ModelPair;
use crate::error::{Error, Result};
use crate::uap::{apply, resize_uap, Uap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i2t")]
    ImageToText,
    #[serde(rename = "t2i")]
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn tag(&self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2t" => Ok(Direction::ImageToText),
            "t2i" => Ok(Direction::TextToImage),
            _ => Err(Error::Config(format!("unknown direction {s:?}"))),
        }
    }
}

/// What a gallery row stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GalleryItem {
    Caption(PairKey),
    Image(u32),
}

#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    pub direction: Direction,
    pub gallery: Vec<Vec<f32>>,
    pub items: Vec<GalleryItem>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gallery.is_empty()
    }
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na * nb).sqrt().max(f64::MIN_POSITIVE)
}

/// `a` is ranked above `b`: higher cosine, ties broken by lower id.
#[inline]
fn outranks(score_a: f64, id_a: usize, score_b: f64, id_b: usize) -> bool {
    score_a > score_b || (score_a == score_b && id_a < id_b)
}

/// Top-`k` gallery rows by cosine similarity, ties broken by lower row id.
pub fn retrieve(query: &[f32], index: &RetrievalIndex, k: usize) -> Result<Vec<usize>> {
    if k > index.len() {
        return Err(Error::Contract(format!("K = {k} exceeds gallery size {}", index.len())));
    }
    let scores: Vec<f64> = index.gallery.iter().map(|g| cos(query, g)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// 0-based rank of the best-ranked ground-truth row, i.e. the number of rows
/// ranked strictly above it.
pub fn first_hit_rank(query: &[f32], index: &RetrievalIndex, truth: &[usize]) -> Result<usize> {
    if truth.is_empty() {
        return Err(Error::Data("query has no ground-truth gallery item".into()));
    }
    let scores: Vec<f64> = index.gallery.iter().map(|g| cos(query, g)).collect();
    let best = truth
        .iter()
        .copied()
        .reduce(|a, b| if outranks(scores[b], b, scores[a], a) { b } else { a })
        .expect("non-empty");
    Ok((0..scores.len()).filter(|&j| outranks(scores[j], j, scores[best], best)).count())
}

/// First-hit rank of every query.
pub fn hit_ranks(queries: &[Vec<f32>], index: &RetrievalIndex, truth: &[Vec<usize>]) -> Result<Vec<usize>> {
    if queries.len() != truth.len() {
        return Err(Error::Data(format!("{} queries but {} ground-truth sets", queries.len(), truth.len())));
    }
    queries.par_iter().zip(truth).map(|(q, t)| first_hit_rank(q, index, t)).collect()
}

/// Fraction of queries whose top-`k` contains a ground-truth item.
pub fn recall_at_k(queries: &[Vec<f32>], index: &RetrievalIndex, truth: &[Vec<usize>], k: usize) -> Result<f64> {
    let ranks = hit_ranks(queries, index, truth)?;
    Ok(recall_from_ranks(&ranks, k))
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Flip counts behind an ASR value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsrStat {
    pub queries: usize,
    pub clean_hits: usize,
    /// Clean hits that the perturbation turned into misses.
    pub flips: usize,
    /// Clean misses that became hits.
    pub new_hits: usize,
    /// `flips / clean_hits`; `None` when there were no clean hits.
    pub asr: Option<f64>,
}

/// ASR@K from first-hit ranks of the same queries before and after attack.
pub fn attack_success_rate(clean_ranks: &[usize], adv_ranks: &[usize], k: usize) -> Result<AsrStat> {
    if clean_ranks.len() != adv_ranks.len() {
        return Err(Error::Contract(format!("{} clean ranks vs {} adversarial ranks", clean_ranks.len(), adv_ranks.len())));
    }
    let mut clean_hits = 0;
    let mut flips = 0;
    let mut new_hits = 0;
    for (&c, &a) in clean_ranks.iter().zip(adv_ranks) {
        match (c < k, a < k) {
            (true, false) => {
                clean_hits += 1;
                flips += 1;
            }
            (true, true) => clean_hits += 1,
            (false, true) => new_hits += 1,
            (false, false) => {}
        }
    }
    let asr = (clean_hits > 0).then(|| flips as f64 / clean_hits as f64);
    Ok(AsrStat { queries: clean_ranks.len(), clean_hits, flips, new_hits, asr })
}

/// Ground truth for a dataset: for each query, the gallery rows that match.
pub fn ground_truth(dataset: &Dataset, direction: Direction) -> Vec<Vec<usize>> {
    let pool = dataset.pair_pool();
    let mut by_text: HashMap<&[u32], Vec<usize>> = HashMap::new();
    for (row, key) in pool.iter().enumerate() {
        by_text.entry(dataset.caption(*key).ids.as_slice()).or_default().push(row);
    }
    match direction {
        Direction::ImageToText => dataset
            .samples
            .iter()
            .map(|s| {
                let mut rows: Vec<usize> = s.captions.iter().flat_map(|c| by_text[c.ids.as_slice()].iter().copied()).collect();
                rows.sort_unstable();
                rows.dedup();
                rows
            })
            .collect(),
        Direction::TextToImage => pool
            .iter()
            .map(|key| {
                let mut imgs: Vec<usize> = by_text[dataset.caption(*key).ids.as_slice()].iter().map(|&r| pool[r].image as usize).collect();
                imgs.sort_unstable();
                imgs.dedup();
                imgs
            })
            .collect(),
    }
}

/// Image embeddings at the model's input resolution, optionally perturbed by
/// a UAP resized to that resolution.
pub fn embed_images(pair: &ModelPair, dataset: &Dataset, uap: Option<&Uap>) -> Result<Vec<Vec<f32>>> {
    let delta = match uap {
        Some(u) => Some(resize_uap(u, pair.input_shape())?.delta),
        None => None,
    };
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let x = pair.image.prepare(&s.image);
            let x = match &delta {
                Some(d) => apply(&x, d)?,
                None => x,
            };
            Ok(pair.encode_image(&x)?.values)
        })
        .collect()
}

/// Caption embeddings in pair-pool order.
pub fn embed_captions(pair: &ModelPair, dataset: &Dataset) -> Result<Vec<Vec<f32>>> {
    dataset.pair_pool().par_iter().map(|k| Ok(pair.encode_text(dataset.caption(*k))?.values)).collect()
}

/// Queries, gallery and ground truth for one direction.
#[derive(Debug, Clone)]
pub struct RetrievalTask {
    pub index: RetrievalIndex,
    pub queries: Vec<Vec<f32>>,
    pub truth: Vec<Vec<usize>>,
}

impl RetrievalTask {
    pub fn ranks(&self) -> Result<Vec<usize>> {
        hit_ranks(&self.queries, &self.index, &self.truth)
    }
}

/// Assembles a retrieval task from precomputed embeddings.
pub fn assemble(dataset: &Dataset, direction: Direction, images: Vec<Vec<f32>>, captions: Vec<Vec<f32>>) -> RetrievalTask {
    let truth = ground_truth(dataset, direction);
    match direction {
        Direction::ImageToText => RetrievalTask {
            index: RetrievalIndex { direction, gallery: captions, items: dataset.pair_pool().into_iter().map(GalleryItem::Caption).collect() },
            queries: images,
            truth,
        },
        Direction::TextToImage => RetrievalTask {
            index: RetrievalIndex { direction, gallery: images, items: (0..dataset.len() as u32).map(GalleryItem::Image).collect() },
            queries: captions,
            truth,
        },
    }
}

/// Gallery for `direction`; images are perturbed by `uap` when given.
pub fn build_index(pair: &ModelPair, dataset: &Dataset, direction: Direction, uap: Option<&Uap>) -> Result<RetrievalIndex> {
    Ok(match direction {
        Direction::ImageToText => RetrievalIndex {
            direction,
            gallery: embed_captions(pair, dataset)?,
            items: dataset.pair_pool().into_iter().map(GalleryItem::Caption).collect(),
        },
        Direction::TextToImage => RetrievalIndex {
            direction,
            gallery: embed_images(pair, dataset, uap)?,
            items: (0..dataset.len() as u32).map(GalleryItem::Image).collect(),
        },
    })
}

/// Clean R@K of a model pair on a dataset.
pub fn clean_recall(pair: &ModelPair, dataset: &Dataset, direction: Direction, k: usize) -> Result<f64> {
    let task = assemble(dataset, direction, embed_images(pair, dataset, None)?, embed_captions(pair, dataset)?);
    recall_at_k(&task.queries, &task.index, &task.truth, k)
}
