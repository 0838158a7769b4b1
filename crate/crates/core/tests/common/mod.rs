#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uaplab_core::attack::Surrogate;
use uaplab_core::data::{generate_dataset, Dataset, PairKey, SyntheticSpec};
use uaplab_core::encoders::{Architecture, ModelPair};
use uaplab_core::nn::Network;
use uaplab_core::objectives::{evaluate, ActiveTerms, LossBatch, LossConfig, StepDraws};
use uaplab_core::scmix::MixParams;
use uaplab_core::tensor::{Grid, Shape};
use uaplab_core::uap::LocalTransform;
use uaplab_core::AreaRange;

pub fn corpus(n: usize, seed: u64) -> Dataset {
    generate_dataset(&SyntheticSpec::dataset_a(n, seed)).unwrap()
}

pub fn untrained(arch: Architecture, data: &Dataset) -> ModelPair {
    ModelPair::init(arch, &data.vocab, 0)
}

/// Loss batch over the first `m` pool entries, with ScMix inputs.
pub fn batch(pair: &ModelPair, data: &Dataset, m: usize, seed: u64) -> LossBatch<f32> {
    let sur = Surrogate::new(pair, data).unwrap();
    let keys: Vec<PairKey> = sur.pool().iter().step_by(3).take(m).copied().collect();
    sur.batch(&keys, seed, 0, Some(&MixParams::default())).unwrap()
}

pub fn random_delta(shape: Shape, eps: f64, seed: u64) -> Grid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-eps..eps)).collect()).unwrap()
}

pub fn draws(shape: Shape, seed: u64) -> StepDraws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area = AreaRange::new(0.25, 1.0).unwrap();
    StepDraws { l2: LocalTransform::sample(shape, area, &mut rng), l3: LocalTransform::sample(shape, area, &mut rng) }
}

pub struct FdResult {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// Central differences of `total` at random coordinates of δ. Coordinates
/// where the one-sided slopes disagree sit on a clamp kink and are skipped.
pub fn finite_difference_check(
    net: &Network<f64>,
    batch: &LossBatch<f64>,
    delta: &Grid<f64>,
    draws: &StepDraws,
    terms: ActiveTerms,
    want: usize,
    seed: u64,
) -> FdResult {
    let h = 1e-4;
    let cfg = LossConfig::default();
    let f = |d: &Grid<f64>| evaluate(net, batch, d, draws, terms, cfg, false).unwrap().0.total;
    let grad = evaluate(net, batch, delta, draws, terms, cfg, true).unwrap().1.unwrap();
    let f0 = f(delta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    while checked < want {
        let i = rng.random_range(0..delta.as_slice().len());
        let mut plus = delta.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = delta.clone();
        minus.as_mut_slice()[i] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let scale = fwd.abs().max(bwd.abs()).max(1e-9);
        if (fwd - bwd).abs() > 0.05 * scale {
            skipped += 1;
            assert!(skipped < want, "too many kinks");
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let g = grad.as_slice()[i];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-12);
        worst = worst.max(rel);
        checked += 1;
    }
    FdResult { checked, skipped_kinks: skipped, max_rel_err: worst }
}

/// `E[max(B, 1−B)]` for `B ~ Beta(α, α)`, by Simpson quadrature of the density.
pub fn eta_mean_oracle(alpha: f64) -> f64 {
    let n = 20_000;
    let dens = |x: f64| (x * (1.0 - x)).powf(alpha - 1.0);
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    simpson(&|x| x.max(1.0 - x) * dens(x)) / simpson(&dens)
}

/// Independent Monte Carlo of the same quantity: the 4th order statistic of 7
/// uniforms is Beta(4, 4).
pub fn eta_mean_order_statistic(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..draws {
        let mut u: [f64; 7] = std::array::from_fn(|_| rng.random());
        u.sort_by(f64::total_cmp);
        sum += u[3].max(1.0 - u[3]);
    }
    sum / draws as f64
}

pub mod brute {
    //! Deliberately naive retrieval reference.

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum();
        let nb: f64 = b.iter().map(|&y| y as f64 * y as f64).sum();
        dot / (na * nb).sqrt().max(f64::MIN_POSITIVE)
    }

    /// Repeated arg-max selection, lowest id wins ties.
    pub fn top_k(query: &[f32], gallery: &[Vec<f32>], k: usize) -> Vec<usize> {
        let scores: Vec<f64> = gallery.iter().map(|g| cos(query, g)).collect();
        let mut taken = vec![false; gallery.len()];
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..gallery.len() {
                if taken[j] {
                    continue;
                }
                best = match best {
                    Some(b) if scores[b] >= scores[j] => Some(b),
                    _ => Some(j),
                };
            }
            let b = best.unwrap();
            taken[b] = true;
            out.push(b);
        }
        out
    }

    pub fn hit(query: &[f32], gallery: &[Vec<f32>], truth: &[usize], k: usize) -> bool {
        top_k(query, gallery, k).iter().any(|r| truth.contains(r))
    }

    pub fn recall(queries: &[Vec<f32>], gallery: &[Vec<f32>], truth: &[Vec<usize>], k: usize) -> f64 {
        let hits = queries.iter().zip(truth).filter(|(q, t)| hit(q, gallery, t, k)).count();
        hits as f64 / queries.len() as f64
    }

    /// (clean hits, flips, ASR).
    pub fn asr(clean: &[Vec<f32>], adv: &[Vec<f32>], gallery: &[Vec<f32>], truth: &[Vec<usize>], k: usize) -> (usize, usize, Option<f64>) {
        let (mut hits, mut flips) = (0, 0);
        for ((c, a), t) in clean.iter().zip(adv).zip(truth) {
            if hit(c, gallery, t, k) {
                hits += 1;
                if !hit(a, gallery, t, k) {
                    flips += 1;
                }
            }
        }
        (hits, flips, (hits > 0).then(|| flips as f64 / hits as f64))
    }
}

/// Runs `trials` randomized comparisons of the library's retrieval, recall
/// and ASR against [`brute`]. Embeddings are quantized so ties are common.
pub fn retrieval_oracle_trials(trials: usize, seed: u64) -> std::result::Result<(), String> {
    use uaplab_core::eval::{attack_success_rate, hit_ranks, recall_from_ranks, retrieve, Direction, GalleryItem, RetrievalIndex};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.random_range(1..=100usize);
        let nq = rng.random_range(1..=20usize);
        let dim = rng.random_range(1..=6usize);
        let levels = rng.random_range(2..=4i32);
        let vec = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..dim).map(|_| rng.random_range(-levels..=levels) as f32).collect() };
        let gallery: Vec<Vec<f32>> = (0..n).map(|_| vec(&mut rng)).collect();
        let clean: Vec<Vec<f32>> = (0..nq).map(|_| vec(&mut rng)).collect();
        let adv: Vec<Vec<f32>> = (0..nq).map(|_| vec(&mut rng)).collect();
        let truth: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let t = rng.random_range(1..=3usize.min(n));
                let mut v: Vec<usize> = rand::seq::index::sample(&mut rng, n, t).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let index = RetrievalIndex { direction: Direction::TextToImage, gallery: gallery.clone(), items: (0..n as u32).map(GalleryItem::Image).collect() };
        let k = rng.random_range(1..=n.min(10));
        for q in &clean {
            let got = retrieve(q, &index, k).map_err(|e| e.to_string())?;
            let want = brute::top_k(q, &gallery, k);
            if got != want {
                return Err(format!("trial {trial}: retrieve {got:?} != {want:?}"));
            }
        }
        let cr = hit_ranks(&clean, &index, &truth).map_err(|e| e.to_string())?;
        let ar = hit_ranks(&adv, &index, &truth).map_err(|e| e.to_string())?;
        let recall = recall_from_ranks(&cr, k);
        let want = brute::recall(&clean, &gallery, &truth, k);
        if recall != want {
            return Err(format!("trial {trial}: recall@{k} {recall} != {want}"));
        }
        let stat = attack_success_rate(&cr, &ar, k).map_err(|e| e.to_string())?;
        let (hits, flips, asr) = brute::asr(&clean, &adv, &gallery, &truth, k);
        if (stat.clean_hits, stat.flips, stat.asr) != (hits, flips, asr) {
            return Err(format!("trial {trial}: ASR {stat:?} != ({hits}, {flips}, {asr:?})"));
        }
    }
    Ok(())
}
