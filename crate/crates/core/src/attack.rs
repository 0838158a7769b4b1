//! Sign-PGD outer loop: sample a caption-expanded mini-batch, build ScMix
//! inputs, draw the local transforms, ascend the active loss, project.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageTensor, PairKey};
use crate::encoders::ModelPair;
use crate::error::{Error, Result};
use crate::objectives::{evaluate, ActiveTerms, LossBatch, LossBreakdown, LossConfig, LossItem, MixItem, MixPlacement, StepDraws};
use crate::scmix::{item_rng, pick_partner, scmix, MixParams};
use crate::tensor::{AreaRange, Grid, Shape};
use crate::uap::{init_uap, Epsilon, LocalTransform, Provenance, Uap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    UniA,
    MulA,
    #[serde(rename = "ETU_L")]
    EtuL,
    #[serde(rename = "ETU_S")]
    EtuS,
    #[serde(rename = "ETU")]
    Etu,
    RandomNoise,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::UniA, Variant::MulA, Variant::EtuL, Variant::EtuS, Variant::Etu, Variant::RandomNoise];

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::UniA => "UniA",
            Variant::MulA => "MulA",
            Variant::EtuL => "ETU_L",
            Variant::EtuS => "ETU_S",
            Variant::Etu => "ETU",
            Variant::RandomNoise => "RandomNoise",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s) || v.tag().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Loss terms optimised by each variant.
///
/// | variant     | terms                                        |
/// |-------------|----------------------------------------------|
/// | UniA        | L1 image-vs-image                            |
/// | MulA        | L1                                           |
/// | ETU_L       | L1 + L2                                      |
/// | ETU_S       | L1 + ScMix terms on δ (no local transform)   |
/// | ETU         | L1 + L2 + L3                                 |
/// | RandomNoise | none                                         |
pub fn variant_terms(variant: Variant) -> ActiveTerms {
    match variant {
        Variant::UniA => ActiveTerms { l1_image: true, ..ActiveTerms::NONE },
        Variant::MulA => ActiveTerms::L1,
        Variant::EtuL => ActiveTerms { l2: true, ..ActiveTerms::L1 },
        Variant::EtuS => ActiveTerms { l3: Some(MixPlacement::Global), ..ActiveTerms::L1 },
        Variant::Etu => ActiveTerms::ALL,
        Variant::RandomNoise => ActiveTerms::NONE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub variant: Variant,
    pub epsilon: Epsilon,
    pub steps: usize,
    pub step_size: f64,
    pub batch: usize,
    pub mix: MixParams,
    pub local_area: AreaRange,
    pub seed: u64,
    pub loss: LossConfig,
    /// Size of the fixed probe batch used to check ascent (0 disables it).
    pub probe: usize,
}

/// `(ε / T) · 1.25`.
pub fn default_step_size(epsilon: Epsilon, steps: usize) -> f64 {
    epsilon.value() / steps as f64 * 1.25
}

impl AttackConfig {
    /// ε = 12/255, T = 100, m = 16, α = 4, β = (0.8, 0.2), A_s area ∈ [0.25, 1].
    pub fn reference(variant: Variant, seed: u64) -> Self {
        Self::with_budget(variant, Epsilon::per_255(12), 100, seed)
    }

    pub fn with_budget(variant: Variant, epsilon: Epsilon, steps: usize, seed: u64) -> Self {
        Self {
            variant,
            epsilon,
            steps,
            step_size: default_step_size(epsilon, steps.max(1)),
            batch: 16,
            mix: MixParams::default(),
            local_area: AreaRange { lo: 0.25, hi: 1.0 },
            seed,
            loss: LossConfig::default(),
            probe: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.epsilon.value() <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        self.mix.validate()?;
        AreaRange::new(self.local_area.lo, self.local_area.hi)?;
        Ok(())
    }
}

/// `clamp(δ + step·sign(g), −ε, ε)` with `sign(0) = 0`.
pub fn pgd_step(delta: &Grid<f32>, grad: &Grid<f32>, step_size: f32, epsilon: f32) -> Result<Grid<f32>> {
    grad.ensure_shape(delta.shape(), "gradient")?;
    if let Some(i) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at element {i}")));
    }
    let data = delta
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&d, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (d + step_size * s).clamp(-epsilon, epsilon)
        })
        .collect();
    Grid::from_vec(delta.shape(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    /// `∥δ∥∞` after the update.
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub steps: Vec<StepRecord>,
    pub wall_seconds: f64,
    pub provenance: Provenance,
    /// Active loss on the fixed probe batch at the initial and final δ.
    pub probe_initial: Option<LossBreakdown>,
    pub probe_final: Option<LossBreakdown>,
}

impl AttackTrace {
    /// One JSON object per step.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
        fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// Surrogate-side data prepared once per (dataset, model): images at the
/// model's input size and their clean image/text embeddings.
pub struct Surrogate<'a> {
    pub pair: &'a ModelPair,
    pub dataset: &'a Dataset,
    pub shape: Shape,
    images: Vec<ImageTensor>,
    image_emb: Vec<Vec<f32>>,
    text_emb: Vec<Vec<Vec<f32>>>,
    pool: Vec<PairKey>,
}

impl<'a> Surrogate<'a> {
    pub fn new(pair: &'a ModelPair, dataset: &'a Dataset) -> Result<Self> {
        let images: Vec<ImageTensor> = dataset.samples.iter().map(|s| pair.image.prepare(&s.image)).collect();
        let image_emb = images.par_iter().map(|x| pair.image.network.infer(x.as_slice())).collect::<Result<Vec<_>>>()?;
        let text_emb = dataset
            .samples
            .iter()
            .map(|s| s.captions.iter().map(|c| pair.text.encode(c)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let pool = dataset.pair_pool();
        if pool.is_empty() {
            return Err(Error::Data("attack dataset is empty".into()));
        }
        Ok(Self { pair, dataset, shape: pair.input_shape(), images, image_emb, text_emb, pool })
    }

    pub fn pool(&self) -> &[PairKey] {
        &self.pool
    }

    /// Loss batch for `keys`; ScMix draws use stream `(seed, step, position)`.
    pub fn batch(&self, keys: &[PairKey], seed: u64, step: u64, mix: Option<&MixParams>) -> Result<LossBatch<f32>> {
        let m = keys.len();
        let items = keys
            .par_iter()
            .enumerate()
            .map(|(i, key)| {
                let id = key.image as usize;
                let mix = match mix {
                    Some(params) => {
                        let mut rng = item_rng(seed, step, i as u64);
                        let j = keys[pick_partner(i, m, &mut rng)].image;
                        let s = scmix(&self.images[id], &self.images[j as usize], j, &self.pair.image.network, params, &mut rng)?;
                        Some(MixItem { mixed: s.mixed.into_vec(), target: s.target })
                    }
                    None => None,
                };
                Ok(LossItem {
                    clean: self.images[id].as_slice().to_vec(),
                    image_target: self.image_emb[id].clone(),
                    text_target: self.text_emb[id][key.caption as usize].clone(),
                    mix,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LossBatch { shape: self.shape, items })
    }
}

const PROBE_STEP: u64 = u32::MAX as u64;

pub fn run_attack(dataset: &Dataset, pair: &ModelPair, config: &AttackConfig) -> Result<(Uap, AttackTrace)> {
    run_attack_on(&Surrogate::new(pair, dataset)?, config)
}

/// Algorithm: for each of T steps draw m pairs, build ScMix inputs, draw two
/// local transforms, take one sign-PGD step on the active loss.
pub fn run_attack_on(sur: &Surrogate<'_>, config: &AttackConfig) -> Result<(Uap, AttackTrace)> {
    config.validate()?;
    if config.batch > sur.pool.len() {
        return Err(Error::Config(format!("batch {} exceeds the pair pool of {}", config.batch, sur.pool.len())));
    }
    let started = Instant::now();
    let terms = variant_terms(config.variant);
    let mix = terms.needs_mix().then_some(&config.mix);
    let eps = config.epsilon.as_f32();
    let step_size = config.step_size as f32;
    let net = &sur.pair.image.network;
    let shape = sur.shape;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut uap = init_uap(shape, config.epsilon, &mut rng);
    uap.provenance = Provenance {
        source_model: sur.pair.fingerprint(),
        source_arch: sur.pair.arch().tag().to_string(),
        dataset: sur.dataset.digest(),
        variant: config.variant.tag().to_string(),
        seed: config.seed,
        steps: config.steps,
        notes: Vec::new(),
    };

    let probe = if config.probe > 0 && !terms.is_empty() {
        let mut prng = item_rng(config.seed, PROBE_STEP, u32::MAX as u64);
        let n = config.probe.min(sur.pool.len());
        let keys: Vec<PairKey> = rand::seq::index::sample(&mut prng, sur.pool.len(), n).into_iter().map(|i| sur.pool[i]).collect();
        let batch = sur.batch(&keys, config.seed, PROBE_STEP, mix)?;
        let draws = StepDraws {
            l2: LocalTransform::sample(shape, config.local_area, &mut prng),
            l3: LocalTransform::sample(shape, config.local_area, &mut prng),
        };
        Some((batch, draws))
    } else {
        None
    };
    let probe_eval = |delta: &Grid<f32>| -> Result<Option<LossBreakdown>> {
        probe.as_ref().map(|(b, d)| evaluate(net, b, delta, d, terms, config.loss, false).map(|r| r.0)).transpose()
    };
    let probe_initial = probe_eval(&uap.delta)?;

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let keys: Vec<PairKey> =
            rand::seq::index::sample(&mut rng, sur.pool.len(), config.batch).into_iter().map(|i| sur.pool[i]).collect();
        let draws = StepDraws {
            l2: LocalTransform::sample(shape, config.local_area, &mut rng),
            l3: LocalTransform::sample(shape, config.local_area, &mut rng),
        };
        let loss = if terms.is_empty() {
            LossBreakdown::default()
        } else {
            let batch = sur.batch(&keys, config.seed, step as u64, mix)?;
            let (loss, grad) = evaluate(net, &batch, &uap.delta, &draws, terms, config.loss, true)?;
            uap.delta = pgd_step(&uap.delta, &grad.expect("gradient requested"), step_size, eps)?;
            loss
        };
        let linf = uap.delta.linf();
        if linf > eps {
            return Err(Error::Contract(format!("step {step}: ∥δ∥∞ = {linf} exceeds ε = {eps}")));
        }
        log::debug!("step {step}: total {:.6} l1 {:.6} l2 {:.6} l3 {:.6}", loss.total, loss.l1, loss.l2, loss.l3);
        records.push(StepRecord { step, l1: loss.l1, l2: loss.l2, l3: loss.l3, total: loss.total, linf: linf as f64 });
    }
    let probe_final = probe_eval(&uap.delta)?;
    let trace = AttackTrace {
        steps: records,
        wall_seconds: started.elapsed().as_secs_f64(),
        provenance: uap.provenance.clone(),
        probe_initial,
        probe_final,
    };
    Ok((uap, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_step_size() {
        let c = AttackConfig::reference(Variant::Etu, 0);
        assert!((c.step_size - 12.0 / 255.0 / 100.0 * 1.25).abs() < 1e-18);
        assert!((c.step_size - 0.000588235294117647).abs() < 1e-15);
    }

    #[test]
    fn variant_table() {
        let t = variant_terms(Variant::Etu);
        assert!(t.l1_image && t.l1_text && t.l2 && t.l3 == Some(MixPlacement::Local));
        assert_eq!(variant_terms(Variant::UniA), ActiveTerms { l1_image: true, ..ActiveTerms::NONE });
        assert_eq!(variant_terms(Variant::MulA), ActiveTerms::L1);
        assert_eq!(variant_terms(Variant::EtuS).l3, Some(MixPlacement::Global));
        assert!(!variant_terms(Variant::EtuS).l2);
        assert!(variant_terms(Variant::RandomNoise).is_empty());
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("etu-l".parse::<Variant>().is_ok());
        assert!(matches!("PGD".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn pgd_step_cases() {
        let s = Shape::new(2, 2, 1);
        let eps = 0.1f32;
        let d = Grid::from_vec(s, vec![0.0, 0.05, -0.05, 0.1]).unwrap();
        assert_eq!(pgd_step(&d, &Grid::zeros(s), 0.01, eps).unwrap(), d);
        let up = pgd_step(&Grid::zeros(s), &Grid::filled(s, 3.0), eps, eps).unwrap();
        assert!(up.as_slice().iter().all(|&v| v == eps));
        let g = Grid::from_vec(s, vec![1.0, -2.0, 0.0, 5.0]).unwrap();
        assert_eq!(pgd_step(&d, &g, 0.01, eps).unwrap().as_slice(), &[0.01, 0.04, -0.05, 0.1]);
        let bad = Grid::from_vec(s, vec![f32::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(pgd_step(&d, &bad, 0.01, eps), Err(Error::Numeric(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::reference(Variant::Etu, 0);
        assert!(c.validate().is_ok());
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::reference(Variant::Etu, 0);
        c.step_size = 0.0;
        assert!(c.validate().is_err());
    }
}
