//! ScMix augmentation: self-mix of two rescaled crops of an image, cross-mix
//! with a batch partner, and the mixed target embedding.
//!
//! ```text
//! x̂ = η·x¹ + (1−η)·x²            η = max(η′, 1−η′),  η′ ~ Beta(α, α)
//! x̃ = β₁·x̂ + β₂·x_j              β₁ > β₂ ∈ [0, 1)
//! p = η·f_x(x¹) + (1−η)·f_x(x²)   (not renormalised)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageTensor, PairKey};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::{AreaRange, CropBox, Grid, Real, Resampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub self_area: AreaRange,
}

impl Default for MixParams {
    fn default() -> Self {
        Self { alpha: 4.0, beta1: 0.8, beta2: 0.2, self_area: AreaRange { lo: 0.4, hi: 1.0 } }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("mix.alpha must be positive, got {}", self.alpha)));
        }
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || self.beta1 <= self.beta2 {
            return Err(Error::Config(format!("need 1 > beta1 > beta2 >= 0, got ({}, {})", self.beta1, self.beta2)));
        }
        AreaRange::new(self.self_area.lo, self.self_area.hi)?;
        Ok(())
    }

    /// Draws η = max(η′, 1−η′) with η′ ~ Beta(α, α).
    pub fn sample_eta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let b = Beta::new(self.alpha, self.alpha).expect("validated alpha");
        fold_eta(b.sample(rng))
    }
}

/// `max(η′, 1−η′)`.
pub fn fold_eta(eta_prime: f64) -> f64 {
    eta_prime.max(1.0 - eta_prime)
}

/// Random crop with area fraction uniform in `area`, bilinearly resized back
/// to the input size.
pub fn crop_resize<R: Rng + ?Sized>(image: &ImageTensor, area: AreaRange, rng: &mut R) -> (ImageTensor, CropBox) {
    let s = image.shape();
    let crop = area.sample(s, rng);
    (Resampler::new(s, crop, s.h, s.w).apply(image), crop)
}

pub fn crop_with(image: &ImageTensor, crop: CropBox) -> ImageTensor {
    let s = image.shape();
    Resampler::new(s, crop, s.h, s.w).apply(image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfMix {
    pub mixed: ImageTensor,
    pub crops: (ImageTensor, ImageTensor),
    pub eta: f64,
}

fn blend(a: &ImageTensor, wa: f64, b: &ImageTensor, wb: f64) -> ImageTensor {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32).collect();
    Grid::from_vec(a.shape(), data).expect("same shape")
}

/// `x̂ = η·x¹ + (1−η)·x²` for given crops and η′.
pub fn self_mix_from(first: ImageTensor, second: ImageTensor, eta_prime: f64) -> SelfMix {
    let eta = fold_eta(eta_prime);
    SelfMix { mixed: blend(&first, eta, &second, 1.0 - eta), crops: (first, second), eta }
}

pub fn self_mix<R: Rng + ?Sized>(image: &ImageTensor, params: &MixParams, rng: &mut R) -> SelfMix {
    let (c1, _) = crop_resize(image, params.self_area, rng);
    let (c2, _) = crop_resize(image, params.self_area, rng);
    let eta = params.sample_eta(rng);
    self_mix_from(c1, c2, eta)
}

/// `x̃ = β₁·x̂ + β₂·x_j`, clipped to `[0, 1]` only when `β₁ + β₂ > 1`.
pub fn cross_mix(mixed: &ImageTensor, partner: &ImageTensor, params: &MixParams) -> Result<ImageTensor> {
    partner.ensure_shape(mixed.shape(), "cross-mix partner")?;
    let out = blend(mixed, params.beta1, partner, params.beta2);
    Ok(if params.beta1 + params.beta2 > 1.0 { out.map(|v| v.clamp(0.0, 1.0)) } else { out })
}

/// ScMix output for one image (the caption is attached by the caller).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub mixed: ImageTensor,
    /// Mixed target embedding; treated as a constant during the attack.
    pub target: Vec<f32>,
    pub eta: f64,
    pub partner: u32,
}

/// Mixed target `η·f(x¹) + (1−η)·f(x²)`.
pub fn mixed_target<T: Real>(first: &[T], second: &[T], eta: f64) -> Vec<T> {
    let (a, b) = (T::lit(eta), T::lit(1.0 - eta));
    first.iter().zip(second).map(|(&u, &v)| a * u + b * v).collect()
}

/// Self-mix, cross-mix with `partner`, and the mixed target from `encoder`.
pub fn scmix<R: Rng + ?Sized>(
    image: &ImageTensor,
    partner: &ImageTensor,
    partner_id: u32,
    encoder: &Network<f32>,
    params: &MixParams,
    rng: &mut R,
) -> Result<MixedSample> {
    let sm = self_mix(image, params, rng);
    let mixed = cross_mix(&sm.mixed, partner, params)?;
    let e1 = encoder.infer(sm.crops.0.as_slice())?;
    let e2 = encoder.infer(sm.crops.1.as_slice())?;
    Ok(MixedSample { mixed, target: mixed_target(&e1, &e2, sm.eta), eta: sm.eta, partner: partner_id })
}

/// Caption-expanded pair pool: one entry per (image, caption). ScMix is
/// drawn afresh per entry and step, so entries of the same image get
/// different augmentations.
pub fn expand_captions(dataset: &Dataset) -> Vec<PairKey> {
    dataset.pair_pool()
}

/// Independent random stream for one (step, item) position.
pub fn item_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(0x1_0000_0000).wrapping_add(index).wrapping_add(1));
    rng
}

/// Partner for batch position `i`: uniform over the other positions, or `i`
/// itself when the batch has a single item.
pub fn pick_partner<R: Rng + ?Sized>(i: usize, batch: usize, rng: &mut R) -> usize {
    if batch <= 1 {
        return i;
    }
    let j = rng.random_range(0..batch - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(16, 16, 3);
        Grid::from_vec(s, (0..s.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let x = img(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, _) = crop_resize(&x, AreaRange::full(), &mut rng);
        assert_eq!(out, x);
    }

    #[test]
    fn symmetric_eta_averages_the_crops() {
        let (a, b) = (img(1), img(2));
        let sm = self_mix_from(a.clone(), b.clone(), 0.5);
        assert_eq!(sm.eta, 0.5);
        for ((&m, &x), &y) in sm.mixed.as_slice().iter().zip(a.as_slice()).zip(b.as_slice()) {
            assert_eq!(m, (0.5 * x as f64 + 0.5 * y as f64) as f32);
        }
    }

    #[test]
    fn identity_crops_reproduce_the_image() {
        let x = img(3);
        let params = MixParams { self_area: AreaRange::full(), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            assert_eq!(self_mix(&x, &params, &mut rng).mixed, x);
        }
    }

    #[test]
    fn cross_mix_cases() {
        let (xh, xj) = (img(5), img(6));
        let p = MixParams::default();
        let same = cross_mix(&xh, &xh, &p).unwrap();
        for (&a, &b) in same.as_slice().iter().zip(xh.as_slice()) {
            assert!((a - b).abs() <= 1e-7);
        }
        let out = cross_mix(&xh, &xj, &p).unwrap();
        for ((&o, &a), &b) in out.as_slice().iter().zip(xh.as_slice()).zip(xj.as_slice()) {
            assert_eq!(o, (0.8 * a as f64 + 0.2 * b as f64) as f32);
        }
        let p0 = MixParams { beta1: 0.7, beta2: 0.0, ..Default::default() };
        let scaled = cross_mix(&xh, &xj, &p0).unwrap();
        for (&o, &a) in scaled.as_slice().iter().zip(xh.as_slice()) {
            assert_eq!(o, (0.7 * a as f64) as f32);
        }
        let wrong = Grid::zeros(Shape::new(8, 8, 3));
        assert!(matches!(cross_mix(&xh, &wrong, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn params_validation() {
        assert!(MixParams::default().validate().is_ok());
        assert!(MixParams { beta1: 0.2, beta2: 0.8, ..Default::default() }.validate().is_err());
        assert!(MixParams { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(MixParams { alpha: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn orthogonal_targets_are_not_renormalised() {
        let p = mixed_target(&[1.0f64, 0.0], &[0.0, 1.0], 0.5);
        let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!((n - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn partner_excludes_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..4 {
            for _ in 0..50 {
                assert_ne!(pick_partner(i, 4, &mut rng), i);
            }
        }
        assert_eq!(pick_partner(0, 1, &mut rng), 0);
    }
}
