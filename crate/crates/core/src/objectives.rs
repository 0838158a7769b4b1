//! Representation-divergence loss and the three attack objectives.
//!
//! ```text
//! ℓ(a, t) = KL(softmax(t) ∥ softmax(a))
//! L1 = Σᵢ ℓ(f(xᵢ+δ), f(xᵢ)) + ℓ(f(xᵢ+δ), g(tᵢ))
//! L2 = Σᵢ ℓ(f(xᵢ+A(δ)), f(xᵢ)) + ℓ(f(xᵢ+A(δ)), g(tᵢ))
//! L3 = Σᵢ ℓ(f(x̃ᵢ+A′(δ)), pᵢ) + ℓ(f(x̃ᵢ+A′(δ)), f(xᵢ)) + ℓ(f(x̃ᵢ+A′(δ)), g(tᵢ))
//! ```
//!
//! Every sum is divided by the batch size. Perturbed inputs are clamped to
//! `[0, 1]`; saturated pixels pass no gradient. All targets are constants.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::{Grid, Real, Shape};
use crate::uap::LocalTransform;

/// Which way round the KL divergence is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KlDirection {
    /// `KL(p_target ∥ q_adv)`.
    #[default]
    TargetToAdv,
    /// `KL(q_adv ∥ p_target)`.
    AdvToTarget,
}

fn log_softmax<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = v.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    v.iter().map(|&x| x - lse).collect()
}

/// `ℓ(adv, target)` and its gradient w.r.t. `adv` (τ = 1).
pub fn repr_divergence_grad<T: Real>(adv: &[T], target: &[T], direction: KlDirection) -> Result<(T, Vec<T>)> {
    if adv.len() != target.len() {
        return Err(Error::Contract(format!("divergence over {} vs {} dims", adv.len(), target.len())));
    }
    if adv.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding in divergence".into()));
    }
    if adv.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let lq = log_softmax(adv);
    let lp = log_softmax(target);
    let q: Vec<T> = lq.iter().map(|v| v.exp()).collect();
    let p: Vec<T> = lp.iter().map(|v| v.exp()).collect();
    let (kl, grad) = match direction {
        KlDirection::TargetToAdv => {
            let kl = p.iter().zip(lp.iter().zip(&lq)).map(|(&pi, (&a, &b))| pi * (a - b)).sum::<T>();
            (kl, q.iter().zip(&p).map(|(&qi, &pi)| qi - pi).collect())
        }
        KlDirection::AdvToTarget => {
            let r: Vec<T> = lq.iter().zip(&lp).map(|(&a, &b)| a - b).collect();
            let kl = q.iter().zip(&r).map(|(&qi, &ri)| qi * ri).sum::<T>();
            (kl, q.iter().zip(&r).map(|(&qi, &ri)| qi * (ri - kl)).collect())
        }
    };
    Ok((kl.max(T::zero()), grad))
}

pub fn repr_divergence<T: Real>(adv: &[T], target: &[T], direction: KlDirection) -> Result<T> {
    repr_divergence_grad(adv, target, direction).map(|(v, _)| v)
}

/// Whether the ScMix objective perturbs with `A′(δ)` or with `δ` itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixPlacement {
    Local,
    Global,
}

/// Active loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub l1_image: bool,
    pub l1_text: bool,
    pub l2: bool,
    pub l3: Option<MixPlacement>,
}

impl ActiveTerms {
    pub const NONE: ActiveTerms = ActiveTerms { l1_image: false, l1_text: false, l2: false, l3: None };
    pub const L1: ActiveTerms = ActiveTerms { l1_image: true, l1_text: true, l2: false, l3: None };
    pub const L2: ActiveTerms = ActiveTerms { l1_image: false, l1_text: false, l2: true, l3: None };
    pub const L3: ActiveTerms = ActiveTerms { l1_image: false, l1_text: false, l2: false, l3: Some(MixPlacement::Local) };
    pub const ALL: ActiveTerms = ActiveTerms { l1_image: true, l1_text: true, l2: true, l3: Some(MixPlacement::Local) };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }

    pub fn needs_mix(&self) -> bool {
        self.l3.is_some()
    }
}

/// ScMix input for one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct MixItem<T> {
    pub mixed: Vec<T>,
    pub target: Vec<T>,
}

/// One caption-expanded batch entry, at the model's input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LossItem<T> {
    pub clean: Vec<T>,
    /// `f(x)`.
    pub image_target: Vec<T>,
    /// `g(t)`.
    pub text_target: Vec<T>,
    pub mix: Option<MixItem<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch<T> {
    pub shape: Shape,
    pub items: Vec<LossItem<T>>,
}

impl<T: Real> LossBatch<T> {
    pub fn cast<U: Real>(&self) -> LossBatch<U> {
        let c = |v: &Vec<T>| v.iter().map(|&x| U::cast_from(x)).collect::<Vec<U>>();
        LossBatch {
            shape: self.shape,
            items: self
                .items
                .iter()
                .map(|it| LossItem {
                    clean: c(&it.clean),
                    image_target: c(&it.image_target),
                    text_target: c(&it.text_target),
                    mix: it.mix.as_ref().map(|m| MixItem { mixed: c(&m.mixed), target: c(&m.target) }),
                })
                .collect(),
        }
    }
}

/// The two independent local-transform draws of one step.
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub l2: LocalTransform,
    pub l3: LocalTransform,
}

impl StepDraws {
    pub fn identity(shape: Shape) -> Self {
        Self { l2: LocalTransform::identity(shape), l3: LocalTransform::identity(shape) }
    }
}

/// Per-term values, already divided by the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermParts {
    pub l1_image: f64,
    pub l1_text: f64,
    pub l2_image: f64,
    pub l2_text: f64,
    pub l3_mix: f64,
    pub l3_image: f64,
    pub l3_text: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub parts: TermParts,
}

impl LossBreakdown {
    fn from_parts(parts: TermParts) -> Self {
        let l1 = parts.l1_image + parts.l1_text;
        let l2 = parts.l2_image + parts.l2_text;
        let l3 = parts.l3_mix + parts.l3_image + parts.l3_text;
        Self { l1, l2, l3, total: l1 + l2 + l3, parts }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub direction: KlDirection,
}

struct ItemOut<T> {
    parts: [T; 7],
    /// Pixel gradients for inputs perturbed by δ, A(δ), A′(δ).
    plain: Option<Vec<T>>,
    local2: Option<Vec<T>>,
    local3: Option<Vec<T>>,
}

/// Forward/backward through one perturbed input against a set of targets.
/// Returns the per-target values and the masked pixel gradient.
fn pass<T: Real>(
    net: &Network<T>,
    base: &[T],
    perturbation: &[T],
    targets: &[&[T]],
    cfg: LossConfig,
    want_grad: bool,
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    let (zero, one) = (T::zero(), T::one());
    let raw: Vec<T> = base.iter().zip(perturbation).map(|(&x, &d)| x + d).collect();
    let input: Vec<T> = raw.iter().map(|&v| v.max(zero).min(one)).collect();
    let trace = net.forward(&input)?;
    let emb = trace.output();
    let mut values = Vec::with_capacity(targets.len());
    let mut g_emb = vec![zero; emb.len()];
    for t in targets {
        let (v, g) = repr_divergence_grad(emb, t, cfg.direction)?;
        values.push(v);
        for (a, b) in g_emb.iter_mut().zip(g) {
            *a += b;
        }
    }
    if !want_grad {
        return Ok((values, None));
    }
    let mut grad = net.backward(&trace, &g_emb, None, true);
    for (g, &v) in grad.iter_mut().zip(&raw) {
        if v < zero || v > one {
            *g = zero;
        }
    }
    Ok((values, Some(grad)))
}

#[allow(clippy::too_many_arguments)]
fn item_terms<T: Real>(
    net: &Network<T>,
    item: &LossItem<T>,
    delta: &[T],
    d2: Option<&[T]>,
    d3: Option<&[T]>,
    terms: ActiveTerms,
    cfg: LossConfig,
    want_grad: bool,
) -> Result<ItemOut<T>> {
    let mut parts = [T::zero(); 7];
    let mut out = ItemOut { parts, plain: None, local2: None, local3: None };
    if terms.l1_image || terms.l1_text {
        let mut targets: Vec<&[T]> = Vec::new();
        if terms.l1_image {
            targets.push(&item.image_target);
        }
        if terms.l1_text {
            targets.push(&item.text_target);
        }
        let (v, g) = pass(net, &item.clean, delta, &targets, cfg, want_grad)?;
        let mut it = v.into_iter();
        if terms.l1_image {
            parts[0] = it.next().expect("value");
        }
        if terms.l1_text {
            parts[1] = it.next().expect("value");
        }
        out.plain = g;
    }
    if let (true, Some(d2)) = (terms.l2, d2) {
        let (v, g) = pass(net, &item.clean, d2, &[&item.image_target, &item.text_target], cfg, want_grad)?;
        parts[2] = v[0];
        parts[3] = v[1];
        out.local2 = g;
    }
    if let Some(placement) = terms.l3 {
        let mix = item.mix.as_ref().ok_or_else(|| Error::Contract("ScMix term active but batch item has no mix".into()))?;
        let pert = match placement {
            MixPlacement::Local => d3.expect("local draw present"),
            MixPlacement::Global => delta,
        };
        let (v, g) = pass(net, &mix.mixed, pert, &[&mix.target, &item.image_target, &item.text_target], cfg, want_grad)?;
        parts[4] = v[0];
        parts[5] = v[1];
        parts[6] = v[2];
        match (placement, g) {
            (MixPlacement::Local, g) => out.local3 = g,
            (MixPlacement::Global, Some(g)) => match &mut out.plain {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => out.plain = Some(g),
            },
            (MixPlacement::Global, None) => {}
        }
    }
    out.parts = parts;
    Ok(out)
}

fn accumulate<T: Real>(acc: &mut Option<Vec<T>>, g: Option<Vec<T>>) {
    if let Some(g) = g {
        match acc {
            Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            None => *acc = Some(g),
        }
    }
}

/// Evaluates the active terms and, if requested, `∂total/∂δ`.
///
/// Items are processed in parallel and reduced in batch order, so results
/// do not depend on the thread count.
pub fn evaluate<T: Real>(
    net: &Network<T>,
    batch: &LossBatch<T>,
    delta: &Grid<T>,
    draws: &StepDraws,
    terms: ActiveTerms,
    cfg: LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Grid<T>>)> {
    let shape = batch.shape;
    delta.ensure_shape(shape, "perturbation")?;
    for it in &batch.items {
        if it.clean.len() != shape.len() || it.mix.as_ref().is_some_and(|m| m.mixed.len() != shape.len()) {
            return Err(Error::Contract(format!("batch item does not match input shape {shape}")));
        }
    }
    let m = batch.items.len();
    if m == 0 || terms.is_empty() {
        return Ok((LossBreakdown::default(), want_grad.then(|| Grid::zeros(shape))));
    }
    let d2 = terms.l2.then(|| draws.l2.apply(delta));
    let d3 = (terms.l3 == Some(MixPlacement::Local)).then(|| draws.l3.apply(delta));
    let outs: Vec<Result<ItemOut<T>>> = batch
        .items
        .par_iter()
        .map(|it| item_terms(net, it, delta.as_slice(), d2.as_ref().map(|g| g.as_slice()), d3.as_ref().map(|g| g.as_slice()), terms, cfg, want_grad))
        .collect();
    let mut sums = [T::zero(); 7];
    let (mut plain, mut local2, mut local3) = (None, None, None);
    for out in outs {
        let out = out?;
        for (s, v) in sums.iter_mut().zip(out.parts) {
            *s += v;
        }
        accumulate(&mut plain, out.plain);
        accumulate(&mut local2, out.local2);
        accumulate(&mut local3, out.local3);
    }
    let inv = T::one() / T::lit(m as f64);
    let f = |i: usize| (sums[i] * inv).as_f64();
    let breakdown = LossBreakdown::from_parts(TermParts {
        l1_image: f(0),
        l1_text: f(1),
        l2_image: f(2),
        l2_text: f(3),
        l3_mix: f(4),
        l3_image: f(5),
        l3_text: f(6),
    });
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    if !want_grad {
        return Ok((breakdown, None));
    }
    let mut grad = plain.unwrap_or_else(|| vec![T::zero(); shape.len()]);
    if let Some(g) = local2 {
        grad.iter_mut().zip(draws.l2.pull_back(&g)).for_each(|(a, b)| *a += b);
    }
    if let Some(g) = local3 {
        grad.iter_mut().zip(draws.l3.pull_back(&g)).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|g| *g = *g * inv);
    Ok((breakdown, Some(Grid::from_vec(shape, grad)?)))
}

pub fn loss_l1<T: Real>(net: &Network<T>, batch: &LossBatch<T>, delta: &Grid<T>, cfg: LossConfig) -> Result<f64> {
    let draws = StepDraws::identity(batch.shape);
    Ok(evaluate(net, batch, delta, &draws, ActiveTerms::L1, cfg, false)?.0.l1)
}

pub fn loss_l2<T: Real>(net: &Network<T>, batch: &LossBatch<T>, delta: &Grid<T>, draws: &StepDraws, cfg: LossConfig) -> Result<f64> {
    Ok(evaluate(net, batch, delta, draws, ActiveTerms::L2, cfg, false)?.0.l2)
}

pub fn loss_l3<T: Real>(net: &Network<T>, batch: &LossBatch<T>, delta: &Grid<T>, draws: &StepDraws, cfg: LossConfig) -> Result<f64> {
    Ok(evaluate(net, batch, delta, draws, ActiveTerms::L3, cfg, false)?.0.l3)
}

pub fn loss_total<T: Real>(
    net: &Network<T>,
    batch: &LossBatch<T>,
    delta: &Grid<T>,
    draws: &StepDraws,
    terms: ActiveTerms,
    cfg: LossConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(net, batch, delta, draws, terms, cfg, false)?.0)
}
