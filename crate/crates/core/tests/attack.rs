mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use uaplab_core::attack::{run_attack, variant_terms, AttackConfig, Variant};
use uaplab_core::encoders::Architecture;
use uaplab_core::objectives::{evaluate, ActiveTerms, LossConfig, MixItem};
use uaplab_core::uap::{init_uap, Epsilon};

fn small(variant: Variant, steps: usize, seed: u64) -> AttackConfig {
    AttackConfig { batch: 4, probe: 4, ..AttackConfig::with_budget(variant, Epsilon::per_255(12), steps, seed) }
}

#[test]
fn attack_is_deterministic_in_the_seed() {
    let data = corpus(12, 2);
    let pair = untrained(Architecture::PatchAttn, &data);
    let (u1, t1) = run_attack(&data, &pair, &small(Variant::Etu, 4, 7)).unwrap();
    let (u2, t2) = run_attack(&data, &pair, &small(Variant::Etu, 4, 7)).unwrap();
    assert_eq!(u1, u2);
    assert_eq!(t1.steps, t2.steps);
    let (u3, _) = run_attack(&data, &pair, &small(Variant::Etu, 4, 8)).unwrap();
    assert_ne!(u1.delta, u3.delta);
    assert_eq!(t1.steps.len(), 4);
    assert_eq!(u1.provenance.variant, "ETU");
    assert_eq!(u1.provenance.source_model, pair.fingerprint());
}

#[test]
fn random_noise_returns_the_initialisation() {
    let data = corpus(8, 3);
    let pair = untrained(Architecture::ConvSmall, &data);
    let cfg = small(Variant::RandomNoise, 1, 5);
    let (u, trace) = run_attack(&data, &pair, &cfg).unwrap();
    let init = init_uap(pair.input_shape(), cfg.epsilon, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(u.delta, init.delta);
    assert_eq!(trace.steps.len(), 1);
    assert!(trace.probe_initial.is_none());
}

#[test]
fn every_step_respects_the_budget() {
    let data = corpus(8, 4);
    let pair = untrained(Architecture::ConvSmall, &data);
    let cfg = small(Variant::EtuS, 6, 1);
    let (u, trace) = run_attack(&data, &pair, &cfg).unwrap();
    let eps = cfg.epsilon.as_f32() as f64;
    assert!(trace.steps.iter().all(|s| s.linf <= eps));
    assert!(u.linf() as f64 <= eps);
}

#[test]
fn etu_s_with_identity_mix_reduces_to_mula_terms() {
    // x̃ = x and p = f(x): the three ScMix terms on δ become
    // ℓ(·, f(x)) + ℓ(·, f(x)) + ℓ(·, g(t)), i.e. L1 plus its image term.
    let data = corpus(8, 5);
    let pair = untrained(Architecture::ConvSmall, &data);
    let mut b = batch(&pair, &data, 3, 2);
    for it in &mut b.items {
        it.mix = Some(MixItem { mixed: it.clean.clone(), target: it.image_target.clone() });
    }
    let delta = random_delta(b.shape, 12.0 / 255.0, 4).cast::<f32>();
    let d = draws(b.shape, 1);
    let cfg = LossConfig::default();
    let net = &pair.image.network;
    let (s, gs) = evaluate(net, &b, &delta, &d, variant_terms(Variant::EtuS), cfg, true).unwrap();
    let (m, gm) = evaluate(net, &b, &delta, &d, variant_terms(Variant::MulA), cfg, true).unwrap();
    let (u, gu) = evaluate(net, &b, &delta, &d, ActiveTerms { l1_image: true, ..ActiveTerms::NONE }, cfg, true).unwrap();
    assert_eq!(s.l1, m.l1);
    assert!((s.l3 - (m.l1 + u.l1)).abs() < 1e-7, "{} vs {}", s.l3, m.l1 + u.l1);
    for ((&a, &b), &c) in gs.unwrap().as_slice().iter().zip(gm.unwrap().as_slice()).zip(gu.unwrap().as_slice()) {
        assert!((a - (2.0 * b + c)).abs() <= 1e-6 * (1.0 + a.abs()));
    }
}

#[test]
fn config_errors_are_reported() {
    let data = corpus(4, 6);
    let pair = untrained(Architecture::ConvSmall, &data);
    let mut cfg = small(Variant::Etu, 1, 0);
    cfg.batch = 1000;
    assert!(matches!(run_attack(&data, &pair, &cfg), Err(uaplab_core::Error::Config(_))));
    cfg.batch = 4;
    cfg.mix.beta1 = 0.1;
    assert!(run_attack(&data, &pair, &cfg).is_err());
}
