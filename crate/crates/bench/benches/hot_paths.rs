use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use uaplab_bench::{corpus, model};
use uaplab_core::attack::{pgd_step, variant_terms, AttackConfig, Surrogate, Variant};
use uaplab_core::encoders::Architecture;
use uaplab_core::objectives::{evaluate, StepDraws};
use uaplab_core::scmix::{item_rng, scmix, MixParams};
use uaplab_core::uap::LocalTransform;

fn encoder_forward(c: &mut Criterion) {
    let data = corpus(4);
    let mut g = c.benchmark_group("encoder_forward");
    for arch in [Architecture::ConvSmall, Architecture::ConvWide, Architecture::PatchAttn] {
        let pair = model(arch, &data);
        let x = pair.image.prepare(&data.samples[0].image);
        g.bench_function(BenchmarkId::from_parameter(arch), |b| b.iter(|| pair.image.network.infer(black_box(x.as_slice())).unwrap()));
    }
    g.finish();
}

fn attack_step(c: &mut Criterion) {
    let data = corpus(16);
    let pair = model(Architecture::ConvSmall, &data);
    let sur = Surrogate::new(&pair, &data).unwrap();
    let mut g = c.benchmark_group("attack_step");
    g.sample_size(10);
    for variant in [Variant::MulA, Variant::Etu] {
        let cfg = AttackConfig { batch: 8, ..AttackConfig::reference(variant, 0) };
        let terms = variant_terms(variant);
        let keys: Vec<_> = sur.pool()[..cfg.batch].to_vec();
        let delta = uaplab_core::Grid::zeros(sur.shape);
        let mut rng = item_rng(0, 0, 0);
        let draws = StepDraws {
            l2: LocalTransform::sample(sur.shape, cfg.local_area, &mut rng),
            l3: LocalTransform::sample(sur.shape, cfg.local_area, &mut rng),
        };
        g.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| {
                let batch = sur.batch(&keys, 0, 0, terms.needs_mix().then_some(&cfg.mix)).unwrap();
                let (_, grad) = evaluate(&pair.image.network, &batch, &delta, &draws, terms, cfg.loss, true).unwrap();
                pgd_step(&delta, &grad.unwrap(), cfg.step_size as f32, cfg.epsilon.as_f32()).unwrap()
            })
        });
    }
    g.finish();
}

fn scmix_single(c: &mut Criterion) {
    let data = corpus(2);
    let pair = model(Architecture::ConvSmall, &data);
    let x = pair.image.prepare(&data.samples[0].image);
    let y = pair.image.prepare(&data.samples[1].image);
    let params = MixParams::default();
    c.bench_function("scmix", |b| {
        let mut rng = item_rng(1, 0, 0);
        b.iter(|| scmix(black_box(&x), &y, 1, &pair.image.network, &params, &mut rng).unwrap())
    });
}

criterion_group!(benches, encoder_forward, attack_step, scmix_single);
criterion_main!(benches);
