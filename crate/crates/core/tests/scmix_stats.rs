mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uaplab_core::scmix::MixParams;

#[test]
fn oracles_agree() {
    let exact = common::eta_mean_oracle(4.0);
    assert!((exact - 0.633).abs() < 0.01, "{exact}");
    let mc = common::eta_mean_order_statistic(200_000, 1);
    assert!((mc - exact).abs() < 2e-3, "{mc} vs {exact}");
}

#[test]
fn folded_beta_statistics() {
    let p = MixParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| p.sample_eta(&mut rng)).collect();
    assert!(draws.iter().all(|e| (0.5..=1.0).contains(e)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let exact = common::eta_mean_oracle(4.0);
    assert!((mean - 0.633).abs() <= 0.01, "{mean}");
    assert!((mean - exact).abs() < 4.0 * (var / n as f64).sqrt(), "{mean} vs {exact}");
}
