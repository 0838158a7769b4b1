use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uaplab_core::attack::{run_attack, AttackConfig, Variant};
use uaplab_core::data::{generate_dataset, load_dataset, save_dataset, SyntheticSpec};
use uaplab_core::encoders::{load_checkpoint, save_checkpoint, Architecture, ModelPair};
use uaplab_core::tensor::{cosine, Shape};
use uaplab_core::uap::{init_uap, load_uap, resize_uap, save_uap, Epsilon};
use uaplab_core::Error;

#[test]
fn dataset_checkpoint_and_uap_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&SyntheticSpec::dataset_b(12, 3)).unwrap();
    save_dataset(&ds, dir.path().join("d.uapd")).unwrap();
    let back = load_dataset(dir.path().join("d.uapd")).unwrap();
    assert_eq!(back.samples, ds.samples);
    assert_eq!(back.digest(), ds.digest());

    for arch in [Architecture::ConvSmall, Architecture::ConvWide, Architecture::PatchAttn] {
        let pair = ModelPair::init(arch, &ds.vocab, 5);
        let p = dir.path().join(format!("{arch}.ckpt"));
        save_checkpoint(&pair, &p).unwrap();
        let loaded = load_checkpoint(&p).unwrap();
        assert_eq!(loaded.fingerprint(), pair.fingerprint());
        assert_eq!(loaded.image.network, pair.image.network);
    }

    let pair = ModelPair::init(Architecture::ConvSmall, &ds.vocab, 5);
    let cfg = AttackConfig { batch: 4, ..AttackConfig::with_budget(Variant::Etu, Epsilon::per_255(12), 2, 1) };
    let (uap, _) = run_attack(&ds, &pair, &cfg).unwrap();
    let p = dir.path().join("u.uapf");
    save_uap(&uap, &p).unwrap();
    let loaded = load_uap(&p).unwrap();
    assert_eq!(loaded, uap);
    let q = dir.path().join("v.uapf");
    save_uap(&loaded, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn tampered_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let uap = init_uap(Shape::new(8, 8, 3), Epsilon::per_255(12), &mut ChaCha8Rng::seed_from_u64(0));
    let p = dir.path().join("u.uapf");
    save_uap(&uap, &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&0.5f32.to_le_bytes());
    std::fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_uap(&p), Err(Error::Format(_))));
}

#[test]
fn resize_round_trip_correlates() {
    let uap = init_uap(Shape::new(64, 64, 3), Epsilon::per_255(12), &mut ChaCha8Rng::seed_from_u64(1));
    let up = resize_uap(&uap, Shape::new(96, 96, 3)).unwrap();
    let back = resize_uap(&up, Shape::new(64, 64, 3)).unwrap();
    let a: Vec<f64> = uap.delta.as_slice().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = back.delta.as_slice().iter().map(|&v| v as f64).collect();
    let c = cosine(&a, &b);
    assert!(c > 0.9, "cosine {c}");
    assert!(back.provenance.notes.len() == 2);
}
