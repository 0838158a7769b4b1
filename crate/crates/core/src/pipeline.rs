//! The reference experiment: two synthetic corpora, three pretrained
//! architectures, every attack variant over several seeds on the surrogate,
//! the transfer grid for each UAP, and an ε-sweep of ETU.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack_on, AttackConfig, AttackTrace, Surrogate, Variant};
use crate::data::{generate_dataset, save_dataset, Dataset, SyntheticSpec};
use crate::encoders::{pretrain_contrastive, save_checkpoint, Architecture, PretrainConfig, PretrainReport};
use crate::error::{Error, Result};
use crate::eval::{emit_report, transfer_matrix, write_bar_svg, DatasetEntry, EvalReport, ModelEntry};
use crate::uap::{save_uap, Epsilon, Uap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub n_images: usize,
    pub data_seeds: (u64, u64),
    pub pretrain: PretrainConfig,
    pub architectures: Vec<Architecture>,
    pub surrogate: Architecture,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub epsilon: Epsilon,
    pub steps: usize,
    pub batch: usize,
    /// Budgets (numerators over 255) for the ETU sweep on seed `seeds[0]`.
    pub sweep: Vec<u64>,
    pub ks: Vec<usize>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            n_images: 256,
            data_seeds: (1, 2),
            pretrain: PretrainConfig::default(),
            architectures: vec![Architecture::ConvSmall, Architecture::ConvWide, Architecture::PatchAttn],
            surrogate: Architecture::ConvSmall,
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            epsilon: Epsilon::per_255(12),
            steps: 100,
            batch: 16,
            sweep: vec![4, 8, 12, 16],
            ks: vec![1, 5, 10],
        }
    }
}

impl ReferenceConfig {
    /// A seconds-scale configuration for smoke tests.
    pub fn smoke() -> Self {
        Self {
            n_images: 24,
            pretrain: PretrainConfig { epochs: 2, batch_size: 16, recall_floor: 0.0, ..Default::default() },
            variants: vec![Variant::UniA, Variant::Etu, Variant::RandomNoise],
            seeds: vec![0],
            steps: 3,
            batch: 4,
            sweep: vec![4, 12],
            ..Default::default()
        }
    }

    pub fn attack_config(&self, variant: Variant, epsilon: Epsilon, seed: u64) -> AttackConfig {
        AttackConfig { batch: self.batch, ..AttackConfig::with_budget(variant, epsilon, self.steps, seed) }
    }

    fn validate(&self) -> Result<()> {
        if !self.architectures.contains(&self.surrogate) {
            return Err(Error::Config(format!("surrogate {} is not among the architectures", self.surrogate)));
        }
        if self.seeds.is_empty() || !self.ks.contains(&1) {
            return Err(Error::Config("need at least one seed and K = 1 in the K list".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSummary {
    pub variant: Variant,
    pub seed: u64,
    pub epsilon: String,
    pub uap_digest: String,
    pub white_box_asr1: Option<f64>,
    pub black_box_asr1: Option<f64>,
    pub probe_initial: Option<f64>,
    pub probe_final: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ReferenceConfig,
    pub pretrain: Vec<PretrainReport>,
    pub attacks: Vec<AttackSummary>,
    pub sweep: Vec<AttackSummary>,
    pub seconds: f64,
}

impl Summary {
    /// Mean over seeds of a per-attack metric for one variant.
    pub fn mean_over_seeds(&self, variant: Variant, metric: impl Fn(&AttackSummary) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.attacks.iter().filter(|a| a.variant == variant).filter_map(metric).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub struct AttackOutcome {
    pub uap: Uap,
    pub trace: AttackTrace,
    pub report: EvalReport,
    pub summary: AttackSummary,
}

/// White-box: the surrogate evaluated on the attack corpus.
pub fn white_box_asr(report: &EvalReport, attack_dataset: &str, k: usize) -> Option<f64> {
    report.mean_asr(|c| c.white_box && c.dataset == attack_dataset && c.k == k)
}

/// Black-box: every other architecture, both corpora and directions.
pub fn black_box_asr(report: &EvalReport, k: usize) -> Option<f64> {
    report.mean_asr(|c| !c.white_box && c.k == k)
}

/// Corpora A (attack/evaluation) and B (cross-dataset evaluation).
pub fn build_corpora(cfg: &ReferenceConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_dataset(&SyntheticSpec::dataset_a(cfg.n_images, cfg.data_seeds.0))?,
        generate_dataset(&SyntheticSpec::dataset_b(cfg.n_images, cfg.data_seeds.1))?,
    ))
}

/// Pretrains every architecture on A ∪ B.
pub fn pretrain_all(cfg: &ReferenceConfig, a: &Dataset, b: &Dataset) -> Result<(Vec<ModelEntry>, Vec<PretrainReport>)> {
    let joint = Dataset::concat(&[a, b])?;
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for &arch in &cfg.architectures {
        let t = Instant::now();
        let (pair, report) = pretrain_contrastive(&joint, arch, &cfg.pretrain)?;
        log::info!("pretrained {arch} in {:.1}s, R@1 {:.3}", t.elapsed().as_secs_f64(), report.recall_at_1);
        models.push(ModelEntry { name: arch.tag().to_string(), pair });
        reports.push(report);
    }
    Ok((models, reports))
}

pub fn attack_and_evaluate(
    sur: &Surrogate<'_>,
    config: &AttackConfig,
    models: &[ModelEntry],
    datasets: &[DatasetEntry],
    ks: &[usize],
) -> Result<AttackOutcome> {
    let t = Instant::now();
    let (uap, trace) = run_attack_on(sur, config)?;
    let report = transfer_matrix(&uap, models, datasets, ks)?;
    let summary = AttackSummary {
        variant: config.variant,
        seed: config.seed,
        epsilon: config.epsilon.to_string(),
        uap_digest: uap.digest(),
        white_box_asr1: white_box_asr(&report, &datasets[0].name, 1),
        black_box_asr1: black_box_asr(&report, 1),
        probe_initial: trace.probe_initial.map(|p| p.total),
        probe_final: trace.probe_final.map(|p| p.total),
        seconds: t.elapsed().as_secs_f64(),
    };
    log::info!(
        "{} seed {} ε {}: white-box {:?}, black-box {:?} ({:.1}s)",
        config.variant,
        config.seed,
        config.epsilon,
        summary.white_box_asr1,
        summary.black_box_asr1,
        summary.seconds
    );
    Ok(AttackOutcome { uap, trace, report, summary })
}

fn persist(out: &Path, name: &str, o: &AttackOutcome) -> Result<()> {
    let uaps = out.join("uaps");
    fs::create_dir_all(&uaps)?;
    save_uap(&o.uap, uaps.join(format!("{name}.uapf")))?;
    o.trace.write_jsonl(uaps.join(format!("{name}.trace.jsonl")))?;
    emit_report(&o.report, out.join("reports").join(name))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

/// Runs the whole experiment. With `out` set, writes corpora, checkpoints,
/// UAPs, traces, per-attack reports, `summary.{json,csv}` and SVG plots.
pub fn run_reference(cfg: &ReferenceConfig, out: Option<&Path>) -> Result<Summary> {
    cfg.validate()?;
    let started = Instant::now();
    let (a, b) = build_corpora(cfg)?;
    let (models, pretrain) = pretrain_all(cfg, &a, &b)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir.join("data"))?;
        fs::create_dir_all(dir.join("models"))?;
        save_dataset(&a, dir.join("data/A.uapd"))?;
        save_dataset(&b, dir.join("data/B.uapd"))?;
        for m in &models {
            save_checkpoint(&m.pair, dir.join(format!("models/{}.ckpt", m.name)))?;
        }
    }
    let surrogate = &models.iter().find(|m| m.pair.arch() == cfg.surrogate).expect("validated").pair;
    let datasets = vec![DatasetEntry { name: "A".into(), dataset: a.clone() }, DatasetEntry { name: "B".into(), dataset: b }];
    let sur = Surrogate::new(surrogate, &a)?;

    let mut attacks = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let o = attack_and_evaluate(&sur, &cfg.attack_config(variant, cfg.epsilon, seed), &models, &datasets, &cfg.ks)?;
            if let Some(dir) = out {
                persist(dir, &format!("{variant}-s{seed}"), &o)?;
            }
            attacks.push(o.summary);
        }
    }
    let mut sweep = Vec::new();
    for &n in &cfg.sweep {
        let eps = Epsilon::per_255(n);
        let seed = cfg.seeds[0];
        let reused = attacks.iter().find(|s| s.variant == Variant::Etu && s.seed == seed && s.epsilon == eps.to_string());
        let summary = match reused {
            Some(s) => s.clone(),
            None => {
                let o = attack_and_evaluate(&sur, &cfg.attack_config(Variant::Etu, eps, seed), &models, &datasets, &cfg.ks)?;
                if let Some(dir) = out {
                    persist(dir, &format!("sweep-eps{n}"), &o)?;
                }
                o.summary
            }
        };
        sweep.push(summary);
    }
    let summary = Summary { config: cfg.clone(), pretrain, attacks, sweep, seconds: started.elapsed().as_secs_f64() };
    if let Some(dir) = out {
        write_summary(&summary, dir)?;
    }
    Ok(summary)
}

pub fn write_summary(s: &Summary, dir: &Path) -> Result<Vec<PathBuf>> {
    let json = dir.join("summary.json");
    fs::write(&json, serde_json::to_vec_pretty(s)?)?;
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["variant", "seed", "epsilon", "white_box_asr@1", "black_box_asr@1", "uap_digest"])?;
    for a in s.attacks.iter().chain(&s.sweep) {
        w.write_record([
            a.variant.tag().to_string(),
            a.seed.to_string(),
            a.epsilon.clone(),
            fmt_opt(a.white_box_asr1),
            fmt_opt(a.black_box_asr1),
            a.uap_digest.clone(),
        ])?;
    }
    w.flush()?;
    let variants: Vec<Variant> = s.config.variants.clone();
    let labels: Vec<String> = variants.iter().map(|v| v.tag().to_string()).collect();
    let wb: Vec<f64> = variants.iter().map(|&v| s.mean_over_seeds(v, |a| a.white_box_asr1).unwrap_or(0.0)).collect();
    let bb: Vec<f64> = variants.iter().map(|&v| s.mean_over_seeds(v, |a| a.black_box_asr1).unwrap_or(0.0)).collect();
    let p1 = dir.join("white_box_asr1.svg");
    let p2 = dir.join("black_box_asr1.svg");
    let p3 = dir.join("eps_sweep.svg");
    write_bar_svg(&p1, "White-box ASR@1 (mean over seeds)", &labels, &wb)?;
    write_bar_svg(&p2, "Black-box ASR@1 (mean over seeds)", &labels, &bb)?;
    let sl: Vec<String> = s.sweep.iter().map(|a| a.epsilon.clone()).collect();
    let sv: Vec<f64> = s.sweep.iter().map(|a| a.white_box_asr1.unwrap_or(0.0)).collect();
    write_bar_svg(&p3, "ETU white-box ASR@1 vs epsilon", &sl, &sv)?;
    Ok(vec![json, csv_path, p1, p2, p3])
}
