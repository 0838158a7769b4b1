use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use uaplab_core::attack::{run_attack, AttackConfig, Variant};
use uaplab_core::data::{generate_dataset, load_dataset, save_dataset, Dataset, SyntheticSpec};
use uaplab_core::encoders::{load_checkpoint, pretrain_contrastive, save_checkpoint, Architecture, PretrainConfig};
use uaplab_core::eval::{emit_report, transfer_matrix, DatasetEntry, ModelEntry};
use uaplab_core::pipeline::{black_box_asr, run_reference, white_box_asr, ReferenceConfig};
use uaplab_core::uap::{load_uap, save_uap, Epsilon};

#[derive(Parser)]
#[command(name = "uaplab", version, about = "Universal adversarial perturbations against toy vision-language encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or inspect synthetic paired corpora.
    #[command(subcommand)]
    Data(DataCmd),
    /// Contrastively pretrain an encoder pair.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arch: Architecture,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// Minimum clean image-to-text R@1; training fails below it.
        #[arg(long)]
        recall_floor: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft a UAP on a surrogate model.
    Attack {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        budget: Budget,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect UAP files.
    #[command(subcommand)]
    Uap(UapCmd),
    /// Evaluate a UAP against target models and corpora.
    Eval {
        #[arg(long)]
        uap: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack at several budgets and record white-box ASR@1 per budget.
    SweepEps {
        /// Attack corpus.
        #[arg(long)]
        data: PathBuf,
        /// Surrogate checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Budgets as numerators over 255.
        #[arg(long, value_delimiter = ',', default_value = "4,8,12,16")]
        eps: Vec<u64>,
        #[arg(long, default_value = "ETU")]
        variant: Variant,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Additional target checkpoints for the transfer columns.
        #[arg(long, num_args = 0..)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full reference experiment.
    Reference {
        #[arg(long)]
        out: PathBuf,
        /// Tiny configuration for smoke testing.
        #[arg(long)]
        smoke: bool,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a corpus from a JSON spec file or a preset.
    Gen {
        #[arg(long, conflicts_with = "preset")]
        spec: Option<PathBuf>,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Inspect { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    A,
    B,
}

#[derive(Subcommand)]
enum UapCmd {
    Show { path: PathBuf },
}

#[derive(Args)]
struct Budget {
    #[arg(long, default_value = "ETU")]
    variant: Variant,
    #[arg(long, default_value = "12/255")]
    eps: Epsilon,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_data(p: &Path) -> Result<Dataset> {
    load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<ModelEntry>> {
    paths
        .iter()
        .map(|p| Ok(ModelEntry { name: stem(p), pair: load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))? }))
        .collect()
}

fn trace_path(uap: &Path) -> PathBuf {
    uap.with_extension("trace.jsonl")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(DataCmd::Gen { spec, preset, n, seed, out }) => {
            let spec = match (spec, preset) {
                (Some(path), _) => serde_json::from_slice::<SyntheticSpec>(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?,
                (None, Some(Preset::A)) => SyntheticSpec::dataset_a(n, seed),
                (None, Some(Preset::B)) => SyntheticSpec::dataset_b(n, seed),
                (None, None) => bail!("either --spec or --preset is required"),
            };
            let ds = generate_dataset(&spec)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} images to {} (digest {})", ds.len(), out.display(), ds.digest());
        }
        Command::Data(DataCmd::Inspect { path }) => {
            let ds = load_data(&path)?;
            let s = ds.image_shape();
            println!("images: {}", ds.len());
            println!("shape: {s}");
            println!("captions per image: {}", ds.captions_per_image());
            println!("vocabulary: {} tokens", ds.vocab.len());
            println!("digest: {}", ds.digest());
            let mut colors: BTreeMap<&str, usize> = BTreeMap::new();
            for smp in &ds.samples {
                *colors.entry(smp.attributes.color.as_str()).or_default() += 1;
            }
            println!("colours: {colors:?}");
            if let Some(first) = ds.pair_pool().first() {
                println!("example caption: {:?}", ds.caption_text(*first));
            }
        }
        Command::Pretrain { data, arch, seed, epochs, recall_floor, out } => {
            let ds = load_data(&data)?;
            let mut cfg = PretrainConfig { seed, ..Default::default() };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(f) = recall_floor {
                cfg.recall_floor = f;
            }
            let (pair, report) = pretrain_contrastive(&ds, arch, &cfg)?;
            save_checkpoint(&pair, &out)?;
            println!(
                "{arch}: {} params, R@1 {:.3}, matched cosine {:.3} -> {:.3}, fingerprint {}",
                report.param_count,
                report.recall_at_1,
                report.matched_cosine_before,
                report.matched_cosine_after,
                pair.fingerprint()
            );
        }
        Command::Attack { data, model, budget, out } => {
            let ds = load_data(&data)?;
            let pair = load_checkpoint(&model)?;
            let cfg = AttackConfig { batch: budget.batch, ..AttackConfig::with_budget(budget.variant, budget.eps, budget.steps, budget.seed) };
            let (uap, trace) = run_attack(&ds, &pair, &cfg)?;
            save_uap(&uap, &out)?;
            trace.write_jsonl(trace_path(&out))?;
            let last = trace.steps.last().map_or(0.0, |s| s.total);
            println!("{} on {}: {} steps in {:.1}s, final batch loss {last:.5}, ∥δ∥∞ {}", cfg.variant, pair.arch(), cfg.steps, trace.wall_seconds, uap.linf());
            println!("wrote {} and {}", out.display(), trace_path(&out).display());
        }
        Command::Uap(UapCmd::Show { path }) => {
            let uap = load_uap(&path)?;
            println!("shape: {}", uap.shape());
            println!("epsilon: {} ({:.6})", uap.epsilon, uap.epsilon.value());
            println!("linf: {:.6}", uap.linf());
            println!("digest: {}", uap.digest());
            println!("provenance: {}", serde_json::to_string_pretty(&uap.provenance)?);
        }
        Command::Eval { uap, models, data, k, out } => {
            let uap = load_uap(&uap)?;
            let models = load_models(&models)?;
            let datasets = data.iter().map(|p| Ok(DatasetEntry { name: stem(p), dataset: load_data(p)? })).collect::<Result<Vec<_>>>()?;
            let report = transfer_matrix(&uap, &models, &datasets, &k)?;
            for f in emit_report(&report, &out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::SweepEps { data, model, eps, variant, steps, batch, seed, targets, out } => {
            let ds = load_data(&data)?;
            let mut paths = vec![model];
            paths.extend(targets);
            let models = load_models(&paths)?;
            let datasets = vec![DatasetEntry { name: stem(&data), dataset: ds }];
            fs::create_dir_all(&out)?;
            let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
            w.write_record(["epsilon", "white_box_asr@1", "black_box_asr@1", "uap_digest"])?;
            for n in eps {
                let e = Epsilon::per_255(n);
                let cfg = AttackConfig { batch, ..AttackConfig::with_budget(variant, e, steps, seed) };
                let (uap, trace) = run_attack(&datasets[0].dataset, &models[0].pair, &cfg)?;
                let file = out.join(format!("eps{n}.uapf"));
                save_uap(&uap, &file)?;
                trace.write_jsonl(trace_path(&file))?;
                let report = transfer_matrix(&uap, &models, &datasets, &[1])?;
                let wb = white_box_asr(&report, &datasets[0].name, 1);
                let bb = black_box_asr(&report, 1);
                let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x}"));
                println!("ε = {e}: white-box ASR@1 {}, black-box ASR@1 {}", f(wb), f(bb));
                w.write_record([e.to_string(), f(wb), f(bb), uap.digest()])?;
            }
            w.flush()?;
        }
        Command::Reference { out, smoke } => {
            let cfg = if smoke { ReferenceConfig::smoke() } else { ReferenceConfig::default() };
            let s = run_reference(&cfg, Some(&out))?;
            for a in &s.attacks {
                println!("{:<12} seed {} white-box {:?} black-box {:?}", a.variant.tag(), a.seed, a.white_box_asr1, a.black_box_asr1);
            }
            for a in &s.sweep {
                println!("sweep ε {:<7} white-box {:?}", a.epsilon, a.white_box_asr1);
            }
            println!("finished in {:.0}s; outputs in {}", s.seconds, out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
