use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ttm_core::autodiff::TensorBundle;
use ttm_core::backbone::{strategy_forward, Strategy, StrategyConfig};
use ttm_core::data::{build_dataset, load_manifest, load_sample, load_split, Dataset, MaskConfig, PhantomConfig, Split, SplitCounts, SplitManifest};
use ttm_core::experiment::{run_suite, write_report, SuiteConfig};
use ttm_core::kspace::ComplexImage;
use ttm_core::metrics::{aggregate_table, evaluate, score, MetricReport};
use ttm_core::train::{load_log, resume, train, Checkpoint, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(name = "ttm", version, about = "Reference-guided MRI reconstruction with a texture transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenData),
    /// Train one strategy.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Reconstruct one sample and write previews.
    Recon(SampleArgs),
    /// Write the attention outcome for one sample.
    DumpAttn(SampleArgs),
    /// Train and evaluate every strategy over several seeds.
    Suite(SuiteArgs),
}

#[derive(Args)]
struct GenData {
    /// Training phantoms.
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    val: usize,
    #[arg(long, default_value_t = 20)]
    reference: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    af: f64,
    #[arg(long = "center-frac", default_value_t = 0.08)]
    center_frac: f64,
    /// Complex k-space noise level.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    strategy: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.5e-4)]
    lr: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from a checkpoint of an earlier run with identical flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample ID.
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "original,ref_concat,ttm,ttm_ha_only,ttm_sa_only")]
    strategies: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long)]
    no_determinism: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(s.parse::<Strategy>()?)
}

fn split_of(s: &str) -> Result<Split> {
    let split = Split::parse(s)?;
    if split == Split::Reference {
        bail!("the reference pool holds no samples; use train, val or test");
    }
    Ok(split)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenData) -> Result<()> {
    let counts = SplitCounts { train: a.count, val: a.val, reference: a.reference, test: a.test };
    let phantoms = PhantomConfig { size: a.size, subjects: a.subjects, ..PhantomConfig::default() };
    let manifest = SplitManifest::new(counts, phantoms, a.seed)?;
    let mask = MaskConfig { acceleration_factor: a.af, center_fraction: a.center_frac, noise_sigma: a.noise };
    let ds = build_dataset(&manifest, &mask, a.seed)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} train / {} val / {} test samples ({} reference phantoms) to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        manifest.reference.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let strategy = parse_strategy(&a.strategy)?;
    let data = Dataset::load(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        initial_lr: a.lr,
        max_steps: a.max_steps,
        ..TrainConfig::desk(StrategyConfig::new(strategy), a.seed)
    };
    let out = TrainOutput { dir: Some(a.out.clone()) };
    let (ckpt, log) = match a.resume {
        Some(path) => {
            let from = Checkpoint::load(&path)?;
            let prior = load_log(&a.out.join("train_log.json")).unwrap_or_default();
            resume(&cfg, &data, from, prior, &out)?
        }
        None => train(&cfg, &data, &out)?,
    };
    let last = log.epochs.last();
    println!(
        "trained {strategy} for {} epochs ({} steps); final val {}; checkpoints in {}",
        ckpt.manifest.epoch,
        ckpt.manifest.step,
        last.map_or("n/a".into(), |e| format!("{:.3} dB / {:.4}", e.val_psnr, e.val_ssim)),
        a.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = split_of(&a.split)?;
    let samples = load_split(&a.data, split)?;
    let report = if a.ground_truth {
        let preds: Vec<ComplexImage> = samples.iter().map(|s| s.y.clone()).collect();
        MetricReport::new("ground_truth", "none", score(&samples, &preds)?)
    } else {
        let path = a.checkpoint.context("--checkpoint is required unless --ground-truth is given")?;
        let ckpt = Checkpoint::load(&path)?;
        let cfg = ckpt.config().clone();
        evaluate(&ckpt, &samples, &cfg)?
    };
    write_report(&a.out, "metrics", &report)?;
    write(&a.out.join("table.csv"), aggregate_table(&[(report.strategy.clone(), report.cell())]))?;
    println!("{} on {}: {}", report.strategy, split.name(), report.cell());
    Ok(())
}

fn load_for_sample(a: &SampleArgs) -> Result<(Checkpoint, ttm_core::data::DataSample)> {
    let split = split_of(&a.split)?;
    load_manifest(&a.data)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let sample = load_sample(&a.data, split, a.sample)
        .with_context(|| format!("sample {} not found in split {}", a.sample, split.name()))?;
    Ok((ckpt, sample))
}

/// Plain 8-bit PGM scaled by the image maximum.
fn pgm(values: &[f32], height: usize, width: usize) -> String {
    let max = values.iter().copied().fold(0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|&v| ((v.max(0.0) * scale).round() as u32).min(255).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn recon(a: SampleArgs) -> Result<()> {
    let (ckpt, sample) = load_for_sample(&a)?;
    let model = ckpt.model()?;
    let (pred, _) = strategy_forward(&sample, &model, &ckpt.params)?;
    let (h, w) = (pred.height(), pred.width());
    let (pm, gm, zm) = (pred.magnitude(), sample.y.magnitude(), sample.x.magnitude());
    let diff: Vec<f32> = pm.iter().zip(&gm).map(|(p, g)| (p - g).abs()).collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut b = TensorBundle::new();
    b.insert_f32("y_pred", pred.tensor().clone());
    b.insert_f32("y", sample.y.tensor().clone());
    b.insert_f32("zero_filled", sample.x.tensor().clone());
    b.insert_f32("abs_diff", ttm_core::autodiff::Tensor::new(&[h, w], diff.clone())?);
    b.save(&a.out.join("recon.ttmt"))?;
    for (name, img) in [("recon", &pm), ("ground_truth", &gm), ("zero_filled", &zm), ("abs_diff", &diff)] {
        write(&a.out.join(format!("{name}.pgm")), pgm(img, h, w))?;
    }
    println!("wrote reconstruction of sample {} to {}", a.sample, a.out.display());
    Ok(())
}

fn dump_attn(a: SampleArgs) -> Result<()> {
    let (ckpt, sample) = load_for_sample(&a)?;
    let model = ckpt.model()?;
    if model.ttm.is_none() {
        bail!("checkpoint strategy {} has no texture transformer", model.strategy());
    }
    let (_, attn) = strategy_forward(&sample, &model, &ckpt.params)?;
    let attn = attn.context("texture transformer produced no attention")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    attn.to_bundle().save(&a.out.join("attention.ttmt"))?;
    write(&a.out.join("attention.json"), serde_json::to_string_pretty(&attn.sidecar())?)?;
    println!("wrote attention of sample {} to {}", a.sample, a.out.display());
    Ok(())
}

fn suite(a: SuiteArgs) -> Result<()> {
    let strategies = a.strategies.iter().map(|s| parse_strategy(s)).collect::<Result<Vec<_>>>()?;
    let data = Dataset::load(&a.data)?;
    let cfg = SuiteConfig {
        strategies,
        seeds: a.seeds,
        epochs: a.epochs,
        batch_size: a.batch,
        determinism_check: !a.no_determinism,
        ..SuiteConfig::default()
    };
    let report = run_suite(&data, &cfg, &a.out)?;
    for s in &report.strategies {
        println!("{:<12} median {:.3} dB  mean {:.3} dB / {:.4}", s.strategy, s.median_psnr, s.mean_psnr, s.mean_ssim);
    }
    for g in &report.gates {
        let status = match g.threshold {
            Some(t) => format!("{} (≥ {t})", if g.passed { "pass" } else { "FAIL" }),
            None => "reported".into(),
        };
        println!("{:<30} {:+.3} dB  {status}", g.name, g.value);
    }
    if let Some(d) = &report.determinism {
        println!("determinism ({} seed {}): {}", d.strategy, d.seed, if d.identical { "identical" } else { "DIFFERENT" });
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Recon(a) => recon(a),
        Command::DumpAttn(a) => dump_attn(a),
        Command::Suite(a) => suite(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
