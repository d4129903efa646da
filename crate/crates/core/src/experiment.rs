//! Multi-strategy, multi-seed training and evaluation with directional gates.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Strategy, StrategyConfig};
use crate::data::Dataset;
use crate::error::{io_err, Error, Result};
use crate::metrics::{aggregate_table, evaluate_with_residual, median, table_cell, MetricReport};
use crate::train::{train, Checkpoint, TrainConfig, TrainOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Retrain the first strategy's first seed and compare artifacts.
    pub determinism_check: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            epochs: 20,
            batch_size: 4,
            initial_lr: 1.5e-4,
            determinism_check: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub param_count: usize,
    pub best_epoch: usize,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub psnr: Vec<f64>,
    /// Worst sampled-column deviation of the test outputs from the measurements.
    pub dc_max_err: f64,
    pub checkpoint_sha256: String,
    pub metrics_sha256: String,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    /// Median of the pooled per-sample test PSNRs over all seeds.
    pub median_psnr: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    /// `None` for report-only trends.
    pub threshold: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Determinism {
    pub strategy: Strategy,
    pub seed: u64,
    pub checkpoint_sha256: [String; 2],
    pub metrics_sha256: [String; 2],
    pub identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub runs: Vec<RunResult>,
    pub strategies: Vec<StrategySummary>,
    pub gates: Vec<Gate>,
    pub determinism: Option<Determinism>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn run_dir(root: &Path, strategy: Strategy, seed: u64) -> PathBuf {
    root.join(strategy.name()).join(format!("seed{seed}"))
}

/// Trains one cell, evaluates its best checkpoint on the test split and
/// writes `test_metrics.{csv,json}`. Finished cells are reused.
pub fn run_cell(data: &Dataset, cfg: &SuiteConfig, strategy: Strategy, seed: u64, dir: &Path) -> Result<RunResult> {
    let result_path = dir.join("result.json");
    if let Ok(text) = fs::read_to_string(&result_path) {
        if let Ok(r) = serde_json::from_str::<RunResult>(&text) {
            log::info!("reusing {}", dir.display());
            return Ok(r);
        }
    }
    let scfg = StrategyConfig::new(strategy);
    let tcfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        initial_lr: cfg.initial_lr,
        ..TrainConfig::desk(scfg.clone(), seed)
    };
    let out = TrainOutput { dir: Some(dir.to_path_buf()) };
    let (_, log) = train(&tcfg, data, &out)?;
    let best_epoch = log.best_epoch.map_or(0, |e| e + 1);
    let stem = if log.best_epoch.is_some() { "best" } else { "final" };
    let ckpt = Checkpoint::load(&dir.join(stem))?;
    let (report, dc_max_err) = evaluate_with_residual(&ckpt, &data.test, &scfg)?;
    write_report(dir, "test_metrics", &report)?;
    let psnr: Vec<f64> = report.samples.iter().map(|s| s.psnr_db).collect();
    let r = RunResult {
        strategy,
        seed,
        param_count: ckpt.params.count(),
        best_epoch,
        mean_psnr: report.psnr.mean,
        median_psnr: report.psnr.median,
        mean_ssim: report.ssim.mean,
        psnr,
        dc_max_err,
        checkpoint_sha256: sha256_file(&dir.join(format!("{stem}.ttmt")))?,
        metrics_sha256: sha256_file(&dir.join("test_metrics.csv"))?,
        train_seconds: log.seconds,
    };
    fs::write(&result_path, serde_json::to_string_pretty(&r)?).map_err(io_err(&result_path))?;
    Ok(r)
}

pub fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let json = dir.join(format!("{stem}.json"));
    fs::write(&json, report.to_json()?).map_err(io_err(&json))
}

fn summary(runs: &[RunResult], strategy: Strategy) -> Option<StrategySummary> {
    let mine: Vec<&RunResult> = runs.iter().filter(|r| r.strategy == strategy).collect();
    if mine.is_empty() {
        return None;
    }
    let pooled: Vec<f64> = mine.iter().flat_map(|r| r.psnr.iter().copied()).collect();
    let n = mine.len() as f64;
    Some(StrategySummary {
        strategy,
        median_psnr: median(&pooled),
        mean_psnr: mine.iter().map(|r| r.mean_psnr).sum::<f64>() / n,
        mean_ssim: mine.iter().map(|r| r.mean_ssim).sum::<f64>() / n,
    })
}

/// Directional checks over strategy medians; gates whose strategies are
/// missing are omitted.
pub fn gates(summaries: &[StrategySummary]) -> Vec<Gate> {
    let med = |s: Strategy| summaries.iter().find(|x| x.strategy == s).map(|x| x.median_psnr);
    let mut out = Vec::new();
    let mut push = |name: &str, value: f64, threshold: Option<f64>| {
        out.push(Gate { name: name.into(), value, threshold, passed: threshold.map_or(true, |t| value >= t) });
    };
    let (o, r, t, ha, sa) = (
        med(Strategy::Original),
        med(Strategy::RefConcat),
        med(Strategy::Ttm),
        med(Strategy::TtmHaOnly),
        med(Strategy::TtmSaOnly),
    );
    if let (Some(o), Some(t)) = (o, t) {
        push("ttm_minus_original_db", t - o, Some(0.2));
    }
    if let (Some(o), Some(r)) = (o, r) {
        push("ref_concat_minus_original_db", r - o, None);
    }
    if let (Some(o), Some(sa)) = (o, sa) {
        push("sa_minus_base_db", sa - o, Some(0.0));
    }
    if let (Some(o), Some(ha)) = (o, ha) {
        push("ha_minus_base_db", ha - o, Some(0.0));
    }
    if let (Some(t), Some(ha), Some(sa)) = (t, ha, sa) {
        push("ttm_minus_best_ablation_db", t - ha.max(sa), Some(-0.05));
    }
    out
}

pub fn run_suite(data: &Dataset, cfg: &SuiteConfig, root: &Path) -> Result<SuiteReport> {
    if cfg.strategies.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one strategy and one seed".into()));
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut runs = Vec::new();
    for &strategy in &cfg.strategies {
        for &seed in &cfg.seeds {
            log::info!("suite cell {strategy} seed {seed}");
            runs.push(run_cell(data, cfg, strategy, seed, &run_dir(root, strategy, seed))?);
        }
    }
    let determinism = if cfg.determinism_check {
        let (strategy, seed) = (cfg.strategies[0], cfg.seeds[0]);
        let first = runs.iter().find(|r| r.strategy == strategy && r.seed == seed).expect("cell ran");
        let again = run_cell(data, cfg, strategy, seed, &root.join("determinism").join(strategy.name()))?;
        Some(Determinism {
            strategy,
            seed,
            identical: first.checkpoint_sha256 == again.checkpoint_sha256
                && first.metrics_sha256 == again.metrics_sha256,
            checkpoint_sha256: [first.checkpoint_sha256.clone(), again.checkpoint_sha256],
            metrics_sha256: [first.metrics_sha256.clone(), again.metrics_sha256],
        })
    } else {
        None
    };
    let strategies: Vec<StrategySummary> = cfg.strategies.iter().filter_map(|&s| summary(&runs, s)).collect();
    let report = SuiteReport { config: cfg.clone(), gates: gates(&strategies), strategies, runs, determinism };
    write_suite(root, &report)?;
    Ok(report)
}

fn write_suite(root: &Path, report: &SuiteReport) -> Result<()> {
    let json = root.join("suite.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(io_err(&json))?;
    let mut csv = String::from("strategy,seed,params,best_epoch,mean_psnr_db,median_psnr_db,mean_ssim\n");
    for r in &report.runs {
        csv.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.strategy, r.seed, r.param_count, r.best_epoch, r.mean_psnr, r.median_psnr, r.mean_ssim
        ));
    }
    let path = root.join("runs.csv");
    fs::write(&path, csv).map_err(io_err(&path))?;
    let rows: Vec<(String, String)> = report
        .strategies
        .iter()
        .map(|s| (s.strategy.name().to_string(), table_cell(s.mean_psnr, s.mean_ssim)))
        .collect();
    let path = root.join("table.csv");
    fs::write(&path, aggregate_table(&rows)).map_err(io_err(&path))
}

pub fn load_suite(root: &Path) -> Result<SuiteReport> {
    let path = root.join("suite.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}
