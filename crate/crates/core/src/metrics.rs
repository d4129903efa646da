//! PSNR and SSIM on magnitude images, and per-split metric reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::backbone::{strategy_forward, Model, StrategyConfig};
use crate::data::DataSample;
use crate::error::{Error, Result};
use crate::kspace::{fft2c_planes, ComplexImage};
use crate::nn::Params;
use crate::parallel::par_map;
use crate::train::Checkpoint;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `H×W` magnitude of a complex image.
pub fn magnitude(img: &ComplexImage) -> Tensor<f32> {
    Tensor::new(&[img.height(), img.width()], img.magnitude()).expect("magnitude matches image size")
}

fn check_pair(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.shape() != gt.shape() || gt.ndim() != 2 {
        return Err(Error::Shape(format!(
            "metrics need equal H×W images, got {:?} and {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// `max(gt)`; rejected below `1e-8`.
pub fn data_range(gt: &Tensor<f32>) -> Result<f64> {
    let max = gt.data().iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    if !(max >= 1e-8) {
        return Err(Error::InvalidArgument(format!("ground-truth maximum {max} below 1e-8")));
    }
    Ok(max)
}

/// `10·log10(range² / MSE)`; identical images give `+∞`.
pub fn psnr(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    let range = data_range(gt)?;
    let sse: f64 = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum();
    let mse = sse / gt.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Normalized `size×size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Mean SSIM over valid windows with `data_range = max(gt)`.
pub fn ssim(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    check_pair(pred, gt)?;
    ssim_with_range(pred, gt, data_range(gt)?)
}

pub fn ssim_with_range(a: &Tensor<f32>, b: &Tensor<f32>, range: f64) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.dim(0), a.dim(1));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (da, db) = (a.data(), b.data());
    let (rows, cols) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = win[i * SSIM_WINDOW + j];
                    let p = (r + i) * w + c + j;
                    let (x, y) = (da[p] as f64, db[p] as f64);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (rows * cols) as f64)
}

/// Serializes non-finite values as strings so `+∞` survives JSON.
pub(crate) mod lossless_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_value(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn format_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    #[serde(with = "lossless_f64")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "lossless_f64")]
    pub mean: f64,
    #[serde(with = "lossless_f64")]
    pub std: f64,
    #[serde(with = "lossless_f64")]
    pub median: f64,
}

impl Summary {
    /// Population standard deviation; infinite values propagate.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN, median: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            f64::NAN
        };
        Self { mean, std, median: median(values) }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub checkpoint: String,
    pub samples: Vec<SampleMetrics>,
    pub psnr: Summary,
    pub ssim: Summary,
}

impl MetricReport {
    pub fn new(strategy: impl Into<String>, checkpoint: impl Into<String>, samples: Vec<SampleMetrics>) -> Self {
        let p: Vec<f64> = samples.iter().map(|s| s.psnr_db).collect();
        let s: Vec<f64> = samples.iter().map(|s| s.ssim).collect();
        Self { strategy: strategy.into(), checkpoint: checkpoint.into(), psnr: Summary::of(&p), ssim: Summary::of(&s), samples }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `sample_id,psnr_db,ssim` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,psnr_db,ssim\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{}", s.sample_id, format_value(s.psnr_db), format_value(s.ssim));
        }
        out
    }

    /// Table cell: mean PSNR to 2 decimals and mean SSIM to 4.
    pub fn cell(&self) -> String {
        table_cell(self.psnr.mean, self.ssim.mean)
    }
}

pub fn table_cell(psnr: f64, ssim: f64) -> String {
    let p = if psnr.is_finite() { format!("{psnr:.2}") } else { format_value(psnr) };
    format!("{p} / {ssim:.4}")
}

/// One row per strategy, cells `"PSNR / SSIM"`.
pub fn aggregate_table(rows: &[(String, String)]) -> String {
    let mut out = String::from("strategy,cascade_dc\n");
    for (strategy, cell) in rows {
        let _ = writeln!(out, "{strategy},{cell}");
    }
    out
}

/// Scores predicted complex images against each sample's ground truth.
pub fn score(samples: &[DataSample], preds: &[ComplexImage]) -> Result<Vec<SampleMetrics>> {
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples, {} predictions", samples.len(), preds.len())));
    }
    samples
        .iter()
        .zip(preds)
        .map(|(s, p)| {
            let (pm, gm) = (magnitude(p), magnitude(&s.y));
            Ok(SampleMetrics { sample_id: s.name(), psnr_db: psnr(&pm, &gm)?, ssim: ssim(&pm, &gm)? })
        })
        .collect()
}

/// Runs the model on every sample.
pub fn predict(model: &Model, params: &Params, samples: &[DataSample]) -> Result<Vec<ComplexImage>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    if model.strategy().uses_reference() {
        if let Some(s) = samples.iter().find(|s| s.reference.is_none()) {
            return Err(Error::MissingReference(format!(
                "sample {} has no reference but strategy {} needs one",
                s.name(),
                model.strategy()
            )));
        }
    }
    par_map(samples, |s| strategy_forward(s, model, params).map(|(y, _)| y)).into_iter().collect()
}

/// Largest deviation between sampled k-space columns of the predictions and
/// the measurements.
pub fn dc_residual(samples: &[DataSample], preds: &[ComplexImage]) -> Result<f64> {
    if samples.len() != preds.len() {
        return Err(Error::Shape(format!("{} samples, {} predictions", samples.len(), preds.len())));
    }
    let mut worst = 0f64;
    for (s, p) in samples.iter().zip(preds) {
        // f64 transform so the check itself adds no f32 rounding
        let (h, w) = (p.height(), p.width());
        let wide: Vec<f64> = p.tensor().data().iter().map(|&v| v as f64).collect();
        let kd = fft2c_planes(&wide, h, w, false);
        let md = s.measured.tensor().data();
        for &col in &s.mask.columns {
            for i in (0..2 * h).map(|r| r * w + col) {
                worst = worst.max((kd[i] - md[i] as f64).abs());
            }
        }
    }
    Ok(worst)
}

/// Runs the model on every sample and scores magnitudes against ground truth.
pub fn evaluate_model(
    model: &Model,
    params: &Params,
    samples: &[DataSample],
    checkpoint: &str,
) -> Result<MetricReport> {
    let preds = predict(model, params, samples)?;
    Ok(MetricReport::new(model.strategy().name(), checkpoint, score(samples, &preds)?))
}

/// Evaluates a checkpoint whose strategy configuration must equal `cfg`.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[DataSample], cfg: &StrategyConfig) -> Result<MetricReport> {
    evaluate_with_residual(checkpoint, samples, cfg).map(|(r, _)| r)
}

/// [`evaluate`] plus the data-consistency residual of the predictions.
pub fn evaluate_with_residual(
    checkpoint: &Checkpoint,
    samples: &[DataSample],
    cfg: &StrategyConfig,
) -> Result<(MetricReport, f64)> {
    if checkpoint.config() != cfg {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds a {} model, configuration asks for {}",
            checkpoint.manifest.strategy, cfg.strategy
        )));
    }
    let model = checkpoint.model()?;
    let id = format!("{}@epoch{}", checkpoint.manifest.strategy, checkpoint.manifest.epoch);
    let preds = predict(&model, &checkpoint.params, samples)?;
    let report = MetricReport::new(model.strategy().name(), &id, score(samples, &preds)?);
    Ok((report, dc_residual(samples, &preds)?))
}
