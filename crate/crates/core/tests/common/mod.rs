//! Oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ttm_core::autodiff::{PatchGeometry, Tensor};
use ttm_core::kspace::ComplexImage;
use ttm_core::metrics::gaussian_window;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ComplexImage {
    ComplexImage::from_tensor(rand_tensor(rng, &[2, h, w])).unwrap()
}

/// Patch vector in unfold order (channel, row, column).
pub fn patch_vec(t: &Tensor<f32>, geo: &PatchGeometry, index: usize) -> Vec<f64> {
    let (pr, pc) = (index / geo.cols(), index % geo.cols());
    let mut v = Vec::new();
    for c in 0..t.dim(0) {
        for dy in 0..geo.patch {
            for dx in 0..geo.patch {
                let (y, x) = (pr * geo.stride + dy, pc * geo.stride + dx);
                v.push(t[(c * geo.height + y) * geo.width + x] as f64);
            }
        }
    }
    v
}

/// Row-major `N×N` cosine similarities by double loop, norms floored at 1e-8.
pub fn cosine_oracle(q: &Tensor<f32>, k: &Tensor<f32>, geo: &PatchGeometry) -> Vec<f64> {
    let n = geo.count();
    let qs: Vec<Vec<f64>> = (0..n).map(|i| patch_vec(q, geo, i)).collect();
    let ks: Vec<Vec<f64>> = (0..n).map(|i| patch_vec(k, geo, i)).collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum();
            out[i * n + j] = dot / (norm(&qs[i]) * norm(&ks[j]));
        }
    }
    out
}

/// Exhaustive first-maximum scan per row.
pub fn argmax_scan(scores: &[f32], n: usize) -> Vec<usize> {
    (0..scores.len() / n)
        .map(|i| {
            let row = &scores[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Copies source patches to destination slots and averages overlaps.
pub fn scatter_average_oracle(v: &Tensor<f32>, hard: &[usize], geo: &PatchGeometry) -> Vec<f64> {
    let (c, h, w) = (v.dim(0), geo.height, geo.width);
    let mut sum = vec![0.0; c * h * w];
    let mut count = vec![0.0; h * w];
    for (i, &src) in hard.iter().enumerate() {
        let (dr, dc) = (i / geo.cols() * geo.stride, i % geo.cols() * geo.stride);
        let (sr, sc) = (src / geo.cols() * geo.stride, src % geo.cols() * geo.stride);
        for dy in 0..geo.patch {
            for dx in 0..geo.patch {
                count[(dr + dy) * w + dc + dx] += 1.0;
                for ch in 0..c {
                    sum[(ch * h + dr + dy) * w + dc + dx] += v[(ch * h + sr + dy) * w + sc + dx] as f64;
                }
            }
        }
    }
    sum.iter().enumerate().map(|(i, s)| s / count[i % (h * w)]).collect()
}

/// PSNR by direct per-pixel sum, peak = max of the ground truth.
pub fn psnr_oracle(pred: &Tensor<f32>, gt: &Tensor<f32>) -> f64 {
    let mut sse = 0.0;
    let mut max = f64::MIN;
    for i in 0..pred.numel() {
        sse += (pred[i] as f64 - gt[i] as f64).powi(2);
        max = max.max(gt[i] as f64);
    }
    10.0 * (max * max / (sse / pred.numel() as f64)).log10()
}

/// Mean over valid 11×11 windows of SSIM written from its definition.
pub fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>, range: f64) -> f64 {
    let (h, w) = (a.dim(0), a.dim(1));
    let win = gaussian_window(11, 1.5);
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut vals = Vec::new();
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let px = |t: &Tensor<f32>, i: usize, j: usize| t[(r + i) * w + c + j] as f64;
            let mean = |t: &Tensor<f32>| {
                (0..11).flat_map(|i| (0..11).map(move |j| (i, j))).map(|(i, j)| win[i * 11 + j] * px(t, i, j)).sum::<f64>()
            };
            let (ma, mb) = (mean(a), mean(b));
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i * 11 + j];
                    let (da, db) = (px(a, i, j) - ma, px(b, i, j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            vals.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Direct centered orthonormal 2-D DFT in f64.
pub fn naive_fft2c(img: &ComplexImage) -> Vec<(f64, f64)> {
    let (h, w) = (img.height(), img.width());
    let (re, im) = (img.re(), img.im());
    let mut out = vec![(0.0, 0.0); h * w];
    for ky in 0..h {
        for kx in 0..w {
            let (fy, fx) = (ky as f64 - (h / 2) as f64, kx as f64 - (w / 2) as f64);
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let (py, px) = (y as f64 - (h / 2) as f64, x as f64 - (w / 2) as f64);
                    let ang = -2.0 * std::f64::consts::PI * (fy * py / h as f64 + fx * px / w as f64);
                    let (c, s) = (ang.cos(), ang.sin());
                    let (a, b) = (re[y * w + x] as f64, im[y * w + x] as f64);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            let n = ((h * w) as f64).sqrt();
            out[ky * w + kx] = (sr / n, si / n);
        }
    }
    out
}
