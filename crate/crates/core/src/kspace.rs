//! Cartesian k-space acquisition: centered orthonormal FFTs, column masks,
//! simulated under-sampling and the hard data-consistency projection.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{io_err, Error, Result};

/// `H×W` complex field stored as a `2×H×W` tensor (real plane, imaginary plane).
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage(Tensor<f32>);

/// Frequency-domain counterpart of [`ComplexImage`], DC at the array center.
pub type KSpace = ComplexImage;

impl ComplexImage {
    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        if t.ndim() != 3 || t.dim(0) != 2 {
            return Err(Error::Shape(format!(
                "complex image must be 2×H×W, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[2, height, width]))
    }

    pub fn from_parts(height: usize, width: usize, re: &[f32], im: &[f32]) -> Result<Self> {
        let plane = height * width;
        if re.len() != plane || im.len() != plane {
            return Err(Error::Shape(format!(
                "expected {plane} values per channel, got {} and {}",
                re.len(),
                im.len()
            )));
        }
        let mut data = Vec::with_capacity(2 * plane);
        data.extend_from_slice(re);
        data.extend_from_slice(im);
        Ok(Self(Tensor::new(&[2, height, width], data)?))
    }

    pub fn height(&self) -> usize {
        self.0.dim(1)
    }

    pub fn width(&self) -> usize {
        self.0.dim(2)
    }

    pub fn re(&self) -> &[f32] {
        &self.0.data()[..self.height() * self.width()]
    }

    pub fn im(&self) -> &[f32] {
        &self.0.data()[self.height() * self.width()..]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn magnitude(&self) -> Vec<f32> {
        self.re().iter().zip(self.im()).map(|(&a, &b)| a.hypot(b)).collect()
    }

    pub fn energy(&self) -> f64 {
        self.0.data().iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn same_shape(&self, other: &ComplexImage) -> bool {
        self.0.shape() == other.0.shape()
    }
}

/// Binary per-column k-space inclusion pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub width: usize,
    pub acceleration_factor: f64,
    pub center_fraction: f64,
    pub seed: u64,
    /// Sorted sampled column indices.
    pub columns: Vec<usize>,
}

impl SamplingMask {
    /// Every column sampled.
    pub fn full(width: usize) -> Self {
        Self {
            width,
            acceleration_factor: 1.0,
            center_fraction: 1.0,
            seed: 0,
            columns: (0..width).collect(),
        }
    }

    pub fn sampled(&self) -> Vec<bool> {
        let mut flags = vec![false; self.width];
        for &c in &self.columns {
            flags[c] = true;
        }
        flags
    }

    pub fn sampled_count(&self) -> usize {
        self.columns.len()
    }

    /// Columns of the always-sampled low-frequency band.
    pub fn center_band(&self) -> std::ops::Range<usize> {
        center_band(self.width, self.center_fraction)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mask: SamplingMask = serde_json::from_str(s)?;
        if mask.columns.iter().any(|&c| c >= mask.width) {
            return Err(Error::InvalidArgument("mask column beyond width".into()));
        }
        Ok(mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

fn center_band(width: usize, center_fraction: f64) -> std::ops::Range<usize> {
    let lines = ((center_fraction * width as f64).round() as usize).min(width);
    let start = (width / 2).saturating_sub(lines / 2).min(width - lines);
    start..start + lines
}

/// Draws a column mask: the centered band plus a uniform random remainder.
pub fn make_mask(
    width: usize,
    acceleration_factor: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<SamplingMask> {
    if width < 8 {
        return Err(Error::InvalidArgument(format!("mask width {width} < 8")));
    }
    if !(acceleration_factor >= 1.0 && acceleration_factor <= width as f64) {
        return Err(Error::InvalidArgument(format!(
            "acceleration factor {acceleration_factor} outside [1, {width}]"
        )));
    }
    if !(center_fraction > 0.0 && center_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "center fraction {center_fraction} outside (0, 1)"
        )));
    }
    let budget = (width as f64 / acceleration_factor).round() as usize;
    let band = center_band(width, center_fraction);
    if budget < band.len() {
        return Err(Error::InvalidArgument(format!(
            "sampling budget {budget} smaller than the {}-column center band",
            band.len()
        )));
    }
    let outside: Vec<usize> = (0..width).filter(|c| !band.contains(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<usize> = band.clone().collect();
    columns.extend(
        sample(&mut rng, outside.len(), budget - band.len())
            .into_iter()
            .map(|i| outside[i]),
    );
    columns.sort_unstable();
    Ok(SamplingMask { width, acceleration_factor, center_fraction, seed, columns })
}

fn shift_index(i: usize, n: usize, inverse: bool) -> usize {
    // fftshift moves i -> i + floor(n/2); ifftshift by ceil(n/2)
    let s = if inverse { n - n / 2 } else { n / 2 };
    (i + s) % n
}

/// Centered orthonormal 2-D DFT over a `2×H×W` buffer.
///
/// `inverse = false` computes `fftshift(fft2(ifftshift(x))) / sqrt(HW)`;
/// `inverse = true` the matching inverse.
pub fn fft2c_planes<T: Scalar>(data: &[T], h: usize, w: usize, inverse: bool) -> Vec<T> {
    let plane = h * w;
    assert_eq!(data.len(), 2 * plane, "fft2c expects a 2×H×W buffer");
    // ifftshift on the way in: buf[shift(i)] = x[i] with the ceil-shift
    let mut buf = vec![Complex::new(T::zero(), T::zero()); plane];
    for y in 0..h {
        let sy = shift_index(y, h, true);
        for x in 0..w {
            let sx = shift_index(x, w, true);
            buf[sy * w + sx] = Complex::new(data[y * w + x], data[plane + y * w + x]);
        }
    }
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(&mut buf);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let scale = T::one() / T::of_f64((plane as f64).sqrt());
    let mut out = vec![T::zero(); 2 * plane];
    for y in 0..h {
        let sy = shift_index(y, h, false);
        for x in 0..w {
            let sx = shift_index(x, w, false);
            let v = buf[y * w + x];
            out[sy * w + sx] = v.re * scale;
            out[plane + sy * w + sx] = v.im * scale;
        }
    }
    out
}

/// Hard projection onto measurement-consistent images:
/// `ifft2c(M·measured + (1-M)·fft2c(pred))`.
///
/// Computed in f64 whatever `T` is, so sampled columns of an f32 output match
/// the measurements to output rounding.
pub fn dc_project<T: Scalar>(
    pred: &[T],
    measured: &[T],
    sampled: &[bool],
    h: usize,
    w: usize,
) -> Vec<T> {
    let wide: Vec<f64> = pred.iter().map(|v| v.as_f64()).collect();
    let mut k = fft2c_planes(&wide, h, w, false);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                if sampled[x] {
                    let i = c * h * w + y * w + x;
                    k[i] = measured[i].as_f64();
                }
            }
        }
    }
    fft2c_planes(&k, h, w, true).into_iter().map(T::of_f64).collect()
}

/// Adjoint (and Jacobian) of [`dc_project`] w.r.t. `pred`:
/// `ifft2c((1-M)·fft2c(g))`.
pub fn dc_adjoint<T: Scalar>(grad: &[T], sampled: &[bool], h: usize, w: usize) -> Vec<T> {
    let wide: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
    let mut k = fft2c_planes(&wide, h, w, false);
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                if sampled[x] {
                    k[c * h * w + y * w + x] = 0.0;
                }
            }
        }
    }
    fft2c_planes(&k, h, w, true).into_iter().map(T::of_f64).collect()
}

pub fn fft2c(img: &ComplexImage) -> KSpace {
    let (h, w) = (img.height(), img.width());
    ComplexImage(
        Tensor::new(&[2, h, w], fft2c_planes(img.tensor().data(), h, w, false))
            .expect("fft2c output shape"),
    )
}

pub fn ifft2c(k: &KSpace) -> ComplexImage {
    let (h, w) = (k.height(), k.width());
    ComplexImage(
        Tensor::new(&[2, h, w], fft2c_planes(k.tensor().data(), h, w, true))
            .expect("ifft2c output shape"),
    )
}

fn check_mask(mask: &SamplingMask, width: usize) -> Result<()> {
    if mask.width != width {
        return Err(Error::Shape(format!(
            "mask width {} does not match image width {width}",
            mask.width
        )));
    }
    Ok(())
}

/// Simulated acquisition `x = F⁻¹(F_D y + ε)`.
///
/// Noise is circular complex Gaussian with `E|ε|² = noise_sigma²`, added on
/// sampled entries only. Returns the zero-filled image and the measured k-space.
pub fn undersample(
    y: &ComplexImage,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<(ComplexImage, KSpace)> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be a nonnegative finite number, got {noise_sigma}"
        )));
    }
    check_mask(mask, y.width())?;
    let (h, w) = (y.height(), y.width());
    let sampled = mask.sampled();
    let mut k = fft2c(y).into_tensor();
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma / std::f64::consts::SQRT_2).expect("valid sigma"))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = k.data_mut();
    for c in 0..2 {
        for row in 0..h {
            for col in 0..w {
                let i = c * h * w + row * w + col;
                if !sampled[col] {
                    data[i] = 0.0;
                } else if let Some(n) = &noise {
                    data[i] += n.sample(&mut rng) as f32;
                }
            }
        }
    }
    let measured = ComplexImage(k);
    Ok((ifft2c(&measured), measured))
}

/// Replaces the sampled k-space columns of `pred` with the measurements.
pub fn data_consistency(
    pred: &ComplexImage,
    measured: &KSpace,
    mask: &SamplingMask,
) -> Result<ComplexImage> {
    if !pred.same_shape(measured) {
        return Err(Error::Shape(format!(
            "prediction {:?} and measurements {:?} disagree",
            pred.tensor().shape(),
            measured.tensor().shape()
        )));
    }
    check_mask(mask, pred.width())?;
    let (h, w) = (pred.height(), pred.width());
    let out = dc_project(pred.tensor().data(), measured.tensor().data(), &mask.sampled(), h, w);
    Ok(ComplexImage(Tensor::new(&[2, h, w], out)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexImage::from_tensor(Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-1.0..1.0)))
            .unwrap()
    }

    /// Direct O(N²) centered DFT used as an independent reference.
    fn naive_fft2c(img: &ComplexImage) -> Vec<(f64, f64)> {
        let (h, w) = (img.height(), img.width());
        let (re, im) = (img.re(), img.im());
        let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
        let mut out = vec![(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((ky as f64 - cy) * (y as f64 - cy) / h as f64
                                + (kx as f64 - cx) * (x as f64 - cx) / w as f64);
                        let (a, b) = (re[y * w + x] as f64, im[y * w + x] as f64);
                        sr += a * ang.cos() - b * ang.sin();
                        si += a * ang.sin() + b * ang.cos();
                    }
                }
                let s = 1.0 / ((h * w) as f64).sqrt();
                out[ky * w + kx] = (sr * s, si * s);
            }
        }
        out
    }

    #[test]
    fn matches_direct_centered_dft() {
        for (h, w) in [(8, 8), (6, 10), (7, 5)] {
            let img = random_image(h, w, 3);
            let k = fft2c(&img);
            let oracle = naive_fft2c(&img);
            for (i, &(r, im)) in oracle.iter().enumerate() {
                assert!((k.re()[i] as f64 - r).abs() < 1e-5, "{h}x{w} re at {i}");
                assert!((k.im()[i] as f64 - im).abs() < 1e-5, "{h}x{w} im at {i}");
            }
        }
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w, c) = (16, 16, 0.75f32);
        let img = ComplexImage::from_parts(h, w, &vec![c; h * w], &vec![0.0; h * w]).unwrap();
        let k = fft2c(&img);
        let center = (h / 2) * w + w / 2;
        let expected = c * ((h * w) as f32).sqrt();
        assert!((k.re()[center] - expected).abs() < 1e-5);
        for (i, (&a, &b)) in k.re().iter().zip(k.im()).enumerate() {
            if i != center {
                assert!(a.abs() < 1e-5 && b.abs() < 1e-5);
            }
        }
    }

    #[test]
    fn odd_sizes_round_trip() {
        let img = random_image(7, 9, 11);
        let back = ifft2c(&fft2c(&img));
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-6);
    }

    #[test]
    fn mask_budget_and_band() {
        let m = make_mask(64, 4.0, 0.08, 1).unwrap();
        assert_eq!(m.sampled_count(), 16);
        assert_eq!(m.center_band(), 30..35);
        let flags = m.sampled();
        assert!(m.center_band().all(|c| flags[c]));
        assert_eq!(make_mask(64, 1.0, 0.08, 9).unwrap().sampled_count(), 64);
        assert_eq!(m, make_mask(64, 4.0, 0.08, 1).unwrap());
        assert_ne!(m.columns, make_mask(64, 4.0, 0.08, 2).unwrap().columns);
    }

    #[test]
    fn mask_rejects_bad_arguments() {
        assert!(make_mask(4, 2.0, 0.08, 0).is_err());
        assert!(make_mask(64, 0.5, 0.08, 0).is_err());
        assert!(make_mask(64, 4.0, 0.5, 0).is_err());
        assert!(make_mask(64, 4.0, 0.0, 0).is_err());
    }

    #[test]
    fn mask_json_schema() {
        let m = make_mask(32, 4.0, 0.1, 5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        for key in ["width", "acceleration_factor", "center_fraction", "seed", "columns"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(SamplingMask::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn undersample_edge_cases() {
        let y = random_image(16, 16, 4);
        let (x, _) = undersample(&y, &SamplingMask::full(16), 0.0, 0).unwrap();
        assert!(x.tensor().max_abs_diff(y.tensor()) < 1e-6);

        let zero = ComplexImage::zeros(16, 16);
        let mask = make_mask(16, 4.0, 0.125, 2).unwrap();
        let (x, k) = undersample(&zero, &mask, 0.0, 0).unwrap();
        assert!(x.tensor().data().iter().all(|&v| v == 0.0));
        assert!(k.tensor().data().iter().all(|&v| v == 0.0));

        let (xn, kn) = undersample(&zero, &mask, 0.1, 7).unwrap();
        assert!(xn.energy() > 0.0);
        let flags = mask.sampled();
        for row in 0..16 {
            for col in 0..16 {
                if !flags[col] {
                    assert_eq!(kn.re()[row * 16 + col], 0.0);
                }
            }
        }
        assert!(undersample(&y, &mask, -1.0, 0).is_err());
        assert!(undersample(&y, &make_mask(32, 4.0, 0.1, 0).unwrap(), 0.0, 0).is_err());
    }

    #[test]
    fn dc_rejects_shape_mismatch() {
        let a = random_image(16, 16, 1);
        let b = random_image(16, 8, 1);
        assert!(data_consistency(&a, &b, &SamplingMask::full(16)).is_err());
    }
}
