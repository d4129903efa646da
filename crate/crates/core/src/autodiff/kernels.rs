//! Forward kernels shared by the pure operator API and the recording [`Graph`](super::Graph).

use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a patch grid laid over an `H×W` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if patch == 0 || stride == 0 {
            return Err(Error::Geometry("patch and stride must be positive".into()));
        }
        if height < patch || width < patch {
            return Err(Error::Geometry(format!(
                "{height}x{width} plane is smaller than patch {patch}"
            )));
        }
        if stride > patch {
            return Err(Error::Geometry(format!(
                "stride {stride} larger than patch {patch} leaves uncovered pixels"
            )));
        }
        if (height - patch) % stride != 0 || (width - patch) % stride != 0 {
            return Err(Error::Geometry(format!(
                "patch {patch} with stride {stride} does not tile {height}x{width}"
            )));
        }
        Ok(Self { height, width, patch, stride })
    }

    pub fn rows(&self) -> usize {
        (self.height - self.patch) / self.stride + 1
    }

    pub fn cols(&self) -> usize {
        (self.width - self.patch) / self.stride + 1
    }

    pub fn count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Number of patches covering each pixel, row-major over the plane.
    pub fn coverage(&self) -> Vec<u32> {
        let mut cover = vec![0u32; self.height * self.width];
        for pr in 0..self.rows() {
            for pc in 0..self.cols() {
                for dy in 0..self.patch {
                    let row = (pr * self.stride + dy) * self.width + pc * self.stride;
                    for c in &mut cover[row..row + self.patch] {
                        *c += 1;
                    }
                }
            }
        }
        cover
    }
}

pub(crate) fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::Shape(format!(
            "padded extent {padded} smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Lowers `C×H×W` into a `(C·k·k)×(H'·W')` column matrix with zero padding.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        // contiguous run of valid columns
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(wo);
                        if lo < hi {
                            let start = lo + kx - pad;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `C×H×W` buffer.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let n = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if input.ndim() != 3 {
        return Err(Error::Shape(format!(
            "conv2d input must be C×H×W, got {:?}",
            input.shape()
        )));
    }
    if weight.ndim() != 4 || weight.dim(2) != weight.dim(3) {
        return Err(Error::Shape(format!(
            "conv2d weight must be C_out×C_in×k×k, got {:?}",
            weight.shape()
        )));
    }
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, k) = (weight.dim(0), weight.dim(2));
    if weight.dim(1) != c_in {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c_in} channels, weight {:?} expects {}",
            weight.shape(),
            weight.dim(1)
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Shape(format!(
            "conv2d bias must have shape [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    let ho = conv_out_size(h, k, stride, pad)?;
    let wo = conv_out_size(w, k, stride, pad)?;
    Ok(ConvDims { c_in, c_out, h, w, k, ho, wo })
}

/// Convolution forward; returns the output and the lowered input columns.
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = conv_dims(input, weight, bias, stride, pad)?;
    let n = d.ho * d.wo;
    let kk = d.c_in * d.k * d.k;
    let cols = im2col(input.data(), d.c_in, d.h, d.w, d.k, stride, pad, d.ho, d.wo);
    let mut out = vec![T::zero(); d.c_out * n];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(b);
    }
    T::gemm(
        d.c_out,
        kk,
        n,
        T::one(),
        weight.data(),
        kk as isize,
        1,
        &cols,
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    Ok((Tensor::new(&[d.c_out, d.ho, d.wo], out)?, cols))
}

pub(crate) fn unfold_forward<T: Scalar>(x: &Tensor<T>, geo: &PatchGeometry) -> Tensor<T> {
    let c = x.dim(0);
    let p = geo.patch;
    let row_len = c * p * p;
    let mut out = Vec::with_capacity(geo.count() * row_len);
    let data = x.data();
    for pr in 0..geo.rows() {
        for pc in 0..geo.cols() {
            for ci in 0..c {
                for dy in 0..p {
                    let start = ci * geo.height * geo.width
                        + (pr * geo.stride + dy) * geo.width
                        + pc * geo.stride;
                    out.extend_from_slice(&data[start..start + p]);
                }
            }
        }
    }
    Tensor::new(&[geo.count(), row_len], out).expect("unfold output shape")
}

/// Scatter-add of patch rows into a `C×H×W` plane (no averaging).
pub(crate) fn fold_sum<T: Scalar>(patches: &[T], c: usize, geo: &PatchGeometry) -> Vec<T> {
    let p = geo.patch;
    let row_len = c * p * p;
    let mut out = vec![T::zero(); c * geo.height * geo.width];
    for pr in 0..geo.rows() {
        for pc in 0..geo.cols() {
            let row = &patches[(pr * geo.cols() + pc) * row_len..][..row_len];
            for ci in 0..c {
                for dy in 0..p {
                    let start = ci * geo.height * geo.width
                        + (pr * geo.stride + dy) * geo.width
                        + pc * geo.stride;
                    let src = &row[(ci * p + dy) * p..][..p];
                    for (o, &v) in out[start..start + p].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn fold_channels(row_len: usize, geo: &PatchGeometry) -> Result<usize> {
    let pp = geo.patch * geo.patch;
    if row_len % pp != 0 {
        return Err(Error::Geometry(format!(
            "patch row length {row_len} is not a multiple of {pp}"
        )));
    }
    Ok(row_len / pp)
}

pub(crate) fn fold_forward<T: Scalar>(patches: &Tensor<T>, geo: &PatchGeometry) -> Result<Tensor<T>> {
    if patches.ndim() != 2 || patches.dim(0) != geo.count() {
        return Err(Error::Geometry(format!(
            "fold expects {} patch rows, got shape {:?}",
            geo.count(),
            patches.shape()
        )));
    }
    let c = fold_channels(patches.dim(1), geo)?;
    let mut out = fold_sum(patches.data(), c, geo);
    let cover = geo.coverage();
    let plane = geo.height * geo.width;
    for ci in 0..c {
        for (v, &n) in out[ci * plane..(ci + 1) * plane].iter_mut().zip(&cover) {
            if n > 0 {
                *v = *v / T::of_f64(n as f64);
            }
        }
    }
    Tensor::new(&[c, geo.height, geo.width], out)
}
