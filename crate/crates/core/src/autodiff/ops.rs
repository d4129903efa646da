//! Graph-free forward operators.

use crate::autodiff::graph::gather_rows_forward;
use crate::autodiff::kernels::{self, PatchGeometry};
use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Cross-correlation with zero padding: `C_in×H×W` → `C_out×H'×W'`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    Ok(kernels::conv2d_forward(input, weight, bias, stride, padding)?.0)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// `C×H×W` → `N×(C·p·p)` patch rows in row-major grid order.
pub fn unfold<T: Scalar>(input: &Tensor<T>, patch: usize, stride: usize) -> Result<Tensor<T>> {
    if input.ndim() != 3 {
        return Err(Error::Shape(format!("unfold expects C×H×W, got {:?}", input.shape())));
    }
    let geo = PatchGeometry::new(input.dim(1), input.dim(2), patch, stride)?;
    Ok(kernels::unfold_forward(input, &geo))
}

/// Inverse of [`unfold`]; overlapping contributions are averaged.
pub fn fold<T: Scalar>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let geo = PatchGeometry::new(height, width, patch, stride)?;
    kernels::fold_forward(patches, &geo)
}

pub fn gather_rows<T: Scalar>(table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    gather_rows_forward(table, indices)
}

/// Mean absolute elementwise difference.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "l1_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let s = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
    Ok(s / T::of_f64(pred.numel() as f64))
}
