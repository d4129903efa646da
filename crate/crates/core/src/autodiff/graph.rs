//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and `backward` walks it once in reverse.

use crate::autodiff::kernels::{self, PatchGeometry};
use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::kspace;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<T> },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `C×H×W` times a `1×H×W` plane broadcast over channels.
    MulPlane { x: Var, plane: Var },
    Concat(Var, Var),
    Narrow { x: Var, start: usize },
    Unfold { x: Var, geo: PatchGeometry },
    Fold { x: Var, geo: PatchGeometry },
    Gather { table: Var, idx: Vec<usize> },
    RowNormalize { x: Var, norms: Vec<T>, clamped: Vec<bool> },
    MatMulNt(Var, Var),
    RowMax { x: Var, arg: Vec<usize> },
    RepeatCols { x: Var },
    DataConsistency { x: Var, sampled: Vec<bool> },
    L1 { pred: Var, target: Var },
    AbsSum(Var),
    Sum(Var),
    Scale { x: Var, alpha: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Single-writer recording tape.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Zero-norm rows are divided by this floor instead of their norm.
pub const NORM_FLOOR: f64 = 1e-8;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, mut cols) = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.needs(&[x, w, b]);
        if !rg {
            cols = Vec::new();
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad, cols }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn mul_plane(&mut self, x: Var, plane: Var) -> Result<Var> {
        let (vx, vp) = (self.value(x), self.value(plane));
        if vx.ndim() != 3 || vp.shape() != [1, vx.dim(1), vx.dim(2)] {
            return Err(Error::Shape(format!(
                "mul_plane: {:?} cannot be gated by {:?}",
                vx.shape(),
                vp.shape()
            )));
        }
        let hw = vx.dim(1) * vx.dim(2);
        let p = vp.data();
        let mut out = vx.clone();
        for chunk in out.data_mut().chunks_mut(hw) {
            for (o, &g) in chunk.iter_mut().zip(p) {
                *o = *o * g;
            }
        }
        let rg = self.needs(&[x, plane]);
        Ok(self.push(out, Op::MulPlane { x, plane }, rg))
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != vb.ndim() || va.shape()[1..] != vb.shape()[1..] {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.dim(0);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(a, b), rg))
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if len == 0 || start + len > vx.dim(0) {
            return Err(Error::Shape(format!(
                "narrow [{start}, {}) out of range for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let inner: usize = vx.shape()[1..].iter().product();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let data = vx.data()[start * inner..(start + len) * inner].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Narrow { x, start }, rg))
    }

    pub fn unfold(&mut self, x: Var, patch: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 {
            return Err(Error::Shape(format!("unfold expects C×H×W, got {:?}", vx.shape())));
        }
        let geo = PatchGeometry::new(vx.dim(1), vx.dim(2), patch, stride)?;
        let out = kernels::unfold_forward(vx, &geo);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Unfold { x, geo }, rg))
    }

    pub fn fold(&mut self, x: Var, geo: PatchGeometry) -> Result<Var> {
        let out = kernels::fold_forward(self.value(x), &geo)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Fold { x, geo }, rg))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = gather_rows_forward(self.value(table), idx)?;
        let rg = self.needs(&[table]);
        Ok(self.push(out, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    /// Scales each row of an `N×D` matrix to unit norm (norm floored at [`NORM_FLOOR`]).
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::Shape(format!("row_normalize expects N×D, got {:?}", vx.shape())));
        }
        let d = vx.dim(1);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.dim(0));
        let mut clamped = Vec::with_capacity(vx.dim(0));
        for row in out.data_mut().chunks_mut(d) {
            let n = row.iter().fold(0f64, |acc, &v| acc + v.as_f64() * v.as_f64()).sqrt();
            let c = !(n > NORM_FLOOR);
            let n = if c { NORM_FLOOR } else { n };
            for v in row.iter_mut() {
                *v = T::of_f64(v.as_f64() / n);
            }
            norms.push(T::of_f64(n));
            clamped.push(c);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::RowNormalize { x, norms, clamped }, rg))
    }

    /// `A·Bᵀ` for `A: M×D`, `B: N×D`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(1) {
            return Err(Error::Shape(format!(
                "matmul_nt: {:?} x {:?}ᵀ",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, d, n) = (va.dim(0), va.dim(1), vb.dim(0));
        // f64 accumulation keeps long cosine dot products exact to ~1e-7 in f32 graphs
        let wide = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>();
        let (wa, wb) = (wide(va), wide(vb));
        let mut acc = vec![0f64; m * n];
        f64::gemm(m, d, n, 1.0, &wa, d as isize, 1, &wb, 1, d as isize, 0.0, &mut acc, n as isize, 1);
        let out: Vec<T> = acc.into_iter().map(T::of_f64).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    /// Per-row maximum of an `N×M` matrix; gradient routes to the lowest-index argmax.
    pub fn row_max(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let vx = self.value(x);
        if vx.ndim() != 2 {
            return Err(Error::Shape(format!("row_max expects N×M, got {:?}", vx.shape())));
        }
        let arg = row_argmax(vx);
        let m = vx.dim(1);
        let vals: Vec<T> = arg.iter().enumerate().map(|(i, &j)| vx.data()[i * m + j]).collect();
        let out = Tensor::new(&[vx.dim(0)], vals)?;
        let rg = self.needs(&[x]);
        let v = self.push(out, Op::RowMax { x, arg: arg.clone() }, rg);
        Ok((v, arg))
    }

    /// `[N]` → `[N, times]`, each row constant.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 1 || times == 0 {
            return Err(Error::Shape(format!("repeat_cols expects a vector, got {:?}", vx.shape())));
        }
        let n = vx.dim(0);
        let mut data = Vec::with_capacity(n * times);
        for &v in vx.data() {
            data.extend(std::iter::repeat(v).take(times));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, times], data)?, Op::RepeatCols { x }, rg))
    }

    /// Hard data-consistency projection of a `2×H×W` image.
    pub fn data_consistency(&mut self, x: Var, measured: &Tensor<T>, sampled: &[bool]) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || vx.dim(0) != 2 || vx.shape() != measured.shape() || sampled.len() != vx.dim(2) {
            return Err(Error::Shape(format!(
                "data_consistency: image {:?}, measurements {:?}, mask width {}",
                vx.shape(),
                measured.shape(),
                sampled.len()
            )));
        }
        let (h, w) = (vx.dim(1), vx.dim(2));
        let out = kspace::dc_project(vx.data(), measured.data(), sampled, h, w);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[2, h, w], out)?, Op::DataConsistency { x, sampled: sampled.to_vec() }, rg))
    }

    /// Mean absolute difference, as a one-element tensor.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(Error::Shape(format!(
                "l1_loss: {:?} vs {:?}",
                vp.shape(),
                vt.shape()
            )));
        }
        let n = T::of_f64(vp.numel() as f64);
        let s = vp.data().iter().zip(vt.data()).fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { pred, target }, rg))
    }

    pub fn abs_sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |acc, &v| acc + v.abs());
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::AbsSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let out = self.value(x).scale(alpha);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale { x, alpha }, rg)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                v.shape()
            )));
        }
        self.backward_with(loss, Tensor::full(v.shape(), T::one()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        seed.check_shape(self.value(out).shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (c_in, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let (c_out, k) = (vw.dim(0), vw.dim(2));
                let (ho, wo) = (g.dim(1), g.dim(2));
                let n = ho * wo;
                let kk = c_in * k * k;
                let gd = g.data();
                if self.nodes[b.0].requires_grad {
                    let db: Vec<T> = gd.chunks(n).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
                    self.accumulate(grads, *b, Tensor::new(&[c_out], db).expect("bias grad"));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); c_out * kk];
                    T::gemm(c_out, n, kk, T::one(), gd, n as isize, 1, cols, 1, n as isize, T::zero(), &mut dw, kk as isize, 1);
                    self.accumulate(grads, *w, Tensor::new(vw.shape(), dw).expect("weight grad"));
                }
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![T::zero(); kk * n];
                    T::gemm(kk, c_out, n, T::one(), vw.data(), 1, kk as isize, gd, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
                    let dx = kernels::col2im(&dcols, c_in, h, wd, k, *stride, *pad, ho, wo);
                    self.accumulate(grads, *x, Tensor::new(vx.shape(), dx).expect("input grad"));
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(vx.data()) {
                    if !(v > T::zero()) {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let prod = |t: &Tensor<T>| {
                    Tensor::new(t.shape(), g.data().iter().zip(t.data()).map(|(&x, &y)| x * y).collect())
                        .expect("mul grad")
                };
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, prod(vb));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, prod(va));
                }
            }
            Op::MulPlane { x, plane } => {
                let (vx, vp) = (self.value(*x), self.value(*plane));
                let hw = vp.numel();
                if self.nodes[x.0].requires_grad {
                    let mut dx = g.clone();
                    for chunk in dx.data_mut().chunks_mut(hw) {
                        for (d, &p) in chunk.iter_mut().zip(vp.data()) {
                            *d = *d * p;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[plane.0].requires_grad {
                    let mut dp = Tensor::zeros(vp.shape());
                    for (gc, xc) in g.data().chunks(hw).zip(vx.data().chunks(hw)) {
                        for ((d, &gv), &xv) in dp.data_mut().iter_mut().zip(gc).zip(xc) {
                            *d = *d + gv * xv;
                        }
                    }
                    self.accumulate(grads, *plane, dp);
                }
            }
            Op::Concat(a, b) => {
                let va = self.value(*a);
                let split = va.numel();
                let da = Tensor::new(va.shape(), g.data()[..split].to_vec()).expect("concat grad");
                let db = Tensor::new(self.value(*b).shape(), g.data()[split..].to_vec()).expect("concat grad");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Narrow { x, start } => {
                let vx = self.value(*x);
                let inner: usize = vx.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(vx.shape());
                dx.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::Unfold { x, geo } => {
                let vx = self.value(*x);
                let dx = kernels::fold_sum(g.data(), vx.dim(0), geo);
                self.accumulate(grads, *x, Tensor::new(vx.shape(), dx).expect("unfold grad"));
            }
            Op::Fold { x, geo } => {
                let c = g.dim(0);
                let cover = geo.coverage();
                let plane = geo.height * geo.width;
                let mut scaled = g.clone();
                for ch in 0..c {
                    for (v, &n) in scaled.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(&cover) {
                        if n > 0 {
                            *v = *v / T::of_f64(n as f64);
                        }
                    }
                }
                self.accumulate(grads, *x, kernels::unfold_forward(&scaled, geo));
            }
            Op::Gather { table, idx } => {
                let vt = self.value(*table);
                let m = vt.dim(1);
                let mut dt = Tensor::zeros(vt.shape());
                for (row, &j) in idx.iter().enumerate() {
                    let src = &g.data()[row * m..(row + 1) * m];
                    for (d, &v) in dt.data_mut()[j * m..(j + 1) * m].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::RowNormalize { x, norms, clamped } => {
                let y = &node.value;
                let d = y.dim(1);
                let mut dx = g.clone();
                for (r, row) in dx.data_mut().chunks_mut(d).enumerate() {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let n = norms[r];
                    if clamped[r] {
                        for v in row.iter_mut() {
                            *v = *v / n;
                        }
                    } else {
                        let dot = row.iter().zip(yr).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                        for (v, &yv) in row.iter_mut().zip(yr) {
                            *v = (*v - yv * dot) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, d, n) = (va.dim(0), va.dim(1), vb.dim(0));
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![T::zero(); m * d];
                    T::gemm(m, n, d, T::one(), g.data(), n as isize, 1, vb.data(), d as isize, 1, T::zero(), &mut da, d as isize, 1);
                    self.accumulate(grads, *a, Tensor::new(&[m, d], da).expect("matmul grad"));
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![T::zero(); n * d];
                    T::gemm(n, m, d, T::one(), g.data(), 1, n as isize, va.data(), d as isize, 1, T::zero(), &mut db, d as isize, 1);
                    self.accumulate(grads, *b, Tensor::new(&[n, d], db).expect("matmul grad"));
                }
            }
            Op::RowMax { x, arg } => {
                let vx = self.value(*x);
                let m = vx.dim(1);
                let mut dx = Tensor::zeros(vx.shape());
                for (i, &j) in arg.iter().enumerate() {
                    dx.data_mut()[i * m + j] = g.data()[i];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RepeatCols { x } => {
                let times = g.dim(1);
                let dx: Vec<T> = g.data().chunks(times).map(|r| r.iter().fold(T::zero(), |a, &v| a + v)).collect();
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape(), dx).expect("repeat grad"));
            }
            Op::DataConsistency { x, sampled } => {
                let (h, w) = (g.dim(1), g.dim(2));
                let dx = kspace::dc_adjoint(g.data(), sampled, h, w);
                self.accumulate(grads, *x, Tensor::new(g.shape(), dx).expect("dc grad"));
            }
            Op::L1 { pred, target } => {
                let (vp, vt) = (self.value(*pred), self.value(*target));
                let scale = g.data()[0] / T::of_f64(vp.numel() as f64);
                let dp = Tensor::new(
                    vp.shape(),
                    vp.data().iter().zip(vt.data()).map(|(&a, &b)| sign(a - b) * scale).collect(),
                )
                .expect("l1 grad");
                if self.nodes[target.0].requires_grad {
                    self.accumulate(grads, *target, dp.scale(-T::one()));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::AbsSum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| sign(v) * s));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::Scale { x, alpha } => {
                self.accumulate(grads, *x, g.scale(*alpha));
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Lowest-index argmax of each row.
pub fn row_argmax<T: Scalar>(x: &Tensor<T>) -> Vec<usize> {
    let m = x.dim(1);
    x.data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn gather_rows_forward<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if table.ndim() != 2 {
        return Err(Error::Shape(format!("gather_rows expects N×M, got {:?}", table.shape())));
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument("gather_rows needs at least one index".into()));
    }
    let (n, m) = (table.dim(0), table.dim(1));
    let mut out = Vec::with_capacity(idx.len() * m);
    for &j in idx {
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        out.extend_from_slice(&table.data()[j * m..(j + 1) * m]);
    }
    Tensor::new(&[idx.len(), m], out)
}
