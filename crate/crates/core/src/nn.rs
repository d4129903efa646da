//! Named parameter storage and the convolution layer used by every network.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Scalar, Tensor, TensorBundle, Var};
use crate::error::{Error, Result};

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: Params<T>) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(n, t);
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.insert(n.clone(), t.cast());
        }
        out
    }

    /// Records every tensor on `g`; `trainable` selects differentiable leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Handles for tensors already recorded in parameter order, e.g. by a
    /// gradient checker.
    pub fn with_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(Error::Shape(format!("{} handles for {} parameters", vars.len(), self.len())));
        }
        Ok(Bound { vars: vars.to_vec(), index: self.index.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl Params<f32> {
    pub fn to_bundle(&self, prefix: &str, bundle: &mut TensorBundle) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            bundle.insert_f32(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Reads back tensors named like `template` (same order and shapes).
    pub fn from_bundle(template: &Params<f32>, prefix: &str, bundle: &TensorBundle) -> Result<Self> {
        let mut out = Params::new();
        for (n, t) in template.names.iter().zip(&template.tensors) {
            let key = format!("{prefix}{n}");
            let loaded = bundle.f32(&key)?;
            loaded.check_shape(t.shape(), &key)?;
            out.insert(n.clone(), loaded.clone());
        }
        Ok(out)
    }
}

/// Graph handles for a bound [`Params`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// 2-D convolution layer description; tensors live in a [`Params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Stride 1, "same" padding for odd kernels.
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn init<T: Scalar>(&self, params: &mut Params<T>, rng: &mut ChaCha8Rng) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let shape = [self.c_out, self.c_in, self.kernel, self.kernel];
        let w = Tensor::from_fn(&shape, |_| T::of_f64(rng.gen_range(-bound..bound)));
        params.insert(self.weight_name(), w);
        params.insert(self.bias_name(), Tensor::zeros(&[self.c_out]));
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&self.weight_name())?;
        let b = p.var(&self.bias_name())?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child seed: SplitMix64 finalizer folded over `parts`.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
