//! Central finite-difference checks for recorded graphs (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative one-sided disagreement taken as a kink within the step.
const SMOOTH_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Smallest half step tried. Below `step`, the step shrinks tenfold while
    /// the one-sided differences disagree, which happens when a ReLU or l1
    /// kink lies within the step.
    pub min_step: f64,
    /// Differences below this magnitude count as agreement.
    pub abs_floor: f64,
    /// Coordinates probed per input tensor (all when the tensor is smaller).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-6, min_step: 1e-6, abs_floor: 1e-8, max_coords: 24, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)` over probed
    /// coordinates whose absolute difference exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probed: usize,
    /// Coordinates whose one-sided differences still disagreed at the
    /// smallest step. They are compared like the rest.
    pub kinks: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Every input is recorded as a differentiable leaf.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, probed: 0, kinks: 0 };
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = if x.numel() <= opts.max_coords {
            (0..x.numel()).collect()
        } else {
            sample(&mut rng, x.numel(), opts.max_coords).into_vec()
        };
        for c in coords {
            let orig = x[c];
            let mut step = opts.step;
            let mut centre = None;
            let numeric = loop {
                probe[i][c] = orig + step;
                let plus = eval(&probe)?;
                probe[i][c] = orig - step;
                let minus = eval(&probe)?;
                probe[i][c] = orig;
                if opts.min_step >= opts.step {
                    break (plus - minus) / (2.0 * step);
                }
                let at = match centre {
                    Some(v) => v,
                    None => *centre.insert(eval(&probe)?),
                };
                let (fwd, bwd) = ((plus - at) / step, (at - minus) / step);
                let smooth = (fwd - bwd).abs() <= SMOOTH_TOL * fwd.abs().max(bwd.abs()) + opts.abs_floor;
                if smooth || step / 10.0 < opts.min_step {
                    report.kinks += usize::from(!smooth);
                    break (plus - minus) / (2.0 * step);
                }
                step /= 10.0;
            };
            let a = analytic[c];
            let diff = (a - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(diff);
            if diff > opts.abs_floor {
                report.max_rel_err = report.max_rel_err.max(diff / a.abs().max(numeric.abs()));
            }
            report.probed += 1;
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t[0])
}
