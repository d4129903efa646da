//! Finite-difference checks for every differentiable op and the full loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttm_core::autodiff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use ttm_core::autodiff::{Graph, PatchGeometry, Tensor, Var};
use ttm_core::backbone::{CascadeConfig, Model, Strategy, StrategyConfig};
use ttm_core::data::{build_dataset, MaskConfig, PhantomConfig, SplitCounts, SplitManifest};
use ttm_core::kspace::make_mask;
use ttm_core::nn::Params;
use ttm_core::train::{train, TrainConfig, TrainOutput};
use ttm_core::ttm::{AttentionMode, Ttm, TtmConfig};
use ttm_core::Result;

pub const OP_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;

pub struct Check {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.probed > 0 && self.report.max_rel_err < self.tol
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `v` with a fixed random tensor so every output entry matters.
fn probe(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(v), &mut rng));
    let z = g.mul(v, w)?;
    Ok(g.sum(z))
}

fn run<F>(out: &mut Vec<Check>, name: &str, tol: f64, inputs: Vec<Tensor<f64>>, coords: usize, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    run_with(out, name, tol, inputs, GradCheckOptions { max_coords: coords, ..GradCheckOptions::default() }, f)
}

fn run_with<F>(out: &mut Vec<Check>, name: &str, tol: f64, inputs: Vec<Tensor<f64>>, opts: GradCheckOptions, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(&inputs, f, &opts).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push(Check { name: name.into(), report, tol });
}

pub fn op_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let r = &mut rng;

    run(&mut out, "conv2d", OP_TOL, vec![random(&[3, 7, 6], r), random(&[4, 3, 3, 3], r), random(&[4], r)], 40, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        probe(g, y, 1)
    });
    run(&mut out, "conv2d stride 2", OP_TOL, vec![random(&[2, 9, 9], r), random(&[3, 2, 3, 3], r), random(&[3], r)], 40, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        probe(g, y, 2)
    });
    // keep probes clear of the kink
    let x = random(&[3, 5, 5], r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    run(&mut out, "relu", OP_TOL, vec![x], 75, |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 3)
    });
    run(&mut out, "unfold", OP_TOL, vec![random(&[2, 10, 10], r)], 60, |g, v| {
        let y = g.unfold(v[0], 4, 3)?;
        probe(g, y, 4)
    });
    let geo = PatchGeometry::new(10, 10, 4, 3).unwrap();
    run(&mut out, "fold", OP_TOL, vec![random(&[geo.count(), 2 * 16], r)], 60, move |g, v| {
        let y = g.fold(v[0], geo)?;
        probe(g, y, 5)
    });
    run(&mut out, "gather", OP_TOL, vec![random(&[5, 6], r)], 30, |g, v| {
        let y = g.gather_rows(v[0], &[4, 0, 4, 2, 2, 1])?;
        probe(g, y, 6)
    });
    run(&mut out, "relevance", OP_TOL, vec![random(&[5, 12], r), random(&[7, 12], r)], 40, |g, v| {
        let a = g.row_normalize(v[0])?;
        let b = g.row_normalize(v[1])?;
        let s = g.matmul_nt(a, b)?;
        probe(g, s, 7)
    });
    run(&mut out, "max routing", OP_TOL, vec![random(&[6, 9], r)], 54, |g, v| {
        let (m, _) = g.row_max(v[0])?;
        let rep = g.repeat_cols(m, 3)?;
        probe(g, rep, 8)
    });
    run(&mut out, "concat, narrow, gate", OP_TOL, vec![random(&[2, 5, 5], r), random(&[3, 5, 5], r), random(&[1, 5, 5], r)], 40, |g, v| {
        let c = g.concat(v[0], v[1])?;
        let n = g.narrow(c, 1, 3)?;
        let z = g.mul_plane(n, v[2])?;
        probe(g, z, 9)
    });
    let mask = make_mask(12, 3.0, 0.1, 4).unwrap();
    let measured = random(&[2, 10, 12], r);
    run(&mut out, "data consistency", OP_TOL, vec![random(&[2, 10, 12], r)], 60, move |g, v| {
        let y = g.data_consistency(v[0], &measured, &mask.sampled())?;
        probe(g, y, 10)
    });
    run(&mut out, "l1 loss", OP_TOL, vec![random(&[2, 4, 4], r), random(&[2, 4, 4], r)], 32, |g, v| g.l1_loss(v[0], v[1]));

    let ttm = small_ttm(AttentionMode::Full);
    let mut p = Params::<f64>::new();
    ttm.init(&mut p, 9);
    let np = p.len();
    let mut inputs = p.tensors().to_vec();
    inputs.extend([random(&[4, 8, 8], r), random(&[4, 8, 8], r), random(&[1, 8, 8], r).map(|v| 0.5 + 0.5 * v)]);
    run(&mut out, "synthesis", OP_TOL, inputs, 16, |g, v| {
        let bound = p.with_vars(&v[..np])?;
        let z = ttm.synthesize(g, &bound, v[np], v[np + 1], v[np + 2])?;
        probe(g, z, 11)
    });
    for mode in [AttentionMode::Full, AttentionMode::HardOnly, AttentionMode::SoftOnly] {
        let ttm = small_ttm(mode);
        let mut p = Params::<f64>::new();
        ttm.init(&mut p, 12);
        let np = p.len();
        let mut inputs = p.tensors().to_vec();
        inputs.extend((0..3).map(|_| random(&[2, 8, 8], r)));
        run(&mut out, &format!("texture transformer {mode:?}"), OP_TOL, inputs, 12, |g, v| {
            let bound = p.with_vars(&v[..np])?;
            let trace = ttm.forward(g, &bound, v[np], v[np + 1], v[np + 2])?;
            probe(g, trace.x_prime, 13)
        });
    }
    out
}

fn small_ttm(mode: AttentionMode) -> Ttm {
    Ttm::new(TtmConfig { extractor_widths: vec![3, 4], patch: 4, stride: 2, mode, ..TtmConfig::default() }).unwrap()
}

/// Batch l1 loss of every strategy on noisy phantom data, checked a few steps
/// into training. Noiseless column undersampling leaves background rows exactly
/// zero and zero biases park ReLUs there, both on a kink.
pub fn loss_checks() -> Vec<Check> {
    let counts = SplitCounts { train: 2, val: 1, reference: 3, test: 1 };
    let m = SplitManifest::new(counts, PhantomConfig { size: 32, ..PhantomConfig::default() }, 3).unwrap();
    let data = build_dataset(&m, &MaskConfig::default(), 5).unwrap();
    let mut out = Vec::new();
    for s in Strategy::ALL {
        let mut cfg = StrategyConfig::new(s);
        cfg.cascade = CascadeConfig { n_cascades: 2, hidden: 4, layers: 3, kernel: 3 };
        if let Some(t) = &mut cfg.ttm {
            *t = TtmConfig { extractor_widths: vec![4, 4], mode: t.mode, ..TtmConfig::default() };
        }
        let tcfg = TrainConfig { epochs: 2, batch_size: 2, max_steps: Some(3), ..TrainConfig::desk(cfg, 1) };
        let (ckpt, _) = train(&tcfg, &data, &TrainOutput::default()).unwrap();
        let model: Model = ckpt.model().unwrap();
        let p: Params<f64> = ckpt.params.cast();
        let np = p.len();
        let batch = &data.train;
        let opts = GradCheckOptions { max_coords: 6, min_step: 1e-9, ..GradCheckOptions::default() };
        run_with(&mut out, &format!("{s} batch loss"), LOSS_TOL, p.tensors().to_vec(), opts, |g, vars| {
            let bound = p.with_vars(&vars[..np])?;
            let mut total = None;
            for smp in batch {
                let sv = model.bind_sample(g, smp)?;
                let o = model.forward(g, &bound, &sv)?;
                let target = g.constant(smp.y.tensor().cast());
                let l = g.l1_loss(o.y, target)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            Ok(g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64))
        });
    }
    out
}
