mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cosine_oracle, rand_image, rand_tensor, scatter_average_oracle};
use ttm_core::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use ttm_core::autodiff::{PatchGeometry, Tensor};
use ttm_core::nn::Params;
use ttm_core::ttm::{
    extract_features, hard_attention, relevance, soft_attention, soft_map, synthesize, transfer, ttm_forward,
    AttentionMode, Ttm, TtmConfig,
};

#[test]
fn relevance_hard_soft_and_transfer_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (c, size) in [(1, 16), (3, 32), (8, 24), (16, 64)] {
        let geo = PatchGeometry::new(size, size, 16, 8).unwrap();
        let (q, k, v) = (
            rand_tensor(&mut rng, &[c, size, size]),
            rand_tensor(&mut rng, &[c, size, size]),
            rand_tensor(&mut rng, &[c, size, size]),
        );
        let r = relevance(&q, &k, 16, 8).unwrap();
        let n = geo.count();
        assert_eq!(r.scores.shape(), [n, n]);
        let oracle = cosine_oracle(&q, &k, &geo);
        for (a, b) in r.scores.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
        let hard = hard_attention(&r);
        let soft = soft_attention(&r);
        for i in 0..n {
            let row = &r.scores.data()[i * n..(i + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            assert_eq!(hard[i], best);
            assert_eq!(soft[i], row[best]);
        }
        let t = transfer(&v, &hard, 16, 8).unwrap();
        for (a, b) in t.data().iter().zip(scatter_average_oracle(&v, &hard, &geo)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}

#[test]
fn argmax_ties_take_lowest_index() {
    let r = ttm_core::ttm::RelevanceMatrix {
        scores: Tensor::new(&[2, 3], vec![0.2, 0.9, 0.9, 0.5, 0.5, 0.5]).unwrap(),
        geometry: PatchGeometry::new(16, 16, 16, 8).unwrap(),
    };
    assert_eq!(hard_attention(&r), vec![1, 0]);
    assert_eq!(soft_attention(&r), vec![0.9, 0.5]);
}

#[test]
fn identical_query_and_key_give_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = rand_tensor(&mut rng, &[4, 32, 32]);
    let r = relevance(&q, &q, 16, 8).unwrap();
    let n = r.scores.dim(0);
    for i in 0..n {
        assert!((r.scores[i * n + i] - 1.0).abs() < 1e-6);
    }
    assert_eq!(hard_attention(&r), (0..n).collect::<Vec<_>>());
}

#[test]
fn orthogonal_patches_score_zero() {
    let mut q = Tensor::zeros(&[2, 32, 32]);
    let mut k = Tensor::zeros(&[2, 32, 32]);
    for i in 0..1024 {
        q[i] = 1.0 + (i % 7) as f32;
        k[1024 + i] = 2.0 - (i % 5) as f32 * 0.1;
    }
    let r = relevance(&q, &k, 16, 16).unwrap();
    assert!(r.scores.data().iter().all(|&s| s == 0.0));
}

#[test]
fn relevance_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[3, 32, 32]);
    let k = rand_tensor(&mut rng, &[3, 32, 32]);
    let base = relevance(&q, &k, 16, 8).unwrap();
    let scaled = relevance(&q.scale(7.5), &k.scale(0.02), 16, 8).unwrap();
    assert!(base.scores.max_abs_diff(&scaled.scores) < 1e-6);
}

#[test]
fn zero_patches_use_the_norm_floor() {
    let q = Tensor::<f32>::zeros(&[1, 16, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = rand_tensor(&mut rng, &[1, 16, 16]);
    let r = relevance(&q, &k, 16, 8).unwrap();
    assert_eq!(r.scores.data(), &[0.0]);
}

#[test]
fn relevance_rejects_bad_geometry() {
    let q = Tensor::<f32>::zeros(&[1, 20, 20]);
    assert!(relevance(&q, &q, 16, 8).is_err());
    let small = Tensor::<f32>::zeros(&[1, 8, 8]);
    assert!(relevance(&small, &small, 16, 8).is_err());
    let q = Tensor::<f32>::zeros(&[1, 32, 32]);
    let k = Tensor::<f32>::zeros(&[2, 32, 32]);
    assert!(relevance(&q, &k, 16, 8).is_err());
}

fn small_ttm(mode: AttentionMode) -> Ttm {
    Ttm::new(TtmConfig { extractor_widths: vec![6, 8], mode, ..TtmConfig::default() }).unwrap()
}

#[test]
fn self_reference_recovers_identity_with_unit_confidence() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ttm = small_ttm(AttentionMode::Full);
    for trial in 0..5 {
        let mut p = Params::new();
        ttm.init(&mut p, trial);
        let x = rand_image(&mut rng, 32, 32);
        let y_ref = rand_image(&mut rng, 32, 32);
        let (_, attn) = ttm_forward(&x, &x, &y_ref, &ttm, &p).unwrap();
        assert_eq!(attn.hard, (0..attn.geometry.count()).collect::<Vec<_>>());
        assert!(attn.soft.iter().all(|s| (s - 1.0).abs() <= 1e-6));
    }
}

#[test]
fn closed_gate_returns_query_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ttm = small_ttm(AttentionMode::Full);
    let mut p = Params::new();
    ttm.init(&mut p, 1);
    let f = rand_tensor(&mut rng, &[8, 32, 32]);
    let t = rand_tensor(&mut rng, &[8, 32, 32]);
    let n = PatchGeometry::new(32, 32, 16, 8).unwrap().count();
    let z = synthesize(&f, &t, &vec![0.0; n], &ttm, &p).unwrap();
    assert_eq!(z, f);

    for name in p.names().to_vec() {
        if name.starts_with("ttm.fusion") {
            let t = p.get_mut(&name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
    let soft: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    assert_eq!(synthesize(&f, &t, &soft, &ttm, &p).unwrap(), f);
}

#[test]
fn soft_map_is_constant_for_constant_scores() {
    let geo = PatchGeometry::new(32, 32, 16, 8).unwrap();
    let m = soft_map(&vec![0.7; geo.count()], geo).unwrap();
    assert_eq!(m.shape(), [1, 32, 32]);
    assert!(m.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
}

#[test]
fn forward_shapes_and_ablation_surgery() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, xr, yr) = (rand_image(&mut rng, 32, 48), rand_image(&mut rng, 32, 48), rand_image(&mut rng, 32, 48));
    for mode in [AttentionMode::Full, AttentionMode::HardOnly, AttentionMode::SoftOnly] {
        let ttm = small_ttm(mode);
        let mut p = Params::new();
        ttm.init(&mut p, 4);
        let (out, attn) = ttm_forward(&x, &xr, &yr, &ttm, &p).unwrap();
        assert_eq!((out.height(), out.width()), (32, 48));
        assert_eq!(attn.geometry.count(), 3 * 5);
        assert_eq!(attn.relevance.shape(), [15, 15]);
        assert_eq!(attn.soft_map.shape(), [1, 32, 48]);
        let sc = attn.sidecar();
        assert_eq!((sc.patch, sc.stride, sc.grid), (16, 8, [3, 5]));
        let b = attn.to_bundle();
        assert_eq!(b.names().collect::<Vec<_>>(), ["r", "h", "s", "S_map"]);
        let feats = extract_features(&x, &ttm, &p).unwrap();
        assert_eq!(feats.shape(), [8, 32, 48]);
    }
    let ttm = small_ttm(AttentionMode::Full);
    let mut p = Params::new();
    ttm.init(&mut p, 4);
    let odd = rand_image(&mut rng, 30, 32);
    assert!(ttm_forward(&odd, &odd, &odd, &ttm, &p).is_err());
    let other = rand_image(&mut rng, 32, 32);
    let base = rand_image(&mut rng, 32, 48);
    assert!(ttm_forward(&base, &other, &base, &ttm, &p).is_err());
}

#[test]
fn default_layout_sizes() {
    let ttm = Ttm::new(TtmConfig::default()).unwrap();
    assert_eq!(ttm.cfg.feature_channels(), 64);
    assert_eq!((ttm.cfg.patch, ttm.cfg.stride), (16, 8));
    // 2->64 then three 64->64 3x3 blocks, 3x3 fusion 128->64, 3x3 output 64->2
    let expected = (2 * 64 * 9 + 64) + 3 * (64 * 64 * 9 + 64) + (128 * 64 * 9 + 64) + (64 * 2 * 9 + 2);
    assert_eq!(ttm.param_count(), expected);
    let compact = Ttm::new(TtmConfig::compact()).unwrap();
    assert_eq!(compact.cfg.feature_channels(), 64);
    assert!(compact.param_count() < ttm.param_count() / 2);
    assert!(Ttm::new(TtmConfig { extractor_widths: vec![], ..TtmConfig::default() }).is_err());
}

fn grad_setup(mode: AttentionMode) -> (Ttm, Params<f64>, Vec<Tensor<f64>>) {
    let ttm = Ttm::new(TtmConfig {
        extractor_widths: vec![3, 4],
        patch: 4,
        stride: 2,
        mode,
        ..TtmConfig::default()
    })
    .unwrap();
    let mut p = Params::<f64>::new();
    ttm.init(&mut p, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let imgs = (0..3).map(|_| Tensor::from_fn(&[2, 8, 8], |_| rng.gen_range(-1.0..1.0))).collect();
    (ttm, p, imgs)
}

#[test]
fn texture_transformer_gradients_match_finite_differences() {
    for mode in [AttentionMode::Full, AttentionMode::HardOnly, AttentionMode::SoftOnly] {
        let (ttm, p, imgs) = grad_setup(mode);
        let mut inputs = p.tensors().to_vec();
        inputs.extend(imgs);
        let np = p.len();
        let report = check_gradients(
            &inputs,
            |g, vars| {
                let bound = p.with_vars(&vars[..np])?;
                let trace = ttm.forward(g, &bound, vars[np], vars[np + 1], vars[np + 2])?;
                Ok(g.abs_sum(trace.x_prime))
            },
            &GradCheckOptions { max_coords: 12, ..GradCheckOptions::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{mode:?}: {report:?}");
        assert!(report.probed > 0);
    }
}

#[test]
fn extractor_and_synthesis_gradients_match_finite_differences() {
    let (ttm, p, imgs) = grad_setup(AttentionMode::Full);
    let np = p.len();
    let mut inputs = p.tensors().to_vec();
    inputs.push(imgs[0].clone());
    let report = check_gradients(
        &inputs,
        |g, vars| {
            let bound = p.with_vars(&vars[..np])?;
            let f = ttm.extract(g, &bound, vars[np])?;
            Ok(g.abs_sum(f))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "extractor: {report:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inputs = p.tensors().to_vec();
    inputs.push(Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0)));
    inputs.push(Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0)));
    inputs.push(Tensor::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0)));
    let report = check_gradients(
        &inputs,
        |g, vars| {
            let bound = p.with_vars(&vars[..np])?;
            let z = ttm.synthesize(g, &bound, vars[np], vars[np + 1], vars[np + 2])?;
            Ok(g.abs_sum(z))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "synthesis: {report:?}");
}
