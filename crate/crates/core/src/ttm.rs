//! Texture transformer module.
//!
//! Features of the under-sampled input (queries), the under-sampled reference
//! (keys) and the fully-sampled reference (values) come from one learnable
//! extractor. Patch-wise cosine relevance between queries and keys selects,
//! for every query patch, the most relevant value patch (hard attention) and a
//! confidence score (soft attention). Selected value patches are folded into a
//! transferred-texture map `T`, fused with the query features `F`, gated by the
//! folded confidence map and added back to `F`; a final convolution maps the
//! result to a two-channel synthesized input `x′`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, PatchGeometry, Scalar, Tensor, TensorBundle, Var};
use crate::error::{Error, Result};
use crate::kspace::ComplexImage;
use crate::nn::{seeded_rng, Bound, Conv, Params};

/// Which attention branches are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Hard transfer and soft gating.
    #[default]
    Full,
    /// Transfer only; the confidence map is forced to 1.
    HardOnly,
    /// Gating only; transferred textures are forced to 0.
    SoftOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtmConfig {
    /// Image channels (real, imaginary).
    pub in_channels: usize,
    /// Output width of each extractor block; the last entry is the feature width.
    pub extractor_widths: Vec<usize>,
    pub extractor_kernel: usize,
    pub fusion_kernel: usize,
    pub output_kernel: usize,
    pub patch: usize,
    pub stride: usize,
    pub mode: AttentionMode,
}

impl Default for TtmConfig {
    fn default() -> Self {
        Self {
            in_channels: 2,
            extractor_widths: vec![64; 4],
            extractor_kernel: 3,
            fusion_kernel: 3,
            output_kernel: 3,
            patch: 16,
            stride: 8,
            mode: AttentionMode::Full,
        }
    }
}

impl TtmConfig {
    /// Narrow extractor and `1×1` fusion, about a third of the default's parameters.
    pub fn compact() -> Self {
        Self { extractor_widths: vec![32, 32, 32, 64], fusion_kernel: 1, ..Self::default() }
    }

    pub fn feature_channels(&self) -> usize {
        *self.extractor_widths.last().expect("extractor has at least one block")
    }
}

/// Layer layout of a texture transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Ttm {
    pub cfg: TtmConfig,
    pub extractor: Vec<Conv>,
    pub fusion: Conv,
    pub output: Conv,
}

/// Graph handles produced by [`Ttm::forward`].
pub struct TtmTrace {
    pub x_prime: Var,
    pub features: Var,
    pub relevance: Var,
    pub soft: Var,
    pub hard: Vec<usize>,
    pub transferred: Var,
    pub soft_map: Var,
    pub synthesized: Var,
    pub geometry: PatchGeometry,
}

impl Ttm {
    pub fn new(cfg: TtmConfig) -> Result<Self> {
        if cfg.extractor_widths.is_empty() {
            return Err(Error::InvalidArgument("feature extractor needs at least one block".into()));
        }
        let mut extractor = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &w) in cfg.extractor_widths.iter().enumerate() {
            extractor.push(Conv::same(format!("ttm.extractor.{i}"), c_in, w, cfg.extractor_kernel));
            c_in = w;
        }
        let c = cfg.feature_channels();
        let fusion = Conv::same("ttm.fusion", 2 * c, c, cfg.fusion_kernel);
        let output = Conv::same("ttm.output", c, cfg.in_channels, cfg.output_kernel);
        Ok(Self { cfg, extractor, fusion, output })
    }

    fn layers(&self) -> impl Iterator<Item = &Conv> {
        self.extractor.iter().chain([&self.fusion, &self.output])
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, seed: u64) {
        let mut rng = seeded_rng(seed);
        for layer in self.layers() {
            layer.init(params, &mut rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Conv::param_count).sum()
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<PatchGeometry> {
        PatchGeometry::new(height, width, self.cfg.patch, self.cfg.stride)
    }

    /// Feature extractor: conv + ReLU blocks, spatial size preserved.
    pub fn extract<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.extractor {
            let c = block.forward(g, p, h)?;
            h = g.relu(c);
        }
        Ok(h)
    }

    /// Cosine relevance between query and key patches (`N_q×N_k`).
    pub fn relevance<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var) -> Result<Var> {
        relevance_graph(g, q, k, self.cfg.patch, self.cfg.stride)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        x_ref: Var,
        y_ref: Var,
    ) -> Result<TtmTrace> {
        let shape = g.shape(x).to_vec();
        if g.shape(x_ref) != shape.as_slice() || g.shape(y_ref) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "texture transformer inputs disagree: x {:?}, x_ref {:?}, y_ref {:?}",
                shape,
                g.shape(x_ref),
                g.shape(y_ref)
            )));
        }
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {}×H×W input, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let geo = self.geometry(shape[1], shape[2])?;
        let q = self.extract(g, p, x)?;
        let k = self.extract(g, p, x_ref)?;
        let features = q;
        let relevance = self.relevance(g, q, k)?;
        let (soft, hard) = g.row_max(relevance)?;

        let c = self.cfg.feature_channels();
        let transferred = match self.cfg.mode {
            AttentionMode::SoftOnly => g.constant(Tensor::zeros(&[c, shape[1], shape[2]])),
            _ => {
                let v = self.extract(g, p, y_ref)?;
                transfer_graph(g, v, &hard, geo)?
            }
        };
        let soft_map = match self.cfg.mode {
            AttentionMode::HardOnly => g.constant(Tensor::full(&[1, shape[1], shape[2]], T::one())),
            _ => soft_map_graph(g, soft, geo)?,
        };
        let synthesized = self.synthesize(g, p, features, transferred, soft_map)?;
        let x_prime = self.output.forward(g, p, synthesized)?;
        Ok(TtmTrace { x_prime, features, relevance, soft, hard, transferred, soft_map, synthesized, geometry: geo })
    }

    /// `Z = F + Conv(F ⊕ T) ⊙ S` with `⊕` channel concatenation and `S`
    /// broadcast over channels.
    pub fn synthesize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        transferred: Var,
        soft_map: Var,
    ) -> Result<Var> {
        if g.shape(features) != g.shape(transferred) {
            return Err(Error::Shape(format!(
                "features {:?} and transferred textures {:?} disagree",
                g.shape(features),
                g.shape(transferred)
            )));
        }
        let cat = g.concat(features, transferred)?;
        let fused = self.fusion.forward(g, p, cat)?;
        let gated = g.mul_plane(fused, soft_map)?;
        g.add(features, gated)
    }
}

pub(crate) fn relevance_graph<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    patch: usize,
    stride: usize,
) -> Result<Var> {
    if g.shape(q)[0] != g.shape(k)[0] {
        return Err(Error::Shape(format!(
            "query {:?} and key {:?} channel counts differ",
            g.shape(q),
            g.shape(k)
        )));
    }
    let qu = g.unfold(q, patch, stride)?;
    let ku = g.unfold(k, patch, stride)?;
    let qn = g.row_normalize(qu)?;
    let kn = g.row_normalize(ku)?;
    g.matmul_nt(qn, kn)
}

/// `T = fold(gather_rows(unfold(V), h))`.
pub(crate) fn transfer_graph<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    hard: &[usize],
    geo: PatchGeometry,
) -> Result<Var> {
    if hard.len() != geo.count() {
        return Err(Error::Geometry(format!(
            "{} hard indices for a {}-patch grid",
            hard.len(),
            geo.count()
        )));
    }
    let vu = g.unfold(v, geo.patch, geo.stride)?;
    let picked = g.gather_rows(vu, hard)?;
    g.fold(picked, geo)
}

/// Per-patch scores expanded to constant blocks and folded to `1×H×W`.
pub(crate) fn soft_map_graph<T: Scalar>(g: &mut Graph<T>, soft: Var, geo: PatchGeometry) -> Result<Var> {
    if g.shape(soft) != [geo.count()] {
        return Err(Error::Geometry(format!(
            "{:?} soft scores for a {}-patch grid",
            g.shape(soft),
            geo.count()
        )));
    }
    let blocks = g.repeat_cols(soft, geo.patch * geo.patch)?;
    g.fold(blocks, geo)
}

/// Patch relevance scores with their grid geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix {
    /// `N_q×N_k` cosine similarities.
    pub scores: Tensor<f32>,
    pub geometry: PatchGeometry,
}

/// Outcome of hard/soft attention for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub relevance: Tensor<f32>,
    /// Most relevant key patch for each query patch.
    pub hard: Vec<usize>,
    /// Relevance of that patch.
    pub soft: Vec<f32>,
    /// Folded `1×H×W` confidence map.
    pub soft_map: Tensor<f32>,
    pub geometry: PatchGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    pub patch: usize,
    pub stride: usize,
    pub grid: [usize; 2],
}

impl AttentionResult {
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        b.insert_f32("r", self.relevance.clone());
        let h = self.hard.iter().map(|&i| i as f32).collect();
        b.insert_f32("h", Tensor::new(&[self.hard.len()], h).expect("nonempty grid"));
        b.insert_f32("s", Tensor::new(&[self.soft.len()], self.soft.clone()).expect("nonempty grid"));
        b.insert_f32("S_map", self.soft_map.clone());
        b
    }

    pub fn sidecar(&self) -> AttentionSidecar {
        AttentionSidecar {
            patch: self.geometry.patch,
            stride: self.geometry.stride,
            grid: [self.geometry.rows(), self.geometry.cols()],
        }
    }

    pub(crate) fn from_trace<T: Scalar>(g: &Graph<T>, trace: &TtmTrace) -> Self {
        let soft: Vec<f32> = g.value(trace.soft).data().iter().map(|v| v.as_f64() as f32).collect();
        // the confidence map is reported even when the gate is bypassed
        let mut fold = Graph::<f32>::new();
        let s = fold.constant(Tensor::new(&[soft.len()], soft.clone()).expect("nonempty grid"));
        let map = soft_map_graph(&mut fold, s, trace.geometry).expect("grid matches scores");
        Self {
            relevance: g.value(trace.relevance).cast(),
            hard: trace.hard.clone(),
            soft,
            soft_map: fold.value(map).clone(),
            geometry: trace.geometry,
        }
    }
}

/// Runs the extractor on one image.
pub fn extract_features(img: &ComplexImage, ttm: &Ttm, params: &Params) -> Result<Tensor<f32>> {
    if img.height() < ttm.cfg.patch || img.width() < ttm.cfg.patch {
        return Err(Error::Geometry(format!(
            "{}x{} image is smaller than the {} patch",
            img.height(),
            img.width(),
            ttm.cfg.patch
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(img.tensor().clone());
    let f = ttm.extract(&mut g, &p, x)?;
    Ok(g.value(f).clone())
}

/// Cosine relevance between unfolded patches of two feature maps.
pub fn relevance(q: &Tensor<f32>, k: &Tensor<f32>, patch: usize, stride: usize) -> Result<RelevanceMatrix> {
    if q.ndim() != 3 || k.ndim() != 3 {
        return Err(Error::Shape(format!("relevance expects C×H×W maps, got {:?}, {:?}", q.shape(), k.shape())));
    }
    let geometry = PatchGeometry::new(q.dim(1), q.dim(2), patch, stride)?;
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let r = relevance_graph(&mut g, qv, kv, patch, stride)?;
    Ok(RelevanceMatrix { scores: g.value(r).clone(), geometry })
}

/// Lowest-index argmax per query row.
pub fn hard_attention(r: &RelevanceMatrix) -> Vec<usize> {
    crate::autodiff::row_argmax(&r.scores)
}

/// Maximum relevance per query row.
pub fn soft_attention(r: &RelevanceMatrix) -> Vec<f32> {
    let m = r.scores.dim(1);
    r.scores.data().chunks(m).map(|row| row.iter().copied().fold(f32::NEG_INFINITY, f32::max)).collect()
}

/// Copies the value patch chosen for every query patch and folds the result.
pub fn transfer(v: &Tensor<f32>, hard: &[usize], patch: usize, stride: usize) -> Result<Tensor<f32>> {
    if v.ndim() != 3 {
        return Err(Error::Shape(format!("transfer expects a C×H×W map, got {:?}", v.shape())));
    }
    let geo = PatchGeometry::new(v.dim(1), v.dim(2), patch, stride)?;
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let t = transfer_graph(&mut g, vv, hard, geo)?;
    Ok(g.value(t).clone())
}

/// Folds per-patch scores into a `1×H×W` map.
pub fn soft_map(soft: &[f32], geometry: PatchGeometry) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(&[soft.len()], soft.to_vec())?);
    let m = soft_map_graph(&mut g, s, geometry)?;
    Ok(g.value(m).clone())
}

/// Feature synthesis with explicit features, textures and scores.
pub fn synthesize(
    features: &Tensor<f32>,
    transferred: &Tensor<f32>,
    soft: &[f32],
    ttm: &Ttm,
    params: &Params,
) -> Result<Tensor<f32>> {
    if features.shape() != transferred.shape() || features.ndim() != 3 {
        return Err(Error::Shape(format!(
            "features {:?} and transferred textures {:?} disagree",
            features.shape(),
            transferred.shape()
        )));
    }
    let geo = ttm.geometry(features.dim(1), features.dim(2))?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let f = g.constant(features.clone());
    let t = g.constant(transferred.clone());
    let s = g.constant(Tensor::new(&[soft.len()], soft.to_vec())?);
    let map = soft_map_graph(&mut g, s, geo)?;
    let z = ttm.synthesize(&mut g, &p, f, t, map)?;
    Ok(g.value(z).clone())
}

/// Full module: returns the synthesized input `x′` and the attention outcome.
pub fn ttm_forward(
    x: &ComplexImage,
    x_ref: &ComplexImage,
    y_ref: &ComplexImage,
    ttm: &Ttm,
    params: &Params,
) -> Result<(ComplexImage, AttentionResult)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let xv = g.constant(x.tensor().clone());
    let xr = g.constant(x_ref.tensor().clone());
    let yr = g.constant(y_ref.tensor().clone());
    let trace = ttm.forward(&mut g, &p, xv, xr, yr)?;
    let out = ComplexImage::from_tensor(g.value(trace.x_prime).clone())?;
    Ok((out, AttentionResult::from_trace(&g, &trace)))
}
