//! Synthetic brain-like phantoms, mutual-information reference matching and
//! dataset assembly.
//!
//! Phantoms belong to a small number of "subjects". A subject fixes the head
//! geometry, tissue intensities and the band-limited texture field; each
//! phantom is one slice of a subject, with slice-dependent anatomy, its own
//! lesions and its own smooth phase. References drawn from the pool are
//! therefore informative about the texture of an input when matching finds a
//! slice of the same subject, and uninformative otherwise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorBundle;
use crate::error::{io_err, Error, Result};
use crate::kspace::{make_mask, undersample, ComplexImage, KSpace, SamplingMask};
use crate::nn::{derive_seed, seeded_rng};

const SUBJECT_STREAM: u64 = 0xA11A;
const PHANTOM_STREAM: u64 = 0xB22B;
const TEXTURE_TERMS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    pub subjects: usize,
    /// Multiplicative texture strength (RMS of the modulation).
    pub texture_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { size: 64, subjects: 8, texture_amplitude: 0.3 }
    }
}

/// Ellipse in normalized `[-1, 1]²` coordinates, painted with `value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub ax: f64,
    pub ay: f64,
    pub angle: f64,
    pub value: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let (p, q) = (c * du + s * dv, -s * du + c * dv);
        (p / self.ax).powi(2) + (q / self.ay).powi(2) <= 1.0
    }
}

/// Cosine component of a texture field, frequencies in cycles per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub kx: f64,
    pub ky: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub subject: usize,
    /// Slice position in `[-1, 1]`.
    pub slice: f64,
    /// Painted in order; the first three are head, brain and white matter.
    pub ellipses: Vec<Ellipse>,
    pub texture_seed: u64,
    pub texture: Vec<Wave>,
    /// `φ = c0 + c1 u + c2 v + c3 u² + c4 uv + c5 v²`.
    pub phase: [f64; 6],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub id: usize,
    pub y: ComplexImage,
    pub anatomy: Anatomy,
}

impl Phantom {
    pub fn magnitude(&self) -> Vec<f32> {
        self.y.magnitude()
    }
}

struct Subject {
    head: (f64, f64, f64, f64),
    brain_value: f64,
    white_value: f64,
    ventricle_value: f64,
    texture_seed: u64,
    texture: Vec<Wave>,
}

fn subject(seed: u64, index: usize) -> Subject {
    let texture_seed = derive_seed(seed, &[SUBJECT_STREAM, index as u64]);
    let mut rng = seeded_rng(texture_seed);
    let head = (
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(0.78..0.9),
        rng.gen_range(0.62..0.76),
    );
    let brain_value = rng.gen_range(0.42..0.58);
    let white_value = rng.gen_range(0.66..0.82);
    let ventricle_value = rng.gen_range(0.12..0.25);
    let texture = (0..TEXTURE_TERMS)
        .map(|_| {
            let radius: f64 = rng.gen_range(5.0..20.0);
            let theta: f64 = rng.gen_range(0.0..PI);
            Wave {
                kx: (radius * theta.cos()).round(),
                ky: (radius * theta.sin()).round(),
                amplitude: rng.gen_range(0.5..1.0),
                phase: rng.gen_range(0.0..2.0 * PI),
            }
        })
        .collect();
    Subject { head, brain_value, white_value, ventricle_value, texture_seed, texture }
}

fn anatomy(cfg: &PhantomConfig, subjects: &[Subject], seed: u64, id: usize) -> Anatomy {
    let mut rng = seeded_rng(derive_seed(seed, &[PHANTOM_STREAM, id as u64]));
    let subject_index = rng.gen_range(0..cfg.subjects);
    let s = &subjects[subject_index];
    let slice: f64 = rng.gen_range(-1.0..1.0);
    let taper = (1.0 - 0.25 * slice * slice).sqrt();
    let (hx, hy, ha, hb) = s.head;
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(-0.015..0.015);
    let mut ellipses = vec![
        Ellipse { cx: hx, cy: hy, ax: ha * taper, ay: hb * taper, angle: 0.0, value: 0.95 },
        Ellipse {
            cx: hx + jitter(&mut rng),
            cy: hy + jitter(&mut rng),
            ax: 0.9 * ha * taper,
            ay: 0.88 * hb * taper,
            angle: 0.0,
            value: s.brain_value,
        },
        Ellipse {
            cx: hx,
            cy: hy + 0.03 * slice,
            ax: 0.62 * ha * taper,
            ay: 0.58 * hb * taper,
            angle: 0.05 * slice,
            value: s.white_value,
        },
    ];
    let vent = 0.06 + 0.08 * (1.0 - slice.abs());
    for side in [-1.0, 1.0] {
        ellipses.push(Ellipse {
            cx: hx + side * 0.11 * taper,
            cy: hy - 0.05,
            ax: 0.45 * vent,
            ay: vent * 1.6,
            angle: side * 0.3,
            value: s.ventricle_value,
        });
    }
    for _ in 0..rng.gen_range(1..=3) {
        let r: f64 = rng.gen_range(0.0..0.45);
        let t: f64 = rng.gen_range(0.0..2.0 * PI);
        ellipses.push(Ellipse {
            cx: hx + r * ha * t.cos(),
            cy: hy + r * hb * t.sin(),
            ax: rng.gen_range(0.03..0.09),
            ay: rng.gen_range(0.03..0.09),
            angle: rng.gen_range(0.0..PI),
            value: rng.gen_range(0.25..0.95),
        });
    }
    let drift = 0.4 * slice;
    let texture = s
        .texture
        .iter()
        .map(|w| Wave { phase: w.phase + drift * (w.kx + w.ky).signum(), ..w.clone() })
        .collect();
    let phase = [
        rng.gen_range(-PI..PI),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.25..0.25),
        rng.gen_range(-0.25..0.25),
    ];
    Anatomy { subject: subject_index, slice, ellipses, texture_seed: s.texture_seed, texture, phase }
}

fn render(anatomy: &Anatomy, size: usize, texture_amplitude: f64) -> Result<ComplexImage> {
    let norm = (anatomy.texture.iter().map(|w| w.amplitude * w.amplitude).sum::<f64>() / 2.0).sqrt();
    let brain = &anatomy.ellipses[1];
    let plane = size * size;
    let (mut re, mut im) = (vec![0f32; plane], vec![0f32; plane]);
    for row in 0..size {
        let v = 2.0 * (row as f64 + 0.5) / size as f64 - 1.0;
        for col in 0..size {
            let u = 2.0 * (col as f64 + 0.5) / size as f64 - 1.0;
            let mut m = 0.0;
            for e in &anatomy.ellipses {
                if e.contains(u, v) {
                    m = e.value;
                }
            }
            if brain.contains(u, v) && norm > 0.0 {
                let t: f64 = anatomy
                    .texture
                    .iter()
                    .map(|w| w.amplitude * (PI * (w.kx * (u + 1.0) + w.ky * (v + 1.0)) + w.phase).cos())
                    .sum();
                m *= 1.0 + texture_amplitude * t / norm;
            }
            let m = m.clamp(0.0, 1.0);
            let c = anatomy.phase;
            let phi = c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v;
            re[row * size + col] = (m * phi.cos()) as f32;
            im[row * size + col] = (m * phi.sin()) as f32;
        }
    }
    ComplexImage::from_parts(size, size, &re, &im)
}

fn check_phantom_args(count: usize, cfg: &PhantomConfig) -> Result<()> {
    if count == 0 || cfg.size < 32 || cfg.subjects == 0 {
        return Err(Error::InvalidArgument(format!(
            "phantoms need count ≥ 1, size ≥ 32 and ≥ 1 subject (got {count}, {}, {})",
            cfg.size, cfg.subjects
        )));
    }
    if !(cfg.texture_amplitude >= 0.0 && cfg.texture_amplitude.is_finite()) {
        return Err(Error::InvalidArgument("texture amplitude must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Phantoms `0..count` with default subject structure.
pub fn generate_phantoms(count: usize, size: usize, seed: u64) -> Result<Vec<Phantom>> {
    generate_phantoms_with(&PhantomConfig { size, ..PhantomConfig::default() }, 0..count, seed)
}

/// Phantoms for the given IDs. A phantom depends only on `(cfg, seed, id)`.
pub fn generate_phantoms_with(
    cfg: &PhantomConfig,
    ids: impl IntoIterator<Item = usize>,
    seed: u64,
) -> Result<Vec<Phantom>> {
    let ids: Vec<usize> = ids.into_iter().collect();
    check_phantom_args(ids.len(), cfg)?;
    let subjects: Vec<Subject> = (0..cfg.subjects).map(|i| subject(seed, i)).collect();
    ids.into_iter()
        .map(|id| {
            let anatomy = anatomy(cfg, &subjects, seed, id);
            Ok(Phantom { id, y: render(&anatomy, cfg.size, cfg.texture_amplitude)?, anatomy })
        })
        .collect()
}

/// Mutual information in bits; `degenerate` flags a constant or empty input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MutualInformation {
    pub bits: f64,
    pub degenerate: bool,
}

fn bin_indices(img: &[f32], bins: usize) -> Option<Vec<usize>> {
    let max = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = img.iter().copied().fold(f32::INFINITY, f32::min);
    if !(max >= 1e-8) || max == min {
        return None;
    }
    Some(img.iter().map(|&v| (((v / max).max(0.0) * bins as f32) as usize).min(bins - 1)).collect())
}

/// MI of two magnitude images from their joint histogram; each image is
/// scaled to `[0, 1]` by its own maximum.
pub fn mutual_information(a: &[f32], b: &[f32], bins: usize) -> Result<MutualInformation> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("MI needs equal nonempty images, got {} and {}", a.len(), b.len())));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("MI needs at least 2 bins, got {bins}")));
    }
    let (ia, ib) = match (bin_indices(a, bins), bin_indices(b, bins)) {
        (Some(ia), Some(ib)) => (ia, ib),
        _ => {
            log::warn!("mutual information of a constant image; reporting 0");
            return Ok(MutualInformation { bits: 0.0, degenerate: true });
        }
    };
    let mut joint = vec![0u32; bins * bins];
    let (mut pa, mut pb) = (vec![0u32; bins], vec![0u32; bins]);
    for (&i, &j) in ia.iter().zip(&ib) {
        joint[i * bins + j] += 1;
        pa[i] += 1;
        pb[j] += 1;
    }
    let n = a.len() as f64;
    let mut terms: Vec<f64> = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c > 0 {
                let p = c as f64 / n;
                let q = (pa[i] as f64 / n) * (pb[j] as f64 / n);
                terms.push(p * (p / q).log2());
            }
        }
    }
    // summing in sorted order makes MI(a, b) and MI(b, a) bitwise equal
    terms.sort_by(f64::total_cmp);
    Ok(MutualInformation { bits: terms.iter().sum::<f64>().max(0.0), degenerate: false })
}

pub const MI_BINS: usize = 64;

/// Pool index maximizing MI with `x_mag`; ties go to the lowest index.
pub fn match_reference(x_mag: &[f32], pool: &[Phantom]) -> Result<usize> {
    let mags: Vec<Vec<f32>> = pool.iter().map(Phantom::magnitude).collect();
    match_reference_magnitudes(x_mag, &mags).map(|(i, _)| i)
}

/// As [`match_reference`] over precomputed magnitudes; also returns the MI.
pub fn match_reference_magnitudes(x_mag: &[f32], pool: &[Vec<f32>]) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("reference pool is empty".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, m) in pool.iter().enumerate() {
        let mi = mutual_information(x_mag, m, MI_BINS)?.bits;
        if mi > best.1 {
            best = (i, mi);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Reference,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Reference => "reference",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Reference, Split::Test]
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}; valid: train, val, test")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub reference: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train: 200, val: 20, reference: 20, test: 50 }
    }
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.reference + self.test
    }
}

/// Phantom IDs per split plus the seeds that regenerate them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub phantoms: PhantomConfig,
    pub phantom_seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub reference: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// Shuffles IDs `0..total` and cuts them into splits.
    pub fn new(counts: SplitCounts, phantoms: PhantomConfig, seed: u64) -> Result<Self> {
        if counts.total() == 0 {
            return Err(Error::InvalidArgument("empty split".into()));
        }
        let mut ids: Vec<usize> = (0..counts.total()).collect();
        ids.shuffle(&mut seeded_rng(derive_seed(seed, &[0x5711])));
        let mut rest = ids.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let m = Self {
            phantoms,
            phantom_seed: seed,
            train: take(counts.train),
            val: take(counts.val),
            reference: take(counts.reference),
            test: take(counts.test),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Reference => &self.reference,
            Split::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<usize> =
            self.train.iter().chain(&self.val).chain(&self.reference).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return Err(Error::InvalidArgument("split ID sets overlap".into()));
        }
        check_phantom_args(1, &self.phantoms)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub acceleration_factor: f64,
    pub center_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { acceleration_factor: 4.0, center_fraction: 0.08, noise_sigma: 0.0 }
    }
}

/// Everything needed to rebuild a dataset; stored as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: SplitManifest,
    pub mask: MaskConfig,
    /// Seeds the training masks and every reference mask.
    pub seed: u64,
}

/// Matched reference of a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub pool_id: usize,
    pub mi_bits: f64,
    pub mask: SamplingMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub info: ReferenceInfo,
    pub x_ref: ComplexImage,
    pub y_ref: ComplexImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSample {
    pub id: usize,
    pub y: ComplexImage,
    pub x: ComplexImage,
    pub measured: KSpace,
    pub mask: SamplingMask,
    pub reference: Option<Reference>,
}

impl DataSample {
    pub fn name(&self) -> String {
        sample_name(self.id)
    }
}

pub fn sample_name(id: usize) -> String {
    format!("{id:04}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<DataSample>,
    pub val: Vec<DataSample>,
    pub test: Vec<DataSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Result<&[DataSample]> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Val => Ok(&self.val),
            Split::Test => Ok(&self.test),
            Split::Reference => Err(Error::InvalidArgument("the reference pool holds no samples".into())),
        }
    }
}

const SAMPLE_SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn split_tag(split: Split) -> u64 {
    split as u64 + 1
}

/// Mask seed of a sample. Validation and test seeds depend on the manifest
/// only; training seeds also on the build seed.
pub fn mask_seed(manifest: &SplitManifest, split: Split, id: usize, build_seed: u64) -> u64 {
    let base = derive_seed(manifest.phantom_seed, &[0x3A5C, split_tag(split), id as u64]);
    match split {
        Split::Train => derive_seed(base, &[build_seed]),
        _ => base,
    }
}

fn reference_mask_seed(manifest: &SplitManifest, split: Split, id: usize, build_seed: u64) -> u64 {
    derive_seed(manifest.phantom_seed, &[0x3EF, split_tag(split), id as u64, build_seed])
}

/// Undersamples every sample, matches it against the pool and degrades the
/// matched reference with an independent mask of the same family.
pub fn build_dataset(manifest: &SplitManifest, mask: &MaskConfig, seed: u64) -> Result<Dataset> {
    manifest.validate()?;
    if manifest.reference.is_empty() {
        return Err(Error::InvalidArgument("reference pool is empty".into()));
    }
    let pool = generate_phantoms_with(&manifest.phantoms, manifest.reference.iter().copied(), manifest.phantom_seed)?;
    let pool_mags: Vec<Vec<f32>> = pool.iter().map(Phantom::magnitude).collect();
    let width = manifest.phantoms.size;
    let mut out = Dataset {
        manifest: DatasetManifest { splits: manifest.clone(), mask: mask.clone(), seed },
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for split in SAMPLE_SPLITS {
        let ids = manifest.ids(split);
        if ids.is_empty() {
            continue;
        }
        let phantoms = generate_phantoms_with(&manifest.phantoms, ids.iter().copied(), manifest.phantom_seed)?;
        let mut samples = Vec::with_capacity(ids.len());
        for ph in phantoms {
            let ms = mask_seed(manifest, split, ph.id, seed);
            let m = make_mask(width, mask.acceleration_factor, mask.center_fraction, ms)?;
            let (x, measured) = undersample(&ph.y, &m, mask.noise_sigma, derive_seed(ms, &[0x9015]))?;
            let (k, mi_bits) = match_reference_magnitudes(&x.magnitude(), &pool_mags)?;
            let rs = reference_mask_seed(manifest, split, ph.id, seed);
            let ref_mask = make_mask(width, mask.acceleration_factor, mask.center_fraction, rs)?;
            let (x_ref, _) = undersample(&pool[k].y, &ref_mask, mask.noise_sigma, derive_seed(rs, &[0x9015]))?;
            samples.push(DataSample {
                id: ph.id,
                y: ph.y,
                x,
                measured,
                mask: m,
                reference: Some(Reference {
                    info: ReferenceInfo { pool_id: pool[k].id, mi_bits, mask: ref_mask },
                    x_ref,
                    y_ref: pool[k].y.clone(),
                }),
            });
        }
        match split {
            Split::Train => out.train = samples,
            Split::Val => out.val = samples,
            _ => out.test = samples,
        }
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn sample_paths(root: &Path, split: Split, id: usize) -> (PathBuf, PathBuf, PathBuf) {
    let dir = root.join(split.name());
    let name = sample_name(id);
    (dir.join(format!("{name}.ttmt")), dir.join(format!("{name}.mask.json")), dir.join(format!("{name}.ref.json")))
}

impl Dataset {
    /// Writes `manifest.json` and `{split}/{id}.ttmt` with mask sidecars.
    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        write(&root.join("manifest.json"), manifest.as_bytes())?;
        for split in SAMPLE_SPLITS {
            let dir = root.join(split.name());
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for s in self.split(split)? {
                let (tensors, mask, reference) = sample_paths(root, split, s.id);
                let mut b = TensorBundle::new();
                b.insert_f32("y", s.y.tensor().clone());
                b.insert_f32("x", s.x.tensor().clone());
                if let Some(r) = &s.reference {
                    b.insert_f32("x_ref", r.x_ref.tensor().clone());
                    b.insert_f32("y_ref", r.y_ref.tensor().clone());
                    write(&reference, serde_json::to_string_pretty(&r.info)?.as_bytes())?;
                }
                b.insert_f32("measured", s.measured.tensor().clone());
                b.save(&tensors)?;
                write(&mask, s.mask.to_json()?.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest = load_manifest(root)?;
        let mut out = Dataset { manifest, train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for split in SAMPLE_SPLITS {
            let samples = load_split_with(root, &out.manifest, split)?;
            match split {
                Split::Train => out.train = samples,
                Split::Val => out.val = samples,
                _ => out.test = samples,
            }
        }
        Ok(out)
    }
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    m.splits.validate()?;
    Ok(m)
}

/// Loads one split of a saved dataset.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<DataSample>> {
    load_split_with(root, &load_manifest(root)?, split)
}

fn load_split_with(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<DataSample>> {
    let ids = manifest.splits.ids(split);
    ids.iter().map(|&id| load_sample(root, split, id)).collect()
}

pub fn load_sample(root: &Path, split: Split, id: usize) -> Result<DataSample> {
    let (tensors, mask, reference) = sample_paths(root, split, id);
    let b = TensorBundle::load(&tensors)?;
    let img = |name: &str| ComplexImage::from_tensor(b.f32(name)?.clone());
    let reference = match (b.get("x_ref"), b.get("y_ref")) {
        (Some(_), Some(_)) => {
            let text = fs::read_to_string(&reference).map_err(io_err(&reference))?;
            Some(Reference { info: serde_json::from_str(&text)?, x_ref: img("x_ref")?, y_ref: img("y_ref")? })
        }
        _ => None,
    };
    let s = DataSample {
        id,
        y: img("y")?,
        x: img("x")?,
        measured: img("measured")?,
        mask: SamplingMask::load(&mask)?,
        reference,
    };
    if !s.x.same_shape(&s.y) || !s.measured.same_shape(&s.y) || s.mask.width != s.y.width() {
        return Err(Error::Format(format!("{}: inconsistent sample shapes", tensors.display())));
    }
    Ok(s)
}
