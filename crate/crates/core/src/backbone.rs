//! Cascaded convolutional reconstruction with interleaved data consistency,
//! and the input strategies that feed it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::data::DataSample;
use crate::error::{Error, Result};
use crate::kspace::{ComplexImage, KSpace, SamplingMask};
use crate::nn::{seeded_rng, Bound, Conv, Params};
use crate::ttm::{AttentionMode, AttentionResult, Ttm, TtmConfig, TtmTrace};

/// How the backbone input is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Zero-filled input only.
    Original,
    /// Zero-filled input with the fully-sampled reference as extra channels.
    RefConcat,
    /// Texture transformer output.
    Ttm,
    /// Texture transformer without the confidence gate.
    TtmHaOnly,
    /// Texture transformer without transferred textures.
    TtmSaOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Original,
        Strategy::RefConcat,
        Strategy::Ttm,
        Strategy::TtmHaOnly,
        Strategy::TtmSaOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Original => "original",
            Strategy::RefConcat => "ref_concat",
            Strategy::Ttm => "ttm",
            Strategy::TtmHaOnly => "ttm_ha_only",
            Strategy::TtmSaOnly => "ttm_sa_only",
        }
    }

    pub fn uses_reference(self) -> bool {
        !matches!(self, Strategy::Original)
    }

    pub fn attention_mode(self) -> Option<AttentionMode> {
        match self {
            Strategy::Ttm => Some(AttentionMode::Full),
            Strategy::TtmHaOnly => Some(AttentionMode::HardOnly),
            Strategy::TtmSaOnly => Some(AttentionMode::SoftOnly),
            _ => None,
        }
    }

    pub fn input_channels(self) -> usize {
        match self {
            Strategy::RefConcat => 4,
            _ => 2,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
            Error::InvalidArgument(format!("unknown strategy {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub n_cascades: usize,
    pub hidden: usize,
    /// Convolutions per cascade (last one maps back to 2 channels).
    pub layers: usize,
    pub kernel: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { n_cascades: 3, hidden: 48, layers: 4, kernel: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub cascade: CascadeConfig,
    pub ttm: Option<TtmConfig>,
}

impl StrategyConfig {
    /// Default sizes for a strategy.
    pub fn new(strategy: Strategy) -> Self {
        let ttm = strategy.attention_mode().map(|mode| TtmConfig { mode, ..TtmConfig::default() });
        Self { strategy, cascade: CascadeConfig::default(), ttm }
    }

    /// Same strategy with the [`TtmConfig::compact`] transformer layout.
    pub fn compact(strategy: Strategy) -> Self {
        let ttm = strategy.attention_mode().map(|mode| TtmConfig { mode, ..TtmConfig::compact() });
        Self { strategy, cascade: CascadeConfig::default(), ttm }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.strategy.attention_mode(), &self.ttm) {
            (Some(_), None) => Err(Error::InvalidArgument(format!(
                "strategy {} needs texture transformer parameters",
                self.strategy
            ))),
            (Some(mode), Some(t)) if t.mode != mode => Err(Error::InvalidArgument(format!(
                "strategy {} expects attention mode {mode:?}, config has {:?}",
                self.strategy, t.mode
            ))),
            (None, Some(_)) => Err(Error::InvalidArgument(format!(
                "strategy {} takes no texture transformer",
                self.strategy
            ))),
            _ if self.cascade.n_cascades == 0 || self.cascade.layers < 2 || self.cascade.hidden == 0 => {
                Err(Error::InvalidArgument("cascade needs ≥1 cascade, ≥2 layers, ≥1 hidden channel".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: StrategyConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Conv stacks of every cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct Cascade {
    pub cfg: CascadeConfig,
    pub in_channels: usize,
    pub stages: Vec<Vec<Conv>>,
}

impl Cascade {
    pub fn new(cfg: CascadeConfig, in_channels: usize) -> Self {
        let stages = (0..cfg.n_cascades)
            .map(|c| {
                let first_in = if c == 0 { in_channels } else { 2 };
                (0..cfg.layers)
                    .map(|l| {
                        let c_in = if l == 0 { first_in } else { cfg.hidden };
                        let c_out = if l + 1 == cfg.layers { 2 } else { cfg.hidden };
                        Conv::same(format!("backbone.cascade{c}.conv{l}"), c_in, c_out, cfg.kernel)
                    })
                    .collect()
            })
            .collect();
        Self { cfg, in_channels, stages }
    }

    pub fn init<T: Scalar>(&self, params: &mut Params<T>, seed: u64) {
        let mut rng = seeded_rng(seed);
        for conv in self.stages.iter().flatten() {
            conv.init(params, &mut rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().flatten().map(Conv::param_count).sum()
    }

    /// `out = DC(convs(in) + in[..2])` per cascade.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: Var,
        measured: &Tensor<T>,
        sampled: &[bool],
    ) -> Result<Var> {
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels || measured.shape() != [2, shape[1], shape[2]] {
            return Err(Error::Shape(format!(
                "cascade expects {}×H×W input matching measurements, got {:?} and {:?}",
                self.in_channels,
                shape,
                measured.shape()
            )));
        }
        let mut cur = input;
        for stage in &self.stages {
            let mut h = cur;
            for (i, conv) in stage.iter().enumerate() {
                h = conv.forward(g, p, h)?;
                if i + 1 < stage.len() {
                    h = g.relu(h);
                }
            }
            let residual = if g.shape(cur)[0] == 2 { cur } else { g.narrow(cur, 0, 2)? };
            let sum = g.add(h, residual)?;
            cur = g.data_consistency(sum, measured, sampled)?;
        }
        Ok(cur)
    }
}

/// A strategy's networks: the cascade plus an optional texture transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: StrategyConfig,
    pub cascade: Cascade,
    pub ttm: Option<Ttm>,
}

/// Graph handles of one sample's inputs.
pub struct SampleVars<T: Scalar> {
    pub x: Var,
    pub x_ref: Option<Var>,
    pub y_ref: Option<Var>,
    pub measured: Tensor<T>,
    pub sampled: Vec<bool>,
}

pub struct ModelOutput {
    pub y: Var,
    pub ttm: Option<TtmTrace>,
}

const TTM_SEED_OFFSET: u64 = 0x5EED_77A3;

impl Model {
    pub fn new(cfg: StrategyConfig) -> Result<Self> {
        cfg.validate()?;
        let cascade = Cascade::new(cfg.cascade.clone(), cfg.strategy.input_channels());
        let ttm = cfg.ttm.clone().map(Ttm::new).transpose()?;
        Ok(Self { cfg, cascade, ttm })
    }

    pub fn strategy(&self) -> Strategy {
        self.cfg.strategy
    }

    /// Seeded initialization. The cascade draws from the same stream for
    /// every strategy so equal seeds start from comparable backbones.
    pub fn init<T: Scalar>(&self, seed: u64) -> Params<T> {
        let mut params = Params::new();
        self.cascade.init(&mut params, seed);
        if let Some(ttm) = &self.ttm {
            ttm.init(&mut params, seed.wrapping_add(TTM_SEED_OFFSET));
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.cascade.param_count() + self.ttm.as_ref().map_or(0, Ttm::param_count)
    }

    pub fn bind_sample<T: Scalar>(&self, g: &mut Graph<T>, sample: &DataSample) -> Result<SampleVars<T>> {
        let x = g.constant(sample.x.tensor().cast());
        let (x_ref, y_ref) = match &sample.reference {
            Some(r) => (Some(g.constant(r.x_ref.tensor().cast())), Some(g.constant(r.y_ref.tensor().cast()))),
            None => (None, None),
        };
        if sample.mask.width != sample.x.width() {
            return Err(Error::Shape(format!(
                "mask width {} does not match image width {}",
                sample.mask.width,
                sample.x.width()
            )));
        }
        Ok(SampleVars { x, x_ref, y_ref, measured: sample.measured.tensor().cast(), sampled: sample.mask.sampled() })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, s: &SampleVars<T>) -> Result<ModelOutput> {
        let need_ref = || -> Result<(Var, Var)> {
            match (s.x_ref, s.y_ref) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(Error::MissingReference(self.strategy().name().into())),
            }
        };
        let (input, trace) = match self.strategy() {
            Strategy::Original => (s.x, None),
            Strategy::RefConcat => {
                let (_, y_ref) = need_ref()?;
                (g.concat(s.x, y_ref)?, None)
            }
            _ => {
                let (x_ref, y_ref) = need_ref()?;
                let ttm = self.ttm.as_ref().expect("validated config carries a texture transformer");
                let trace = ttm.forward(g, p, s.x, x_ref, y_ref)?;
                (trace.x_prime, Some(trace))
            }
        };
        let y = self.cascade.forward(g, p, input, &s.measured, &s.sampled)?;
        Ok(ModelOutput { y, ttm: trace })
    }
}

/// Inference through the cascade alone.
pub fn cascade_forward(
    input: &Tensor<f32>,
    measured: &KSpace,
    mask: &SamplingMask,
    cascade: &Cascade,
    params: &Params,
) -> Result<ComplexImage> {
    if mask.width != measured.width() {
        return Err(Error::Shape(format!(
            "mask width {} does not match k-space width {}",
            mask.width,
            measured.width()
        )));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let y = cascade.forward(&mut g, &p, x, measured.tensor(), &mask.sampled())?;
    ComplexImage::from_tensor(g.value(y).clone())
}

/// Inference for one sample; the attention outcome is returned for texture
/// transformer strategies only.
pub fn strategy_forward(
    sample: &DataSample,
    model: &Model,
    params: &Params,
) -> Result<(ComplexImage, Option<AttentionResult>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let vars = model.bind_sample(&mut g, sample)?;
    let out = model.forward(&mut g, &p, &vars)?;
    let attn = out.ttm.as_ref().map(|t| AttentionResult::from_trace(&g, t));
    Ok((ComplexImage::from_tensor(g.value(out.y).clone())?, attn))
}
