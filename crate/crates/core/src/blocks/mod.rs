//! Non-local attention blocks: the standard block (NB), the asymmetric pyramid
//! block (APNB), and their two-input fusion counterparts (FNB, AFNB).
//!
//! Every block embeds its input(s) with three 1×1 projections (query, key,
//! value), attends each query position over the key positions (or sampled
//! anchors), projects the attended values back with an output projection, and
//! combines the result with the query-side input by addition or channel
//! concatenation.

mod forward;
mod pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::sampling::SamplerSpec;
use crate::tensor::{rng::derive_seed, Distribution, Shape3, Tensor};

pub(crate) use forward::check_inputs;
pub use forward::{
    attention_tile_rows, run_block, Backend, Eval, NoProbe, Phase, Probe, ProjectionRef, WeightRefs,
};
pub use pipeline::{stage_fusion_pipeline, PipelineStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Nb,
    Apnb,
    Fnb,
    Afnb,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [Self::Nb, Self::Apnb, Self::Fnb, Self::Afnb];

    /// Takes a separate low-level input for keys and values.
    pub fn is_fusion(self) -> bool {
        matches!(self, Self::Fnb | Self::Afnb)
    }

    /// Samples anchors from keys and values.
    pub fn is_asymmetric(self) -> bool {
        matches!(self, Self::Apnb | Self::Afnb)
    }

    /// The full-attention block an asymmetric block reduces to under the
    /// identity sampler.
    pub fn dense_counterpart(self) -> Self {
        match self {
            Self::Apnb => Self::Nb,
            Self::Afnb => Self::Fnb,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Nb => "nb",
            Self::Apnb => "apnb",
            Self::Fnb => "fnb",
            Self::Afnb => "afnb",
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BlockKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nb" => Ok(Self::Nb),
            "apnb" => Ok(Self::Apnb),
            "fnb" => Ok(Self::Fnb),
            "afnb" => Ok(Self::Afnb),
            other => Err(param_err!("unknown block kind {other:?}")),
        }
    }
}

/// Row normalization applied to the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Softmax,
    /// Division by the number of key positions.
    Rescale,
    None,
}

impl Normalization {
    pub const ALL: [Normalization; 3] = [Self::Softmax, Self::Rescale, Self::None];

    pub fn apply(self, similarity: Tensor) -> Result<Tensor> {
        match self {
            Self::Softmax => similarity.into_softmax_rows(),
            Self::Rescale => similarity.into_rescaled_rows(),
            Self::None => Ok(similarity),
        }
    }
}

/// How the projected attention output meets the block input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `W_o(Oᵀ) + X`
    Residual,
    /// `cat(W_o(Oᵀ), X)` along channels.
    Concat,
}

impl Combine {
    pub const ALL: [Combine; 2] = [Self::Residual, Self::Concat];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    /// Channels of the (high-level) input `X` / `X_h`.
    pub in_channels: usize,
    /// Channels of the low-level input `X_l`; fusion blocks only, defaults to
    /// `in_channels`.
    #[serde(default)]
    pub low_channels: Option<usize>,
    /// Embedding width `Ĉ`.
    pub embed_channels: usize,
    /// Output channels of the output projection; defaults to `in_channels`.
    #[serde(default)]
    pub out_channels: Option<usize>,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_combine")]
    pub combine: Combine,
    /// Key and value share one projection (and, when sampling, one anchor set).
    #[serde(default)]
    pub share_key_value: bool,
    #[serde(default = "default_bias")]
    pub bias: bool,
    /// Anchor sampler; required by the asymmetric blocks, ignored otherwise.
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
}

fn default_normalization() -> Normalization {
    Normalization::Softmax
}

fn default_combine() -> Combine {
    Combine::Concat
}

fn default_bias() -> bool {
    true
}

impl BlockConfig {
    pub fn new(in_channels: usize, embed_channels: usize) -> Self {
        Self {
            in_channels,
            low_channels: None,
            embed_channels,
            out_channels: None,
            normalization: default_normalization(),
            combine: default_combine(),
            share_key_value: false,
            bias: default_bias(),
            sampler: None,
        }
    }

    pub fn with_low_channels(mut self, channels: usize) -> Self {
        self.low_channels = Some(channels);
        self
    }

    pub fn with_out_channels(mut self, channels: usize) -> Self {
        self.out_channels = Some(channels);
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_combine(mut self, combine: Combine) -> Self {
        self.combine = combine;
        self
    }

    pub fn with_shared_key_value(mut self, share: bool) -> Self {
        self.share_key_value = share;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerSpec) -> Self {
        self.sampler = Some(sampler);
        self
    }

    pub fn out(&self) -> usize {
        self.out_channels.unwrap_or(self.in_channels)
    }

    /// Channels of the key/value source.
    pub fn key_channels(&self) -> usize {
        self.low_channels.unwrap_or(self.in_channels)
    }

    /// Channel count of the block output.
    pub fn output_channels(&self) -> usize {
        match self.combine {
            Combine::Residual => self.in_channels,
            Combine::Concat => self.out() + self.in_channels,
        }
    }

    pub fn validate(&self, kind: BlockKind) -> Result<()> {
        if self.in_channels == 0 {
            return Err(param_err!("in_channels must be >= 1"));
        }
        if self.embed_channels == 0 {
            return Err(param_err!("embed_channels must be >= 1"));
        }
        if self.out() == 0 {
            return Err(param_err!("out_channels must be >= 1"));
        }
        if self.key_channels() == 0 {
            return Err(param_err!("low_channels must be >= 1"));
        }
        if !kind.is_fusion() && self.low_channels.is_some_and(|c| c != self.in_channels) {
            return Err(param_err!(
                "low_channels only applies to fusion blocks, got {:?} for {kind}",
                self.low_channels
            ));
        }
        if self.combine == Combine::Residual && self.out() != self.in_channels {
            return Err(param_err!(
                "residual combine needs out_channels ({}) == in_channels ({})",
                self.out(),
                self.in_channels
            ));
        }
        if kind.is_asymmetric() {
            match &self.sampler {
                Some(spec) => spec.validate()?,
                None => return Err(param_err!("{kind} requires a sampler")),
            }
        }
        Ok(())
    }

    /// Output shape for a given query-side input shape.
    pub fn output_shape(&self, input: Shape3) -> Shape3 {
        input.with_channels(self.output_channels())
    }
}

/// One 1×1 projection: `weight` is `out × in`, `bias` has `out` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Projection {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    fn check(&self, name: &str, out: usize, inp: usize, bias: bool) -> Result<()> {
        if self.weight.shape() != [out, inp] {
            return Err(shape_err!(
                "{name} weight is {:?}, expected [{out}, {inp}]",
                self.weight.shape()
            ));
        }
        match (&self.bias, bias) {
            (Some(b), true) if b.shape() == [out] => Ok(()),
            (Some(b), true) => Err(shape_err!(
                "{name} bias is {:?}, expected [{out}]",
                b.shape()
            )),
            (None, false) => Ok(()),
            (Some(_), false) => Err(shape_err!(
                "{name} has a bias but the config disables biases"
            )),
            (None, true) => Err(shape_err!("{name} is missing its bias")),
        }
    }

    fn as_ref(&self) -> ProjectionRef<'_, Tensor> {
        ProjectionRef {
            weight: &self.weight,
            bias: self.bias.as_ref(),
        }
    }
}

/// Projection parameters of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `W_φ`: query embedding of the (high-level) input.
    pub query: Projection,
    /// `W_θ`: key embedding of the key/value source.
    pub key: Projection,
    /// `W_γ`: value embedding; `None` when it shares the key projection.
    pub value: Option<Projection>,
    /// `W_o`: maps attended values back to output channels.
    pub output: Projection,
}

impl BlockWeights {
    /// The value projection, which is the key projection when shared.
    pub fn value(&self) -> &Projection {
        self.value.as_ref().unwrap_or(&self.key)
    }

    pub fn is_shared(&self) -> bool {
        self.value.is_none()
    }

    pub fn validate(&self, cfg: &BlockConfig) -> Result<()> {
        let (e, c, cl, out) = (
            cfg.embed_channels,
            cfg.in_channels,
            cfg.key_channels(),
            cfg.out(),
        );
        self.query.check("query", e, c, cfg.bias)?;
        self.key.check("key", e, cl, cfg.bias)?;
        match (&self.value, cfg.share_key_value) {
            (None, true) => {}
            (Some(v), false) => v.check("value", e, cl, cfg.bias)?,
            (Some(_), true) => {
                return Err(param_err!(
                    "shared key/value config given a separate value projection"
                ))
            }
            (None, false) => {
                return Err(param_err!(
                    "unshared config is missing the value projection"
                ))
            }
        }
        self.output.check("output", out, e, cfg.bias)
    }

    pub(crate) fn refs(&self) -> WeightRefs<'_, Tensor> {
        WeightRefs {
            query: self.query.as_ref(),
            key: self.key.as_ref(),
            value: self.value.as_ref().map(Projection::as_ref),
            output: self.output.as_ref(),
        }
    }
}

/// Deterministic gaussian(0, 0.02) initialization of every weight and bias.
pub fn init_weights(cfg: &BlockConfig, seed: u64) -> Result<BlockWeights> {
    let make = |label: u64, out: usize, inp: usize| -> Result<Projection> {
        let weight = Tensor::seeded_fill(
            &[out, inp],
            derive_seed(seed, 2 * label),
            Distribution::Gaussian,
        )?;
        let bias = if cfg.bias {
            Some(Tensor::seeded_fill(
                &[out],
                derive_seed(seed, 2 * label + 1),
                Distribution::Gaussian,
            )?)
        } else {
            None
        };
        Ok(Projection::new(weight, bias))
    };
    let (e, c, cl) = (cfg.embed_channels, cfg.in_channels, cfg.key_channels());
    Ok(BlockWeights {
        query: make(1, e, c)?,
        key: make(2, e, cl)?,
        value: if cfg.share_key_value {
            None
        } else {
            Some(make(3, e, cl)?)
        },
        output: make(4, cfg.out(), e)?,
    })
}

/// A high-level (query side) and low-level (key/value side) feature map pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInputs {
    pub high: Tensor,
    pub low: Tensor,
}

fn evaluate(
    kind: BlockKind,
    high: &Tensor,
    low: Option<&Tensor>,
    cfg: &BlockConfig,
    w: &BlockWeights,
) -> Result<Tensor> {
    let mut probe = NoProbe;
    Eval::new(&mut probe).forward(kind, high, low, cfg, w)
}

/// Standard non-local block.
pub fn nb_forward(x: &Tensor, cfg: &BlockConfig, w: &BlockWeights) -> Result<Tensor> {
    evaluate(BlockKind::Nb, x, None, cfg, w)
}

/// Asymmetric pyramid non-local block: keys and values reduced to the
/// sampler's anchors.
pub fn apnb_forward(x: &Tensor, cfg: &BlockConfig, w: &BlockWeights) -> Result<Tensor> {
    evaluate(BlockKind::Apnb, x, None, cfg, w)
}

/// Fusion non-local block: queries from `high`, keys and values from `low`.
pub fn fnb_forward(inputs: &FusionInputs, cfg: &BlockConfig, w: &BlockWeights) -> Result<Tensor> {
    evaluate(BlockKind::Fnb, &inputs.high, Some(&inputs.low), cfg, w)
}

/// Asymmetric fusion non-local block.
pub fn afnb_forward(inputs: &FusionInputs, cfg: &BlockConfig, w: &BlockWeights) -> Result<Tensor> {
    evaluate(BlockKind::Afnb, &inputs.high, Some(&inputs.low), cfg, w)
}

/// Runs any block kind; `low` is required exactly for the fusion kinds.
pub fn block_forward(
    kind: BlockKind,
    high: &Tensor,
    low: Option<&Tensor>,
    cfg: &BlockConfig,
    w: &BlockWeights,
) -> Result<Tensor> {
    evaluate(kind, high, low, cfg, w)
}
