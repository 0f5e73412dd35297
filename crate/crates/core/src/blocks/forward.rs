use serde::{Deserialize, Serialize};

use super::{BlockConfig, BlockKind, BlockWeights, Combine, Normalization};
use crate::error::{shape_err, Result};
use crate::sampling::{sample_with_record, SamplerSpec};
use crate::tensor::{Shape3, Tensor};

/// Stages of a block forward, used for timing breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Query/key/value 1×1 projections (and input flattening).
    Projection,
    /// Anchor sampling of keys and values.
    Sampling,
    /// Query-key similarity product.
    Similarity,
    /// Row normalization of the similarity matrix.
    Normalization,
    /// Similarity-weighted sum of values.
    Aggregation,
    /// Output 1×1 projection.
    OutputProjection,
    /// Residual add or channel concat with the input.
    Combine,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Projection,
        Phase::Sampling,
        Phase::Similarity,
        Phase::Normalization,
        Phase::Aggregation,
        Phase::OutputProjection,
        Phase::Combine,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Projection => "projection",
            Phase::Sampling => "sampling",
            Phase::Similarity => "similarity",
            Phase::Normalization => "normalization",
            Phase::Aggregation => "aggregation",
            Phase::OutputProjection => "output_projection",
            Phase::Combine => "combine",
        }
    }
}

/// Observer hooks on a plain forward. All methods default to no-ops.
pub trait Probe {
    /// Marks the start of `phase` and the end of whatever phase preceded it.
    fn enter(&mut self, _phase: Phase) {}
    /// Marks the end of the last phase.
    fn finish(&mut self) {}
    /// Sees every normalized similarity tile.
    fn on_normalized(&mut self, _rows: &Tensor) {}
    /// Sees the full attention output `O` (`N × Ĉ`).
    fn on_attention(&mut self, _attended: &Tensor) {}
}

pub struct NoProbe;

impl Probe for NoProbe {}

/// Borrowed projection parameters in a backend's value type.
pub struct ProjectionRef<'a, V> {
    pub weight: &'a V,
    pub bias: Option<&'a V>,
}

pub struct WeightRefs<'a, V> {
    pub query: ProjectionRef<'a, V>,
    pub key: ProjectionRef<'a, V>,
    pub value: Option<ProjectionRef<'a, V>>,
    pub output: ProjectionRef<'a, V>,
}

/// The operations a block forward is written against. The plain evaluator
/// computes tensors directly; the gradient tape records nodes.
pub trait Backend {
    type V;

    fn enter(&mut self, _phase: Phase) {}
    fn finish(&mut self) {}
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn reshape_owned(&mut self, x: Self::V, shape: &[usize]) -> Result<Self::V>;
    fn project(&mut self, x: &Self::V, p: &ProjectionRef<'_, Self::V>) -> Result<Self::V>;
    fn sample(&mut self, x: &Self::V, grid: Shape3, spec: &SamplerSpec) -> Result<Self::V>;
    /// `normalize(queryᵀ · keys) · valuesᵀ`, an `N × Ĉ` matrix. Implementations
    /// enter the similarity, normalization and aggregation phases.
    fn attend(
        &mut self,
        query: &Self::V,
        keys: &Self::V,
        values: &Self::V,
        normalization: Normalization,
    ) -> Result<Self::V>;
    fn transpose(&mut self, x: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// The block computation shared by every backend.
///
/// `high` is the query-side `C × H × W` input; `low` the key/value-side input
/// of the fusion kinds.
pub fn run_block<B: Backend>(
    b: &mut B,
    kind: BlockKind,
    cfg: &BlockConfig,
    w: &WeightRefs<'_, B::V>,
    high: (&B::V, Shape3),
    low: Option<(&B::V, Shape3)>,
) -> Result<B::V> {
    let (high, high_shape) = high;
    b.enter(Phase::Projection);
    let xh = b.reshape(high, &[high_shape.channels, high_shape.positions()])?;
    let low_flat = match low {
        Some((l, s)) => Some((b.reshape(l, &[s.channels, s.positions()])?, s)),
        None => None,
    };
    let (xl, low_shape) = match &low_flat {
        Some((l, s)) => (l, *s),
        None => (&xh, high_shape),
    };
    let query = b.project(&xh, &w.query)?;
    let key = b.project(xl, &w.key)?;
    let value = match &w.value {
        Some(v) => Some(b.project(xl, v)?),
        None => None,
    };

    let (keys, values) = if kind.is_asymmetric() {
        b.enter(Phase::Sampling);
        let spec = cfg.sampler.as_ref().expect("validated sampler");
        let grid = low_shape.with_channels(cfg.embed_channels);
        let keys = b.sample(&key, grid, spec)?;
        // Unshared values use the same spec, so random samplers pick the same
        // locations for keys and values.
        let values = match &value {
            Some(v) => Some(b.sample(v, grid, spec)?),
            None => None,
        };
        (keys, values)
    } else {
        (key, value)
    };
    let attended = b.attend(
        &query,
        &keys,
        values.as_ref().unwrap_or(&keys),
        cfg.normalization,
    )?;

    b.enter(Phase::OutputProjection);
    let attended_t = b.transpose(&attended)?;
    let projected = b.project(&attended_t, &w.output)?;

    b.enter(Phase::Combine);
    let combined = match cfg.combine {
        Combine::Residual => b.add(&projected, &xh)?,
        Combine::Concat => b.concat(&projected, &xh)?,
    };
    let out = b.reshape_owned(
        combined,
        &[cfg.output_channels(), high_shape.height, high_shape.width],
    )?;
    b.finish();
    Ok(out)
}

/// Query rows per attention tile so one similarity tile stays within
/// `budget_bytes`; `None` means a single tile.
pub fn attention_tile_rows(positions: usize, anchors: usize, budget_bytes: Option<usize>) -> usize {
    match budget_bytes {
        None => positions,
        Some(budget) => (budget / (anchors * std::mem::size_of::<f64>())).clamp(1, positions),
    }
}

/// Direct tensor evaluation with optional instrumentation.
///
/// With a tile budget the attention is computed in blocks of query rows, so
/// the full similarity matrix is never resident. Every output element is
/// produced by the same arithmetic either way, so tiled and untiled results
/// are bitwise identical.
pub struct Eval<'p, P: Probe> {
    probe: &'p mut P,
    tile_budget: Option<usize>,
}

impl<'p, P: Probe> Eval<'p, P> {
    pub fn new(probe: &'p mut P) -> Self {
        Self {
            probe,
            tile_budget: None,
        }
    }

    pub fn with_tile_budget(mut self, budget_bytes: Option<usize>) -> Self {
        self.tile_budget = budget_bytes;
        self
    }

    /// Validates shapes and runs `kind` on `high` (and `low` for fusion kinds).
    pub fn forward(
        &mut self,
        kind: BlockKind,
        high: &Tensor,
        low: Option<&Tensor>,
        cfg: &BlockConfig,
        w: &BlockWeights,
    ) -> Result<Tensor> {
        let (high_shape, low_shape) = check_inputs(kind, high, low, cfg, w)?;
        let low = low.zip(low_shape);
        run_block(self, kind, cfg, &w.refs(), (high, high_shape), low)
    }
}

/// Shape checks common to all backends; returns the input grids.
pub(crate) fn check_inputs(
    kind: BlockKind,
    high: &Tensor,
    low: Option<&Tensor>,
    cfg: &BlockConfig,
    w: &BlockWeights,
) -> Result<(Shape3, Option<Shape3>)> {
    cfg.validate(kind)?;
    w.validate(cfg)?;
    let high_shape = high.dims3()?;
    if high_shape.channels != cfg.in_channels {
        return Err(shape_err!(
            "{kind} expects {} input channels, got {}",
            cfg.in_channels,
            high_shape.channels
        ));
    }
    let low_shape = match (kind.is_fusion(), low) {
        (true, Some(l)) => {
            let s = l.dims3()?;
            if s.channels != cfg.key_channels() {
                return Err(shape_err!(
                    "{kind} expects {} low-level channels, got {}",
                    cfg.key_channels(),
                    s.channels
                ));
            }
            Some(s)
        }
        (true, None) => return Err(shape_err!("{kind} needs a low-level input")),
        (false, Some(_)) => return Err(shape_err!("{kind} takes a single input")),
        (false, None) => None,
    };
    Ok((high_shape, low_shape))
}

impl<P: Probe> Backend for Eval<'_, P> {
    type V = Tensor;

    fn enter(&mut self, phase: Phase) {
        self.probe.enter(phase);
    }

    fn finish(&mut self) {
        self.probe.finish();
    }

    fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        x.reshape(shape)
    }

    fn reshape_owned(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        x.into_shape(shape)
    }

    fn project(&mut self, x: &Tensor, p: &ProjectionRef<'_, Tensor>) -> Result<Tensor> {
        Tensor::linear_project(x, p.weight, p.bias)
    }

    fn sample(&mut self, x: &Tensor, grid: Shape3, spec: &SamplerSpec) -> Result<Tensor> {
        sample_with_record(x, grid, spec).map(|(anchors, _)| anchors)
    }

    fn attend(
        &mut self,
        query: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        normalization: Normalization,
    ) -> Result<Tensor> {
        let (embed, n) = query.dims2()?;
        let (key_embed, s) = keys.dims2()?;
        if key_embed != embed || values.shape() != keys.shape() {
            return Err(shape_err!(
                "attention shapes disagree: query {:?}, keys {:?}, values {:?}",
                query.shape(),
                keys.shape(),
                values.shape()
            ));
        }
        self.probe.enter(Phase::Similarity);
        let query_t = query.transpose2d()?;
        self.probe.enter(Phase::Aggregation);
        let values_t = values.transpose2d()?;

        let tile = attention_tile_rows(n, s, self.tile_budget);
        if tile >= n {
            self.probe.enter(Phase::Similarity);
            let similarity = query_t.matmul(keys)?;
            self.probe.enter(Phase::Normalization);
            let normalized = normalization.apply(similarity)?;
            self.probe.on_normalized(&normalized);
            self.probe.enter(Phase::Aggregation);
            let attended = normalized.matmul(&values_t)?;
            drop(normalized);
            self.probe.on_attention(&attended);
            return Ok(attended);
        }

        let mut out = vec![0.0; n * embed];
        for start in (0..n).step_by(tile) {
            let end = (start + tile).min(n);
            self.probe.enter(Phase::Similarity);
            let rows = query_t.rows(start, end)?;
            let similarity = rows.matmul(keys)?;
            self.probe.enter(Phase::Normalization);
            let normalized = normalization.apply(similarity)?;
            self.probe.on_normalized(&normalized);
            self.probe.enter(Phase::Aggregation);
            let part = normalized.matmul(&values_t)?;
            out[start * embed..end * embed].copy_from_slice(part.data());
        }
        let attended = Tensor::wrap(vec![n, embed], out);
        self.probe.on_attention(&attended);
        Ok(attended)
    }

    fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        x.transpose2d()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Tensor::concat_channels(a, b)
    }
}
