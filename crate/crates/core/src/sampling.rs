//! Anchor sampling for the asymmetric blocks: adaptive average/max pooling,
//! uniform random point selection, and the pyramid sampler that concatenates
//! several pooled grids into one anchor set.
//!
//! Adaptive pooling bin `i` of `n` along an axis of length `L` covers
//! `[floor(i·L/n), ceil((i+1)·L/n))`. Bins overlap when `n` does not divide
//! `L`, and repeat when `n > L`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Shape3, SplitMix64, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    Average,
    Max,
    Random,
    PyramidAverage,
    PyramidMax,
    PyramidRandom,
    Identity,
}

impl SamplingMethod {
    pub fn is_pyramid(self) -> bool {
        matches!(
            self,
            Self::PyramidAverage | Self::PyramidMax | Self::PyramidRandom
        )
    }

    fn pool_mode(self) -> Option<PoolMode> {
        match self {
            Self::Average | Self::PyramidAverage => Some(PoolMode::Average),
            Self::Max | Self::PyramidMax => Some(PoolMode::Max),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Average,
    Max,
}

/// How keys and values are reduced to anchor points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub method: SamplingMethod,
    /// Pooled grid sizes `n`; pyramid methods take several, flat methods one.
    #[serde(default)]
    pub levels: Vec<usize>,
    /// Stream seed for the random methods.
    #[serde(default)]
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(method: SamplingMethod, levels: &[usize]) -> Self {
        Self {
            method,
            levels: levels.to_vec(),
            seed: 0,
        }
    }

    pub fn identity() -> Self {
        Self::new(SamplingMethod::Identity, &[])
    }

    pub fn pyramid_average(levels: &[usize]) -> Self {
        Self::new(SamplingMethod::PyramidAverage, levels)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == SamplingMethod::Identity {
            return Ok(());
        }
        if self.levels.is_empty() {
            return Err(param_err!(
                "levels must be nonempty for {:?} sampling",
                self.method
            ));
        }
        if self.levels.contains(&0) {
            return Err(param_err!("levels must all be >= 1, got {:?}", self.levels));
        }
        if !self.method.is_pyramid() && self.levels.len() != 1 {
            return Err(param_err!(
                "levels must hold exactly one size for flat {:?} sampling, got {:?}",
                self.method,
                self.levels
            ));
        }
        Ok(())
    }

    /// Anchor count `S`: the sum of `n²` over levels, or `positions` for the
    /// identity sampler.
    pub fn anchor_count(&self, positions: usize) -> usize {
        match self.method {
            SamplingMethod::Identity => positions,
            _ => self.levels.iter().map(|n| n * n).sum(),
        }
    }
}

/// Sampled anchors together with what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// `C × S` anchor matrix.
    pub values: Tensor,
    pub source_spec: SamplerSpec,
    pub source_shape: Shape3,
}

impl AnchorSet {
    pub fn anchor_count(&self) -> usize {
        self.values.shape()[1]
    }
}

/// One bin of an adaptive pooling grid, as half-open row and column ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bin {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Bin {
    pub fn size(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Flat row-major spatial indices covered by the bin.
    pub fn members(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows
            .clone()
            .flat_map(move |r| self.cols.clone().map(move |c| r * width + c))
    }
}

fn bin_range(i: usize, n: usize, len: usize) -> Range<usize> {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    start..end
}

/// The `n × n` adaptive bins of an `height × width` grid, row-major.
pub fn adaptive_bins(height: usize, width: usize, n: usize) -> Vec<Bin> {
    (0..n)
        .flat_map(|i| {
            (0..n).map(move |j| Bin {
                rows: bin_range(i, n, height),
                cols: bin_range(j, n, width),
            })
        })
        .collect()
}

/// How each segment of an anchor matrix was derived from the source columns.
/// Kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplePart {
    Average {
        bins: Vec<Bin>,
    },
    /// Source spatial index per `(channel, bin)`, channel-major.
    Max {
        bins: usize,
        argmax: Vec<usize>,
    },
    Gather {
        indices: Vec<usize>,
    },
}

impl SamplePart {
    pub fn anchors(&self) -> usize {
        match self {
            Self::Average { bins } => bins.len(),
            Self::Max { bins, .. } => *bins,
            Self::Gather { indices } => indices.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub shape: Shape3,
    pub parts: Vec<SamplePart>,
}

impl SampleRecord {
    pub fn anchors(&self) -> usize {
        self.parts.iter().map(SamplePart::anchors).sum()
    }
}

/// Pools a `C × N` matrix laid out over `shape`'s grid; returns `C × n²` values.
fn pool_flat(x: &[f64], shape: Shape3, n: usize, mode: PoolMode) -> (Vec<f64>, SamplePart) {
    let (c, np, w) = (shape.channels, shape.positions(), shape.width);
    let bins = adaptive_bins(shape.height, w, n);
    let nb = bins.len();
    let mut out = vec![0.0; c * nb];
    match mode {
        PoolMode::Average => {
            for ch in 0..c {
                let src = &x[ch * np..(ch + 1) * np];
                for (b, bin) in bins.iter().enumerate() {
                    let sum: f64 = bin.members(w).map(|i| src[i]).sum();
                    out[ch * nb + b] = sum / bin.size() as f64;
                }
            }
            (out, SamplePart::Average { bins })
        }
        PoolMode::Max => {
            let mut argmax = vec![0; c * nb];
            for ch in 0..c {
                let src = &x[ch * np..(ch + 1) * np];
                for (b, bin) in bins.iter().enumerate() {
                    // Strict comparison keeps the first row-major maximum.
                    let (best, val) = bin.members(w).map(|i| (i, src[i])).fold(
                        (usize::MAX, f64::NEG_INFINITY),
                        |acc, cur| {
                            if cur.1 > acc.1 || acc.0 == usize::MAX {
                                cur
                            } else {
                                acc
                            }
                        },
                    );
                    out[ch * nb + b] = val;
                    argmax[ch * nb + b] = best;
                }
            }
            (out, SamplePart::Max { bins: nb, argmax })
        }
    }
}

fn draw_indices(positions: usize, count: usize, rng: &mut SplitMix64) -> Vec<usize> {
    (0..count)
        .map(|_| rng.next_below(positions as u64) as usize)
        .collect()
}

fn gather_flat(x: &[f64], shape: Shape3, indices: &[usize]) -> Vec<f64> {
    let np = shape.positions();
    let mut out = Vec::with_capacity(shape.channels * indices.len());
    for row in x.chunks(np) {
        out.extend(indices.iter().map(|&i| row[i]));
    }
    out
}

/// Samples anchors from a `C × N` matrix whose columns lie on `shape`'s grid.
/// Returns the `C × S` anchors and the record needed to differentiate them.
pub fn sample_with_record(
    x: &Tensor,
    shape: Shape3,
    spec: &SamplerSpec,
) -> Result<(Tensor, SampleRecord)> {
    spec.validate()?;
    let (c, np) = x.dims2()?;
    if c != shape.channels || np != shape.positions() {
        return Err(shape_err!(
            "sampler input {:?} does not match grid {shape}",
            x.shape()
        ));
    }
    let s = spec.anchor_count(np);
    let mut segments: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut parts = Vec::new();
    match spec.method {
        SamplingMethod::Identity => {
            let indices: Vec<usize> = (0..np).collect();
            segments.push((x.data().to_vec(), np));
            parts.push(SamplePart::Gather { indices });
        }
        SamplingMethod::Random | SamplingMethod::PyramidRandom => {
            let mut rng = SplitMix64::new(spec.seed);
            let indices = draw_indices(np, s, &mut rng);
            segments.push((gather_flat(x.data(), shape, &indices), s));
            parts.push(SamplePart::Gather { indices });
        }
        method => {
            let mode = method.pool_mode().expect("pooling method");
            for &n in &spec.levels {
                let (vals, part) = pool_flat(x.data(), shape, n, mode);
                segments.push((vals, n * n));
                parts.push(part);
            }
        }
    }
    // Concatenate segments along the anchor axis, level order preserved.
    let mut data = vec![0.0; c * s];
    let mut offset = 0;
    for (vals, width) in &segments {
        for ch in 0..c {
            data[ch * s + offset..ch * s + offset + width]
                .copy_from_slice(&vals[ch * width..(ch + 1) * width]);
        }
        offset += width;
    }
    Ok((
        Tensor::wrap(vec![c, s], data),
        SampleRecord { shape, parts },
    ))
}

/// Adaptive pooling of a `C × H × W` map to `C × n × n`.
pub fn adaptive_pool(x: &Tensor, n: usize, mode: PoolMode) -> Result<Tensor> {
    if n < 1 {
        return Err(param_err!("pooled size n must be >= 1"));
    }
    let shape = x.dims3()?;
    let (vals, _) = pool_flat(x.data(), shape, n, mode);
    Ok(Tensor::wrap(vec![shape.channels, n, n], vals))
}

/// `count` spatial columns drawn uniformly with replacement.
pub fn random_points(x: &Tensor, count: usize, seed: u64) -> Result<Tensor> {
    if count < 1 {
        return Err(param_err!("random sample count must be >= 1"));
    }
    let shape = x.dims3()?;
    let mut rng = SplitMix64::new(seed);
    let indices = draw_indices(shape.positions(), count, &mut rng);
    Ok(Tensor::wrap(
        vec![shape.channels, count],
        gather_flat(x.data(), shape, &indices),
    ))
}

/// Samples a `C × H × W` map under any non-identity spec.
pub fn pyramid_sample(x: &Tensor, spec: &SamplerSpec) -> Result<AnchorSet> {
    if spec.method == SamplingMethod::Identity {
        return Err(param_err!("identity sampling goes through identity_sample"));
    }
    sample_anchors(x, spec)
}

/// Every spatial position as an anchor, row-major.
pub fn identity_sample(x: &Tensor) -> Result<AnchorSet> {
    sample_anchors(x, &SamplerSpec::identity())
}

/// Samples a `C × H × W` map under any spec, identity included.
pub fn sample_anchors(x: &Tensor, spec: &SamplerSpec) -> Result<AnchorSet> {
    let shape = x.dims3()?;
    let flat = x.reshape(&[shape.channels, shape.positions()])?;
    let (values, _) = sample_with_record(&flat, shape, spec)?;
    Ok(AnchorSet {
        values,
        source_spec: spec.clone(),
        source_shape: shape,
    })
}
