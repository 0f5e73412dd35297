//! Multiply-accumulate counts and intermediate-buffer sizes of the blocks.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, bias additions,
//! residual additions and normalization are not counted. Pooling counts one
//! addition per input element per pyramid level for each sampled embedding.
//! All counts are exact integers.

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockKind};
use crate::error::{param_err, Result};
use crate::par::map_indices;
use crate::sampling::{SamplerSpec, SamplingMethod};
use crate::tensor::Shape3;

/// Default element width: 32-bit floats, as in GPU deployments.
pub const DEFAULT_ELEMENT_BYTES: u64 = 4;

/// An exact non-negative fraction kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub query_projection: u64,
    pub key_value_projection: u64,
    pub output_projection: u64,
    pub similarity: u64,
    pub aggregation: u64,
    pub pooling: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.query_projection
            + self.key_value_projection
            + self.output_projection
            + self.similarity
            + self.aggregation
            + self.pooling
    }

    /// The two attention products.
    pub fn matmul(&self) -> u64 {
        self.similarity + self.aggregation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub block: BlockKind,
    pub shape: Shape3,
    /// Key/value-side input; equal to `shape` for single-input blocks.
    pub low_shape: Shape3,
    pub embed_channels: usize,
    pub out_channels: usize,
    /// Key positions after sampling.
    pub anchors: u64,
    pub macs: MacBreakdown,
    pub macs_total: u64,
    pub macs_matmul: u64,
    /// Bytes of one similarity matrix (`N × S`).
    pub similarity_bytes: u64,
    /// Embeddings, anchors, and the raw and normalized similarity matrices.
    pub peak_bytes: u64,
    pub element_bytes: u64,
    /// `S / N_keys`: the fraction of dense attention work that remains.
    pub complexity: Ratio,
}

impl CostReport {
    /// `N_keys / S`, the attention-product saving factor.
    pub fn saving(&self) -> f64 {
        self.complexity.den as f64 / self.complexity.num as f64
    }

    pub const CSV_HEADER: &'static str =
        "block,H,W,C,Chat,S,macs_total,macs_matmul,peak_bytes,ratio";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{:.1}",
            self.block,
            self.shape.height,
            self.shape.width,
            self.shape.channels,
            self.embed_channels,
            self.anchors,
            self.macs_total,
            self.macs_matmul,
            self.peak_bytes,
            self.saving()
        )
    }
}

fn pooling_levels(spec: &SamplerSpec) -> u64 {
    match spec.method {
        SamplingMethod::Average
        | SamplingMethod::Max
        | SamplingMethod::PyramidAverage
        | SamplingMethod::PyramidMax => spec.levels.len() as u64,
        _ => 0,
    }
}

/// Cost of any block kind; `low` defaults to `high` for fusion kinds.
pub fn estimate(
    kind: BlockKind,
    high: Shape3,
    low: Option<Shape3>,
    cfg: &BlockConfig,
    element_bytes: u64,
) -> Result<CostReport> {
    cfg.validate(kind)?;
    if high.channels != cfg.in_channels {
        return Err(param_err!(
            "shape has {} channels, config expects {}",
            high.channels,
            cfg.in_channels
        ));
    }
    let low = if kind.is_fusion() {
        low.unwrap_or(high).with_channels(cfg.key_channels())
    } else {
        high
    };
    let u = |v: usize| v as u64;
    let (n_q, n_k) = (u(high.positions()), u(low.positions()));
    let (c, c_low, e, out) = (
        u(high.channels),
        u(low.channels),
        u(cfg.embed_channels),
        u(cfg.out()),
    );
    let branches = if cfg.share_key_value { 1 } else { 2 };

    let (anchors, pooling) = match (&cfg.sampler, kind.is_asymmetric()) {
        (Some(spec), true) => (
            u(spec.anchor_count(low.positions())),
            branches * e * n_k * pooling_levels(spec),
        ),
        _ => (n_k, 0),
    };
    let macs = MacBreakdown {
        query_projection: n_q * c * e,
        key_value_projection: branches * n_k * c_low * e,
        output_projection: out * e * n_q,
        similarity: n_q * anchors * e,
        aggregation: n_q * anchors * e,
        pooling,
    };
    let sampled = if kind.is_asymmetric() {
        branches * e * anchors
    } else {
        0
    };
    let live_elems = e * n_q + branches * e * n_k + sampled + 2 * n_q * anchors;
    Ok(CostReport {
        block: kind,
        shape: high,
        low_shape: low,
        embed_channels: cfg.embed_channels,
        out_channels: cfg.out(),
        anchors,
        macs_total: macs.total(),
        macs_matmul: macs.matmul(),
        macs,
        similarity_bytes: n_q * anchors * element_bytes,
        peak_bytes: live_elems * element_bytes,
        element_bytes,
        complexity: Ratio::new(anchors, n_k),
    })
}

pub fn estimate_nb(shape: Shape3, cfg: &BlockConfig) -> Result<CostReport> {
    estimate(BlockKind::Nb, shape, None, cfg, DEFAULT_ELEMENT_BYTES)
}

pub fn estimate_apnb(shape: Shape3, cfg: &BlockConfig) -> Result<CostReport> {
    estimate(BlockKind::Apnb, shape, None, cfg, DEFAULT_ELEMENT_BYTES)
}

pub fn estimate_fusion(
    high: Shape3,
    low: Shape3,
    cfg: &BlockConfig,
    asymmetric: bool,
) -> Result<CostReport> {
    let kind = if asymmetric {
        BlockKind::Afnb
    } else {
        BlockKind::Fnb
    };
    estimate(kind, high, Some(low), cfg, DEFAULT_ELEMENT_BYTES)
}

/// Every shape against every config, shape-major, in input order. Each
/// config's `in_channels` is overridden by the shape's channel count.
pub fn sweep(
    shapes: &[Shape3],
    configs: &[(BlockKind, BlockConfig)],
    element_bytes: u64,
) -> Result<Vec<CostReport>> {
    if shapes.is_empty() || configs.is_empty() {
        return Err(param_err!("sweep needs at least one shape and one config"));
    }
    map_indices(shapes.len() * configs.len(), |i| {
        let shape = shapes[i / configs.len()];
        let (kind, cfg) = &configs[i % configs.len()];
        let mut cfg = cfg.clone();
        cfg.in_channels = shape.channels;
        estimate(*kind, shape, None, &cfg, element_bytes)
    })
    .into_iter()
    .collect()
}

/// One row of the reference efficiency comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub block: BlockKind,
    pub height: usize,
    pub width: usize,
    pub estimated_gmacs: f64,
    pub reference_gmacs: f64,
    pub relative_difference: f64,
    /// Allowed relative difference, or `None` when the row is reported only.
    pub tolerance: Option<f64>,
}

impl ReferenceRow {
    pub fn within_tolerance(&self) -> Option<bool> {
        self.tolerance.map(|t| self.relative_difference <= t)
    }
}

/// Reference configuration: 2048 input channels, 256 embedding channels,
/// shared key/value projection, pyramid average sampling over {1, 3, 6, 8}.
pub fn reference_config() -> BlockConfig {
    BlockConfig::new(2048, 256)
        .with_shared_key_value(true)
        .with_sampler(SamplerSpec::pyramid_average(&[1, 3, 6, 8]))
}

/// Published GFLOPs for the two block types at two input sizes, next to the
/// estimates. The APNB row at 256×128 is not reproducible under the same
/// counting convention as the NB rows and carries no tolerance.
pub fn reference_table() -> Result<Vec<ReferenceRow>> {
    let cfg = reference_config();
    let rows = [
        (BlockKind::Nb, 96, 96, 58.0, Some(0.01)),
        (BlockKind::Apnb, 96, 96, 15.5, Some(0.05)),
        (BlockKind::Nb, 128, 256, 601.4, Some(0.01)),
        (BlockKind::Apnb, 128, 256, 43.5, None),
    ];
    rows.into_iter()
        .map(|(block, h, w, reference, tolerance)| {
            let report = estimate(
                block,
                Shape3::new(2048, h, w),
                None,
                &cfg,
                DEFAULT_ELEMENT_BYTES,
            )?;
            let estimated = report.macs_total as f64 / 1e9;
            Ok(ReferenceRow {
                block,
                height: h,
                width: w,
                estimated_gmacs: estimated,
                reference_gmacs: reference,
                relative_difference: (estimated - reference).abs() / reference,
                tolerance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_nb_instantiation() {
        let cfg = BlockConfig::new(2, 1).with_shared_key_value(true);
        let r = estimate_nb(Shape3::new(2, 2, 2), &cfg).unwrap();
        assert_eq!(r.macs.query_projection, 8);
        assert_eq!(r.macs.key_value_projection, 8);
        assert_eq!(r.macs.output_projection, 8);
        assert_eq!(r.macs.similarity, 16);
        assert_eq!(r.macs.aggregation, 16);
        assert_eq!(r.macs_total, 56);
    }

    #[test]
    fn reference_nb_rows() {
        let cfg = reference_config();
        let small = estimate_nb(Shape3::new(2048, 96, 96), &cfg).unwrap();
        let large = estimate_nb(Shape3::new(2048, 128, 256), &cfg).unwrap();
        assert!((small.macs_total as f64 / 58.0e9 - 1.0).abs() < 0.01);
        assert!((large.macs_total as f64 / 601.4e9 - 1.0).abs() < 0.01);
    }

    #[test]
    fn apnb_saving_at_large_size() {
        let cfg = reference_config();
        let shape = Shape3::new(2048, 128, 256);
        let nb = estimate_nb(shape, &cfg).unwrap();
        let apnb = estimate_apnb(shape, &cfg).unwrap();
        assert_eq!(apnb.anchors, 110);
        assert_eq!(
            u128::from(apnb.macs_matmul) * 32768,
            u128::from(nb.macs_matmul) * 110
        );
        assert_eq!(apnb.similarity_bytes * 32768, nb.similarity_bytes * 110);
        assert_eq!(apnb.complexity, Ratio::new(110, 32768));
        assert!((apnb.saving() - 297.9).abs() < 0.01);
        assert!(apnb.csv_row().ends_with(",297.9"));
    }

    #[test]
    fn apnb_small_size_against_reference() {
        let r = estimate_apnb(Shape3::new(2048, 96, 96), &reference_config()).unwrap();
        let gmacs = r.macs_total as f64 / 1e9;
        assert!((gmacs - 15.0).abs() < 0.05, "{gmacs}");
        assert!((gmacs - 15.5).abs() / 15.5 < 0.05);
    }

    #[test]
    fn dense_fusion_matches_unshared_nb() {
        let cfg = BlockConfig::new(8, 4);
        let shape = Shape3::new(8, 5, 6);
        let fnb = estimate_fusion(shape, shape, &cfg, false).unwrap();
        let nb = estimate_nb(shape, &cfg).unwrap();
        assert_eq!(fnb.macs, nb.macs);
        assert_eq!(fnb.macs_total, nb.macs_total);
    }

    #[test]
    fn fusion_scaling() {
        let cfg = BlockConfig::new(8, 4)
            .with_low_channels(3)
            .with_sampler(SamplerSpec::pyramid_average(&[1, 3, 6, 8]));
        let high = Shape3::new(8, 10, 12);
        let low = Shape3::new(3, 20, 20);
        let dense = estimate_fusion(high, low, &cfg, false).unwrap();
        let sparse = estimate_fusion(high, low, &cfg, true).unwrap();
        assert_eq!(sparse.macs_matmul * 400, dense.macs_matmul * 110);

        let single = estimate_fusion(high, Shape3::new(3, 1, 1), &cfg, false).unwrap();
        assert_eq!(single.macs_matmul, 2 * 120 * 4);
    }

    #[test]
    fn sweep_order_and_identity() {
        let cfg = BlockConfig::new(4, 2);
        let a = Shape3::new(4, 3, 3);
        let b = Shape3::new(4, 5, 2);
        let one = sweep(&[a], &[(BlockKind::Nb, cfg.clone())], DEFAULT_ELEMENT_BYTES).unwrap();
        assert_eq!(one, vec![estimate_nb(a, &cfg).unwrap()]);
        let two = sweep(
            &[a, b],
            &[(BlockKind::Nb, cfg.clone())],
            DEFAULT_ELEMENT_BYTES,
        )
        .unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].shape, b);
        assert!(sweep(&[], &[(BlockKind::Nb, cfg)], DEFAULT_ELEMENT_BYTES).is_err());
    }

    #[test]
    fn reference_table_sweep() {
        let cfg = reference_config();
        let rows = sweep(
            &[Shape3::new(2048, 96, 96), Shape3::new(2048, 128, 256)],
            &[(BlockKind::Nb, cfg)],
            DEFAULT_ELEMENT_BYTES,
        )
        .unwrap();
        let g: Vec<f64> = rows.iter().map(|r| r.macs_total as f64 / 1e9).collect();
        assert!((g[0] - 58.0).abs() / 58.0 < 0.01 && (g[1] - 601.4).abs() / 601.4 < 0.01);
    }
}
