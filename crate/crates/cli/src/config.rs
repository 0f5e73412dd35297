use std::path::{Path, PathBuf};

use ann_core::blocks::{BlockConfig, BlockKind, Combine, Normalization};
use ann_core::sampling::SamplerSpec;
use ann_core::Shape3;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

fn default_seed() -> u64 {
    0
}

fn yes() -> bool {
    true
}

/// One experiment, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub block: BlockKind,
    pub shape: Shape3,
    /// Low-level input of fusion blocks; its `c` sets the key/value channels.
    #[serde(default)]
    pub low_shape: Option<Shape3>,
    pub embed_channels: usize,
    #[serde(default)]
    pub out_channels: Option<usize>,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_combine")]
    pub combine: Combine,
    #[serde(default)]
    pub share_key_value: bool,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub sampler: Option<SamplerSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Where commands write their tensor or report; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub bench: Option<BenchOptions>,
    #[serde(default)]
    pub sweep: Option<SweepOptions>,
    #[serde(default)]
    pub equivalence: Option<EquivalenceOptions>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckOptions>,
}

fn default_normalization() -> Normalization {
    Normalization::Softmax
}

fn default_combine() -> Combine {
    Combine::Concat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchOptions {
    /// Blocks to run on the same shape; every report is compared to the first.
    #[serde(default)]
    pub blocks: Vec<BlockKind>,
    #[serde(default = "one")]
    pub warmup: usize,
    #[serde(default = "three")]
    pub measured: usize,
    #[serde(default = "one")]
    pub threads: usize,
    /// Similarity tile budget for desk-scale runs; ignored with `--full`.
    #[serde(default = "default_tile_budget")]
    pub tile_budget_bytes: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

pub const DEFAULT_TILE_BUDGET: usize = 256 << 20;

fn default_tile_budget() -> usize {
    DEFAULT_TILE_BUDGET
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            warmup: 1,
            measured: 3,
            threads: 1,
            tile_budget_bytes: DEFAULT_TILE_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepOptions {
    #[serde(default)]
    pub shapes: Vec<Shape3>,
    #[serde(default)]
    pub blocks: Vec<BlockKind>,
    /// Bytes per element in the memory estimate.
    #[serde(default = "four")]
    pub element_bytes: u64,
}

fn four() -> u64 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceOptions {
    #[serde(default = "fifty")]
    pub cases: usize,
    #[serde(default = "eight")]
    pub max_side: usize,
}

fn fifty() -> usize {
    50
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOptions {
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub tolerance: Option<f64>,
}

/// Largest `C·H·W` gradcheck accepts for either input.
pub const GRADCHECK_CAP: usize = 4096;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The block configuration for `kind` on this experiment's shapes.
    pub fn block_config(&self, kind: BlockKind) -> BlockConfig {
        BlockConfig {
            in_channels: self.shape.channels,
            low_channels: kind
                .is_fusion()
                .then(|| self.low_shape.map_or(self.shape.channels, |s| s.channels)),
            embed_channels: self.embed_channels,
            out_channels: self.out_channels,
            normalization: self.normalization,
            combine: self.combine,
            share_key_value: self.share_key_value,
            bias: self.bias,
            sampler: self.sampler.clone(),
        }
    }

    pub fn low(&self, kind: BlockKind) -> Option<Shape3> {
        kind.is_fusion()
            .then(|| self.low_shape.unwrap_or(self.shape))
    }

    /// Cross-field checks; messages start with the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: ann_core::Error| CliError::Config(format!("{name}: {e}"));
        self.shape.validate().map_err(|e| field("shape", e))?;
        if let Some(low) = &self.low_shape {
            low.validate().map_err(|e| field("low_shape", e))?;
            if !self.block.is_fusion() {
                return Err(CliError::Config(format!(
                    "low_shape: only fusion blocks take a low-level input, block is {}",
                    self.block
                )));
            }
        }
        if let Some(s) = &self.sampler {
            s.validate().map_err(|e| field("sampler", e))?;
        }
        let kinds = self.kinds();
        for kind in &kinds {
            self.block_config(*kind).validate(*kind).map_err(|e| {
                field(
                    if self.sampler.is_none() {
                        "sampler"
                    } else {
                        "config"
                    },
                    e,
                )
            })?;
        }
        if let Some(b) = &self.bench {
            let bad = |m: String| Err(CliError::Config(m));
            if b.warmup < 1 {
                return bad(format!(
                    "bench.warmup: must be at least 1, got {}",
                    b.warmup
                ));
            }
            if b.measured < 3 {
                return bad(format!(
                    "bench.measured: must be at least 3, got {}",
                    b.measured
                ));
            }
            if b.threads < 1 {
                return bad("bench.threads: must be at least 1".into());
            }
            if b.tile_budget_bytes == 0 {
                return bad("bench.tile_budget_bytes: must be positive".into());
            }
        }
        if let Some(sw) = &self.sweep {
            for (i, s) in sw.shapes.iter().enumerate() {
                s.validate()
                    .map_err(|e| field(&format!("sweep.shapes[{i}]"), e))?;
            }
            if sw.element_bytes == 0 {
                return Err(CliError::Config(
                    "sweep.element_bytes: must be positive".into(),
                ));
            }
        }
        if let Some(eq) = &self.equivalence {
            if eq.cases == 0 || eq.max_side == 0 {
                return Err(CliError::Config(
                    "equivalence: cases and max_side must be positive".into(),
                ));
            }
        }
        if let Some(g) = &self.gradcheck {
            if g.eps.is_some_and(|e| e.is_nan() || e <= 0.0) {
                return Err(CliError::Config("gradcheck.eps: must be positive".into()));
            }
            if g.tolerance.is_some_and(|t| t.is_nan() || t <= 0.0) {
                return Err(CliError::Config(
                    "gradcheck.tolerance: must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// The configured block plus any listed in bench or sweep options.
    pub fn kinds(&self) -> Vec<BlockKind> {
        let mut kinds = vec![self.block];
        let extra = self.bench.iter().flat_map(|b| &b.blocks);
        let extra = extra.chain(self.sweep.iter().flat_map(|s| &s.blocks));
        for k in extra {
            if !kinds.contains(k) {
                kinds.push(*k);
            }
        }
        kinds
    }
}
