use super::{block_forward, BlockConfig, BlockKind, BlockWeights};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

/// One block of the two-stage context head.
#[derive(Debug, Clone, Copy)]
pub struct PipelineStage<'a> {
    pub kind: BlockKind,
    pub cfg: &'a BlockConfig,
    pub weights: &'a BlockWeights,
}

/// Fuses the last two backbone stages and refines the result.
///
/// The fusion block takes `stage5` as its high-level (query) input and
/// `stage4` as its low-level input; in concat mode its output already carries
/// `stage5` alongside the attended features. That output feeds the
/// single-input refine block. Usually `fusion` is AFNB and `refine` APNB.
pub fn stage_fusion_pipeline(
    stage4: &Tensor,
    stage5: &Tensor,
    fusion: PipelineStage<'_>,
    refine: PipelineStage<'_>,
) -> Result<Tensor> {
    if !fusion.kind.is_fusion() {
        return Err(param_err!(
            "first pipeline stage must be a fusion block, got {}",
            fusion.kind
        ));
    }
    if refine.kind.is_fusion() {
        return Err(param_err!(
            "second pipeline stage must be a single-input block, got {}",
            refine.kind
        ));
    }
    let fused = block_forward(
        fusion.kind,
        stage5,
        Some(stage4),
        fusion.cfg,
        fusion.weights,
    )?;
    block_forward(refine.kind, &fused, None, refine.cfg, refine.weights)
}
