//! Glue for the raw stage: grayscale pyramids, alignment, merge.

use rayon::prelude::*;

use crate::align::{align_burst_levels, AlignmentConfig, MotionField};
use crate::burst_io::{BayerFrame, NoiseParams, RawBurst};
use crate::error::Result;
use crate::merge::{merge_burst, MergeConfig};
use crate::pyramid::{bayer_to_gray, build_pyramid, Pyramid, DEFAULT_FACTORS};

pub struct AlignMergeOutput {
    /// One pyramid per frame, in processing order (reference first).
    pub pyramids: Vec<Pyramid>,
    /// Per alternate, every level coarsest first.
    pub fields: Vec<Vec<MotionField>>,
    pub merged: BayerFrame,
}

impl AlignMergeOutput {
    pub fn finest_fields(&self) -> Vec<MotionField> {
        finest(&self.fields)
    }
}

fn finest(fields: &[Vec<MotionField>]) -> Vec<MotionField> {
    fields
        .iter()
        .map(|levels| levels.last().expect("at least one level").clone())
        .collect()
}

pub fn burst_pyramids(burst: &RawBurst) -> Result<Vec<Pyramid>> {
    burst
        .processing_order()
        .par_iter()
        .map(|&k| build_pyramid(&bayer_to_gray(&burst.frames()[k], burst.meta()), &DEFAULT_FACTORS))
        .collect()
}

pub fn align_and_merge(
    burst: &RawBurst,
    align_cfg: &AlignmentConfig,
    merge_cfg: &MergeConfig,
    np: &NoiseParams,
) -> Result<AlignMergeOutput> {
    align_cfg.validate()?;
    merge_cfg.validate()?;
    let pyramids = burst_pyramids(burst)?;
    let fields = align_burst_levels(&pyramids, align_cfg)?;
    let merged = merge_burst(burst, &finest(&fields), np, merge_cfg)?;
    Ok(AlignMergeOutput {
        pyramids,
        fields,
        merged,
    })
}
