//! Querying a fitted world at arbitrary timestamps.

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, SemanticOccupancyGrid};
use crate::io::WorldFile;
use crate::metrics::{binary_iou, mean_iou, MeanIou};
use crate::par::Execution;
use crate::primitive::{effective_velocity, slice_at, SlicedGaussian3D};
use crate::splat::{splat_with, to_labels, SplatOptions, DEFAULT_OCC_THRESHOLD};

fn check_time(world: &WorldFile, t: f64, allow_outside: bool) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::invalid(format!("query time {t} is not finite")));
    }
    if !allow_outside && !(0.0..=world.horizon).contains(&t) {
        return Err(Error::Range { what: "query time".into(), value: t, lo: 0.0, hi: world.horizon });
    }
    Ok(())
}

/// Every primitive conditioned on `t`; nothing about other timestamps is computed.
pub fn slice_world(world: &WorldFile, t: f64, allow_outside: bool) -> Result<Vec<SlicedGaussian3D>> {
    check_time(world, t, allow_outside)?;
    world
        .gaussians
        .iter()
        .map(|g| {
            let v = effective_velocity(g, world.v_scene)?;
            slice_at(g, &v, t)
        })
        .collect()
}

/// Occupancy of the world at exactly `t`.
pub fn query_world(world: &WorldFile, t: f64, allow_outside: bool, exec: Execution) -> Result<SemanticOccupancyGrid> {
    let sliced = slice_world(world, t, allow_outside)?;
    splat_with(&sliced, &world.spec, SplatOptions { cutoff_sigma: world.cutoff_sigma, exec })
}

/// Per-timestamp evaluation against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub time: f64,
    pub iou: f64,
    pub miou: MeanIou,
}

pub fn evaluate_world(world: &WorldFile, times: &[f64], gt: &[LabelGrid]) -> Result<Vec<Evaluation>> {
    if times.len() != gt.len() {
        return Err(Error::validation(format!("{} timestamps but {} grids", times.len(), gt.len())));
    }
    times
        .iter()
        .zip(gt)
        .map(|(&t, l)| {
            let pred = to_labels(&query_world(world, t, false, Execution::Parallel)?, DEFAULT_OCC_THRESHOLD);
            Ok(Evaluation { time: t, iou: binary_iou(&pred, l)?, miou: mean_iou(&pred, l)? })
        })
        .collect()
}
