//! Objectives and optimization loops: direct per-scene fitting of a shared
//! Gaussian set (plus its ablation variants) and toy end-to-end training of
//! the refiner and planner.

pub mod fit;
pub mod model;
pub mod train;
pub mod world;

pub use fit::{fit_world, fit_world_from, FitConfig, FitResult, FitState, TraceRow};
pub use model::Variant;
pub use train::{train_toy_pipeline, TrainConfig, TrainReport};
pub use world::{evaluate_world, query_world, slice_world};

use crate::diffops::{Graph, Tensor, Var};
use crate::error::Result;
use crate::grid::{GridSpec, LabelGrid};

/// Loss weights for the occupancy and planning terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
    pub plan: f64,
    /// Per-category cross-entropy weights (`C + 1`); uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 6.0, lovasz: 1.0, plan: 1.0, class_weights: None }
    }
}

impl LossWeights {
    fn class_weights(&self, categories: usize) -> Vec<f64> {
        self.class_weights.clone().unwrap_or_else(|| vec![1.0; categories])
    }
}

/// `ce * CE + lovasz * Lovasz` of one category field against labels.
pub fn occupancy_term(g: &mut Graph, field: Var, labels: &LabelGrid, w: &LossWeights) -> Result<Var> {
    let k = labels.spec.num_classes + 1;
    let ce = g.cross_entropy(field, &labels.labels, &w.class_weights(k))?;
    let lov = g.lovasz(field, &labels.labels)?;
    let a = g.scale(ce, w.ce);
    let b = g.scale(lov, w.lovasz);
    g.add(a, b)
}

/// Sum of [`occupancy_term`] over supervised timestamps.
pub fn occupancy_loss(g: &mut Graph, fields: &[Var], gt: &[LabelGrid], w: &LossWeights) -> Result<Var> {
    if fields.len() != gt.len() {
        return Err(crate::error::Error::validation(format!("{} fields but {} ground-truth grids", fields.len(), gt.len())));
    }
    let mut total = g.scalar(0.0);
    for (f, l) in fields.iter().zip(gt) {
        let term = occupancy_term(g, *f, l, w)?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// `L_occ + plan * L_plan`.
pub fn total_loss(g: &mut Graph, occ: Var, plan: Option<Var>, w: &LossWeights) -> Result<Var> {
    match plan {
        None => Ok(occ),
        Some(p) => {
            let sp = g.scale(p, w.plan);
            g.add(occ, sp)
        }
    }
}

/// Hard labels from a `[V, C+1]` category field: free where `1 - P_free` is
/// below `threshold`, argmax semantic column otherwise (lowest index on ties).
pub fn field_labels(field: &Tensor, spec: &GridSpec, threshold: f64) -> LabelGrid {
    let c = spec.num_classes;
    let labels = (0..spec.num_voxels())
        .map(|v| {
            let row = field.row_slice(v);
            if 1.0 - row[c] < threshold {
                return spec.free_label();
            }
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelGrid { spec: spec.clone(), labels }
}
