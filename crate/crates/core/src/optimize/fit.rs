//! Direct fitting of one Gaussian set to a ground-truth occupancy sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{bind_primitives, export, init_params, slice_field, InitConfig, Variant};
use super::{field_labels, occupancy_loss, LossWeights};
use crate::diffops::{adam_step_scaled, cosine_lr, AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::io::WorldFile;
use crate::metrics::{binary_iou, mean_iou};
use crate::splat::{SplatOptions, DEFAULT_CUTOFF_SIGMA, DEFAULT_OCC_THRESHOLD};

pub const DEFAULT_SCENE_VELOCITY_LR_SCALE: f64 = 1.0;

/// Parameters held during [`FitConfig::temporal_warmup`].
pub const TEMPORAL_PARAMS: [&str; 3] = ["log_sigma_t", "mu_t", "log_scales4"];

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub seed: u64,
    pub num_gaussians: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning-rate floor of the cosine schedule.
    pub lr_floor: f64,
    pub weights: LossWeights,
    pub variant: Variant,
    pub init: InitConfig,
    pub splat: SplatOptions,
    /// Classes whose softmax mass gates the object velocity.
    pub dynamic_classes: Vec<usize>,
    /// Record IoU/mIoU every this many steps (and at the last step); 0 disables.
    pub log_every: usize,
    /// Stop once the loss is at or below this value.
    pub target_loss: Option<f64>,
    /// Learning-rate multiplier for the shared scene velocity. Adam steps
    /// every coordinate by about `lr`, so a single parameter driven by all
    /// primitives otherwise moves no faster than one primitive's own.
    pub scene_velocity_lr_scale: f64,
    /// Starting value of the shared scene velocity (structured variant).
    pub v_scene_init: [f64; 2],
    /// Temporal-extent parameters stay at their initial values for this many steps.
    pub temporal_warmup: usize,
    /// Stop after this many completed steps without changing the schedule,
    /// leaving a state that resumes to the same trajectory.
    pub halt_at: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            seed: 0,
            num_gaussians: 128,
            steps: 1000,
            lr: 1e-2,
            lr_floor: 0.0,
            weights: LossWeights::default(),
            variant: Variant::Structured,
            init: InitConfig::default(),
            splat: SplatOptions { cutoff_sigma: DEFAULT_CUTOFF_SIGMA, ..Default::default() },
            dynamic_classes: crate::scenegen::DYNAMIC_CLASSES.to_vec(),
            log_every: 100,
            target_loss: None,
            scene_velocity_lr_scale: DEFAULT_SCENE_VELOCITY_LR_SCALE,
            temporal_warmup: 0,
            v_scene_init: [0.0, 0.0],
            halt_at: None,
        }
    }
}

/// IoU and mIoU of one supervised timestamp at one logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub loss: f64,
    pub iou: f64,
    pub miou: Option<f64>,
}

/// Resumable optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed steps.
    pub step: usize,
}

impl FitState {
    pub fn fresh(cfg: &FitConfig, spec: &crate::grid::GridSpec, horizon: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = init_params(cfg.variant, cfg.num_gaussians, spec, horizon, &cfg.init, &mut rng)?;
        if let Some(v) = params.get_mut("v_scene") {
            v.data_mut().copy_from_slice(&cfg.v_scene_init);
        }
        Ok(FitState { params, adam: AdamState::new(), step: 0 })
    }

    /// Flattens into a named-tensor store for the checkpoint format.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in self.params.iter() {
            s.insert(format!("param/{k}"), v.clone());
        }
        for (k, v) in &self.adam.m {
            s.insert(format!("adam_m/{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            s.insert(format!("adam_v/{k}"), v.clone());
        }
        s.insert("meta/step", Tensor::scalar(self.step as f64));
        s.insert("meta/adam_step", Tensor::scalar(self.adam.step as f64));
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut st = FitState { params: ParamStore::new(), adam: AdamState::new(), step: 0 };
        for (k, v) in store.iter() {
            if let Some(n) = k.strip_prefix("param/") {
                st.params.insert(n, v.clone());
            } else if let Some(n) = k.strip_prefix("adam_m/") {
                st.adam.m.insert(n.to_string(), v.clone());
            } else if let Some(n) = k.strip_prefix("adam_v/") {
                st.adam.v.insert(n.to_string(), v.clone());
            }
        }
        let count = |name: &str| -> Result<f64> {
            let x = store.require(name).map_err(|_| Error::format(format!("checkpoint lacks `{name}`")))?.item();
            if !(x >= 0.0 && x.fract() == 0.0) {
                return Err(Error::format(format!("checkpoint `{name}` = {x} is not a count")));
            }
            Ok(x)
        };
        st.step = count("meta/step")? as usize;
        st.adam.step = count("meta/adam_step")? as u64;
        if st.params.is_empty() {
            return Err(Error::format("checkpoint holds no parameters"));
        }
        Ok(st)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: FitState,
    pub world: WorldFile,
    /// Loss at every executed step (before that step's update).
    pub losses: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// First step whose loss reached `target_loss`.
    pub steps_to_target: Option<usize>,
    /// Largest vertical velocity dropped when exporting joint covariances.
    pub dropped_vz: f64,
}

impl FitResult {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Mean binary IoU over timestamps at the last logged step.
    pub fn final_iou(&self) -> Option<f64> {
        let last = self.trace.last()?.step;
        let rows: Vec<_> = self.trace.iter().filter(|r| r.step == last).collect();
        Some(rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64)
    }
}

fn check_inputs(times: &[f64], gt: &[LabelGrid]) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::validation("fitting needs at least two supervised timestamps"));
    }
    if times.len() != gt.len() {
        return Err(Error::validation(format!("{} timestamps but {} grids", times.len(), gt.len())));
    }
    for g in &gt[1..] {
        g.spec.same_as(&gt[0].spec)?;
    }
    Ok(())
}

/// Fits a fresh primitive set; see [`fit_world_from`].
pub fn fit_world(times: &[f64], gt: &[LabelGrid], horizon: f64, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(times, gt)?;
    let state = FitState::fresh(cfg, &gt[0].spec, horizon)?;
    fit_world_from(state, times, gt, horizon, cfg)
}

/// Continues optimizing `state` up to `cfg.steps` total steps.
///
/// One primitive set serves every timestamp; each step slices it at all
/// supervised times, splats, and takes one Adam step on the summed
/// occupancy loss under a cosine schedule.
pub fn fit_world_from(mut state: FitState, times: &[f64], gt: &[LabelGrid], horizon: f64, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(times, gt)?;
    let spec = gt[0].spec.clone();
    let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut losses = Vec::new();
    let mut trace = Vec::new();
    let mut steps_to_target = None;
    let end = cfg.halt_at.map_or(cfg.steps, |h| h.min(cfg.steps));
    while state.step < end {
        let step = state.step;
        let mut g = Graph::new();
        let prims = bind_primitives(&mut g, &state.params, cfg.variant, &cfg.dynamic_classes)?;
        let fields = times
            .iter()
            .map(|&t| slice_field(&mut g, &prims, t, &spec, cfg.splat))
            .collect::<Result<Vec<_>>>()?;
        let loss = occupancy_loss(&mut g, &fields, gt, &cfg.weights)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let culprit = state.params.first_non_finite().map_or("none".to_string(), |(n, i)| format!("{n}[{i}]"));
            return Err(Error::Numeric(format!("loss is {value} at step {step}; first non-finite parameter: {culprit}")));
        }
        losses.push(value);
        let last = step + 1 == cfg.steps;
        if cfg.log_every > 0 && (step.is_multiple_of(cfg.log_every) || last) {
            for ((&t, f), l) in times.iter().zip(&fields).zip(gt) {
                let pred = field_labels(g.value(*f), &spec, DEFAULT_OCC_THRESHOLD);
                trace.push(TraceRow {
                    step,
                    time: t,
                    loss: value,
                    iou: binary_iou(&pred, l)?,
                    miou: mean_iou(&pred, l)?.mean,
                });
            }
        }
        if steps_to_target.is_none() && cfg.target_loss.is_some_and(|tl| value <= tl) {
            steps_to_target = Some(step);
            break;
        }
        let grads = g.backward(loss)?.params();
        if let Some((n, i)) = grads.first_non_finite() {
            return Err(Error::Numeric(format!("gradient of {n}[{i}] is not finite at step {step}")));
        }
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, step as u64, cfg.steps as u64);
        adam_step_scaled(&mut state.params, &grads, &mut state.adam, &adam, lr, |name| {
            if step < cfg.temporal_warmup && TEMPORAL_PARAMS.contains(&name) {
                0.0
            } else if name == "v_scene" {
                cfg.scene_velocity_lr_scale
            } else {
                1.0
            }
        })?;
        if let Some((n, i)) = state.params.first_non_finite() {
            return Err(Error::Numeric(format!("parameter {n}[{i}] became non-finite at step {step}")));
        }
        state.step += 1;
    }
    let ex = export(&state.params, cfg.variant, &cfg.dynamic_classes)?;
    let world = WorldFile {
        horizon,
        v_scene: ex.v_scene,
        cutoff_sigma: cfg.splat.cutoff_sigma,
        spec,
        gaussians: ex.gaussians,
    };
    Ok(FitResult { state, world, losses, trace, steps_to_target, dropped_vz: ex.dropped_vz })
}
