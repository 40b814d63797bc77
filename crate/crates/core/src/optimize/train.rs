//! Joint toy-scale training of the refiner, attribute heads, scene-velocity
//! branch and planner on generated scenarios.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::dynamic_alpha;
use super::{occupancy_loss, total_loss, LossWeights};
use crate::diffops::{adam_step, cosine_lr, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::dynamics::{
    default_history, encode_ego, init_dynamics, plan, plan_from_tensor, plan_loss, scene_velocity, DynamicsConfig, EgoRole,
    EgoState,
};
use crate::error::{Error, Result};
use crate::metrics::l2_at_horizons;
use crate::refiner::{init_refiner, refine, to_gaussians, AnchorSet, AnchorVars, FeatureField, RefinerConfig};
use crate::scenegen::{rasterize_gt, Scenario};
use crate::splat::{SplatOptions, DEFAULT_CUTOFF_SIGMA};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub refiner: RefinerConfig,
    pub dynamics: DynamicsConfig,
    pub weights: LossWeights,
    pub splat: SplatOptions,
    pub dynamic_classes: Vec<usize>,
    /// Check decoded primitives every this many steps (and at the last); 0 disables.
    pub log_every: usize,
    /// Length of the cosine schedule; `steps` when `None`, longer to run a
    /// window at the start of a longer schedule.
    pub schedule_steps: Option<usize>,
    /// Skip the occupancy branch (planner-only training).
    pub occupancy: bool,
}

impl TrainConfig {
    /// Toy dimensions: Q = 256, D = 16, learning rate 2e-4.
    pub fn toy(num_classes: usize) -> Self {
        let refiner = RefinerConfig::desk(num_classes);
        let dynamics = DynamicsConfig::new(refiner.dim, refiner.heads);
        TrainConfig {
            seed: 0,
            steps: 50,
            lr: 2e-4,
            lr_floor: 0.0,
            refiner,
            dynamics,
            weights: LossWeights::default(),
            splat: SplatOptions { cutoff_sigma: DEFAULT_CUTOFF_SIGMA, ..Default::default() },
            dynamic_classes: crate::scenegen::DYNAMIC_CLASSES.to_vec(),
            log_every: 10,
            schedule_steps: None,
            occupancy: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamStore,
    /// Batch-mean total loss per step, before that step's update.
    pub losses: Vec<f64>,
    pub occ_losses: Vec<f64>,
    pub plan_losses: Vec<f64>,
    /// Steps at which decoded primitives were validated.
    pub checked_steps: Vec<usize>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Per-scene inputs that stay fixed during training.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scenario: Scenario,
    pub field: Arc<FeatureField>,
    pub anchors: AnchorSet,
    pub history: Vec<EgoState>,
}

impl PreparedScene {
    /// Feature field from ground truth at `0` and every supervised time, and
    /// random anchors, both drawn from `rng`.
    pub fn new(scenario: Scenario, cfg: &RefinerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut times = vec![0.0];
        times.extend_from_slice(&scenario.times);
        let mut labels = vec![rasterize_gt(&scenario.spec, 0.0, &scenario.grid)?];
        labels.extend(scenario.gt.iter().cloned());
        let field = Arc::new(FeatureField::from_labels(&scenario.grid, &times, &labels, cfg.dim, rng)?);
        let anchors = AnchorSet::random(cfg, &scenario.grid, scenario.spec.horizon, rng)?;
        let history = default_history(&scenario.spec)?;
        Ok(PreparedScene { scenario, field, anchors, history })
    }
}

pub fn prepare_batch(scenarios: &[Scenario], cfg: &TrainConfig) -> Result<Vec<PreparedScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1e1d);
    scenarios.iter().map(|s| PreparedScene::new(s.clone(), &cfg.refiner, &mut rng)).collect()
}

pub fn init_pipeline(cfg: &TrainConfig) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    init_refiner(&cfg.refiner, &mut store, &mut rng)?;
    init_dynamics(&cfg.dynamics, &mut store, &mut rng)?;
    Ok(store)
}

/// Graph handles produced for one scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneForward {
    pub occ: Option<Var>,
    pub plan: Var,
    pub plan_loss: Var,
    pub total: Var,
    pub v_scene: Var,
    pub features: Var,
}

/// Builds the full forward pass for one scene.
pub fn forward_scene(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &TrainConfig,
    scene: &PreparedScene,
) -> Result<(SceneForward, crate::refiner::Refined)> {
    let anchors = AnchorVars::constant(g, &scene.anchors);
    let r = refine(g, store, &cfg.refiner, &scene.field, anchors)?;
    let features = r.anchors.features;
    let qv = encode_ego(g, store, &cfg.dynamics, &scene.history, EgoRole::Scene)?;
    let v_scene = scene_velocity(g, store, &cfg.dynamics, qv, features)?;
    let occ = if cfg.occupancy {
        let h = r.heads;
        let alpha = dynamic_alpha(g, h.logits, &cfg.dynamic_classes)?;
        let gated = g.mul_col(h.v_dyn, alpha)?;
        let planar = g.add_row(gated, v_scene)?;
        let vel = g.planar_to_3d(planar)?;
        let cov = g.covariance(h.log_scales, h.quat)?;
        let spec = &scene.scenario.grid;
        let mut fields = Vec::with_capacity(scene.scenario.times.len());
        for &t in &scene.scenario.times {
            let mean = g.slice_mean(r.anchors.mu_s, r.anchors.mu_t, vel, t)?;
            let w = g.slice_weight(r.anchors.mu_t, h.log_sigma_t, h.opacity_logit, t)?;
            fields.push(g.splat_field(mean, cov, w, h.logits, spec, cfg.splat)?);
        }
        Some(occupancy_loss(g, &fields, &scene.scenario.gt, &cfg.weights)?)
    } else {
        None
    };
    let (planned, pl) = forward_plan(g, store, cfg, scene, features)?;
    let total = match occ {
        Some(o) => total_loss(g, o, Some(pl), &cfg.weights)?,
        None => g.scale(pl, cfg.weights.plan),
    };
    Ok((SceneForward { occ, plan: planned, plan_loss: pl, total, v_scene, features }, r))
}

/// Planned increments `[K, 2]` and their loss against the scene's waypoints.
pub fn forward_plan(g: &mut Graph, store: &ParamStore, cfg: &TrainConfig, scene: &PreparedScene, features: Var) -> Result<(Var, Var)> {
    let qt = encode_ego(g, store, &cfg.dynamics, &scene.history, EgoRole::Trajectory)?;
    let planned = plan(g, store, &cfg.dynamics, qt, features)?;
    let pl = plan_loss(g, planned, &scene.scenario.waypoints)?;
    Ok((planned, pl))
}

/// Trains all pipeline parameters on a fixed batch under the batch-mean
/// total loss with Adam and a cosine schedule.
pub fn train_toy_pipeline(scenarios: &[Scenario], cfg: &TrainConfig) -> Result<TrainReport> {
    if scenarios.is_empty() {
        return Err(Error::validation("training batch is empty"));
    }
    let batch = prepare_batch(scenarios, cfg)?;
    let mut params = init_pipeline(cfg)?;
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut report = TrainReport {
        params: ParamStore::new(),
        losses: Vec::new(),
        occ_losses: Vec::new(),
        plan_losses: Vec::new(),
        checked_steps: Vec::new(),
    };
    let n = batch.len() as f64;
    // without the occupancy branch nothing upstream of the planner receives
    // gradient, so the refined features are fixed for the whole run
    let frozen = if cfg.occupancy {
        None
    } else {
        let mut feats = Vec::with_capacity(batch.len());
        for scene in &batch {
            let mut g = Graph::new();
            let (fw, _) = forward_scene(&mut g, &params, cfg, scene)?;
            feats.push(g.value(fw.features).clone());
        }
        Some(feats)
    };
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let mut sum = g.scalar(0.0);
        let (mut occ_sum, mut plan_sum) = (0.0, 0.0);
        let check = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps);
        for (i, scene) in batch.iter().enumerate() {
            if let Some(feats) = &frozen {
                let f = g.constant(feats[i].clone());
                let pl = forward_plan(&mut g, &params, cfg, scene, f)?.1;
                plan_sum += g.value(pl).item();
                let term = g.scale(pl, cfg.weights.plan);
                sum = g.add(sum, term)?;
                continue;
            }
            let (fw, refined) = forward_scene(&mut g, &params, cfg, scene)?;
            if check {
                to_gaussians(&g, &refined, &cfg.dynamic_classes)
                    .map_err(|e| Error::Numeric(format!("decoded primitive invalid at step {step}: {e}")))?;
            }
            occ_sum += fw.occ.map_or(0.0, |o| g.value(o).item());
            plan_sum += g.value(fw.plan_loss).item();
            sum = g.add(sum, fw.total)?;
        }
        if check {
            report.checked_steps.push(step);
        }
        let loss = g.scale(sum, 1.0 / n);
        let value = g.value(loss).item();
        if !value.is_finite() {
            let culprit = params.first_non_finite().map_or("none".to_string(), |(n, i)| format!("{n}[{i}]"));
            return Err(Error::Numeric(format!("loss is {value} at step {step}; first non-finite parameter: {culprit}")));
        }
        report.losses.push(value);
        report.occ_losses.push(occ_sum / n);
        report.plan_losses.push(plan_sum / n);
        let grads = g.backward(loss)?.params();
        if let Some((name, i)) = grads.first_non_finite() {
            return Err(Error::Numeric(format!("gradient of {name}[{i}] is not finite at step {step}")));
        }
        let total = cfg.schedule_steps.unwrap_or(cfg.steps);
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, step as u64, total as u64);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg, lr)?;
    }
    report.params = params;
    Ok(report)
}

/// Average L2 (over the 1/2/3 s horizons, then over scenes) of the planner.
pub fn planner_l2(params: &ParamStore, cfg: &TrainConfig, scenarios: &[Scenario]) -> Result<f64> {
    if scenarios.is_empty() {
        return Err(Error::validation("no scenarios to evaluate"));
    }
    let planner_only = TrainConfig { occupancy: false, ..cfg.clone() };
    let batch = prepare_batch(scenarios, &planner_only)?;
    let mut total = 0.0;
    for scene in &batch {
        let mut g = Graph::new();
        let (fw, _) = forward_scene(&mut g, params, &planner_only, scene)?;
        let p = plan_from_tensor(g.value(fw.plan));
        let pred = p.positions([0.0, 0.0]);
        let gt = crate::dynamics::plan_to_positions(&scene.scenario.waypoints, [0.0, 0.0]);
        total += l2_at_horizons(&pred, &gt)?.average;
    }
    Ok(total / batch.len() as f64)
}
