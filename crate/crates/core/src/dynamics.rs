//! Ego-conditioned scene velocity, dynamic-probability gating and the
//! trajectory planning head.
//!
//! Two state encoders with separate parameters embed the recent ego history:
//! one drives the scene-velocity estimate, the other the planner. The planner
//! reads the primitive features through a stop-gradient, so the planning loss
//! never reaches the features.

use rand::Rng;

use crate::diffops::{Graph, Mlp, MultiHeadAttention, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::WAYPOINT_STEP;
use crate::scenegen::{ego_pose_at, SceneSpec};

pub const DEFAULT_HISTORY: usize = 4;
pub const DEFAULT_PLAN_STEPS: usize = 6;
/// Per-state features: relative position (2), yaw, velocity (2), acceleration (2).
pub const STATE_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub position: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub acceleration: [f64; 2],
    pub timestamp: f64,
}

impl EgoState {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.position[0],
            self.position[1],
            self.yaw,
            self.velocity[0],
            self.velocity[1],
            self.acceleration[0],
            self.acceleration[1],
            self.timestamp,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(format!("ego state has non-finite entries: {self:?}")));
        }
        Ok(())
    }
}

/// `K` incremental planar displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub steps: Vec<[f64; 2]>,
}

impl TrajectoryPlan {
    pub fn positions(&self, start: [f64; 2]) -> Vec<[f64; 2]> {
        plan_to_positions(&self.steps, start)
    }

    /// Rows `k dx dy x y` with absolute positions from `start`.
    pub fn to_text(&self, start: [f64; 2]) -> String {
        let mut s = String::from("# k dx dy x_abs y_abs\n");
        for (k, (d, p)) in self.steps.iter().zip(self.positions(start)).enumerate() {
            s.push_str(&format!("{} {} {} {} {}\n", k + 1, d[0], d[1], p[0], p[1]));
        }
        s
    }
}

/// Which state encoder to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EgoRole {
    Scene,
    Trajectory,
}

impl EgoRole {
    fn prefix(self) -> &'static str {
        match self {
            EgoRole::Scene => "dyn.psi_v",
            EgoRole::Trajectory => "dyn.psi_tau",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub dim: usize,
    pub heads: usize,
    pub history: usize,
    pub plan_steps: usize,
}

impl DynamicsConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        DynamicsConfig { dim, heads, history: DEFAULT_HISTORY, plan_steps: DEFAULT_PLAN_STEPS }
    }

    fn encoder(&self, role: EgoRole) -> Mlp {
        Mlp::new(role.prefix(), &[self.history * STATE_FEATURES, self.dim, self.dim, self.dim])
    }

    fn scene_attn(&self) -> Result<MultiHeadAttention> {
        MultiHeadAttention::new("dyn.scene_attn", self.dim, self.heads)
    }

    fn plan_attn(&self) -> Result<MultiHeadAttention> {
        MultiHeadAttention::new("plan.attn", self.dim, self.heads)
    }

    fn mlp_v(&self) -> Mlp {
        Mlp::new("dyn.mlp_v", &[self.dim, self.dim, 2])
    }

    fn mlp_tau(&self) -> Mlp {
        Mlp::new("plan.mlp_tau", &[self.dim, self.dim, 2 * self.plan_steps])
    }
}

pub fn init_dynamics<R: Rng>(cfg: &DynamicsConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    if cfg.history == 0 || cfg.plan_steps == 0 {
        return Err(Error::validation("history and plan length must be >= 1"));
    }
    cfg.encoder(EgoRole::Scene).init(store, rng);
    cfg.encoder(EgoRole::Trajectory).init(store, rng);
    cfg.scene_attn()?.init(store, rng);
    cfg.plan_attn()?.init(store, rng);
    cfg.mlp_v().init(store, rng);
    cfg.mlp_tau().init(store, rng);
    Ok(())
}

/// Fixed-length history vector: the most recent `len` states, oldest first,
/// padded at the front by repeating the oldest state. Positions are taken
/// relative to the most recent state.
pub fn flatten_history(history: &[EgoState], len: usize) -> Result<Vec<f64>> {
    let Some(last) = history.last() else {
        return Err(Error::validation("ego history is empty"));
    };
    for s in history {
        s.validate()?;
    }
    let recent = &history[history.len().saturating_sub(len)..];
    let pad = len - recent.len();
    let mut out = Vec::with_capacity(len * STATE_FEATURES);
    for s in std::iter::repeat_n(&recent[0], pad).chain(recent) {
        out.extend_from_slice(&[
            s.position[0] - last.position[0],
            s.position[1] - last.position[1],
            s.yaw,
            s.velocity[0],
            s.velocity[1],
            s.acceleration[0],
            s.acceleration[1],
        ]);
    }
    Ok(out)
}

/// `[1, D]` ego query from the role's state encoder.
pub fn encode_ego(g: &mut Graph, store: &ParamStore, cfg: &DynamicsConfig, history: &[EgoState], role: EgoRole) -> Result<Var> {
    let flat = flatten_history(history, cfg.history)?;
    let x = g.constant(Tensor::matrix(1, flat.len(), flat)?);
    cfg.encoder(role).forward(g, store, x)
}

/// Cross-attention block `query + Attn(query, features, features)`.
fn cross_attend(g: &mut Graph, store: &ParamStore, attn: &MultiHeadAttention, query: Var, features: Var) -> Result<Var> {
    let a = attn.forward(g, store, query, features, features)?;
    g.add(query, a)
}

/// `v_scene = -MLP_v(CrossAttn(query, features))`, shape `[1, 2]`.
pub fn scene_velocity(g: &mut Graph, store: &ParamStore, cfg: &DynamicsConfig, ego_query: Var, features: Var) -> Result<Var> {
    let att = cross_attend(g, store, &cfg.scene_attn()?, ego_query, features)?;
    let m = cfg.mlp_v().forward(g, store, att)?;
    Ok(g.neg(m))
}

/// Softmax mass of the dynamic classes.
pub fn dynamic_probability(logits: &[f64], dynamic: &[usize]) -> Result<f64> {
    if let Some(&bad) = dynamic.iter().find(|&&c| c >= logits.len()) {
        return Err(Error::validation(format!("dynamic class {bad} >= class count {}", logits.len())));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(dynamic.iter().map(|&c| e[c]).sum::<f64>() / z)
}

/// `[K, 2]` displacements decoded from attention over stop-gradient features.
pub fn plan(g: &mut Graph, store: &ParamStore, cfg: &DynamicsConfig, ego_query: Var, features: Var) -> Result<Var> {
    let detached = g.stop_gradient(features);
    let att = cross_attend(g, store, &cfg.plan_attn()?, ego_query, detached)?;
    let out = cfg.mlp_tau().forward(g, store, att)?;
    g.reshape(out, &[cfg.plan_steps, 2])
}

/// Mean squared error between planned and ground-truth increments.
pub fn plan_loss(g: &mut Graph, planned: Var, gt: &[[f64; 2]]) -> Result<Var> {
    if g.value(planned).rows() != gt.len() {
        return Err(Error::validation(format!("plan has {} steps but ground truth has {}", g.value(planned).rows(), gt.len())));
    }
    let flat: Vec<f64> = gt.iter().flat_map(|d| d.iter().copied()).collect();
    let target = g.constant(Tensor::matrix(gt.len(), 2, flat)?);
    g.mse(planned, target)
}

pub fn plan_from_tensor(t: &Tensor) -> TrajectoryPlan {
    TrajectoryPlan { steps: (0..t.rows()).map(|k| [t.at(k, 0), t.at(k, 1)]).collect() }
}

/// Cumulative sums of `steps` from `start`.
pub fn plan_to_positions(steps: &[[f64; 2]], start: [f64; 2]) -> Vec<[f64; 2]> {
    let mut p = start;
    steps
        .iter()
        .map(|d| {
            p = [p[0] + d[0], p[1] + d[1]];
            p
        })
        .collect()
}

/// History ending at `t = 0`, `len` states `step` apart, in the initial ego
/// frame. States before the scene starts extrapolate the initial velocity.
pub fn ego_history(spec: &SceneSpec, len: usize, step: f64) -> Result<Vec<EgoState>> {
    let start = ego_pose_at(spec, 0.0)?;
    let v_world = spec.ego.segments[0].1;
    let (s, c) = start.yaw.sin_cos();
    let v = [c * v_world[0] + s * v_world[1], -s * v_world[0] + c * v_world[1]];
    Ok((0..len)
        .map(|i| {
            let t = -((len - 1 - i) as f64) * step;
            EgoState { position: [v[0] * t, v[1] * t], yaw: 0.0, velocity: v, acceleration: [0.0, 0.0], timestamp: t }
        })
        .collect())
}

/// [`ego_history`] with the default length and spacing.
pub fn default_history(spec: &SceneSpec) -> Result<Vec<EgoState>> {
    ego_history(spec, DEFAULT_HISTORY, WAYPOINT_STEP)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::primitive::{effective_velocity, Gaussian4D};
    use crate::scenegen::{fixtures, gt_waypoints};

    fn setup() -> (DynamicsConfig, ParamStore) {
        let cfg = DynamicsConfig::new(8, 2);
        let mut store = ParamStore::new();
        init_dynamics(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        (cfg, store)
    }

    fn history(n: usize) -> Vec<EgoState> {
        (0..n)
            .map(|i| EgoState {
                position: [i as f64 * 2.5, 0.1 * i as f64],
                yaw: 0.05 * i as f64,
                velocity: [5.0, 0.2],
                acceleration: [0.1, 0.0],
                timestamp: i as f64 * 0.5,
            })
            .collect()
    }

    fn features(q: usize, d: usize) -> Tensor {
        Tensor::matrix(q, d, (0..q * d).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn history_padding_and_truncation() {
        assert!(flatten_history(&[], 4).is_err());
        let one = flatten_history(&history(1), 4).unwrap();
        assert_eq!(one.len(), 4 * STATE_FEATURES);
        assert_eq!(one[..STATE_FEATURES], one[3 * STATE_FEATURES..]);
        let long = flatten_history(&history(6), 4).unwrap();
        let tail = flatten_history(&history(6)[2..], 4).unwrap();
        assert_eq!(long, tail);
        // most recent state sits at the origin
        assert_eq!(long[3 * STATE_FEATURES..3 * STATE_FEATURES + 2], [0.0, 0.0]);
    }

    #[test]
    fn encoder_shape_determinism_and_isolation() {
        let (cfg, mut store) = setup();
        let h = history(3);
        let run = |store: &ParamStore, role| {
            let mut g = Graph::new();
            let v = encode_ego(&mut g, store, &cfg, &h, role).unwrap();
            g.value(v).clone()
        };
        let a = run(&store, EgoRole::Scene);
        assert_eq!(a.shape(), &[1, 8]);
        assert_eq!(a, run(&store, EgoRole::Scene));
        for x in store.get_mut("dyn.psi_tau.l0.w").unwrap().data_mut() {
            *x += 0.3;
        }
        assert_eq!(a, run(&store, EgoRole::Scene));
    }

    #[test]
    fn scene_velocity_is_negated_mlp_output() {
        let (cfg, mut store) = setup();
        let last = cfg.mlp_v().last().clone();
        last.zero(&mut store);
        store.get_mut(&format!("{}.b", last.name)).unwrap().data_mut().copy_from_slice(&[5.0, -1.0]);
        let mut g = Graph::new();
        let q = encode_ego(&mut g, &store, &cfg, &history(4), EgoRole::Scene).unwrap();
        let f = g.constant(features(5, 8));
        let v = scene_velocity(&mut g, &store, &cfg, q, f).unwrap();
        assert_eq!(g.value(v).data(), &[-5.0, 1.0]);
    }

    #[test]
    fn scene_velocity_ignores_feature_order() {
        let (cfg, store) = setup();
        let f = features(5, 8);
        let perm = [4, 2, 0, 3, 1];
        let pf = Tensor::matrix(5, 8, perm.iter().flat_map(|&i| f.row_slice(i).to_vec()).collect()).unwrap();
        let run = |f: &Tensor| {
            let mut g = Graph::new();
            let q = encode_ego(&mut g, &store, &cfg, &history(4), EgoRole::Scene).unwrap();
            let fv = g.constant(f.clone());
            let v = scene_velocity(&mut g, &store, &cfg, q, fv).unwrap();
            g.value(v).clone()
        };
        let (a, b) = (run(&f), run(&pf));
        for k in 0..2 {
            assert!((a.data()[k] - b.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_probability_cases() {
        assert!(dynamic_probability(&[50.0, -50.0, -50.0, -50.0], &[2, 3]).unwrap() < 1e-40);
        assert!(dynamic_probability(&[-50.0, -50.0, 50.0, -50.0], &[2, 3]).unwrap() > 1.0 - 1e-15);
        assert!((dynamic_probability(&[0.0; 4], &[2, 3]).unwrap() - 0.5).abs() < 1e-15);
        assert!(dynamic_probability(&[0.0; 4], &[4]).is_err());
    }

    #[test]
    fn plan_shape_zero_layer_and_stop_gradient() {
        let (cfg, mut store) = setup();
        let mut g = Graph::new();
        let q = encode_ego(&mut g, &store, &cfg, &history(4), EgoRole::Trajectory).unwrap();
        let f = g.param("features", &features(5, 8));
        let p = plan(&mut g, &store, &cfg, q, f).unwrap();
        assert_eq!(g.shape(p), &[6, 2]);
        let loss = plan_loss(&mut g, p, &[[2.5, 0.0]; 6]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get_or_zero(f).max_abs(), 0.0);
        let params = grads.params();
        for name in ["dyn.psi_tau.l0.w", "plan.attn.v.w", "plan.mlp_tau.l1.w"] {
            assert!(params.get(name).unwrap().max_abs() > 0.0, "{name}");
        }
        assert!(params.get("dyn.psi_v.l0.w").is_none());

        cfg.mlp_tau().last().zero(&mut store);
        let mut g = Graph::new();
        let q = encode_ego(&mut g, &store, &cfg, &history(4), EgoRole::Trajectory).unwrap();
        let f = g.constant(features(5, 8));
        let p = plan(&mut g, &store, &cfg, q, f).unwrap();
        let tp = plan_from_tensor(g.value(p));
        assert_eq!(tp.positions([1.0, 2.0]), vec![[1.0, 2.0]; 6]);
    }

    #[test]
    fn positions_from_increments() {
        assert_eq!(plan_to_positions(&[[0.0, 0.0]; 3], [1.0, -1.0]), vec![[1.0, -1.0]; 3]);
        assert_eq!(plan_to_positions(&[[1.0, 0.0], [1.0, 0.0]], [0.0, 0.0]), vec![[1.0, 0.0], [2.0, 0.0]]);
        let (spec, _) = fixtures::straight_drive(5.0);
        let gt = gt_waypoints(&spec).unwrap();
        let pos = plan_to_positions(&gt, [0.0, 0.0]);
        for (k, p) in pos.iter().enumerate() {
            let t = (k + 1) as f64 * WAYPOINT_STEP;
            let want = ego_pose_at(&spec, t).unwrap().position;
            assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
        }
        let text = TrajectoryPlan { steps: gt }.to_text([0.0, 0.0]);
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn history_extrapolates_initial_velocity() {
        let (spec, _) = fixtures::straight_drive(5.0);
        let h = default_history(&spec).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(h[3].position, [0.0, 0.0]);
        assert!((h[0].position[0] + 7.5).abs() < 1e-12);
        assert_eq!(h[0].velocity, [5.0, 0.0]);
    }

    proptest! {
        #[test]
        fn composed_velocity_lies_between_endpoints(
            alpha in 0.0f64..=1.0,
            vs in prop::array::uniform2(-10.0f64..10.0),
            vd in prop::array::uniform2(-10.0f64..10.0),
        ) {
            let mut g = Gaussian4D::isotropic([0.0; 3], 0.0, 1.0, 1.0, 0.5, 4);
            g.alpha = alpha;
            g.v_dyn = vd;
            let v = effective_velocity(&g, vs).unwrap();
            for k in 0..2 {
                let (lo, hi) = (vs[k].min(vs[k] + vd[k]), vs[k].max(vs[k] + vd[k]));
                prop_assert!(v[k] >= lo - 1e-12 && v[k] <= hi + 1e-12);
            }
            prop_assert_eq!(v[2], 0.0);
        }
    }
}
