//! Finite-difference suite over every differentiable path: elementary ops,
//! losses, Gaussian slicing and splatting, refiner and dynamics blocks, and
//! the full slice -> splat -> CE + Lovasz pipeline of each fitting variant.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffops::gradcheck::{finite_diff_check, GradCheckConfig, GradReport};
use crate::diffops::ops::FnOp;
use crate::diffops::{Graph, ParamStore, Tensor, Var};
use crate::dynamics::{encode_ego, init_dynamics, plan, plan_loss, scene_velocity, DynamicsConfig, EgoRole, EgoState};
use crate::error::Result;
use crate::grid::{GridSpec, LabelGrid};
use crate::optimize::model::{bind_primitives, init_params, slice_field, InitConfig, Variant};
use crate::optimize::{occupancy_loss, LossWeights};
use crate::refiner::{decode_heads, global_interaction, init_refiner, FeatureField, RefinerConfig};
use crate::scenegen::{fixtures, Scenario};
use crate::splat::SplatOptions;

/// Size of the pipeline checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteScale {
    pub gaussians: usize,
    /// Cube side of the pipeline grid, voxels.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SuiteScale {
    fn default() -> Self {
        SuiteScale { gaussians: 4, grid: 8, seed: 7 }
    }
}

/// Cutoff wide enough that truncation never introduces kinks.
const CHECK_CUTOFF: f64 = 12.0;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// `sum(out * W)` with fixed pseudo-random `W`, turning any output into a scalar.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * 0.7548).sin()).collect())?;
    let wc = g.constant(w);
    let m = g.mul(out, wc)?;
    Ok(g.sum(m))
}

fn check<F>(label: &str, params: &ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check(label, f, params, &GradCheckConfig::default())
}

/// Checks every parameter of `full` except those named by `skip`. Attention key
/// biases have an identically zero adjoint (softmax ignores a per-row shift),
/// so finite differences there measure only rounding noise.
fn check_except<F>(label: &str, full: &ParamStore, skip: impl Fn(&str) -> bool, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut subset = ParamStore::new();
    for (k, v) in full.iter().filter(|(k, _)| !skip(k)) {
        subset.insert(k.clone(), v.clone());
    }
    let full = full.clone();
    check(label, &subset, move |g, p| {
        let mut all = full.clone();
        for (k, v) in p.iter() {
            all.insert(k.clone(), v.clone());
        }
        f(g, &all)
    })
}

fn key_bias(name: &str) -> bool {
    name.ends_with(".k.b")
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(k, v);
    }
    s
}

fn elementary(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let p = store(vec![
        ("a", random(rng, &[3, 4], -1.0, 1.0)),
        ("b", random(rng, &[3, 4], -1.0, 1.0)),
        ("m", random(rng, &[4, 2], -1.0, 1.0)),
        ("r", random(rng, &[1, 4], -1.0, 1.0)),
        ("c", random(rng, &[3, 1], -1.0, 1.0)),
    ]);
    type Build = fn(&mut Graph, &ParamStore) -> Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("add_sub_mul", |g, p| {
            let (a, b) = (g.bind(p, "a")?, g.bind(p, "b")?);
            let s = g.add(a, b)?;
            let d = g.sub(s, b)?;
            let m = g.mul(d, b)?;
            project(g, m)
        }),
        ("scale_neg_square_exp", |g, p| {
            let a = g.bind(p, "a")?;
            let s = g.scale(a, 0.7);
            let n = g.neg(s);
            let q = g.square(n);
            let e = g.exp(q);
            let e = g.add_scalar(e, 0.1);
            project(g, e)
        }),
        ("sigmoid_relu", |g, p| {
            let a = g.bind(p, "a")?;
            // shift away from the relu kink at the sampled entries
            let s = g.add_scalar(a, 0.05);
            let r = g.relu(s);
            let sg = g.sigmoid(a);
            let m = g.mul(r, sg)?;
            project(g, m)
        }),
        ("matmul_transpose", |g, p| {
            let (a, m) = (g.bind(p, "a")?, g.bind(p, "m")?);
            let y = g.matmul(a, m)?;
            let t = g.transpose(y)?;
            project(g, t)
        }),
        ("row_col_broadcast", |g, p| {
            let (a, r, c) = (g.bind(p, "a")?, g.bind(p, "r")?, g.bind(p, "c")?);
            let x = g.add_row(a, r)?;
            let y = g.mul_col(x, c)?;
            let b = g.broadcast_rows(r, 3)?;
            let z = g.add(y, b)?;
            project(g, z)
        }),
        ("slice_concat_reshape", |g, p| {
            let a = g.bind(p, "a")?;
            let l = g.slice_cols(a, 0, 1)?;
            let r = g.slice_cols(a, 1, 4)?;
            let c = g.concat_cols(&[r, l])?;
            let s = g.reshape(c, &[4, 3])?;
            project(g, s)
        }),
        ("softmax_sum_cols", |g, p| {
            let a = g.bind(p, "a")?;
            let s = g.softmax(a, 1)?;
            let c = g.sum_cols(s, &[1, 3])?;
            project(g, c)
        }),
        ("layer_norm", |g, p| {
            let a = g.bind(p, "a")?;
            let l = g.layer_norm(a)?;
            project(g, l)
        }),
        ("linear_mean", |g, p| {
            let (a, m) = (g.bind(p, "a")?, g.bind(p, "m")?);
            let b = g.bind(p, "r")?;
            let b2 = g.slice_cols(b, 0, 2)?;
            let y = g.linear(a, m, b2)?;
            let s = g.square(y);
            Ok(g.mean(s))
        }),
        ("planar_to_3d", |g, p| {
            let m = g.bind(p, "m")?;
            let v = g.planar_to_3d(m)?;
            project(g, v)
        }),
    ];
    cases.into_iter().map(|(label, f)| check(label, &p, f)).collect()
}

fn probabilities(rng: &mut ChaCha8Rng, v: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(v * k);
    for _ in 0..v {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|x| x / s));
    }
    Tensor::matrix(v, k, data).expect("sized")
}

fn losses(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let (v, k) = (12, 3);
    let labels: Vec<u8> = (0..v).map(|i| (i % k) as u8).collect();
    let p = store(vec![("p", probabilities(rng, v, k)), ("y", random(rng, &[4, 2], -1.0, 1.0))]);
    let target = random(rng, &[4, 2], -1.0, 1.0);
    let l2 = labels.clone();
    Ok(vec![
        check("cross_entropy", &p, move |g, p| {
            let x = g.bind(p, "p")?;
            g.cross_entropy(x, &labels, &[1.0, 2.0, 0.5])
        })?,
        check("lovasz", &p, move |g, p| {
            let x = g.bind(p, "p")?;
            g.lovasz(x, &l2)
        })?,
        check("mse", &p, move |g, p| {
            let y = g.bind(p, "y")?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        })?,
    ])
}

fn gaussian_ops(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let q = 3;
    let quat = random(rng, &[q, 4], -1.0, 1.0);
    let p = store(vec![
        ("ls", random(rng, &[q, 3], -0.8, -0.2)),
        ("quat", quat),
        ("ms", random(rng, &[q, 3], -0.5, 0.5)),
        ("mt", random(rng, &[q, 1], 0.5, 2.5)),
        ("vel", random(rng, &[q, 3], -1.0, 1.0)),
        ("lst", random(rng, &[q, 1], -0.3, 0.5)),
        ("ol", random(rng, &[q, 1], -1.0, 1.0)),
        ("logits", random(rng, &[q, 2], -1.0, 1.0)),
        ("ls4", random(rng, &[q, 4], -0.8, 0.0)),
        ("ql", random(rng, &[q, 4], -1.0, 1.0)),
        ("qr", random(rng, &[q, 4], -1.0, 1.0)),
    ]);
    let spec = GridSpec::new([-0.8, -0.8, -0.8], [4, 4, 4], 0.4, 2)?;
    let opts = SplatOptions { cutoff_sigma: CHECK_CUTOFF, ..Default::default() };
    let t = 1.3;
    Ok(vec![
        check("covariance", &p, |g, p| {
            let (ls, qt) = (g.bind(p, "ls")?, g.bind(p, "quat")?);
            let c = g.covariance(ls, qt)?;
            project(g, c)
        })?,
        check("slice_mean", &p, |g, p| {
            let (ms, mt, v) = (g.bind(p, "ms")?, g.bind(p, "mt")?, g.bind(p, "vel")?);
            let m = g.slice_mean(ms, mt, v, t)?;
            project(g, m)
        })?,
        check("slice_weight", &p, |g, p| {
            let (mt, lst, ol) = (g.bind(p, "mt")?, g.bind(p, "lst")?, g.bind(p, "ol")?);
            let w = g.slice_weight(mt, lst, ol, t)?;
            project(g, w)
        })?,
        check("splat_field", &p, |g, p| {
            let (ls, qt) = (g.bind(p, "ls")?, g.bind(p, "quat")?);
            let cov = g.covariance(ls, qt)?;
            let (ms, mt, v) = (g.bind(p, "ms")?, g.bind(p, "mt")?, g.bind(p, "vel")?);
            let mean = g.slice_mean(ms, mt, v, t)?;
            let (lst, ol) = (g.bind(p, "lst")?, g.bind(p, "ol")?);
            let w = g.slice_weight(mt, lst, ol, t)?;
            let logits = g.bind(p, "logits")?;
            let f = g.splat_field(mean, cov, w, logits, &spec, opts)?;
            project(g, f)
        })?,
        check("covariance4", &p, |g, p| {
            let (ls4, ql, qr) = (g.bind(p, "ls4")?, g.bind(p, "ql")?, g.bind(p, "qr")?);
            let c = g.covariance4(ls4, ql, qr)?;
            project(g, c)
        })?,
        check("condition_mean_cov", &p, |g, p| {
            let (ls4, ql, qr) = (g.bind(p, "ls4")?, g.bind(p, "ql")?, g.bind(p, "qr")?);
            let c4 = g.covariance4(ls4, ql, qr)?;
            let (ms, mt) = (g.bind(p, "ms")?, g.bind(p, "mt")?);
            let m = g.condition_mean(c4, ms, mt, t)?;
            let c = g.condition_cov(c4)?;
            let a = project(g, m)?;
            let b = project(g, c)?;
            g.add(a, b)
        })?,
        check("joint_weight", &p, |g, p| {
            let (ls4, ql, qr) = (g.bind(p, "ls4")?, g.bind(p, "ql")?, g.bind(p, "qr")?);
            let c4 = g.covariance4(ls4, ql, qr)?;
            let (mt, ol) = (g.bind(p, "mt")?, g.bind(p, "ol")?);
            let w = g.joint_weight(c4, mt, ol, t)?;
            project(g, w)
        })?,
    ])
}

fn refiner_blocks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let cfg = RefinerConfig { dim: 4, latents: 3, heads: 2, blocks: 1, gaussians: 3, num_classes: 2, feature_std: 0.5 };
    let mut p = ParamStore::new();
    init_refiner(&cfg, &mut p, rng)?;
    // a zero output layer makes every upstream adjoint vanish; perturb it
    for x in p.get_mut("refiner.block0.rect.l1.w").expect("initialized").data_mut() {
        *x = rng.random_range(-0.3..0.3);
    }
    let dims = [3, 3, 2, 2];
    let n = dims.iter().product::<usize>() * cfg.dim;
    let field = Arc::new(FeatureField::new(
        [-0.8, -0.8, -0.4, 0.0],
        [0.8, 0.8, 0.8, 2.0],
        dims,
        cfg.dim,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?);
    p.insert("f", random(rng, &[3, cfg.dim], -1.0, 1.0));
    p.insert("ms", random(rng, &[3, 3], -0.5, 0.5));
    p.insert("mt", random(rng, &[3, 1], 0.3, 1.7));
    let c1 = cfg.clone();
    let c2 = cfg.clone();
    Ok(vec![
        check("sample_field", &p, move |g, p| {
            let (ms, mt) = (g.bind(p, "ms")?, g.bind(p, "mt")?);
            let s = g.sample_field(&field, ms, mt)?;
            project(g, s)
        })?,
        check_except("global_interaction", &p, key_bias, move |g, p| {
            let f = g.bind(p, "f")?;
            let o = global_interaction(g, p, &c1, 0, f)?;
            project(g, o)
        })?,
        check("rectify_and_heads", &p, move |g, p| {
            let f = g.bind(p, "f")?;
            let delta = crate::diffops::Mlp::new("refiner.block0.rect", &[c2.dim, c2.dim, 4]).forward(g, p, f)?;
            let h = decode_heads(g, p, &c2, f)?;
            let a = project(g, delta)?;
            let b = project(g, h.logits)?;
            let c = project(g, h.quat)?;
            let s = g.add(a, b)?;
            g.add(s, c)
        })?,
    ])
}

fn dynamics_blocks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let cfg = DynamicsConfig { plan_steps: 2, ..DynamicsConfig::new(4, 2) };
    let mut p = ParamStore::new();
    init_dynamics(&cfg, &mut p, rng)?;
    p.insert("f", random(rng, &[3, 4], -1.0, 1.0));
    let history: Vec<EgoState> = (0..3)
        .map(|i| EgoState {
            position: [i as f64 * 0.5, 0.1],
            yaw: 0.0,
            velocity: [1.0, 0.2],
            acceleration: [0.0, 0.1],
            timestamp: i as f64 * 0.5,
        })
        .collect();
    let (c1, c2) = (cfg.clone(), cfg);
    let h1 = history.clone();
    Ok(vec![
        check_except("scene_velocity", &p, key_bias, move |g, p| {
            let q = encode_ego(g, p, &c1, &h1, EgoRole::Scene)?;
            let f = g.bind(p, "f")?;
            let v = scene_velocity(g, p, &c1, q, f)?;
            project(g, v)
        })?,
        // features enter the planner through a stop-gradient
        check_except("plan", &p, |n| key_bias(n) || n == "f", move |g, p| {
            let q = encode_ego(g, p, &c2, &history, EgoRole::Trajectory)?;
            let f = g.bind(p, "f")?;
            let pl = plan(g, p, &c2, q, f)?;
            plan_loss(g, pl, &[[0.5, 0.0], [0.4, 0.1]])
        })?,
    ])
}

/// Ground truth for the pipeline checks: the static box on a cube grid.
fn pipeline_truth(scale: SuiteScale) -> Result<(Vec<f64>, Vec<LabelGrid>)> {
    let (spec, _) = fixtures::static_box();
    let n = scale.grid;
    let vs = 3.2 / n as f64;
    let grid = GridSpec::new([-1.6, -1.6, -1.6], [n, n, n], vs, spec.num_classes)?;
    let sc = Scenario::from_spec(spec, grid)?;
    Ok((sc.times[..2].to_vec(), sc.gt[..2].to_vec()))
}

/// Parameters with every attribute away from its symmetric initial value.
pub fn perturbed_params(variant: Variant, scale: SuiteScale, spec: &GridSpec, horizon: f64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed);
    let init = InitConfig { scale: Some(0.5), sigma_t: Some(1.5), opacity: 0.4 };
    let mut p = init_params(variant, scale.gaussians, spec, horizon, &init, &mut rng)?;
    for (name, t) in p.iter_mut() {
        let amp = if name.starts_with("mu_s") { 0.3 } else { 0.2 };
        for x in t.data_mut() {
            *x += rng.random_range(-amp..amp);
        }
    }
    Ok(p)
}

/// slice -> splat -> CE + Lovasz for one fitting variant.
pub fn pipeline_check(variant: Variant, scale: SuiteScale) -> Result<GradReport> {
    let (times, gt) = pipeline_truth(scale)?;
    let spec = gt[0].spec.clone();
    let params = perturbed_params(variant, scale, &spec, 3.0)?;
    let opts = SplatOptions { cutoff_sigma: CHECK_CUTOFF, ..Default::default() };
    let dynamic = crate::scenegen::DYNAMIC_CLASSES.to_vec();
    let label = format!("pipeline[{}]", variant.name());
    check(&label, &params, move |g, p| {
        let prims = bind_primitives(g, p, variant, &dynamic)?;
        let fields = times.iter().map(|&t| slice_field(g, &prims, t, &spec, opts)).collect::<Result<Vec<_>>>()?;
        occupancy_loss(g, &fields, &gt, &LossWeights::default())
    })
}

/// Every check in the suite.
pub fn run_suite(scale: SuiteScale) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(scale.seed);
    let mut out = elementary(&mut rng)?;
    out.extend(losses(&mut rng)?);
    out.extend(gaussian_ops(&mut rng)?);
    out.extend(refiner_blocks(&mut rng)?);
    out.extend(dynamics_blocks(&mut rng)?);
    for v in Variant::ALL {
        out.push(pipeline_check(v, scale)?);
    }
    Ok(out)
}

/// A square op whose recorded adjoint is off by a factor of two; the checker
/// must reject it.
pub fn corrupted_control() -> Result<GradReport> {
    let p = store(vec![("x", Tensor::row(vec![0.3, -1.2, 0.8]))]);
    check("corrupted_square", &p, |g, p| {
        let x = g.bind(p, "x")?;
        let v = g.value(x).map(|a| a * a);
        let y = g.push(
            v,
            &[x],
            FnOp::boxed("corrupted_square", |inp, _, g| {
                Ok(vec![Some(inp[0].zip_map(g, |a, gi| 4.0 * a * gi))])
            }),
        );
        Ok(g.sum(y))
    })
}

/// One line per check plus a summary line.
pub fn suite_report(reports: &[GradReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    s.push_str(&format!("summary checks={} failed={} worst_rel_err={:.3e}\n", reports.len(), failed, worst));
    s
}
