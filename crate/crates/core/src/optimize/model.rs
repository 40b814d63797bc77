//! Parameter layouts of the fitted Gaussian set and their differentiable
//! slicing, for the structured model and its two ablations.
//!
//! Parameter names (all row-major `[Q, k]` unless noted):
//!
//! | variant      | parameters |
//! |--------------|------------|
//! | all          | `mu_s` 3, `mu_t` 1, `opacity_logit` 1, `logits` C |
//! | structured   | `log_scales` 3, `quat` 4, `log_sigma_t` 1, `v_dyn` 2, `v_scene` `[1, 2]` |
//! | unified      | `log_scales` 3, `quat` 4, `log_sigma_t` 1, `vel` 2 |
//! | full 4D      | `log_scales4` 4, `quat_l` 4, `quat_r` 4 |

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};
use rand::Rng;

use crate::diffops::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::primitive::{rotation4_from_pair, Gaussian4D, MIN_QUAT_NORM};
use crate::splat::SplatOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Conditional covariance plus gated scene/object velocity.
    #[default]
    Structured,
    /// One free planar velocity per primitive.
    UnifiedVelocity,
    /// Full space-time covariance from a pair of isoclinic rotations.
    Full4dCovariance,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Structured, Variant::UnifiedVelocity, Variant::Full4dCovariance];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Structured => "structured",
            Variant::UnifiedVelocity => "unified_velocity",
            Variant::Full4dCovariance => "full_4d_covariance",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown variant `{s}` (expected structured, unified_velocity or full_4d_covariance)")))
    }
}

/// Initial values for a fresh primitive set.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Spatial scale, meters; derived from the grid volume when `None`.
    pub scale: Option<f64>,
    /// Temporal scale, seconds; the horizon when `None`.
    pub sigma_t: Option<f64>,
    pub opacity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { scale: None, sigma_t: None, opacity: 0.25 }
    }
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, lo: &[f64], hi: &[f64]) -> Tensor {
    let cols = lo.len();
    let data = (0..rows * cols).map(|i| rng.random_range(lo[i % cols]..hi[i % cols])).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

fn identity_quats(q: usize) -> Tensor {
    Tensor::matrix(q, 4, (0..q).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect()).expect("consistent shape")
}

/// Fresh parameters: means uniform over the grid volume, anchors uniform
/// over `[0, horizon]`, identity rotations, uniform semantics, no motion.
pub fn init_params<R: Rng>(variant: Variant, q: usize, spec: &GridSpec, horizon: f64, init: &InitConfig, rng: &mut R) -> Result<ParamStore> {
    if q == 0 {
        return Err(Error::validation("need at least one Gaussian"));
    }
    let hi = spec.extent_max();
    let volume: f64 = (0..3).map(|a| hi[a] - spec.origin[a]).product();
    let scale = init.scale.unwrap_or(0.5 * (volume / q as f64).cbrt());
    let sigma_t = init.sigma_t.unwrap_or(horizon);
    if !(scale > 0.0 && sigma_t > 0.0 && init.opacity > 0.0 && init.opacity < 1.0) {
        return Err(Error::validation("initial scale, sigma_t and opacity must be positive (opacity < 1)"));
    }
    let c = spec.num_classes;
    let mut p = ParamStore::new();
    p.insert("mu_s", uniform(rng, q, &spec.origin, &hi));
    p.insert("mu_t", uniform(rng, q, &[0.0], &[horizon]));
    p.insert("opacity_logit", Tensor::full(&[q, 1], crate::primitive::logit(init.opacity)));
    p.insert("logits", Tensor::zeros(&[q, c]));
    match variant {
        Variant::Structured | Variant::UnifiedVelocity => {
            p.insert("log_scales", Tensor::full(&[q, 3], scale.ln()));
            p.insert("quat", identity_quats(q));
            p.insert("log_sigma_t", Tensor::full(&[q, 1], sigma_t.ln()));
            if variant == Variant::Structured {
                p.insert("v_dyn", Tensor::zeros(&[q, 2]));
                p.insert("v_scene", Tensor::zeros(&[1, 2]));
            } else {
                p.insert("vel", Tensor::zeros(&[q, 2]));
            }
        }
        Variant::Full4dCovariance => {
            let ls = [scale.ln(), scale.ln(), scale.ln(), sigma_t.ln()];
            p.insert("log_scales4", Tensor::matrix(q, 4, (0..q).flat_map(|_| ls).collect())?);
            p.insert("quat_l", identity_quats(q));
            p.insert("quat_r", identity_quats(q));
        }
    }
    Ok(p)
}

/// Bound graph variables of a primitive set, ready to slice.
#[derive(Debug, Clone, Copy)]
pub struct Primitives {
    pub mu_s: Var,
    pub mu_t: Var,
    pub opacity_logit: Var,
    pub logits: Var,
    repr: Repr,
}

#[derive(Debug, Clone, Copy)]
enum Repr {
    Conditional { cov: Var, vel: Var, log_sigma_t: Var },
    Joint { cov4: Var, cond_cov: Var },
}

/// Dynamic probability per primitive: softmax mass on `dynamic` classes, `[Q, 1]`.
pub fn dynamic_alpha(g: &mut Graph, logits: Var, dynamic: &[usize]) -> Result<Var> {
    let p = g.softmax(logits, 1)?;
    g.sum_cols(p, dynamic)
}

/// Binds the parameters and builds everything that does not depend on time.
pub fn bind_primitives(g: &mut Graph, store: &ParamStore, variant: Variant, dynamic: &[usize]) -> Result<Primitives> {
    let mu_s = g.bind(store, "mu_s")?;
    let mu_t = g.bind(store, "mu_t")?;
    let opacity_logit = g.bind(store, "opacity_logit")?;
    let logits = g.bind(store, "logits")?;
    let repr = match variant {
        Variant::Structured | Variant::UnifiedVelocity => {
            let ls = g.bind(store, "log_scales")?;
            let quat = g.bind(store, "quat")?;
            let log_sigma_t = g.bind(store, "log_sigma_t")?;
            let cov = g.covariance(ls, quat)?;
            let planar = if variant == Variant::Structured {
                let v_dyn = g.bind(store, "v_dyn")?;
                let v_scene = g.bind(store, "v_scene")?;
                let alpha = dynamic_alpha(g, logits, dynamic)?;
                let gated = g.mul_col(v_dyn, alpha)?;
                g.add_row(gated, v_scene)?
            } else {
                g.bind(store, "vel")?
            };
            let vel = g.planar_to_3d(planar)?;
            Repr::Conditional { cov, vel, log_sigma_t }
        }
        Variant::Full4dCovariance => {
            let ls4 = g.bind(store, "log_scales4")?;
            let ql = g.bind(store, "quat_l")?;
            let qr = g.bind(store, "quat_r")?;
            let cov4 = g.covariance4(ls4, ql, qr)?;
            let cond_cov = g.condition_cov(cov4)?;
            Repr::Joint { cov4, cond_cov }
        }
    };
    Ok(Primitives { mu_s, mu_t, opacity_logit, logits, repr })
}

/// Category field `[V, C+1]` of the primitives sliced at `t`.
pub fn slice_field(g: &mut Graph, p: &Primitives, t: f64, spec: &GridSpec, opts: SplatOptions) -> Result<Var> {
    let (mean, cov, weight) = match p.repr {
        Repr::Conditional { cov, vel, log_sigma_t } => {
            let mean = g.slice_mean(p.mu_s, p.mu_t, vel, t)?;
            let w = g.slice_weight(p.mu_t, log_sigma_t, p.opacity_logit, t)?;
            (mean, cov, w)
        }
        Repr::Joint { cov4, cond_cov } => {
            let mean = g.condition_mean(cov4, p.mu_s, p.mu_t, t)?;
            let w = g.joint_weight(cov4, p.mu_t, p.opacity_logit, t)?;
            (mean, cond_cov, w)
        }
    };
    g.splat_field(mean, cov, weight, p.logits, spec, opts)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Rotation and log-scales of a symmetric positive-definite matrix.
fn decompose_cov(cov: &Matrix3<f64>, index: usize) -> Result<([f64; 4], [f64; 3])> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let mut r = eig.eigenvectors;
    if r.determinant() < 0.0 {
        r.column_mut(2).neg_mut();
    }
    let mut ls = [0.0; 3];
    for k in 0..3 {
        let e = eig.eigenvalues[k];
        if !(e > 0.0) {
            return Err(Error::DegenerateCovariance { index, reason: format!("conditional eigenvalue {e:e}") });
        }
        ls[k] = 0.5 * e.ln();
    }
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(([q.w, q.i, q.j, q.k], ls))
}

fn quat_row(t: &Tensor, i: usize, what: &str) -> Result<[f64; 4]> {
    let r = t.row_slice(i);
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::invalid(format!("{what} quaternion {i} has norm {n}")));
    }
    Ok([r[0] / n, r[1] / n, r[2] / n, r[3] / n])
}

/// Exported primitives plus the shared scene velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Exported {
    pub gaussians: Vec<Gaussian4D>,
    pub v_scene: [f64; 2],
    /// Largest vertical velocity discarded when converting joint covariances.
    pub dropped_vz: f64,
}

/// Converts fitted parameters into structured primitives. Joint covariances
/// become conditional covariance plus velocity `S_st / S_tt`; the vertical
/// velocity component has no structured counterpart and is dropped.
pub fn export(store: &ParamStore, variant: Variant, dynamic: &[usize]) -> Result<Exported> {
    let mu_s = store.require("mu_s")?;
    let mu_t = store.require("mu_t")?;
    let ol = store.require("opacity_logit")?;
    let logits = store.require("logits")?;
    let q = mu_t.len();
    let mut out = Vec::with_capacity(q);
    let mut v_scene = [0.0, 0.0];
    let mut dropped_vz: f64 = 0.0;
    for i in 0..q {
        let lg = logits.row_slice(i).to_vec();
        let ms = mu_s.row_slice(i);
        let mut g = Gaussian4D {
            mu_s: [ms[0], ms[1], ms[2]],
            mu_t: mu_t.data()[i],
            log_scales: [0.0; 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            log_sigma_t: 0.0,
            opacity_logit: ol.data()[i],
            logits: lg,
            v_dyn: [0.0; 2],
            alpha: 0.0,
        };
        match variant {
            Variant::Structured | Variant::UnifiedVelocity => {
                let ls = store.require("log_scales")?.row_slice(i);
                g.log_scales = [ls[0], ls[1], ls[2]];
                let qr = store.require("quat")?.row_slice(i);
                g.quat = [qr[0], qr[1], qr[2], qr[3]];
                g.log_sigma_t = store.require("log_sigma_t")?.data()[i];
                if variant == Variant::Structured {
                    let vd = store.require("v_dyn")?.row_slice(i);
                    g.v_dyn = [vd[0], vd[1]];
                    let p = softmax(&g.logits);
                    g.alpha = dynamic.iter().map(|&k| p[k]).sum::<f64>().clamp(0.0, 1.0);
                    let vs = store.require("v_scene")?.data();
                    v_scene = [vs[0], vs[1]];
                } else {
                    let v = store.require("vel")?.row_slice(i);
                    g.v_dyn = [v[0], v[1]];
                    g.alpha = 1.0;
                }
            }
            Variant::Full4dCovariance => {
                let ls4 = store.require("log_scales4")?.row_slice(i);
                let l = quat_row(store.require("quat_l")?, i, "left")?;
                let r = quat_row(store.require("quat_r")?, i, "right")?;
                let rot = rotation4_from_pair(l, r);
                let d = nalgebra::Matrix4::from_diagonal(&nalgebra::Vector4::from_fn(|k, _| (2.0 * ls4[k]).exp()));
                let c4 = rot * d * rot.transpose();
                let s_tt = c4[(3, 3)];
                if !(s_tt > crate::diffops::gauss::MIN_TEMPORAL_VARIANCE) {
                    return Err(Error::DegenerateCovariance { index: i, reason: format!("temporal variance {s_tt:e}") });
                }
                let s_st = Vector3::new(c4[(0, 3)], c4[(1, 3)], c4[(2, 3)]);
                let v = s_st / s_tt;
                let cond: Matrix3<f64> = c4.fixed_view::<3, 3>(0, 0).into_owned() - s_st * s_st.transpose() / s_tt;
                let (quat, ls) = decompose_cov(&cond, i)?;
                g.quat = quat;
                g.log_scales = ls;
                g.log_sigma_t = 0.5 * s_tt.ln();
                g.v_dyn = [v.x, v.y];
                g.alpha = 1.0;
                dropped_vz = dropped_vz.max(v.z.abs());
            }
        }
        out.push(g);
    }
    Ok(Exported { gaussians: out, v_scene, dropped_vz })
}
