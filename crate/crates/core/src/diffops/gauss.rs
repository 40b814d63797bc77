//! Differentiable Gaussian operators: covariance assembly, slicing, joint
//! conditioning for full 4D covariances, and splatting into a category field.
//!
//! All tensors are batched over primitives: `[Q, k]`.

use nalgebra::{Matrix3, Matrix4};

use super::graph::{Backward, Graph, Var};
use super::ops::FnOp;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::primitive::{
    left_isoclinic, logistic, quat_basis_to_spacetime, right_isoclinic, rotation_from_unit, rotation_partials,
    MIN_QUAT_NORM,
};
use crate::splat::{splat_backward, splat_forward, SplatForward, SplatInput, SplatOptions};

/// Temporal variances at or below this are degenerate.
pub const MIN_TEMPORAL_VARIANCE: f64 = 1e-12;

fn rows_of(op: &'static str, t: &Tensor, cols: usize, q: usize) -> Result<()> {
    if t.len() != cols * q {
        return Err(Error::shape(op, t.shape(), &[q, cols]));
    }
    Ok(())
}

fn unit_quat(op: &str, q: &[f64], index: usize) -> Result<([f64; 4], f64)> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::invalid(format!("{op}: quaternion {index} has norm {n}")));
    }
    Ok(([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n))
}

/// Backpropagates through `q / |q|`.
fn normalize_backward(unit: [f64; 4], norm: f64, g: [f64; 4]) -> [f64; 4] {
    let dot: f64 = (0..4).map(|k| unit[k] * g[k]).sum();
    [0, 1, 2, 3].map(|k| (g[k] - unit[k] * dot) / norm)
}

fn mat3(d: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(d)
}

fn mat4(d: &[f64]) -> Matrix4<f64> {
    Matrix4::from_row_slice(d)
}

fn push_mat3(out: &mut Vec<f64>, m: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            out.push(m[(r, c)]);
        }
    }
}

fn contract<const N: usize>(a: &nalgebra::SMatrix<f64, N, N>, b: &nalgebra::SMatrix<f64, N, N>) -> f64 {
    a.component_mul(b).sum()
}

fn unit_basis(k: usize) -> [f64; 4] {
    let mut e = [0.0; 4];
    e[k] = 1.0;
    e
}

impl Graph {
    /// `R(q) diag(exp(2 s)) R(q)^T` per primitive: `[Q,3], [Q,4] -> [Q,9]`.
    pub fn covariance(&mut self, log_scales: Var, quat: Var) -> Result<Var> {
        let (ls, qt) = (self.value(log_scales), self.value(quat));
        let q = ls.len() / 3;
        rows_of("covariance.log_scales", ls, 3, q)?;
        rows_of("covariance.quat", qt, 4, q)?;
        let mut out = Vec::with_capacity(9 * q);
        for i in 0..q {
            let (u, _) = unit_quat("covariance", &qt.data()[4 * i..4 * i + 4], i)?;
            let r = rotation_from_unit(u);
            let d = Matrix3::from_diagonal(&nalgebra::Vector3::from_fn(|k, _| (2.0 * ls.data()[3 * i + k]).exp()));
            push_mat3(&mut out, &(r * d * r.transpose()));
        }
        let value = Tensor::matrix(q, 9, out)?;
        Ok(self.push(
            value,
            &[log_scales, quat],
            FnOp::boxed("covariance", move |inp, _, g| {
                let (ls, qt) = (inp[0], inp[1]);
                let mut g_ls = Tensor::zeros(ls.shape());
                let mut g_q = Tensor::zeros(qt.shape());
                for i in 0..q {
                    let (u, n) = unit_quat("covariance", &qt.data()[4 * i..4 * i + 4], i)?;
                    let r = rotation_from_unit(u);
                    let s2 = nalgebra::Vector3::from_fn(|k, _| (2.0 * ls.data()[3 * i + k]).exp());
                    let d = Matrix3::from_diagonal(&s2);
                    let gm = mat3(&g.data()[9 * i..9 * i + 9]);
                    let rgr = r.transpose() * gm * r;
                    for k in 0..3 {
                        g_ls.data_mut()[3 * i + k] = 2.0 * s2[k] * rgr[(k, k)];
                    }
                    let g_r = (gm + gm.transpose()) * r * d;
                    let parts = rotation_partials(u);
                    let g_unit = [0, 1, 2, 3].map(|k| contract(&g_r, &parts[k]));
                    let gq = normalize_backward(u, n, g_unit);
                    g_q.data_mut()[4 * i..4 * i + 4].copy_from_slice(&gq);
                }
                Ok(vec![Some(g_ls), Some(g_q)])
            }),
        ))
    }

    /// `mu_s + v (t - mu_t)`: `[Q,3], [Q,1], [Q,3] -> [Q,3]`.
    pub fn slice_mean(&mut self, mu_s: Var, mu_t: Var, vel: Var, t: f64) -> Result<Var> {
        let (ms, mt, v) = (self.value(mu_s), self.value(mu_t), self.value(vel));
        let q = mt.len();
        rows_of("slice_mean.mu_s", ms, 3, q)?;
        rows_of("slice_mean.vel", v, 3, q)?;
        let mut out = Vec::with_capacity(3 * q);
        for i in 0..q {
            let dt = t - mt.data()[i];
            for k in 0..3 {
                out.push(ms.data()[3 * i + k] + v.data()[3 * i + k] * dt);
            }
        }
        let value = Tensor::matrix(q, 3, out)?;
        Ok(self.push(
            value,
            &[mu_s, mu_t, vel],
            FnOp::boxed("slice_mean", move |inp, _, g| {
                let (mt, v) = (inp[1], inp[2]);
                let mut g_mt = Tensor::zeros(mt.shape());
                let mut g_v = Tensor::zeros(v.shape());
                for i in 0..q {
                    let dt = t - mt.data()[i];
                    let mut acc = 0.0;
                    for k in 0..3 {
                        let gk = g.data()[3 * i + k];
                        g_v.data_mut()[3 * i + k] = gk * dt;
                        acc += gk * v.data()[3 * i + k];
                    }
                    g_mt.data_mut()[i] = -acc;
                }
                Ok(vec![Some(g.clone().reshape(inp[0].shape())?), Some(g_mt), Some(g_v)])
            }),
        ))
    }

    /// `logistic(o) * exp(-(t - mu_t)^2 / (2 exp(2 ls_t)))`: three `[Q,1]` -> `[Q,1]`.
    pub fn slice_weight(&mut self, mu_t: Var, log_sigma_t: Var, opacity_logit: Var, t: f64) -> Result<Var> {
        let (mt, lst, ol) = (self.value(mu_t), self.value(log_sigma_t), self.value(opacity_logit));
        let q = mt.len();
        rows_of("slice_weight.log_sigma_t", lst, 1, q)?;
        rows_of("slice_weight.opacity_logit", ol, 1, q)?;
        let out: Vec<f64> = (0..q)
            .map(|i| {
                let dt = t - mt.data()[i];
                let var = (2.0 * lst.data()[i]).exp();
                logistic(ol.data()[i]) * (-dt * dt / (2.0 * var)).exp()
            })
            .collect();
        let value = Tensor::matrix(q, 1, out)?;
        Ok(self.push(
            value,
            &[mu_t, log_sigma_t, opacity_logit],
            FnOp::boxed("slice_weight", move |inp, w, g| {
                let (mt, lst, ol) = (inp[0], inp[1], inp[2]);
                let mut g_mt = Tensor::zeros(mt.shape());
                let mut g_ls = Tensor::zeros(lst.shape());
                let mut g_ol = Tensor::zeros(ol.shape());
                for i in 0..q {
                    let dt = t - mt.data()[i];
                    let var = (2.0 * lst.data()[i]).exp();
                    let gw = g.data()[i] * w.data()[i];
                    let o = logistic(ol.data()[i]);
                    g_ol.data_mut()[i] = gw * (1.0 - o);
                    g_mt.data_mut()[i] = gw * dt / var;
                    g_ls.data_mut()[i] = gw * dt * dt / var;
                }
                Ok(vec![Some(g_mt), Some(g_ls), Some(g_ol)])
            }),
        ))
    }

    /// Splats sliced Gaussians into the `[V, C+1]` category field
    /// (`occ * class_c` for semantic classes, `1 - occ` for free).
    pub fn splat_field(
        &mut self,
        means: Var,
        covs: Var,
        weights: Var,
        logits: Var,
        spec: &GridSpec,
        opts: SplatOptions,
    ) -> Result<Var> {
        let c = spec.num_classes;
        let fwd = {
            let input = SplatInput {
                means: self.value(means).data(),
                covs: self.value(covs).data(),
                weights: self.value(weights).data(),
                logits: self.value(logits).data(),
                num_classes: c,
            };
            splat_forward(&input, spec, opts)?
        };
        let nv = spec.num_voxels();
        let mut field = Vec::with_capacity(nv * (c + 1));
        for v in 0..nv {
            let occ = fwd.grid.occ_prob[v];
            field.extend(fwd.grid.class_row(v).iter().map(|p| occ * p));
            field.push(fwd.complement[v]);
        }
        let value = Tensor::matrix(nv, c + 1, field)?;
        let op = SplatOp { spec: spec.clone(), opts, fwd };
        Ok(self.push(value, &[means, covs, weights, logits], Box::new(op)))
    }

    /// Full 4D covariance `R4 diag(exp(2 s4)) R4^T` from a pair of quaternions:
    /// `[Q,4] x3 -> [Q,16]` in (x, y, z, t) order.
    pub fn covariance4(&mut self, log_scales4: Var, quat_left: Var, quat_right: Var) -> Result<Var> {
        let (ls, ql, qr) = (self.value(log_scales4), self.value(quat_left), self.value(quat_right));
        let q = ls.len() / 4;
        rows_of("covariance4.log_scales", ls, 4, q)?;
        rows_of("covariance4.quat_left", ql, 4, q)?;
        rows_of("covariance4.quat_right", qr, 4, q)?;
        let mut out = Vec::with_capacity(16 * q);
        for i in 0..q {
            let (l, _) = unit_quat("covariance4", &ql.data()[4 * i..4 * i + 4], i)?;
            let (r, _) = unit_quat("covariance4", &qr.data()[4 * i..4 * i + 4], i)?;
            let rot = quat_basis_to_spacetime(&(left_isoclinic(l) * right_isoclinic(r)));
            let d = Matrix4::from_diagonal(&nalgebra::Vector4::from_fn(|k, _| (2.0 * ls.data()[4 * i + k]).exp()));
            let s = rot * d * rot.transpose();
            for a in 0..4 {
                for b in 0..4 {
                    out.push(s[(a, b)]);
                }
            }
        }
        let value = Tensor::matrix(q, 16, out)?;
        Ok(self.push(
            value,
            &[log_scales4, quat_left, quat_right],
            FnOp::boxed("covariance4", move |inp, _, g| {
                let (ls, ql, qr) = (inp[0], inp[1], inp[2]);
                let mut g_ls = Tensor::zeros(ls.shape());
                let mut g_ql = Tensor::zeros(ql.shape());
                let mut g_qr = Tensor::zeros(qr.shape());
                const PERM: [usize; 4] = [1, 2, 3, 0];
                for i in 0..q {
                    let (l, nl) = unit_quat("covariance4", &ql.data()[4 * i..4 * i + 4], i)?;
                    let (r, nr) = unit_quat("covariance4", &qr.data()[4 * i..4 * i + 4], i)?;
                    let lm = left_isoclinic(l);
                    let rm = right_isoclinic(r);
                    let rot = quat_basis_to_spacetime(&(lm * rm));
                    let s2 = nalgebra::Vector4::from_fn(|k, _| (2.0 * ls.data()[4 * i + k]).exp());
                    let d = Matrix4::from_diagonal(&s2);
                    let gm = mat4(&g.data()[16 * i..16 * i + 16]);
                    let rgr = rot.transpose() * gm * rot;
                    for k in 0..4 {
                        g_ls.data_mut()[4 * i + k] = 2.0 * s2[k] * rgr[(k, k)];
                    }
                    let g_rot = (gm + gm.transpose()) * rot * d;
                    // undo the basis permutation
                    let mut g_m = Matrix4::zeros();
                    for a in 0..4 {
                        for b in 0..4 {
                            g_m[(PERM[a], PERM[b])] = g_rot[(a, b)];
                        }
                    }
                    let g_lm = g_m * rm.transpose();
                    let g_rm = lm.transpose() * g_m;
                    let gl = [0, 1, 2, 3].map(|k| contract(&g_lm, &left_isoclinic(unit_basis(k))));
                    let gr = [0, 1, 2, 3].map(|k| contract(&g_rm, &right_isoclinic(unit_basis(k))));
                    g_ql.data_mut()[4 * i..4 * i + 4].copy_from_slice(&normalize_backward(l, nl, gl));
                    g_qr.data_mut()[4 * i..4 * i + 4].copy_from_slice(&normalize_backward(r, nr, gr));
                }
                Ok(vec![Some(g_ls), Some(g_ql), Some(g_qr)])
            }),
        ))
    }

    /// Conditional mean of space given `t` from joint covariances `[Q,16]`.
    pub fn condition_mean(&mut self, cov4: Var, mu_s: Var, mu_t: Var, t: f64) -> Result<Var> {
        let (c4, ms, mt) = (self.value(cov4), self.value(mu_s), self.value(mu_t));
        let q = mt.len();
        rows_of("condition_mean.cov4", c4, 16, q)?;
        rows_of("condition_mean.mu_s", ms, 3, q)?;
        let mut out = Vec::with_capacity(3 * q);
        for i in 0..q {
            let s = temporal_variance(c4, i)?;
            let dt = t - mt.data()[i];
            for k in 0..3 {
                out.push(ms.data()[3 * i + k] + c4.data()[16 * i + 4 * k + 3] * dt / s);
            }
        }
        let value = Tensor::matrix(q, 3, out)?;
        Ok(self.push(
            value,
            &[cov4, mu_s, mu_t],
            FnOp::boxed("condition_mean", move |inp, _, g| {
                let (c4, mt) = (inp[0], inp[2]);
                let mut g_c4 = Tensor::zeros(c4.shape());
                let mut g_mt = Tensor::zeros(mt.shape());
                for i in 0..q {
                    let s = c4.data()[16 * i + 15];
                    let dt = t - mt.data()[i];
                    let mut acc_mt = 0.0;
                    let mut acc_s = 0.0;
                    for k in 0..3 {
                        let gk = g.data()[3 * i + k];
                        let cross = c4.data()[16 * i + 4 * k + 3];
                        g_c4.data_mut()[16 * i + 4 * k + 3] = gk * dt / s;
                        acc_mt -= gk * cross / s;
                        acc_s -= gk * cross * dt / (s * s);
                    }
                    g_c4.data_mut()[16 * i + 15] = acc_s;
                    g_mt.data_mut()[i] = acc_mt;
                }
                Ok(vec![Some(g_c4), Some(g.clone().reshape(inp[1].shape())?), Some(g_mt)])
            }),
        ))
    }

    /// Conditional spatial covariance `S_ss - S_st S_ts / s_tt`: `[Q,16] -> [Q,9]`.
    pub fn condition_cov(&mut self, cov4: Var) -> Result<Var> {
        let c4 = self.value(cov4);
        let q = c4.len() / 16;
        rows_of("condition_cov", c4, 16, q)?;
        let mut out = Vec::with_capacity(9 * q);
        for i in 0..q {
            let s = temporal_variance(c4, i)?;
            let m = &c4.data()[16 * i..16 * i + 16];
            for a in 0..3 {
                for b in 0..3 {
                    out.push(m[4 * a + b] - m[4 * a + 3] * m[12 + b] / s);
                }
            }
        }
        let value = Tensor::matrix(q, 9, out)?;
        Ok(self.push(
            value,
            &[cov4],
            FnOp::boxed("condition_cov", move |inp, _, g| {
                let c4 = inp[0];
                let mut gc = Tensor::zeros(c4.shape());
                for i in 0..q {
                    let m = &c4.data()[16 * i..16 * i + 16];
                    let s = m[15];
                    let gi = &g.data()[9 * i..9 * i + 9];
                    let out = &mut gc.data_mut()[16 * i..16 * i + 16];
                    let mut g_s = 0.0;
                    for a in 0..3 {
                        for b in 0..3 {
                            let gab = gi[3 * a + b];
                            out[4 * a + b] += gab;
                            out[4 * a + 3] -= gab * m[12 + b] / s;
                            out[12 + b] -= gab * m[4 * a + 3] / s;
                            g_s += gab * m[4 * a + 3] * m[12 + b] / (s * s);
                        }
                    }
                    out[15] += g_s;
                }
                Ok(vec![Some(gc)])
            }),
        ))
    }

    /// `logistic(o) * exp(-(t - mu_t)^2 / (2 s_tt))` using the joint temporal variance.
    pub fn joint_weight(&mut self, cov4: Var, mu_t: Var, opacity_logit: Var, t: f64) -> Result<Var> {
        let (c4, mt, ol) = (self.value(cov4), self.value(mu_t), self.value(opacity_logit));
        let q = mt.len();
        rows_of("joint_weight.cov4", c4, 16, q)?;
        rows_of("joint_weight.opacity_logit", ol, 1, q)?;
        let mut out = Vec::with_capacity(q);
        for i in 0..q {
            let s = temporal_variance(c4, i)?;
            let dt = t - mt.data()[i];
            out.push(logistic(ol.data()[i]) * (-dt * dt / (2.0 * s)).exp());
        }
        let value = Tensor::matrix(q, 1, out)?;
        Ok(self.push(
            value,
            &[cov4, mu_t, opacity_logit],
            FnOp::boxed("joint_weight", move |inp, w, g| {
                let (c4, mt, ol) = (inp[0], inp[1], inp[2]);
                let mut g_c4 = Tensor::zeros(c4.shape());
                let mut g_mt = Tensor::zeros(mt.shape());
                let mut g_ol = Tensor::zeros(ol.shape());
                for i in 0..q {
                    let s = c4.data()[16 * i + 15];
                    let dt = t - mt.data()[i];
                    let gw = g.data()[i] * w.data()[i];
                    g_ol.data_mut()[i] = gw * (1.0 - logistic(ol.data()[i]));
                    g_mt.data_mut()[i] = gw * dt / s;
                    g_c4.data_mut()[16 * i + 15] = gw * dt * dt / (2.0 * s * s);
                }
                Ok(vec![Some(g_c4), Some(g_mt), Some(g_ol)])
            }),
        ))
    }
}

fn temporal_variance(c4: &Tensor, i: usize) -> Result<f64> {
    let s = c4.data()[16 * i + 15];
    if !(s > MIN_TEMPORAL_VARIANCE) {
        return Err(Error::DegenerateCovariance {
            index: i,
            reason: format!("temporal variance {s:e} is not positive"),
        });
    }
    Ok(s)
}

struct SplatOp {
    spec: GridSpec,
    opts: SplatOptions,
    fwd: SplatForward,
}

impl Backward for SplatOp {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = SplatInput {
            means: inputs[0].data(),
            covs: inputs[1].data(),
            weights: inputs[2].data(),
            logits: inputs[3].data(),
            num_classes: self.spec.num_classes,
        };
        let g = splat_backward(&input, &self.spec, self.opts, &self.fwd, grad.data())?;
        Ok(vec![
            Some(Tensor::new(inputs[0].shape().to_vec(), g.means)?),
            Some(Tensor::new(inputs[1].shape().to_vec(), g.covs)?),
            Some(Tensor::new(inputs[2].shape().to_vec(), g.weights)?),
            Some(Tensor::new(inputs[3].shape().to_vec(), g.logits)?),
        ])
    }
}
