//! Structured space-time Gaussian primitives and their closed-form math.
//!
//! A [`Gaussian4D`] stores a spatial mean at a temporal anchor, a
//! time-invariant conditional spatial covariance (log-scales plus a
//! quaternion), a temporal scale and planar motion terms. Slicing at a query
//! time shifts the mean linearly and scales opacity by a Gaussian temporal
//! weight. [`reconstruct_joint`] and [`condition_joint`] give the equivalent
//! joint 4x4 covariance and the textbook conditioning rule, which together
//! serve as the oracle for [`slice_at`].

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};

use crate::error::{Error, Result};

/// Quaternions with norm below this are rejected.
pub const MIN_QUAT_NORM: f64 = 1e-12;

/// Eigenvalue floor used by PSD checks.
pub const PSD_FLOOR: f64 = -1e-10;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One structured space-time primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian4D {
    /// Spatial center at the temporal anchor, meters.
    pub mu_s: [f64; 3],
    /// Temporal anchor, seconds.
    pub mu_t: f64,
    pub log_scales: [f64; 3],
    /// Rotation as (w, x, y, z); normalized on use.
    pub quat: [f64; 4],
    pub log_sigma_t: f64,
    pub opacity_logit: f64,
    /// Semantic logits over the non-free classes.
    pub logits: Vec<f64>,
    /// Object-level planar velocity, m/s.
    pub v_dyn: [f64; 2],
    /// Dynamic probability in [0, 1].
    pub alpha: f64,
}

impl Gaussian4D {
    /// An isotropic, static primitive with uniform semantics.
    pub fn isotropic(mu_s: [f64; 3], mu_t: f64, scale: f64, sigma_t: f64, opacity: f64, num_classes: usize) -> Self {
        Gaussian4D {
            mu_s,
            mu_t,
            log_scales: [scale.ln(); 3],
            quat: [1.0, 0.0, 0.0, 0.0],
            log_sigma_t: sigma_t.ln(),
            opacity_logit: logit(opacity),
            logits: vec![0.0; num_classes],
            v_dyn: [0.0; 2],
            alpha: 0.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.len()
    }

    pub fn scales(&self) -> [f64; 3] {
        self.log_scales.map(f64::exp)
    }

    pub fn sigma_t(&self) -> f64 {
        self.log_sigma_t.exp()
    }

    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        conditional_covariance(self.log_scales, self.quat)
    }

    /// Checks every field against the type invariants.
    pub fn validate(&self) -> Result<()> {
        let finite = self.mu_s.iter().all(|x| x.is_finite())
            && self.mu_t.is_finite()
            && self.log_scales.iter().all(|x| x.is_finite())
            && self.quat.iter().all(|x| x.is_finite())
            && self.log_sigma_t.is_finite()
            && self.opacity_logit.is_finite()
            && self.logits.iter().all(|x| x.is_finite())
            && self.v_dyn.iter().all(|x| x.is_finite())
            && self.alpha.is_finite();
        if !finite {
            return Err(Error::invalid("non-finite Gaussian attribute"));
        }
        if quat_norm(self.quat) < MIN_QUAT_NORM {
            return Err(Error::invalid("zero-norm quaternion"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0,1]", self.alpha)));
        }
        Ok(())
    }
}

/// A primitive conditioned on a query time.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedGaussian3D {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Opacity times temporal weight.
    pub weight: f64,
    pub logits: Vec<f64>,
}

/// Joint space-time Gaussian in (x, y, z, t) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian4D {
    pub mu4: Vector4<f64>,
    pub cov4: Matrix4<f64>,
}

fn quat_norm(q: [f64; 4]) -> f64 {
    q.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Normalizes a quaternion, rejecting (near) zero input.
pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = quat_norm(q);
    if !(n >= MIN_QUAT_NORM) {
        return Err(Error::invalid(format!("quaternion norm {n} too small")));
    }
    Ok(q.map(|x| x / n))
}

/// Rotation matrix of a unit quaternion (w, x, y, z). No normalization.
pub fn rotation_from_unit(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`rotation_from_unit`] with respect to (w, x, y, z).
pub fn rotation_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Rotation matrix of an arbitrary nonzero quaternion.
pub fn quat_to_rotation(quat: [f64; 4]) -> Result<Matrix3<f64>> {
    Ok(rotation_from_unit(normalize_quat(quat)?))
}

/// `R S S^T R^T` with `S = diag(exp(log_scales))`.
pub fn conditional_covariance(log_scales: [f64; 3], quat: [f64; 4]) -> Result<Matrix3<f64>> {
    let r = quat_to_rotation(quat)?;
    let d = Matrix3::from_diagonal(&Vector3::from(log_scales.map(|s| (2.0 * s).exp())));
    let cov = r * d * r.transpose();
    Ok(symmetrize3(&cov))
}

fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Gaussian falloff of a primitive's influence away from its anchor.
pub fn temporal_weight(g: &Gaussian4D, t: f64) -> f64 {
    let dt = t - g.mu_t;
    let var = (2.0 * g.log_sigma_t).exp();
    (-dt * dt / (2.0 * var)).exp()
}

/// `v_scene + alpha * v_dyn` lifted to 3D with zero vertical component.
pub fn effective_velocity(g: &Gaussian4D, v_scene: [f64; 2]) -> Result<Vector3<f64>> {
    if !(0.0..=1.0).contains(&g.alpha) {
        return Err(Error::invalid(format!("alpha {} outside [0,1]", g.alpha)));
    }
    Ok(Vector3::new(
        v_scene[0] + g.alpha * g.v_dyn[0],
        v_scene[1] + g.alpha * g.v_dyn[1],
        0.0,
    ))
}

fn check_planar(v: &Vector3<f64>) -> Result<()> {
    if v.z != 0.0 {
        return Err(Error::invalid(format!("velocity has nonzero z-component {}", v.z)));
    }
    Ok(())
}

/// Conditions a primitive on time `t` given its planar velocity `v`.
pub fn slice_at(g: &Gaussian4D, v: &Vector3<f64>, t: f64) -> Result<SlicedGaussian3D> {
    check_planar(v)?;
    let mu = Vector3::from(g.mu_s);
    Ok(SlicedGaussian3D {
        mean: mu + v * (t - g.mu_t),
        cov: g.covariance()?,
        weight: g.opacity() * temporal_weight(g, t),
        logits: g.logits.clone(),
    })
}

/// Joint space-time Gaussian equivalent to the structured primitive.
pub fn reconstruct_joint(g: &Gaussian4D, v: &Vector3<f64>) -> Result<JointGaussian4D> {
    check_planar(v)?;
    let cov = g.covariance()?;
    let var_t = (2.0 * g.log_sigma_t).exp();
    let spatial = cov + v * v.transpose() * var_t;
    let cross = v * var_t;
    let mut cov4 = Matrix4::zeros();
    cov4.fixed_view_mut::<3, 3>(0, 0).copy_from(&spatial);
    cov4.fixed_view_mut::<3, 1>(0, 3).copy_from(&cross);
    cov4.fixed_view_mut::<1, 3>(3, 0).copy_from(&cross.transpose());
    cov4[(3, 3)] = var_t;
    Ok(JointGaussian4D {
        mu4: Vector4::new(g.mu_s[0], g.mu_s[1], g.mu_s[2], g.mu_t),
        cov4,
    })
}

/// Conditional distribution of space given time for a joint Gaussian.
pub fn condition_joint(j: &JointGaussian4D, t: f64) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    let var_t = j.cov4[(3, 3)];
    if !(var_t > 0.0) {
        return Err(Error::DegenerateCovariance {
            index: 0,
            reason: format!("temporal variance {var_t} is not positive"),
        });
    }
    let sigma_ss: Matrix3<f64> = j.cov4.fixed_view::<3, 3>(0, 0).into_owned();
    let sigma_st: Vector3<f64> = j.cov4.fixed_view::<3, 1>(0, 3).into_owned();
    let sigma_ts: Vector3<f64> = j.cov4.fixed_view::<1, 3>(3, 0).transpose();
    let mu_s = Vector3::new(j.mu4[0], j.mu4[1], j.mu4[2]);
    let mean = mu_s + sigma_st * ((t - j.mu4[3]) / var_t);
    let cov = sigma_ss - sigma_st * sigma_ts.transpose() / var_t;
    Ok((mean, cov))
}

/// Symmetric within `sym_tol` and all eigenvalues above [`PSD_FLOOR`].
pub fn is_symmetric_psd3(m: &Matrix3<f64>, sym_tol: f64) -> bool {
    if (m - m.transpose()).abs().max() > sym_tol {
        return false;
    }
    SymmetricEigen::new(symmetrize3(m)).eigenvalues.iter().all(|&e| e >= PSD_FLOOR)
}

pub fn is_symmetric_psd4(m: &Matrix4<f64>, sym_tol: f64) -> bool {
    if (m - m.transpose()).abs().max() > sym_tol {
        return false;
    }
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.iter().all(|&e| e >= PSD_FLOOR)
}

/// Left-multiplication matrix of quaternion `a` in the (w, x, y, z) basis.
pub fn left_isoclinic(a: [f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = a;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, -z, y, //
        y, z, w, -x, //
        z, -y, x, w,
    )
}

/// Right-multiplication matrix of quaternion `p` in the (w, x, y, z) basis.
pub fn right_isoclinic(p: [f64; 4]) -> Matrix4<f64> {
    let [w, x, y, z] = p;
    Matrix4::new(
        w, -x, -y, -z, //
        x, w, z, -y, //
        y, -z, w, x, //
        z, y, -x, w,
    )
}

/// Reorders a matrix from the quaternion basis (w, x, y, z) to space-time
/// (x, y, z, t), with the real axis playing the role of time.
pub fn quat_basis_to_spacetime(m: &Matrix4<f64>) -> Matrix4<f64> {
    const PERM: [usize; 4] = [1, 2, 3, 0];
    Matrix4::from_fn(|i, j| m[(PERM[i], PERM[j])])
}

/// 4D rotation from a pair of unit quaternions: `x -> l * x * r`, expressed in
/// (x, y, z, t) coordinates. `r = conj(l)` yields a purely spatial rotation.
pub fn rotation4_from_pair(l: [f64; 4], r: [f64; 4]) -> Matrix4<f64> {
    quat_basis_to_spacetime(&(left_isoclinic(l) * right_isoclinic(r)))
}

pub fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian4D {
        Gaussian4D {
            mu_s: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..2.0)],
            mu_t: rng.random_range(0.0..3.0),
            log_scales: [rng.random_range(-2.0..1.0), rng.random_range(-2.0..1.0), rng.random_range(-2.0..1.0)],
            quat: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            log_sigma_t: rng.random_range(-1.0..1.0),
            opacity_logit: rng.random_range(-3.0..3.0),
            logits: vec![rng.random_range(-1.0..1.0); 4],
            v_dyn: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
            alpha: rng.random_range(0.0..=1.0),
        }
    }

    #[test]
    fn identity_quaternion_is_identity_rotation() {
        assert_eq!(quat_to_rotation([1.0, 0.0, 0.0, 0.0]).unwrap(), Matrix3::identity());
    }

    #[test]
    fn half_turn_about_z() {
        let r = quat_to_rotation([0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(r, Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)));
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(matches!(quat_to_rotation([0.0; 4]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn random_rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = quat_to_rotation(q).unwrap();
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            assert!(err < 1e-12, "orthogonality error {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_partials_match_central_differences() {
        let q = [0.3, -0.5, 0.7, 0.2];
        let parts = rotation_partials(q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (rotation_from_unit(qp) - rotation_from_unit(qm)) / (2.0 * h);
            assert!((fd - parts[k]).abs().max() < 1e-8);
        }
    }

    #[test]
    fn covariance_examples() {
        let c = conditional_covariance([0.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c, Matrix3::identity());
        let c = conditional_covariance([2f64.ln(), 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-15);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let g = random_gaussian(&mut rng);
            let c = g.covariance().unwrap();
            let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> = g.scales().iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn temporal_weight_examples() {
        let mut g = Gaussian4D::isotropic([0.0; 3], 1.0, 1.0, 0.5, 0.5, 2);
        assert_eq!(temporal_weight(&g, 1.0), 1.0);
        assert!((temporal_weight(&g, 1.5) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((temporal_weight(&g, 2.0) - (-2.0f64).exp()).abs() < 1e-15);
        g.mu_t = 0.0;
        assert!((temporal_weight(&g, 0.7) - temporal_weight(&g, -0.7)).abs() < 1e-16);
    }

    #[test]
    fn effective_velocity_examples() {
        let mut g = Gaussian4D::isotropic([0.0; 3], 0.0, 1.0, 1.0, 0.5, 2);
        g.v_dyn = [9.0, 9.0];
        assert_eq!(effective_velocity(&g, [-3.0, 0.0]).unwrap(), Vector3::new(-3.0, 0.0, 0.0));
        g.alpha = 1.0;
        g.v_dyn = [5.0, 0.0];
        assert_eq!(effective_velocity(&g, [-5.0, 0.0]).unwrap(), Vector3::zeros());
        g.alpha = 0.5;
        g.v_dyn = [2.0, -4.0];
        assert_eq!(effective_velocity(&g, [0.0, 0.0]).unwrap(), Vector3::new(1.0, -2.0, 0.0));
        g.alpha = 1.5;
        assert!(effective_velocity(&g, [0.0, 0.0]).is_err());
    }

    #[test]
    fn slice_examples() {
        let g = Gaussian4D::isotropic([0.0; 3], 0.0, 1.0, 1.0, 0.8, 2);
        let s = slice_at(&g, &Vector3::new(1.0, 2.0, 0.0), 0.5).unwrap();
        assert_eq!(s.mean, Vector3::new(0.5, 1.0, 0.0));
        let s0 = slice_at(&g, &Vector3::new(1.0, 2.0, 0.0), 0.0).unwrap();
        assert_eq!(s0.mean, Vector3::from(g.mu_s));
        assert!((s0.weight - g.opacity()).abs() < 1e-15);
        let a = slice_at(&g, &Vector3::new(1.0, 2.0, 0.0), 0.1).unwrap();
        let b = slice_at(&g, &Vector3::new(1.0, 2.0, 0.0), 2.9).unwrap();
        assert_eq!(a.cov, b.cov);
        assert!(slice_at(&g, &Vector3::new(0.0, 0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn joint_examples() {
        let g = Gaussian4D::isotropic([0.0; 3], 0.0, 1.0, 1.0, 0.5, 2);
        let v = Vector3::new(1.0, 2.0, 0.0);
        let j = reconstruct_joint(&g, &v).unwrap();
        let spatial: Matrix3<f64> = j.cov4.fixed_view::<3, 3>(0, 0).into_owned();
        assert_eq!(spatial, Matrix3::new(2.0, 2.0, 0.0, 2.0, 5.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(j.cov4.fixed_view::<3, 1>(0, 3).into_owned(), v);

        let (_, cov) = condition_joint(&j, 0.3).unwrap();
        assert_eq!(cov, Matrix3::identity());
        let (mean, _) = condition_joint(&j, 2.0).unwrap();
        assert_eq!(mean, Vector3::new(2.0, 4.0, 0.0));

        let still = reconstruct_joint(&g, &Vector3::zeros()).unwrap();
        for i in 0..3 {
            assert_eq!(still.cov4[(i, 3)], 0.0);
            assert_eq!(still.cov4[(3, i)], 0.0);
        }
    }

    #[test]
    fn degenerate_joint_rejected() {
        let j = JointGaussian4D { mu4: Vector4::zeros(), cov4: Matrix4::identity() * 0.0 };
        assert!(matches!(condition_joint(&j, 1.0), Err(Error::DegenerateCovariance { .. })));
    }

    #[test]
    fn spatial_pair_rotation_is_block_diagonal() {
        let q = normalize_quat([0.4, -0.3, 0.8, 0.1]).unwrap();
        let r4 = rotation4_from_pair(q, quat_conj(q));
        let r3 = rotation_from_unit(q);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r4[(i, j)] - r3[(i, j)]).abs() < 1e-14);
            }
            assert!(r4[(i, 3)].abs() < 1e-14 && r4[(3, i)].abs() < 1e-14);
        }
        assert!((r4[(3, 3)] - 1.0).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn joint_conditioning_matches_slice(
            seed in 0u64..10_000,
            t in 0.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_gaussian(&mut rng);
            let v = effective_velocity(&g, [rng.random_range(-6.0..6.0), rng.random_range(-2.0..2.0)]).unwrap();
            let s = slice_at(&g, &v, t).unwrap();
            let j = reconstruct_joint(&g, &v).unwrap();
            proptest::prop_assert!(is_symmetric_psd4(&j.cov4, 1e-12));
            let (mean, cov) = condition_joint(&j, t).unwrap();
            proptest::prop_assert!((mean - s.mean).abs().max() < 1e-10);
            proptest::prop_assert!((cov - s.cov).abs().max() < 1e-10);
            proptest::prop_assert!(is_symmetric_psd3(&s.cov, 1e-12));
            proptest::prop_assert!(s.weight <= g.opacity());
        }

        #[test]
        fn temporal_weight_decreases_away_from_anchor(a in 0.0f64..4.0, b in 0.0f64..4.0, ls in -2.0f64..1.0) {
            let mut g = Gaussian4D::isotropic([0.0; 3], 1.0, 1.0, 1.0, 0.5, 1);
            g.log_sigma_t = ls;
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assume!(far - near > 1e-6);
            let wn = temporal_weight(&g, 1.0 + near);
            let wf = temporal_weight(&g, 1.0 + far);
            proptest::prop_assert!(wn >= wf);
            proptest::prop_assert!(wn <= 1.0 && wf > 0.0 || wf == 0.0);
        }
    }
}
