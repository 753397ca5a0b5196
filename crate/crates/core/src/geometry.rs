//! Quaternion and SE(3) arithmetic plus latent camera-trajectory interpolation.
//!
//! Twists are ordered `(rho, phi)`: translation part first, rotation part
//! second. Rigid transforms act on points as `p' = R p + t`. Camera poses are
//! camera-to-world throughout the crate.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the exponential map switches to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Jacobian coefficients with high-order denominators use series below this angle.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;
/// Log is refused when the rotation angle is this close to pi.
pub const CUT_LOCUS_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Builds a unit quaternion from raw components. A zero input yields identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Quaternion { w: w / n, x: x / n, y: y / n, z: z / n }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn from_rotation_vector(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        if theta < SMALL_ANGLE {
            return Self::new(1.0, 0.5 * phi.x, 0.5 * phi.y, 0.5 * phi.z);
        }
        Self::from_axis_angle(phi, theta)
    }

    /// Shepperd's method; picks the numerically largest pivot.
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Self {
        let tr = r.trace();
        let (w, x, y, z);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let q = Self::new(w, x, y, z);
        if q.w < 0.0 {
            q.negated()
        } else {
            q
        }
    }

    pub fn negated(&self) -> Self {
        Quaternion { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product, renormalized.
    pub fn mul(&self, o: &Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
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

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Spherical linear interpolation along the shorter arc.
    pub fn slerp(&self, other: &Self, t: f64) -> Self {
        let mut b = *other;
        let mut d = self.dot(&b);
        if d < 0.0 {
            b = b.negated();
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            return Self::new(
                self.w + t * (b.w - self.w),
                self.x + t * (b.x - self.x),
                self.y + t * (b.y - self.y),
                self.z + t * (b.z - self.z),
            );
        }
        let omega = d.clamp(-1.0, 1.0).acos();
        let so = omega.sin();
        let s0 = ((1.0 - t) * omega).sin() / so;
        let s1 = (t * omega).sin() / so;
        Self::new(
            s0 * self.w + s1 * b.w,
            s0 * self.x + s1 * b.x,
            s0 * self.y + s1 * b.y,
            s0 * self.z + s1 * b.z,
        )
    }
}

/// Lie-algebra coordinates of a rigid motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist { rho: Vector3::zeros(), phi: Vector3::zeros() }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist { rho: v.fixed_rows::<3>(0).into(), phi: v.fixed_rows::<3>(3).into() }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist { rho: self.rho * s, phi: self.phi * s }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation, translation }
    }

    pub fn from_quaternion(q: &Quaternion, translation: Vector3<f64>) -> Self {
        RigidTransform { rotation: q.to_rotation_matrix(), translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: t }
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = 0.5 * vee(&(self.rotation - self.rotation.transpose())).norm();
        s.atan2(c)
    }

    /// Adjoint in `(rho, phi)` ordering: `T Exp(xi) T^-1 = Exp(Ad_T xi)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation;
        let tr = hat(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl std::ops::Mul for &RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Pinhole intrinsics with the principal point fixed at the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidArgument(format!("focal must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("image dims must be >= 1, got {width}x{height}")));
        }
        Ok(CameraIntrinsics { focal, width, height })
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.focal * p.x / p.z + self.cx(), self.focal * p.y / p.z + self.cy())
    }

    /// Back-projects a pixel at unit depth.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx()) / self.focal, (v - self.cy()) / self.focal, 1.0)
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `sin(t)/t`, `(1-cos t)/t^2`, `(t - sin t)/t^3`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coefficients(phi.norm());
    let k = hat(phi);
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3); also the translation coupling matrix of SE(3) Exp.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coefficients(phi.norm());
    let k = hat(phi);
    Matrix3::identity() + k * b + k * k * c
}

pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / t2
    };
    let k = hat(phi);
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// Principal-branch rotation vector of a rotation matrix.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = Quaternion::from_rotation_matrix(r);
    let v = Vector3::new(q.x, q.y, q.z);
    let s = v.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * s.atan2(q.w);
    // q.w >= 0 so angle/s is well conditioned; series keeps precision for tiny s.
    if s < SMALL_ANGLE {
        v * (2.0 / q.w) * (1.0 - s * s / (3.0 * q.w * q.w))
    } else {
        v * (angle / s)
    }
}

/// Exponential map of SE(3): Rodrigues rotation plus left-Jacobian translation.
pub fn se3_exp(xi: &Twist) -> RigidTransform {
    let theta = xi.phi.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = hat(&xi.phi);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    RigidTransform { rotation, translation: v * xi.rho }
}

/// Logarithm of SE(3) on the principal branch. Fails near a half turn.
pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    let angle = t.rotation_angle();
    if std::f64::consts::PI - angle < CUT_LOCUS_MARGIN {
        return Err(Error::AngleAtCutLocus { angle });
    }
    let phi = so3_log(&t.rotation);
    let rho = so3_left_jacobian_inverse(&phi) * t.translation;
    Ok(Twist { rho, phi })
}

fn se3_q_matrix(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3): `Exp(xi + d) ~ Exp(J_l d) Exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_matrix(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out
}

/// Right Jacobian of SE(3): `Exp(xi + d) ~ Exp(xi) Exp(J_r d)`.
pub fn se3_right_jacobian(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian(&xi.scaled(-1.0))
}

pub fn se3_right_jacobian_inverse(xi: &Twist) -> Matrix6<f64> {
    let jr = se3_right_jacobian(xi);
    // Block upper-triangular: [[J, Q], [0, J]]^-1 = [[J^-1, -J^-1 Q J^-1], [0, J^-1]].
    let jinv = so3_left_jacobian_inverse(&(-xi.phi));
    let q = jr.fixed_view::<3, 3>(0, 3).into_owned();
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(jinv * q * jinv)));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out
}

/// Pose along the latent exposure trajectory at fraction `s` in `[0, 1]`:
/// `base * d_start * Exp(s * Log(d_start^-1 * d_end))`.
pub fn latent_pose_at(
    base: &RigidTransform,
    delta_start: &RigidTransform,
    delta_end: &RigidTransform,
    s: f64,
) -> Result<RigidTransform> {
    let rel = se3_log(&(delta_start.inverse() * *delta_end))?;
    Ok(base * &(delta_start * &se3_exp(&rel.scaled(s))))
}

/// Latent poses `T_k` for `k = 1..=u`, with `s = k / u`.
pub fn interpolate_latent_poses(
    base: &RigidTransform,
    delta_start: &RigidTransform,
    delta_end: &RigidTransform,
    u: usize,
) -> Result<Vec<RigidTransform>> {
    if u == 0 {
        return Err(Error::InvalidArgument("latent count u must be >= 1".into()));
    }
    let rel = se3_log(&(delta_start.inverse() * *delta_end))?;
    let head = base * delta_start;
    Ok((1..=u)
        .map(|k| head * se3_exp(&rel.scaled(k as f64 / u as f64)))
        .collect())
}

/// Latent pose plus the linear maps taking parameter perturbations to the
/// right perturbation `T_k Exp(delta)` of the resulting pose.
///
/// Parameters are a right increment on `base`, and the twist coordinates of
/// `delta_start = Exp(xi_start)` and `delta_end = Exp(xi_end)`.
#[derive(Debug, Clone)]
pub struct LatentPoseJacobian {
    pub pose: RigidTransform,
    pub d_base: Matrix6<f64>,
    pub d_start: Matrix6<f64>,
    pub d_end: Matrix6<f64>,
}

pub fn latent_pose_jacobian(
    base: &RigidTransform,
    xi_start: &Twist,
    xi_end: &Twist,
    s: f64,
) -> Result<LatentPoseJacobian> {
    let d1 = se3_exp(xi_start);
    let du = se3_exp(xi_end);
    let rel = d1.inverse() * du;
    let eta = se3_log(&rel)?;
    let step = se3_exp(&eta.scaled(s));
    let tail = d1 * step;
    let pose = base * &tail;

    let jr_seta = se3_right_jacobian(&eta.scaled(s));
    let jr_eta_inv = se3_right_jacobian_inverse(&eta);
    let chain = jr_seta * jr_eta_inv * s;

    let d_base = tail.inverse().adjoint();
    let d_end = chain * se3_right_jacobian(xi_end);
    let d_start =
        (step.inverse().adjoint() - chain * rel.inverse().adjoint()) * se3_right_jacobian(xi_start);
    Ok(LatentPoseJacobian { pose, d_base, d_start, d_end })
}

/// Similarity `dst ~ scale * R * src + t` fitted by weighted least squares
/// (Umeyama). With `with_scale = false` the scale is fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub transform: RigidTransform,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.transform.rotation * p * self.scale + self.transform.translation
    }
}

pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<Similarity> {
    if src.len() != dst.len() || weights.is_some_and(|w| w.len() != src.len()) {
        return Err(Error::LengthMismatch(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.is_empty() {
        return Err(Error::EmptySequence("umeyama needs at least one correspondence"));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let wsum: f64 = (0..src.len()).map(w).sum();
    if !(wsum > 0.0) {
        return Err(Error::InvalidArgument("correspondence weights sum to zero".into()));
    }
    let mu_s = (0..src.len()).map(|i| src[i] * w(i)).sum::<Vector3<f64>>() / wsum;
    let mu_d = (0..src.len()).map(|i| dst[i] * w(i)).sum::<Vector3<f64>>() / wsum;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..src.len() {
        let a = src[i] - mu_s;
        let b = dst[i] - mu_d;
        cov += b * a.transpose() * w(i);
        var_s += a.norm_squared() * w(i);
    }
    cov /= wsum;
    var_s /= wsum;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale && var_s > 0.0 {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity { scale, transform: RigidTransform { rotation, translation } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn umeyama_recovers_similarity() {
        let truth = se3_exp(&Twist::new(Vector3::new(0.3, -1.0, 2.0), Vector3::new(0.4, 0.1, -0.7)));
        let src: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new((i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 * 0.1))
            .collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.rotation * p * 2.5 + truth.translation).collect();
        let sim = umeyama(&src, &dst, None, true).unwrap();
        assert!((sim.scale - 2.5).abs() < 1e-12);
        assert!((sim.transform.rotation - truth.rotation).abs().max() < 1e-12);
        let rigid = umeyama(&src, &dst, None, false).unwrap();
        assert_eq!(rigid.scale, 1.0);
    }
    use std::f64::consts::PI;

    fn max_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.rotation - b.rotation)
            .abs()
            .max()
            .max((a.translation - b.translation).abs().max())
    }

    #[test]
    fn zero_twist_is_identity() {
        let t = se3_exp(&Twist::zero());
        assert_eq!(t, RigidTransform::identity());
        let xi = se3_log(&RigidTransform::identity()).unwrap();
        assert_eq!(xi.to_vector(), Vector6::zeros());
    }

    #[test]
    fn quarter_turn_about_z() {
        let xi = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let t = se3_exp(&xi);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_abs_diff_eq!(t.rotation, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(t.translation, Vector3::zeros(), epsilon = 1e-15);
        let back = se3_log(&t).unwrap();
        assert_abs_diff_eq!(back.phi, Vector3::new(0.0, 0.0, PI / 2.0), epsilon = 1e-14);
    }

    #[test]
    fn log_refuses_half_turn() {
        let t = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(PI, 0.0, 0.0)));
        assert!(matches!(se3_log(&t), Err(Error::AngleAtCutLocus { .. })));
    }

    #[test]
    fn tiny_angles_round_trip() {
        for &a in &[0.0, 1e-12, 1e-9, 1e-8, 2e-8, 1e-6, 1e-3] {
            let xi = Twist::new(Vector3::new(0.3, -0.2, 0.7), Vector3::new(a, -0.5 * a, 0.25 * a));
            let back = se3_log(&se3_exp(&xi)).unwrap();
            assert_abs_diff_eq!(back.to_vector(), xi.to_vector(), epsilon = 1e-12);
        }
    }

    #[test]
    fn quaternion_matrix_round_trip() {
        let q = Quaternion::new(0.3, -0.4, 0.5, 0.7);
        let back = Quaternion::from_rotation_matrix(&q.to_rotation_matrix());
        assert!((back.dot(&q).abs() - 1.0).abs() < 1e-14);
        assert!((back.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = se3_exp(&Twist::new(Vector3::new(1.0, 2.0, -3.0), Vector3::new(0.4, -1.1, 0.9)));
        assert!(max_diff(&(t * t.inverse()), &RigidTransform::identity()) < 1e-12);
        assert!(t.orthonormality_error() < 1e-12);
    }

    #[test]
    fn adjoint_conjugates_exp() {
        let t = se3_exp(&Twist::new(Vector3::new(0.5, -0.2, 0.1), Vector3::new(0.3, 0.2, -0.6)));
        let xi = Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.2, 0.1, 0.05));
        let lhs = t * se3_exp(&xi) * t.inverse();
        let rhs = se3_exp(&Twist::from_vector(&(t.adjoint() * xi.to_vector())));
        assert!(max_diff(&lhs, &rhs) < 1e-12);
    }

    fn fd_right_jacobian(xi: &Twist) -> Matrix6<f64> {
        let h = 1e-6;
        let base = se3_exp(xi);
        let mut j = Matrix6::zeros();
        for c in 0..6 {
            let mut p = xi.to_vector();
            let mut m = xi.to_vector();
            p[c] += h;
            m[c] -= h;
            let dp = se3_log(&(base.inverse() * se3_exp(&Twist::from_vector(&p)))).unwrap();
            let dm = se3_log(&(base.inverse() * se3_exp(&Twist::from_vector(&m)))).unwrap();
            j.set_column(c, &((dp.to_vector() - dm.to_vector()) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        for xi in [
            Twist::new(Vector3::new(0.3, -0.1, 0.8), Vector3::new(0.7, -0.4, 1.2)),
            Twist::new(Vector3::new(-1.0, 0.5, 0.2), Vector3::new(1e-3, 2e-3, -1e-3)),
            Twist::new(Vector3::new(0.2, 0.4, 0.6), Vector3::zeros()),
        ] {
            let analytic = se3_right_jacobian(&xi);
            let numeric = fd_right_jacobian(&xi);
            assert!((analytic - numeric).abs().max() < 1e-7, "{analytic} vs {numeric}");
            let inv = se3_right_jacobian_inverse(&xi);
            assert!((inv * analytic - Matrix6::identity()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn latent_pose_jacobians_match_finite_differences() {
        let base = se3_exp(&Twist::new(Vector3::new(0.2, 0.1, -0.3), Vector3::new(0.1, 0.4, -0.2)));
        let xi1 = Twist::new(Vector3::new(0.05, -0.02, 0.03), Vector3::new(0.02, 0.05, -0.01));
        let xiu = Twist::new(Vector3::new(-0.04, 0.06, 0.01), Vector3::new(-0.03, 0.02, 0.08));
        let h = 1e-6;
        for &s in &[0.1, 0.5, 1.0] {
            let jac = latent_pose_jacobian(&base, &xi1, &xiu, s).unwrap();
            let pose = jac.pose;
            let eval = |b: &RigidTransform, a: &Twist, e: &Twist| {
                let p = latent_pose_at(b, &se3_exp(a), &se3_exp(e), s).unwrap();
                se3_log(&(pose.inverse() * p)).unwrap().to_vector()
            };
            for c in 0..6 {
                let mut e = Vector6::zeros();
                e[c] = h;
                let col_b = (eval(&(base * se3_exp(&Twist::from_vector(&e))), &xi1, &xiu)
                    - eval(&(base * se3_exp(&Twist::from_vector(&-e))), &xi1, &xiu))
                    / (2.0 * h);
                let col_1 = (eval(&base, &Twist::from_vector(&(xi1.to_vector() + e)), &xiu)
                    - eval(&base, &Twist::from_vector(&(xi1.to_vector() - e)), &xiu))
                    / (2.0 * h);
                let col_u = (eval(&base, &xi1, &Twist::from_vector(&(xiu.to_vector() + e)))
                    - eval(&base, &xi1, &Twist::from_vector(&(xiu.to_vector() - e))))
                    / (2.0 * h);
                assert!((jac.d_base.column(c) - col_b).abs().max() < 1e-7);
                assert!((jac.d_start.column(c) - col_1).abs().max() < 1e-7, "s={s} c={c}");
                assert!((jac.d_end.column(c) - col_u).abs().max() < 1e-7, "s={s} c={c}");
            }
        }
    }

    #[test]
    fn interpolation_quarter_turn_midpoint() {
        let base = se3_exp(&Twist::new(Vector3::new(1.0, 0.0, 0.5), Vector3::new(0.0, 0.2, 0.0)));
        let end = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0)));
        let poses = interpolate_latent_poses(&base, &RigidTransform::identity(), &end, 2).unwrap();
        let q45 = Quaternion::IDENTITY.slerp(&end.quaternion(), 0.5);
        let expected = base * RigidTransform::from_quaternion(&q45, Vector3::zeros());
        assert!(max_diff(&poses[0], &expected) < 1e-12);
        assert!(max_diff(&poses[1], &(base * end)) < 1e-12);
    }

    #[test]
    fn degenerate_trajectory_stays_at_base() {
        let base = se3_exp(&Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.3, 0.0, 0.1)));
        let id = RigidTransform::identity();
        for p in interpolate_latent_poses(&base, &id, &id, 7).unwrap() {
            assert!(max_diff(&p, &base) < 1e-15);
        }
        assert!(interpolate_latent_poses(&base, &id, &id, 0).is_err());
    }
}
