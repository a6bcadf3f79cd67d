//! Rigid transforms in SE(3) and their twist (exponential) coordinates.
//!
//! Rotations are stored as matrices and optimized through twists
//! `ξ = (ω, v)`, `ω` the axis-angle rotation and `v` the translational part.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

const SMALL_ANGLE: f64 = 1e-4;

/// Proper rigid motion `X ↦ R·X + t`. Serialized as a row-major 4×4
/// homogeneous matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 4]; 4]", try_from = "[[f64; 4]; 4]")]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Minimal 6-vector chart of SE(3), rotation first.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "[f64; 6]", from = "[f64; 6]")]
pub struct Twist(pub Vector6<f64>);

impl From<Twist> for [f64; 6] {
    fn from(t: Twist) -> Self {
        t.0.into()
    }
}

impl From<[f64; 6]> for Twist {
    fn from(v: [f64; 6]) -> Self {
        Twist(Vector6::from(v))
    }
}

impl From<RigidPose> for [[f64; 4]; 4] {
    fn from(p: RigidPose) -> Self {
        p.to_rows()
    }
}

impl TryFrom<[[f64; 4]; 4]> for RigidPose {
    type Error = crate::error::Error;

    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self> {
        RigidPose::from_rows(&rows)
    }
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist(Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z))
    }

    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn v(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Builds a pose from a homogeneous matrix, projecting the rotation block
    /// onto SO(3). The bottom row must be `[0, 0, 0, 1]`.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(domain("homogeneous matrix bottom row must be [0,0,0,1]"));
        }
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        if r.iter().any(|v| !v.is_finite()) || r.determinant() <= 0.0 {
            return Err(domain("rotation block is not a proper rotation"));
        }
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Self::new(r, t).orthonormalized())
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 4×4 as nested arrays (the on-disk pose layout).
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        let mut rows = [[0.0; 4]; 4];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix(&Matrix4::from_fn(|i, j| rows[i][j]))
    }

    #[inline]
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Nearest rotation in the Frobenius sense (polar factor `U·Vᵀ`).
    pub fn orthonormalized(&self) -> RigidPose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        RigidPose::new(r, self.translation)
    }

    /// Largest elementwise deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn exp(xi: &Twist) -> RigidPose {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }
}

/// Geodesic angle of a rotation matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    // The skew part gives a well-conditioned angle near zero where acos loses
    // precision.
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

#[inline]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues / V-matrix coefficients `A = sinθ/θ`, `B = (1−cosθ)/θ²`,
/// `C = (θ−sinθ)/θ³` and their derivatives divided by θ.
struct ExpCoefficients {
    a: f64,
    b: f64,
    c: f64,
    da: f64,
    db: f64,
    dc: f64,
}

impl ExpCoefficients {
    fn new(theta: f64) -> Self {
        let t2 = theta * theta;
        if theta < SMALL_ANGLE {
            Self {
                a: 1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                b: 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                c: 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
                da: -1.0 / 3.0 + t2 / 30.0,
                db: -1.0 / 12.0 + t2 / 180.0,
                dc: -1.0 / 60.0 + t2 / 1260.0,
            }
        } else {
            let (s, c) = theta.sin_cos();
            let t3 = t2 * theta;
            Self {
                a: s / theta,
                b: (1.0 - c) / t2,
                c: (theta - s) / t3,
                da: (theta * c - s) / t3,
                db: (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
                dc: ((1.0 - c) * theta - 3.0 * (theta - s)) / (t3 * t2),
            }
        }
    }
}

pub fn se3_exp(xi: &Twist) -> RigidPose {
    let w = xi.omega();
    let k = hat(&w);
    let k2 = k * k;
    let co = ExpCoefficients::new(w.norm());
    let r = Matrix3::identity() + k * co.a + k2 * co.b;
    let v = Matrix3::identity() + k * co.b + k2 * co.c;
    RigidPose::new(r, v * xi.v())
}

/// Principal-value logarithm. Rotations within `1e-6` rad of the cut locus
/// (angle π) log a warning; the returned axis is one of the two valid ones.
pub fn se3_log(pose: &RigidPose) -> Twist {
    let r = &pose.rotation;
    let theta = rotation_angle(r);
    let omega = if theta < SMALL_ANGLE {
        // R − Rᵀ ≈ 2 sinθ/θ · K
        let co = ExpCoefficients::new(theta);
        vee(&(r - r.transpose())) / (2.0 * co.a)
    } else if std::f64::consts::PI - theta < 1e-3 {
        if std::f64::consts::PI - theta < 1e-6 {
            log::warn!("se3_log: rotation angle {theta} is at the cut locus; returning principal value");
        }
        near_pi_axis(r, theta)
    } else {
        vee(&(r - r.transpose())) * (theta / (2.0 * theta.sin()))
    };
    let k = hat(&omega);
    let th = omega.norm();
    let co = ExpCoefficients::new(th);
    let v_inv = if th < SMALL_ANGLE {
        Matrix3::identity() - k * 0.5 + k * k * (1.0 / 12.0 + th * th / 720.0)
    } else {
        Matrix3::identity() - k * 0.5 + k * k * ((1.0 - co.a / (2.0 * co.b)) / (th * th))
    };
    Twist::new(omega, v_inv * pose.translation)
}

fn near_pi_axis(r: &Matrix3<f64>, theta: f64) -> Vector3<f64> {
    // R = I + B·K² + A·K with K² = n nᵀ θ² − θ² I.
    let co = ExpCoefficients::new(theta);
    let sym = (r + r.transpose()) * 0.5;
    let nnt = (sym - Matrix3::identity() * (1.0 - co.b * theta * theta)) / (co.b * theta * theta);
    let i = (0..3)
        .max_by(|&a, &b| nnt[(a, a)].total_cmp(&nnt[(b, b)]))
        .unwrap();
    let mut n: Vector3<f64> = nnt.column(i).into_owned() / nnt[(i, i)].max(1e-300).sqrt();
    n.normalize_mut();
    // Orient with the (small) skew part so that exp(log(R)) = R.
    let skew = vee(&(r - r.transpose()));
    if skew.dot(&n) < 0.0 {
        n = -n;
    }
    n * theta
}

/// Partial derivatives of `exp(ξ)` with respect to each twist coordinate:
/// `(∂R/∂ξᵢ, ∂t/∂ξᵢ)` for `i = 0..6`.
pub fn se3_exp_jacobian(xi: &Twist) -> ([Matrix3<f64>; 6], [Vector3<f64>; 6]) {
    let w = xi.omega();
    let v = xi.v();
    let theta = w.norm();
    let k = hat(&w);
    let k2 = k * k;
    let co = ExpCoefficients::new(theta);
    let vmat = Matrix3::identity() + k * co.b + k2 * co.c;

    let mut dr = [Matrix3::zeros(); 6];
    let mut dt = [Vector3::zeros(); 6];
    for i in 0..3 {
        let e = hat(&Vector3::ith(i, 1.0));
        let sym = e * k + k * e;
        dr[i] = k * (co.da * w[i]) + e * co.a + k2 * (co.db * w[i]) + sym * co.b;
        let dv = k * (co.db * w[i]) + e * co.b + k2 * (co.dc * w[i]) + sym * co.c;
        dt[i] = dv * v;
    }
    for i in 0..3 {
        dt[3 + i] = vmat.column(i).into_owned();
    }
    (dr, dt)
}

/// Chains Euclidean gradients on `(R, t)` back to the twist coordinates.
pub fn twist_gradient(xi: &Twist, grad_r: &Matrix3<f64>, grad_t: &Vector3<f64>) -> Vector6<f64> {
    let (dr, dt) = se3_exp_jacobian(xi);
    Vector6::from_fn(|i, _| grad_r.component_mul(&dr[i]).sum() + grad_t.dot(&dt[i]))
}

pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.normalize();
    se3_exp(&Twist::new(n * angle, Vector3::zeros())).rotation
}

pub(crate) fn check_pose(p: &RigidPose) -> Result<()> {
    if p.rotation.iter().chain(p.translation.iter()).any(|v| !v.is_finite()) {
        return Err(domain("pose has non-finite entries"));
    }
    if p.orthonormality_error() > 1e-6 || (p.rotation.determinant() - 1.0).abs() > 1e-6 {
        return Err(domain("pose rotation is not orthonormal"));
    }
    Ok(())
}
