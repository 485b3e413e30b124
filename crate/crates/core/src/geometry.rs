//! Rigid transforms in three dimensions.
//!
//! Rotations are stored as 3x3 matrices; quaternions and Euler angles only
//! appear at I/O boundaries. All transforms act on world points in mm.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::procrustes::svd3;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance on `RᵀR = I` and `det R = 1`.
pub const ORTHO_TOLERANCE: f64 = 1e-9;

/// `v ↦ R v + T`, with `R` a proper rotation and `T` in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    /// Rotation about an arbitrary center `c`: `v ↦ R (v − c) + c`.
    pub fn rotation_about(rotation: Mat3, center: Vec3) -> Self {
        Self::new(rotation, center - rotation * center)
    }

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.rotation * v + self.translation
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * b.rotation;
        let translation = self.rotation * b.translation + self.translation;
        let mut out = RigidTransform::new(rotation, translation);
        if orthogonality_error(&out.rotation) > ORTHO_TOLERANCE {
            out.rotation = project_to_rotation(&out.rotation);
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn is_valid(&self) -> bool {
        self.rotation.iter().all(|x| x.is_finite())
            && self.translation.iter().all(|x| x.is_finite())
            && orthogonality_error(&self.rotation) <= ORTHO_TOLERANCE
            && (self.rotation.determinant() - 1.0).abs() <= ORTHO_TOLERANCE
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Unit quaternion `[w, x, y, z]` of the rotation, with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        rotation_to_quaternion(&self.rotation)
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vec3) -> Self {
        Self::new(quaternion_to_rotation(q), translation)
    }

    /// Rotation angle of this transform in degrees.
    pub fn angle_deg(&self) -> f64 {
        geodesic_angle(&self.rotation, &Mat3::identity())
    }
}

/// Largest elementwise deviation of `RᵀR` from the identity.
pub fn orthogonality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

/// Closest proper rotation to `m` in the Frobenius sense (polar factor).
pub fn project_to_rotation(m: &Mat3) -> Mat3 {
    let svd = svd3(m);
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    svd.u * fix * svd.v.transpose()
}

/// Minimal rotation angle between two rotations, in degrees.
///
/// Evaluates `arccos((tr(R₁R₂ᵀ) − 1) / 2)` through `atan2` of the sine and
/// cosine parts, which keeps full precision near 0° and 180°.
pub fn geodesic_angle(r1: &Mat3, r2: &Mat3) -> f64 {
    let m = r1 * r2.transpose();
    let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees()
}

/// Intrinsic Euler-angle conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EulerOrder {
    /// `R = Rx · Ry · Rz`.
    #[default]
    Xyz,
    /// `R = Rz · Ry · Rx`.
    Zyx,
}

pub fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation from intrinsic Euler angles in degrees.
///
/// Multiples of 90° produce exact signed permutation matrices.
pub fn rotation_from_euler(rx: f64, ry: f64, rz: f64, order: EulerOrder) -> Mat3 {
    let (x, y, z) = (exact_rot(rx, rot_x), exact_rot(ry, rot_y), exact_rot(rz, rot_z));
    match order {
        EulerOrder::Xyz => x * y * z,
        EulerOrder::Zyx => z * y * x,
    }
}

fn exact_rot(deg: f64, f: fn(f64) -> Mat3) -> Mat3 {
    let mut m = f(deg);
    if (deg / 90.0).fract() == 0.0 {
        m.apply(|x| *x = x.round());
    }
    m
}

/// Euler angles (degrees) of a rotation in the intrinsic X-Y-Z convention.
pub fn euler_xyz_from_rotation(r: &Mat3) -> (f64, f64, f64) {
    // R = Rx Ry Rz: r02 = sin(ry), r12 = -sin(rx) cos(ry), r01 = -cos(ry) sin(rz)
    let ry = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let rx = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let rz = (-r[(0, 1)]).atan2(r[(0, 0)]);
    (rx.to_degrees(), ry.to_degrees(), rz.to_degrees())
}

pub fn rotation_to_quaternion(r: &Mat3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    if w < 0.0 {
        [-w, -x, -y, -z]
    } else {
        [w, x, y, z]
    }
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Mat3 {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// Converts the rotation to a quaternion and back.
pub fn quaternion_roundtrip(q: &RigidTransform) -> RigidTransform {
    RigidTransform::from_quaternion(q.quaternion(), q.translation)
}

/// Rotation by `deg` degrees about a (not necessarily unit) axis.
pub fn axis_angle(axis: &Vec3, deg: f64) -> Mat3 {
    let n = axis.norm();
    if n == 0.0 || deg == 0.0 {
        return Mat3::identity();
    }
    *Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / n), deg.to_radians()).matrix()
}
