//! Rigid-body pose algebra.
//!
//! Relative motions are exchanged as [`PoseVector6`] (translation plus three
//! Euler angles) and composed as [`RigidTransform`]. The Euler convention is
//! fixed in one place: `R = Rz(rz) * Ry(ry) * Rx(rx)`, angles in radians, axes
//! in the KITTI camera frame (x right, y down, z forward). Under that frame
//! `ry` is yaw, and it is also the middle angle of the decomposition, so the
//! gimbal singularity sits at `|ry| = pi/2`, far outside inter-frame motion.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

/// Tolerance used when validating rotation blocks.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// Distance from `|ry| = pi/2` below which decomposition is refused.
pub const GIMBAL_TOLERANCE: f64 = 1e-6;

/// Relative 6-DoF motion: translation in meters, Euler angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseVector6 {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl PoseVector6 {
    pub const ZERO: PoseVector6 = PoseVector6 {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tz: f64, rx: f64, ry: f64, rz: f64) -> Self {
        PoseVector6 {
            tx,
            ty,
            tz,
            rx,
            ry,
            rz,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PoseVector6::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all six components.
    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Homogeneous rigid transform with an orthonormal, right-handed rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a transform, validating the rotation block.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "rigid transform has non-finite entries".into(),
            ));
        }
        let drift = orthonormality_drift(&rotation);
        if drift > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "rotation block is not orthonormal (max |R^T R - I| = {drift:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant is {det}, expected 1"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    /// Like [`from_parts`](Self::from_parts) but projects a nearly orthonormal
    /// rotation onto SO(3) first. Rotations further than `max_drift` from
    /// orthonormal, or with negative determinant, are rejected.
    pub fn from_parts_projected(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        max_drift: f64,
    ) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "rigid transform has non-finite entries".into(),
            ));
        }
        let drift = orthonormality_drift(&rotation);
        if drift > max_drift || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation block is too far from SO(3) (drift {drift:e})"
            )));
        }
        let rotation = if drift > ORTHONORMAL_TOLERANCE {
            project_to_rotation(&rotation)
        } else {
            rotation
        };
        Self::from_parts(rotation, translation)
    }

    /// Validates a full 4x4 homogeneous matrix.
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::InvalidArgument(
                "bottom row of a rigid transform must be (0, 0, 0, 1)".into(),
            ));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_parts(rotation, translation)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Geodesic rotation angle in radians, in `[0, pi]`. Equal to
    /// `acos(clamp((trace - 1) / 2, -1, 1))`; evaluated through `atan2` so
    /// tiny angles keep full precision.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let axial = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        (0.5 * axial.norm()).atan2(c)
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }
}

fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Closest rotation in the Frobenius sense (orthogonal polar factor).
fn project_to_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut q = u * v_t;
    if q.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        q = u * v_t;
    }
    q
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation matrix `Rz(rz) * Ry(ry) * Rx(rx)`.
pub fn euler_to_rotation(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    rot_z(rz) * rot_y(ry) * rot_x(rx)
}

pub fn vec_to_se3(p: &PoseVector6) -> Result<RigidTransform> {
    if !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "pose vector has non-finite components: {p:?}"
        )));
    }
    Ok(RigidTransform {
        rotation: euler_to_rotation(p.rx, p.ry, p.rz),
        translation: p.translation(),
    })
}

fn wrap_half_open(a: f64) -> f64 {
    // atan2 may return exactly -pi; the canonical range is (-pi, pi].
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

pub fn se3_to_vec(t: &RigidTransform) -> Result<PoseVector6> {
    let r = &t.rotation;
    let sin_ry = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let cos_ry = (r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt();
    let ry = sin_ry.atan2(cos_ry);
    if (ry.abs() - FRAC_PI_2).abs() < GIMBAL_TOLERANCE {
        return Err(Error::DegenerateOrientation {
            angle: format!("ry = {ry}"),
            tolerance: GIMBAL_TOLERANCE,
        });
    }
    let rx = wrap_half_open(r[(2, 1)].atan2(r[(2, 2)]));
    let rz = wrap_half_open(r[(1, 0)].atan2(r[(0, 0)]));
    Ok(PoseVector6 {
        tx: t.translation.x,
        ty: t.translation.y,
        tz: t.translation.z,
        rx,
        ry,
        rz,
    })
}

/// Matrix product `a * b`; the rotation block is re-projected onto SO(3)
/// when rounding has pushed it more than 1e-9 away from orthonormal.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    let mut rotation = a.rotation * b.rotation;
    if orthonormality_drift(&rotation) > ORTHONORMAL_TOLERANCE {
        rotation = project_to_rotation(&rotation);
    }
    RigidTransform {
        rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = t.rotation.transpose();
    RigidTransform {
        rotation: rt,
        translation: -(rt * t.translation),
    }
}

/// Conjugation by the x-axis reflection `F = diag(-1, 1, 1)`: returns `F T F`.
/// This is the pose seen in a horizontally mirrored image sequence.
pub fn conjugate_mirror(t: &RigidTransform) -> RigidTransform {
    let f = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
    RigidTransform {
        rotation: f * t.rotation * f,
        translation: f * t.translation,
    }
}

/// Ordered absolute poses keyed by frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<(usize, RigidTransform)>,
}

impl Trajectory {
    /// Frame indices must be strictly increasing.
    pub fn new(poses: Vec<(usize, RigidTransform)>) -> Result<Self> {
        if poses.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument(
                "trajectory frame indices must be strictly increasing".into(),
            ));
        }
        Ok(Trajectory { poses })
    }

    /// Absolute poses numbered 0..n.
    pub fn from_absolutes(poses: Vec<RigidTransform>) -> Self {
        Trajectory {
            poses: poses.into_iter().enumerate().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, RigidTransform)> {
        self.poses.iter()
    }

    pub fn poses(&self) -> impl Iterator<Item = &RigidTransform> {
        self.poses.iter().map(|(_, p)| p)
    }

    pub fn pose(&self, i: usize) -> &RigidTransform {
        &self.poses[i].1
    }

    pub fn frame_index(&self, i: usize) -> usize {
        self.poses[i].0
    }

    /// Left-multiplies every pose by `inverse(first pose)` so the trajectory
    /// starts at the identity.
    pub fn rebased(&self) -> Trajectory {
        let Some((_, first)) = self.poses.first() else {
            return self.clone();
        };
        let inv = invert(first);
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|(i, p)| (*i, compose(&inv, p)))
                .collect(),
        }
    }

    /// Relative transforms between consecutive poses.
    pub fn relatives(&self) -> Vec<RigidTransform> {
        self.poses
            .windows(2)
            .map(|w| compose(&invert(&w[0].1), &w[1].1))
            .collect()
    }
}

/// Chains relative motions: the first absolute pose is the identity and
/// absolute `i` is `absolute(i - 1) * relative(i)`.
pub fn accumulate(relatives: &[RigidTransform]) -> Result<Trajectory> {
    if relatives.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot accumulate an empty list of relative poses".into(),
        ));
    }
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    let mut current = RigidTransform::identity();
    poses.push((0, current));
    for (i, rel) in relatives.iter().enumerate() {
        current = compose(&current, rel);
        poses.push((i + 1, current));
    }
    Ok(Trajectory { poses })
}
