//! Planar poses, odometry increments and 3D rigid transforms.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t <= -PI {
        t += two_pi;
    }
    if t > PI {
        t -= two_pi;
    }
    t
}

/// Absolute difference between two headings, in `[0, π]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Robot state on the plane. `theta` is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Pose2::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    pub fn distance_to(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Applies a body-frame increment (SE(2) composition).
    pub fn compose(&self, delta: &OdometryDelta) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * delta.dx - s * delta.dy,
            self.y + s * delta.dx + c * delta.dy,
            self.theta + delta.dtheta,
        )
    }

    /// Increment that takes `self` to `other`, expressed in `self`'s frame.
    pub fn delta_to(&self, other: &Pose2) -> OdometryDelta {
        let (s, c) = self.theta.sin_cos();
        let gx = other.x - self.x;
        let gy = other.y - self.y;
        OdometryDelta {
            dx: c * gx + s * gy,
            dy: -s * gx + c * gy,
            dtheta: wrap_angle(other.theta - self.theta),
        }
    }

    /// Lifts the pose to 3D with z, roll and pitch set to zero.
    pub fn to_transform(&self) -> RigidTransform3 {
        RigidTransform3::from_planar(self.x, self.y, self.theta)
    }
}

/// Relative odometry between two consecutive poses, body frame of the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl OdometryDelta {
    pub fn zero() -> Self {
        OdometryDelta {
            dx: 0.0,
            dy: 0.0,
            dtheta: 0.0,
        }
    }

    /// Travelled distance `d_t`.
    pub fn distance(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// Rotation plus translation in 3D; maps points of a source frame into a target frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform3 {
    pub fn identity() -> Self {
        RigidTransform3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform3 {
            rotation,
            translation,
        }
    }

    pub fn from_planar(x: f64, y: f64, yaw: f64) -> Self {
        let rotation = *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix();
        RigidTransform3 {
            rotation,
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// Rotation about an arbitrary axis given as a scaled axis (radians).
    pub fn from_scaled_axis(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform3 {
            rotation: *Rotation3::from_scaled_axis(axis_angle).matrix(),
            translation,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform3) -> RigidTransform3 {
        RigidTransform3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform3 {
        let rt = self.rotation.transpose();
        RigidTransform3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Heading of the rotated x axis projected onto the plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn to_pose2(&self) -> Pose2 {
        Pose2::new(self.translation.x, self.translation.y, self.yaw())
    }

    /// Geodesic rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = (r.trace() - 1.0) * 0.5;
        let s = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
        s.atan2(c)
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let rtr = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let ortho = rtr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ortho.max((self.rotation.determinant() - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> RigidTransform3 {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        RigidTransform3 {
            rotation: r,
            translation: self.translation,
        }
    }

    /// Row-major 4×4 homogeneous matrix.
    pub fn to_homogeneous(&self) -> [f64; 16] {
        let mut m = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 4 + c] = self.rotation[(r, c)];
            }
            m[r * 4 + 3] = self.translation[r];
        }
        m[15] = 1.0;
        m
    }

    pub fn from_homogeneous(m: &[f64; 16]) -> RigidTransform3 {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        RigidTransform3 {
            rotation,
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }
}
