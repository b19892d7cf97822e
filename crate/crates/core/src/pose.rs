//! Rigid camera poses (camera-to-world) and small-increment parameterization.

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        CameraPose { rotation, translation }
    }

    /// Transform a point from camera frame to world frame.
    pub fn transform(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// Rotate a direction from camera frame to world frame.
    pub fn rotate(&self, d_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * d_cam
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rinv = self.rotation.inverse();
        CameraPose { rotation: rinv, translation: -(rinv * self.translation) }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Renormalizes the quaternion in place; drift stays below 1e-9 per the
    /// tracking contract.
    pub fn renormalize(&mut self) {
        self.rotation = UnitQuaternion::new_normalize(self.rotation.into_inner());
    }

    /// Translational distance to another pose, meters.
    pub fn translation_error(&self, other: &CameraPose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Rotation angle to another pose, degrees.
    pub fn rotation_error_deg(&self, other: &CameraPose) -> f64 {
        self.rotation.angle_to(&other.rotation).to_degrees()
    }

    /// Build from a small increment `(omega, t)` applied on the right:
    /// `result = base ∘ inc` where `inc` has quaternion `(1, omega/2)`
    /// normalized. This is the chart used by the tracking optimizer.
    pub fn from_increment(base: &CameraPose, omega: Vector3<f64>, t: Vector3<f64>) -> CameraPose {
        let q = Quaternion::new(1.0, 0.5 * omega.x, 0.5 * omega.y, 0.5 * omega.z);
        let inc = CameraPose { rotation: Unit::new_normalize(q), translation: t };
        base.compose(&inc)
    }

    /// TUM line: `t tx ty tz qx qy qz qw`.
    pub fn to_tum_line(&self, timestamp: f64) -> String {
        let q = self.rotation.quaternion();
        format!(
            "{} {} {} {} {} {} {} {}",
            timestamp,
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.i,
            q.j,
            q.k,
            q.w
        )
    }

    pub fn from_tum_parts(parts: &[f64]) -> Option<(f64, CameraPose)> {
        if parts.len() != 8 {
            return None;
        }
        let q = Quaternion::new(parts[7], parts[4], parts[5], parts[6]);
        Some((
            parts[0],
            CameraPose {
                rotation: Unit::new_normalize(q),
                translation: Vector3::new(parts[1], parts[2], parts[3]),
            },
        ))
    }
}
