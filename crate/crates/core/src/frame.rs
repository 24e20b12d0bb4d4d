use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// World-frame pose and twist of one rigid body.
///
/// `linear_velocity` is the velocity of the frame origin; `angular_velocity`
/// is expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub position: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub linear_velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl Default for Frame {
    fn default() -> Self {
        Self::identity()
    }
}

impl Frame {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: Rotation3::identity(),
            linear_velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn from_pose(position: Vector3<f64>, rotation: Rotation3<f64>) -> Self {
        Self {
            position,
            rotation,
            ..Self::identity()
        }
    }

    /// World position of a point given in this body's frame.
    #[inline]
    pub fn transform_point(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.rotation * local
    }

    /// World velocity of a material point given in this body's frame.
    #[inline]
    pub fn point_velocity(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.linear_velocity + self.angular_velocity.cross(&(self.rotation * local))
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.rotation.matrix().iter().all(|x| x.is_finite())
            && self.linear_velocity.iter().all(|x| x.is_finite())
            && self.angular_velocity.iter().all(|x| x.is_finite())
    }

    /// Applies a rigid world transform `x ↦ R x + t` to pose and twist.
    pub fn transformed(&self, rot: &Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            position: rot * self.position + translation,
            rotation: rot * self.rotation,
            linear_velocity: rot * self.linear_velocity,
            angular_velocity: rot * self.angular_velocity,
        }
    }
}

/// File representation of a frame: quaternion `(w, x, y, z)` and optional
/// velocities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub pos: [f64; 3],
    #[serde(default = "identity_quat")]
    pub quat: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linvel: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angvel: Option<[f64; 3]>,
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl FrameRecord {
    pub fn to_frame(&self) -> Frame {
        let [w, x, y, z] = self.quat;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Frame {
            position: Vector3::from(self.pos),
            rotation: q.to_rotation_matrix(),
            linear_velocity: self.linvel.map(Vector3::from).unwrap_or_default(),
            angular_velocity: self.angvel.map(Vector3::from).unwrap_or_default(),
        }
    }

    pub fn from_frame(f: &Frame) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&f.rotation);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        Self {
            pos: f.position.into(),
            quat: [q.w, q.i, q.j, q.k],
            linvel: Some(f.linear_velocity.into()),
            angvel: Some(f.angular_velocity.into()),
        }
    }

    pub fn has_velocities(&self) -> bool {
        self.linvel.is_some() && self.angvel.is_some()
    }
}
