//! Source motion clips and the parameterized mapping from source frames to
//! target reference frames.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bilevel::RetargetParams;
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameRecord};
use crate::morphology::{Calibration, Morphology};
use crate::rotmath::{exp_unchecked, log_unchecked, right_jacobian, skew};

/// A source motion: per-frame world frames of the source bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMotionClip {
    pub id: String,
    pub fps: f64,
    /// Body names, in the order used by every entry of `frames`.
    pub bodies: Vec<String>,
    pub frames: Vec<Vec<Frame>>,
    /// Per-motion vertical offset, see [`precompute_z_nom`].
    pub z_nom: f64,
}

/// On-disk clip: one map body → record per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFile {
    pub id: String,
    pub fps: f64,
    #[serde(default)]
    pub z_nom: Option<f64>,
    pub frames: Vec<BTreeMap<String, FrameRecord>>,
}

impl SourceMotionClip {
    /// Builds a clip from its file representation. Missing velocities are
    /// filled by finite differences at the clip rate (central inside, one-sided
    /// at the ends).
    pub fn from_file(file: ClipFile) -> Result<Self> {
        let bad = |reason: String| Error::Clip {
            clip: file.id.clone(),
            reason,
        };
        if !(file.fps > 0.0 && file.fps.is_finite()) {
            return Err(bad(format!("fps must be > 0, got {}", file.fps)));
        }
        let first = file.frames.first().ok_or_else(|| bad("clip has no frames".into()))?;
        let bodies: Vec<String> = first.keys().cloned().collect();
        for (t, f) in file.frames.iter().enumerate() {
            if f.len() != bodies.len() || !bodies.iter().all(|b| f.contains_key(b)) {
                return Err(bad(format!("frame {t} has a different body set than frame 0")));
            }
        }
        let n = file.frames.len();
        let dt = 1.0 / file.fps;
        let mut frames: Vec<Vec<Frame>> = file
            .frames
            .iter()
            .map(|f| bodies.iter().map(|b| f[b].to_frame()).collect())
            .collect();
        for (slot, name) in bodies.iter().enumerate() {
            let complete = file.frames.iter().all(|f| f[name].has_velocities());
            if complete || n < 2 {
                continue;
            }
            for t in 0..n {
                let (lo, hi) = (t.saturating_sub(1), (t + 1).min(n - 1));
                let span = (hi - lo) as f64 * dt;
                let a = frames[lo][slot];
                let b = frames[hi][slot];
                let rec = &file.frames[t][name];
                if rec.linvel.is_none() {
                    frames[t][slot].linear_velocity = (b.position - a.position) / span;
                }
                if rec.angvel.is_none() {
                    frames[t][slot].angular_velocity = log_unchecked(&(b.rotation * a.rotation.transpose())) / span;
                }
            }
        }
        let clip = Self {
            id: file.id.clone(),
            fps: file.fps,
            bodies,
            frames,
            z_nom: file.z_nom.unwrap_or(0.0),
        };
        if clip.frames.iter().flatten().any(|f| !f.is_finite()) {
            return Err(bad("non-finite frame data".into()));
        }
        Ok(clip)
    }

    pub fn to_file(&self) -> ClipFile {
        ClipFile {
            id: self.id.clone(),
            fps: self.fps,
            z_nom: Some(self.z_nom),
            frames: self
                .frames
                .iter()
                .map(|f| {
                    self.bodies
                        .iter()
                        .zip(f)
                        .map(|(b, fr)| (b.clone(), FrameRecord::from_frame(fr)))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ClipFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        Self::from_file(file)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_file()).expect("clip serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 / self.fps
    }

    pub fn slot(&self, body: &str) -> Result<usize> {
        self.bodies.iter().position(|b| b == body).ok_or_else(|| Error::Clip {
            clip: self.id.clone(),
            reason: format!("missing body `{body}`"),
        })
    }

    /// Frame of body `slot` at time `t` seconds, linearly interpolated
    /// (geodesically for rotations) and clamped to the clip range.
    pub fn sample(&self, slot: usize, t: f64) -> Frame {
        let x = (t * self.fps).max(0.0);
        let rounded = x.round();
        let x = if (x - rounded).abs() < 1e-9 { rounded } else { x };
        let i = (x.floor() as usize).min(self.len() - 1);
        let alpha = x - i as f64;
        if i + 1 >= self.len() || alpha == 0.0 {
            return self.frames[i][slot];
        }
        let a = &self.frames[i][slot];
        let b = &self.frames[i + 1][slot];
        let delta = log_unchecked(&(a.rotation.transpose() * b.rotation));
        Frame {
            position: a.position.lerp(&b.position, alpha),
            rotation: a.rotation * exp_unchecked(&(delta * alpha)),
            linear_velocity: a.linear_velocity.lerp(&b.linear_velocity, alpha),
            angular_velocity: a.angular_velocity.lerp(&b.angular_velocity, alpha),
        }
    }

    /// Applies a rigid world transform to every frame.
    pub fn transformed(&self, rot: &nalgebra::Rotation3<f64>, translation: &Vector3<f64>) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|fr| fr.transformed(rot, translation)).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// Nominal vertical offset: the negated minimum, over all frames and all
/// contact-body collision primitives, of the scaled lowest-point height. The
/// lowest scaled contact point of the whole motion then touches `z = 0`.
pub fn precompute_z_nom(clip: &SourceMotionClip, source: &Morphology, cal: &Calibration) -> Result<f64> {
    if source.contact_bodies.is_empty() {
        return Err(Error::Morphology(format!(
            "source morphology `{}` defines no contact bodies",
            source.name()
        )));
    }
    let mut lowest = f64::INFINITY;
    for &body in &source.contact_bodies {
        let slot = clip.slot(source.body_name(body))?;
        let colliders = &source.bodies[body].collision;
        if colliders.is_empty() {
            return Err(Error::Morphology(format!(
                "contact body `{}` has no collision geometry",
                source.body_name(body)
            )));
        }
        for frame in &clip.frames {
            for c in colliders {
                let (p, _) = c.lowest_point(&frame[slot]);
                lowest = lowest.min(cal.scale * p.z);
            }
        }
    }
    Ok(-lowest)
}

/// Maps a source frame of pair `pair` to its parameterized target reference.
///
/// `vertical` is the motion's `z_nom + p_z`.
pub fn map_reference(cal: &Calibration, params: &RetargetParams, pair: usize, vertical: f64, m: &Frame) -> Result<Frame> {
    if pair >= cal.pairs.len() || pair >= params.pos.len() {
        return Err(Error::Unknown {
            kind: "pair",
            name: pair.to_string(),
        });
    }
    Ok(map_reference_unchecked(cal, params, pair, vertical, m))
}

pub fn map_reference_unchecked(cal: &Calibration, params: &RetargetParams, pair: usize, vertical: f64, m: &Frame) -> Frame {
    let nom = &cal.pairs[pair];
    let lever = m.rotation * (nom.r_nom * params.pos[pair] + nom.x_nom);
    Frame {
        position: lever + m.position * cal.scale + Vector3::z() * vertical,
        rotation: m.rotation * nom.r_nom * exp_unchecked(&params.ori[pair]),
        linear_velocity: m.angular_velocity.cross(&lever) + m.linear_velocity * cal.scale,
        angular_velocity: m.angular_velocity,
    }
}

/// Partial derivatives of one mapped reference frame.
///
/// The orientation partial is right-trivialized:
/// `R_g(p_ori + δ) ≈ R_g(p_ori) · Exp(dr_dori · δ)`. Partials not listed
/// (position w.r.t. orientation parameters, velocity w.r.t. `p_z`, …) are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceJacobian {
    pub dx_dpos: Matrix3<f64>,
    pub dx_dpz: Vector3<f64>,
    pub dv_dpos: Matrix3<f64>,
    pub dr_dori: Matrix3<f64>,
}

pub fn reference_jacobian(cal: &Calibration, params: &RetargetParams, pair: usize, m: &Frame) -> Result<ReferenceJacobian> {
    if pair >= cal.pairs.len() || pair >= params.pos.len() {
        return Err(Error::Unknown {
            kind: "pair",
            name: pair.to_string(),
        });
    }
    Ok(reference_jacobian_unchecked(cal, params, pair, m))
}

pub fn reference_jacobian_unchecked(cal: &Calibration, params: &RetargetParams, pair: usize, m: &Frame) -> ReferenceJacobian {
    let dx_dpos = m.rotation.matrix() * cal.pairs[pair].r_nom.matrix();
    ReferenceJacobian {
        dx_dpos,
        dx_dpz: Vector3::z(),
        dv_dpos: skew(&m.angular_velocity) * dx_dpos,
        dr_dori: right_jacobian(&params.ori[pair]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::PairCalibration;
    use crate::rotmath::exp_unchecked;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;

    fn cal() -> Calibration {
        Calibration {
            scale: 0.7,
            pairs: vec![PairCalibration {
                x_nom: Vector3::new(0.05, -0.02, 0.1),
                r_nom: exp_unchecked(&Vector3::new(0.1, 0.4, -0.3)),
            }],
            z_nom_policy: Default::default(),
        }
    }

    fn frame() -> Frame {
        Frame {
            position: Vector3::new(0.3, -0.1, 0.9),
            rotation: exp_unchecked(&Vector3::new(-0.2, 0.5, 1.0)),
            linear_velocity: Vector3::new(0.4, 0.1, -0.2),
            angular_velocity: Vector3::new(0.5, -1.0, 0.8),
        }
    }

    fn params() -> RetargetParams {
        let mut p = RetargetParams::zeros(1, &["clip".to_string()]);
        p.pos[0] = Vector3::new(0.1, 0.0, -0.05);
        p.ori[0] = Vector3::new(0.2, -0.1, 0.3);
        p
    }

    #[test]
    fn angular_velocity_is_copied() {
        let g = map_reference(&cal(), &params(), 0, 0.1, &frame()).unwrap();
        assert_eq!(g.angular_velocity, frame().angular_velocity);
    }

    #[test]
    fn unknown_pair_is_rejected() {
        assert!(map_reference(&cal(), &params(), 3, 0.0, &frame()).is_err());
    }

    #[test]
    fn translating_the_source_scales_the_shift() {
        let c = cal();
        let p = params();
        let f = frame();
        let mut moved = f;
        moved.position += Vector3::new(1.0, 0.0, 0.0);
        let a = map_reference(&c, &p, 0, 0.0, &f).unwrap();
        let b = map_reference(&c, &p, 0, 0.0, &moved).unwrap();
        assert_relative_eq!(b.position - a.position, Vector3::new(c.scale, 0.0, 0.0), epsilon = 1e-12);
        assert_eq!(a.rotation, b.rotation);
    }

    #[test]
    fn jacobian_special_cases() {
        let mut f = frame();
        f.angular_velocity = Vector3::zeros();
        let j = reference_jacobian(&cal(), &params(), 0, &f).unwrap();
        assert_eq!(j.dx_dpz, Vector3::z());
        assert_eq!(j.dv_dpos, Matrix3::zeros());
    }

    #[test]
    fn yaw_equivariance() {
        let c = cal();
        let p = params();
        let f = frame();
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), 0.8);
        let a = map_reference(&c, &p, 0, 0.25, &f).unwrap();
        let b = map_reference(&c, &p, 0, 0.25, &f.transformed(&yaw, &Vector3::zeros())).unwrap();
        let mut expected = a.transformed(&yaw, &Vector3::zeros());
        // the vertical shift is applied after the rotation and is yaw invariant
        expected.position.z = a.position.z;
        assert_relative_eq!(b.position, expected.position, epsilon = 1e-12);
        assert_relative_eq!(b.rotation.matrix(), expected.rotation.matrix(), epsilon = 1e-12);
        assert_relative_eq!(b.linear_velocity, expected.linear_velocity, epsilon = 1e-12);
    }

    fn record(pos: [f64; 3]) -> FrameRecord {
        FrameRecord {
            pos,
            quat: [1.0, 0.0, 0.0, 0.0],
            linvel: None,
            angvel: None,
        }
    }

    #[test]
    fn position_only_clip_gets_difference_velocities() {
        let frames = (0..4)
            .map(|t| {
                let t = t as f64;
                BTreeMap::from([("b".to_string(), record([t * t, 0.0, 0.0]))])
            })
            .collect();
        let clip = SourceMotionClip::from_file(ClipFile {
            id: "c".into(),
            fps: 10.0,
            z_nom: None,
            frames,
        })
        .unwrap();
        let v: Vec<f64> = clip.frames.iter().map(|f| f[0].linear_velocity.x).collect();
        // x = t², dt = 0.1: one-sided 10, central 20, 40, one-sided 50
        assert_relative_eq!(v[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(v[1], 20.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 40.0, epsilon = 1e-12);
        assert_relative_eq!(v[3], 50.0, epsilon = 1e-12);
    }

    #[test]
    fn malformed_clips_are_rejected() {
        let ok = BTreeMap::from([("b".to_string(), record([0.0; 3]))]);
        let other = BTreeMap::from([("c".to_string(), record([0.0; 3]))]);
        let file = ClipFile {
            id: "c".into(),
            fps: 10.0,
            z_nom: None,
            frames: vec![ok.clone(), other],
        };
        assert!(SourceMotionClip::from_file(file).is_err());
        let file = ClipFile {
            id: "c".into(),
            fps: 0.0,
            z_nom: None,
            frames: vec![ok],
        };
        assert!(SourceMotionClip::from_file(file).is_err());
    }

    #[test]
    fn sample_interpolates_between_frames() {
        let frames = (0..3)
            .map(|t| BTreeMap::from([("b".to_string(), record([t as f64, 0.0, 0.0]))]))
            .collect();
        let clip = SourceMotionClip::from_file(ClipFile {
            id: "c".into(),
            fps: 2.0,
            z_nom: None,
            frames,
        })
        .unwrap();
        assert_relative_eq!(clip.sample(0, 0.25).position.x, 0.5, epsilon = 1e-12);
        assert_eq!(clip.sample(0, 0.5).position.x, 1.0);
        assert_eq!(clip.sample(0, 10.0).position.x, 2.0);
    }
}
