//! Articulated characters, forward kinematics and nominal calibration.
//!
//! A morphology is a tree of rigid bodies connected by revolute joints, with
//! a floating root. The same description serves the source character (only
//! kinematics matter) and the simulated target robot (masses, inertias, gains
//! and collision geometry matter).
//!
//! World convention: z-up, right-handed, x-forward. A joint's child frame is
//! `R_child = R_parent · Exp(axis · q) · R_origin`, positioned at
//! `x_parent + R_parent · t_origin`; the joint axis is therefore expressed in
//! the parent frame and passes through the child frame origin.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameRecord};
use crate::rotmath::{self, exp_unchecked, RotationMatrix};

/// Collision primitive in body coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Collider {
    Sphere { center: [f64; 3], radius: f64 },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
}

impl Collider {
    pub fn radius(&self) -> f64 {
        match *self {
            Collider::Sphere { radius, .. } | Collider::Capsule { radius, .. } => radius,
        }
    }

    /// Segment endpoints in body coordinates (a sphere is a degenerate segment).
    pub fn segment(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Collider::Sphere { center, .. } => (center.into(), center.into()),
            Collider::Capsule { a, b, .. } => (a.into(), b.into()),
        }
    }

    /// Sphere centres used for ground contact: one for a sphere, both
    /// endpoints for a capsule. The lowest point of either primitive is always
    /// reached at one of these centres.
    pub fn contact_centers(&self) -> impl Iterator<Item = Vector3<f64>> {
        let (a, b) = self.segment();
        let n = match self {
            Collider::Sphere { .. } => 1,
            Collider::Capsule { .. } => 2,
        };
        [a, b].into_iter().take(n)
    }

    /// Lowest world point of the primitive when attached to `frame`, along
    /// with the local sphere centre that realises it.
    pub fn lowest_point(&self, frame: &Frame) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.radius();
        let mut best: Option<(Vector3<f64>, Vector3<f64>)> = None;
        for c in self.contact_centers() {
            let w = frame.transform_point(&c);
            if best.map_or(true, |(bw, _)| w.z < bw.z) {
                best = Some((w, c));
            }
        }
        let (w, c) = best.expect("collider has at least one centre");
        (w - Vector3::z() * r, c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub name: String,
    pub mass: f64,
    /// Rotational inertia about the centre of mass, body axes, row-major.
    pub inertia: [[f64; 3]; 3],
    #[serde(default)]
    pub com_offset: [f64; 3],
    #[serde(default)]
    pub collision: Vec<Collider>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOrigin {
    pub xyz: [f64; 3],
    #[serde(default = "identity_quat")]
    pub quat: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub parent_body: String,
    pub child_body: String,
    /// Only revolute joints exist; kept for file readability.
    #[serde(rename = "type", default = "revolute")]
    pub kind: String,
    pub axis: [f64; 3],
    pub origin: JointOrigin,
    pub limits: [f64; 2],
    pub torque_limit: f64,
    pub pd_gains: PdGains,
}

fn revolute() -> String {
    "revolute".to_string()
}

/// On-disk description of a morphology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphologyDef {
    pub name: String,
    pub bodies: Vec<BodySpec>,
    pub joints: Vec<JointSpec>,
    pub root_body: String,
    #[serde(default)]
    pub contact_bodies: Vec<String>,
    /// Nominal joint angles, keyed by joint name.
    pub nominal_q: HashMap<String, f64>,
    pub nominal_root: FrameRecord,
}

/// Resolved joint with indices and nalgebra types.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub parent: usize,
    pub child: usize,
    pub axis: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub rotation: RotationMatrix,
    pub lower: f64,
    pub upper: f64,
    pub torque_limit: f64,
    pub kp: f64,
    pub kd: f64,
}

/// Resolved body with nalgebra types.
#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub com: Vector3<f64>,
    pub collision: Vec<Collider>,
}

/// A validated articulated character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MorphologyDef", into = "MorphologyDef")]
pub struct Morphology {
    def: MorphologyDef,
    pub bodies: Vec<Body>,
    pub joints: Vec<Joint>,
    pub root: usize,
    pub contact_bodies: Vec<usize>,
    pub nominal_q: Vec<f64>,
    pub nominal_root: Frame,
    /// Joint feeding each body; `None` for the root.
    pub parent_joint: Vec<Option<usize>>,
    /// Joints ordered so that every parent is processed before its child.
    pub topo_joints: Vec<usize>,
    body_index: HashMap<String, usize>,
    joint_index: HashMap<String, usize>,
}

impl From<Morphology> for MorphologyDef {
    fn from(m: Morphology) -> Self {
        m.def
    }
}

impl TryFrom<MorphologyDef> for Morphology {
    type Error = Error;

    fn try_from(def: MorphologyDef) -> Result<Self> {
        Morphology::new(def)
    }
}

fn quat_to_rotation(q: [f64; 4], what: &str) -> Result<RotationMatrix> {
    let [w, x, y, z] = q;
    let quat = Quaternion::new(w, x, y, z);
    if !quat.norm().is_finite() || quat.norm() < 1e-9 {
        return Err(Error::Morphology(format!("{what}: degenerate quaternion")));
    }
    Ok(UnitQuaternion::from_quaternion(quat).to_rotation_matrix())
}

impl Morphology {
    pub fn new(def: MorphologyDef) -> Result<Self> {
        let mut body_index = HashMap::new();
        let mut bodies = Vec::with_capacity(def.bodies.len());
        for (i, b) in def.bodies.iter().enumerate() {
            if body_index.insert(b.name.clone(), i).is_some() {
                return Err(Error::Morphology(format!("duplicate body `{}`", b.name)));
            }
            if !(b.mass > 0.0 && b.mass.is_finite()) {
                return Err(Error::Morphology(format!("body `{}`: mass must be > 0", b.name)));
            }
            let inertia = Matrix3::from_fn(|r, c| b.inertia[r][c]);
            if (inertia - inertia.transpose()).abs().max() > 1e-9 * inertia.abs().max().max(1.0)
                || inertia.cholesky().is_none()
            {
                return Err(Error::Morphology(format!(
                    "body `{}`: inertia must be symmetric positive definite",
                    b.name
                )));
            }
            for c in &b.collision {
                if !(c.radius() > 0.0) {
                    return Err(Error::Morphology(format!(
                        "body `{}`: collider radius must be > 0",
                        b.name
                    )));
                }
            }
            bodies.push(Body {
                mass: b.mass,
                inertia,
                com: b.com_offset.into(),
                collision: b.collision.clone(),
            });
        }

        let lookup = |name: &str| -> Result<usize> {
            body_index.get(name).copied().ok_or_else(|| Error::Unknown {
                kind: "body",
                name: name.to_string(),
            })
        };

        let mut joint_index = HashMap::new();
        let mut joints = Vec::with_capacity(def.joints.len());
        let mut parent_joint = vec![None; bodies.len()];
        for (j, spec) in def.joints.iter().enumerate() {
            if joint_index.insert(spec.name.clone(), j).is_some() {
                return Err(Error::Morphology(format!("duplicate joint `{}`", spec.name)));
            }
            if spec.kind != "revolute" {
                return Err(Error::Morphology(format!(
                    "joint `{}`: only revolute joints are supported, got `{}`",
                    spec.name, spec.kind
                )));
            }
            let parent = lookup(&spec.parent_body)?;
            let child = lookup(&spec.child_body)?;
            if parent == child {
                return Err(Error::Morphology(format!("joint `{}` connects a body to itself", spec.name)));
            }
            if parent_joint[child].replace(j).is_some() {
                return Err(Error::Morphology(format!(
                    "body `{}` has more than one parent joint",
                    spec.child_body
                )));
            }
            let axis = Vector3::from(spec.axis);
            if (axis.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Morphology(format!("joint `{}`: axis must be unit length", spec.name)));
            }
            let [lower, upper] = spec.limits;
            if !(lower < upper) {
                return Err(Error::Morphology(format!("joint `{}`: limits need lo < hi", spec.name)));
            }
            if !(spec.torque_limit > 0.0) || spec.pd_gains.kp < 0.0 || spec.pd_gains.kd < 0.0 {
                return Err(Error::Morphology(format!(
                    "joint `{}`: torque limit must be > 0 and gains ≥ 0",
                    spec.name
                )));
            }
            joints.push(Joint {
                parent,
                child,
                axis: axis.normalize(),
                translation: spec.origin.xyz.into(),
                rotation: quat_to_rotation(spec.origin.quat, &spec.name)?,
                lower,
                upper,
                torque_limit: spec.torque_limit,
                kp: spec.pd_gains.kp,
                kd: spec.pd_gains.kd,
            });
        }

        let root = lookup(&def.root_body)?;
        let roots: Vec<_> = (0..bodies.len()).filter(|&b| parent_joint[b].is_none()).collect();
        if roots != [root] {
            return Err(Error::Morphology(format!(
                "exactly one body (the root `{}`) must lack a parent joint, found {}",
                def.root_body,
                roots.len()
            )));
        }

        // Breadth-first from the root; anything unreached sits on a cycle.
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); bodies.len()];
        for (j, joint) in joints.iter().enumerate() {
            children[joint.parent].push(j);
        }
        let mut topo_joints = Vec::with_capacity(joints.len());
        let mut frontier = vec![root];
        let mut seen = vec![false; bodies.len()];
        seen[root] = true;
        while let Some(b) = frontier.pop() {
            for &j in &children[b] {
                let c = joints[j].child;
                if seen[c] {
                    return Err(Error::Morphology("joint graph contains a cycle".into()));
                }
                seen[c] = true;
                topo_joints.push(j);
                frontier.push(c);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Morphology(
                "joint graph is not a tree rooted at the root body (cycle or disconnected body)".into(),
            ));
        }

        let contact_bodies = def
            .contact_bodies
            .iter()
            .map(|n| lookup(n))
            .collect::<Result<Vec<_>>>()?;

        let mut nominal_q = vec![0.0; joints.len()];
        for (name, &value) in &def.nominal_q {
            let j = *joint_index.get(name).ok_or_else(|| Error::Unknown {
                kind: "joint",
                name: name.clone(),
            })?;
            nominal_q[j] = value;
        }
        for (j, joint) in joints.iter().enumerate() {
            if nominal_q[j] < joint.lower || nominal_q[j] > joint.upper {
                return Err(Error::Morphology(format!(
                    "nominal angle of joint `{}` outside its limits",
                    def.joints[j].name
                )));
            }
        }
        let nominal_root = def.nominal_root.to_frame();

        Ok(Self {
            def,
            bodies,
            joints,
            root,
            contact_bodies,
            nominal_q,
            nominal_root,
            parent_joint,
            topo_joints,
            body_index,
            joint_index,
        })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let def: MorphologyDef = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        Self::new(def).map_err(|e| Error::parse(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.def).expect("morphology serializes")
    }

    pub fn def(&self) -> &MorphologyDef {
        &self.def
    }

    pub fn name(&self) -> &str {
        &self.def.name
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn body_id(&self, name: &str) -> Result<usize> {
        self.body_index.get(name).copied().ok_or_else(|| Error::Unknown {
            kind: "body",
            name: name.to_string(),
        })
    }

    pub fn joint_id(&self, name: &str) -> Option<usize> {
        self.joint_index.get(name).copied()
    }

    pub fn body_name(&self, id: usize) -> &str {
        &self.def.bodies[id].name
    }

    pub fn joint_name(&self, id: usize) -> &str {
        &self.def.joints[id].name
    }

    pub fn body_names(&self) -> impl Iterator<Item = &str> {
        self.def.bodies.iter().map(|b| b.name.as_str())
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    /// Bodies are adjacent when one is the parent of the other through a joint.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.parent_joint[a].is_some_and(|j| self.joints[j].parent == b)
            || self.parent_joint[b].is_some_and(|j| self.joints[j].parent == a)
    }

    /// World frames of all bodies, indexed like `bodies`.
    ///
    /// Velocities are propagated when `qd` is given; with `qd = None` joint
    /// rates are taken as zero and only the root twist is propagated.
    pub fn forward_kinematics(&self, q: &[f64], qd: Option<&[f64]>, root: &Frame) -> Result<Vec<Frame>> {
        if q.len() != self.n_joints() {
            return Err(Error::Dimension {
                what: "joint positions",
                expected: self.n_joints(),
                got: q.len(),
            });
        }
        if let Some(qd) = qd {
            if qd.len() != self.n_joints() {
                return Err(Error::Dimension {
                    what: "joint velocities",
                    expected: self.n_joints(),
                    got: qd.len(),
                });
            }
        }
        let mut out = Vec::new();
        self.forward_kinematics_into(q, qd, root, &mut out);
        Ok(out)
    }

    /// Unchecked forward kinematics writing into a reusable buffer.
    pub fn forward_kinematics_into(&self, q: &[f64], qd: Option<&[f64]>, root: &Frame, out: &mut Vec<Frame>) {
        out.clear();
        out.resize(self.n_bodies(), Frame::identity());
        out[self.root] = *root;
        for &j in &self.topo_joints {
            let joint = &self.joints[j];
            let p = out[joint.parent];
            let world_axis = p.rotation * joint.axis;
            let rotation = p.rotation * exp_unchecked(&(joint.axis * q[j])) * joint.rotation;
            let offset = p.rotation * joint.translation;
            let rate = qd.map_or(0.0, |qd| qd[j]);
            out[joint.child] = Frame {
                position: p.position + offset,
                rotation,
                linear_velocity: p.linear_velocity + p.angular_velocity.cross(&offset),
                angular_velocity: p.angular_velocity + world_axis * rate,
            };
        }
    }

    /// Body frames in the nominal configuration.
    pub fn nominal_frames(&self) -> Vec<Frame> {
        let mut out = Vec::new();
        self.forward_kinematics_into(&self.nominal_q, None, &self.nominal_root, &mut out);
        out
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.lower, j.upper);
        }
    }
}

/// How the orientation loss treats the error rotation of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    #[default]
    Full,
    Swing,
    Twist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub orientation_mode: OrientationMode,
    /// Target body frame axis; required for swing/twist modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twist_axis: Option<[f64; 3]>,
    #[serde(default)]
    pub is_root: bool,
}

/// A correspondence pair resolved against the two morphologies.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPair {
    pub source: usize,
    pub target: usize,
    pub mode: OrientationMode,
    pub twist_axis: Vector3<f64>,
}

/// Validated correspondence set.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub pairs: Vec<CorrespondencePair>,
    pub resolved: Vec<ResolvedPair>,
    pub root: usize,
}

impl Correspondences {
    pub fn new(pairs: Vec<CorrespondencePair>, source: &Morphology, target: &Morphology) -> Result<Self> {
        let roots: Vec<usize> = pairs.iter().enumerate().filter(|(_, p)| p.is_root).map(|(i, _)| i).collect();
        let root = match roots.as_slice() {
            [r] => *r,
            [] => return Err(Error::Correspondence("no root pair (exactly one pair needs is_root = true)".into())),
            _ => return Err(Error::Correspondence("more than one root pair".into())),
        };
        let mut resolved = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let twist_axis = match (p.orientation_mode, p.twist_axis) {
                (OrientationMode::Full, None) => Vector3::z(),
                (OrientationMode::Full, Some(_)) => {
                    return Err(Error::Correspondence(format!(
                        "pair {}→{}: twist_axis given for full orientation mode",
                        p.source, p.target
                    )))
                }
                (_, None) => {
                    return Err(Error::Correspondence(format!(
                        "pair {}→{}: swing/twist mode needs a twist_axis",
                        p.source, p.target
                    )))
                }
                (_, Some(a)) => {
                    let a = Vector3::from(a);
                    if (a.norm() - 1.0).abs() > 1e-6 {
                        return Err(Error::Correspondence(format!(
                            "pair {}→{}: twist_axis must be unit length",
                            p.source, p.target
                        )));
                    }
                    a.normalize()
                }
            };
            resolved.push(ResolvedPair {
                source: source.body_id(&p.source)?,
                target: target.body_id(&p.target)?,
                mode: p.orientation_mode,
                twist_axis,
            });
        }
        Ok(Self { pairs, resolved, root })
    }

    pub fn from_json_file(path: impl AsRef<Path>, source: &Morphology, target: &Morphology) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pairs: Vec<CorrespondencePair> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        Self::new(pairs, source, target).map_err(|e| Error::parse(path, e))
    }

    pub fn len(&self) -> usize {
        self.resolved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolved.is_empty()
    }

    pub fn root_pair(&self) -> &ResolvedPair {
        &self.resolved[self.root]
    }

    #[cfg(test)]
    pub(crate) fn from_resolved(resolved: Vec<ResolvedPair>, root: usize) -> Self {
        Self {
            pairs: Vec::new(),
            resolved,
            root,
        }
    }
}

/// Nominal transform of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCalibration {
    pub x_nom: Vector3<f64>,
    pub r_nom: Rotation3<f64>,
}

/// Per-motion vertical offset policy. Only one exists: lift or lower the clip
/// so the lowest scaled contact point over the motion touches the ground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZNomPolicy {
    #[default]
    LowestContactPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub scale: f64,
    pub pairs: Vec<PairCalibration>,
    #[serde(default)]
    pub z_nom_policy: ZNomPolicy,
}

/// Heading mismatch above which a warning is emitted.
const HEADING_WARN_RAD: f64 = 0.35;

/// Computes the global scale and per-pair nominal transforms from the two
/// nominal configurations.
pub fn calibrate(source: &Morphology, target: &Morphology, pairs: &Correspondences) -> Result<Calibration> {
    let src = source.nominal_frames();
    let tgt = target.nominal_frames();
    let h_source = src[source.root].position.z;
    let h_target = tgt[target.root].position.z;
    if !(h_source > 0.0) {
        return Err(Error::Calibration(format!("source nominal root height must be > 0, got {h_source}")));
    }
    if !(h_target > 0.0) {
        return Err(Error::Calibration(format!("target nominal root height must be > 0, got {h_target}")));
    }
    let heading = |r: &Rotation3<f64>| {
        let x = r * Vector3::x();
        x.y.atan2(x.x)
    };
    let dh = heading(&src[source.root].rotation) - heading(&tgt[target.root].rotation);
    let dh = dh.sin().atan2(dh.cos()).abs();
    if dh > HEADING_WARN_RAD {
        log::warn!(
            "nominal root headings differ by {:.1}°; configurations should be coarsely aligned",
            dh.to_degrees()
        );
    }
    let scale = h_target / h_source;
    let pairs = pairs
        .resolved
        .iter()
        .map(|p| {
            let s = &src[p.source];
            let t = &tgt[p.target];
            PairCalibration {
                x_nom: s.rotation.transpose() * (t.position - s.position * scale),
                r_nom: rotmath::renormalize(&(s.rotation.transpose() * t.rotation)),
            }
        })
        .collect();
    Ok(Calibration {
        scale,
        pairs,
        z_nom_policy: ZNomPolicy::LowestContactPoint,
    })
}

impl Calibration {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }
}

/// Inertia of a solid capsule-like rod of length `len` along `axis_index`
/// and radius `r`, approximated as a solid cylinder.
pub fn rod_inertia(mass: f64, len: f64, r: f64, axis_index: usize) -> [[f64; 3]; 3] {
    let along = 0.5 * mass * r * r;
    let across = mass * (3.0 * r * r + len * len) / 12.0;
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = if i == axis_index { along } else { across };
    }
    m
}
