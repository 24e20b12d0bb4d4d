//! A small retargeting problem used by the examples, the CLI `make-toy`
//! command and the end-to-end tests.
//!
//! The source is a 5-body planar walker (pelvis, two straight legs with flat
//! feet, a two-segment arm). The target is a 4-body robot of roughly half the
//! size whose arm has a single joint, so the source forearm cannot be matched
//! exactly.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::Vector3;

use crate::bilevel::{ConstraintBox, UpdateConfig};
use crate::error::Result;
use crate::frame::{Frame, FrameRecord};
use crate::morphology::{
    calibrate, rod_inertia, BodySpec, Collider, CorrespondencePair, Correspondences, JointOrigin, JointSpec, Morphology, MorphologyDef,
    OrientationMode, PdGains,
};
use crate::refmap::{ClipFile, SourceMotionClip};
use crate::sim::{SimConfig, SimModel};
use crate::trainer::{PpoConfig, Task, TrainConfig};

fn rod(name: &str, mass: f64, len: f64, r: f64, com_z: f64, collision: Vec<Collider>) -> BodySpec {
    BodySpec {
        name: name.into(),
        mass,
        inertia: rod_inertia(mass, len, r, 2),
        com_offset: [0.0, 0.0, com_z],
        collision,
    }
}

fn capsule(a: [f64; 3], b: [f64; 3], radius: f64) -> Collider {
    Collider::Capsule { a, b, radius }
}

fn pitch_joint(name: &str, parent: &str, child: &str, xyz: [f64; 3], limits: [f64; 2], torque: f64, kp: f64, kd: f64) -> JointSpec {
    JointSpec {
        name: name.into(),
        parent_body: parent.into(),
        child_body: child.into(),
        kind: "revolute".into(),
        axis: [0.0, 1.0, 0.0],
        origin: JointOrigin {
            xyz,
            quat: [1.0, 0.0, 0.0, 0.0],
        },
        limits,
        torque_limit: torque,
        pd_gains: PdGains { kp, kd },
    }
}

fn upright(z: f64) -> FrameRecord {
    FrameRecord {
        pos: [0.0, 0.0, z],
        quat: [1.0, 0.0, 0.0, 0.0],
        linvel: None,
        angvel: None,
    }
}

/// Hip-to-sole distance of the source legs.
pub const SOURCE_LEG: f64 = 0.9;

pub fn source_def() -> MorphologyDef {
    let leg = |name: &str| {
        rod(
            name,
            8.0,
            0.8,
            0.06,
            -0.4,
            vec![
                capsule([0.0, 0.0, -0.1], [0.0, 0.0, -0.75], 0.05),
                capsule([-0.06, 0.0, -0.86], [0.14, 0.0, -0.86], 0.04),
            ],
        )
    };
    MorphologyDef {
        name: "toy_walker".into(),
        bodies: vec![
            rod("pelvis", 20.0, 0.5, 0.12, 0.2, vec![capsule([0.0, 0.0, 0.1], [0.0, 0.0, 0.45], 0.1)]),
            leg("leg_l"),
            leg("leg_r"),
            rod("upper_arm", 2.0, 0.3, 0.04, -0.15, vec![capsule([0.0, 0.0, -0.03], [0.0, 0.0, -0.27], 0.04)]),
            rod("forearm", 1.5, 0.25, 0.035, -0.12, vec![capsule([0.0, 0.0, -0.03], [0.0, 0.0, -0.22], 0.035)]),
        ],
        joints: vec![
            pitch_joint("hip_l", "pelvis", "leg_l", [0.0, 0.1, 0.0], [-1.2, 1.2], 200.0, 300.0, 10.0),
            pitch_joint("hip_r", "pelvis", "leg_r", [0.0, -0.1, 0.0], [-1.2, 1.2], 200.0, 300.0, 10.0),
            pitch_joint("shoulder", "pelvis", "upper_arm", [0.0, 0.22, 0.45], [-2.0, 2.0], 50.0, 100.0, 5.0),
            pitch_joint("elbow", "upper_arm", "forearm", [0.0, 0.0, -0.3], [-2.5, 0.0], 30.0, 50.0, 2.0),
        ],
        root_body: "pelvis".into(),
        contact_bodies: vec!["leg_l".into(), "leg_r".into()],
        nominal_q: HashMap::new(),
        nominal_root: upright(SOURCE_LEG),
    }
}

/// Target robot: base at 0.5 m, two legs with flat feet, one single-joint arm.
pub fn target_def() -> MorphologyDef {
    let leg = |name: &str| {
        rod(
            name,
            0.45,
            0.4,
            0.03,
            -0.2,
            vec![
                capsule([0.0, 0.0, -0.05], [0.0, 0.0, -0.33], 0.03),
                capsule([-0.03, 0.0, -0.42], [0.07, 0.0, -0.42], 0.03),
            ],
        )
    };
    MorphologyDef {
        name: "toy_robot".into(),
        bodies: vec![
            rod(
                "base",
                1.6,
                0.25,
                0.06,
                0.05,
                vec![capsule([0.0, -0.06, 0.0], [0.0, 0.06, 0.0], 0.06), capsule([0.0, 0.0, 0.06], [0.0, 0.0, 0.2], 0.06)],
            ),
            leg("leg_l"),
            leg("leg_r"),
            rod("arm", 0.25, 0.22, 0.025, -0.11, vec![capsule([0.0, 0.0, -0.03], [0.0, 0.0, -0.2], 0.025)]),
        ],
        joints: vec![
            pitch_joint("hip_l", "base", "leg_l", [0.0, 0.07, -0.05], [-1.2, 1.2], 20.0, 60.0, 2.0),
            pitch_joint("hip_r", "base", "leg_r", [0.0, -0.07, -0.05], [-1.2, 1.2], 20.0, 60.0, 2.0),
            pitch_joint("shoulder", "base", "arm", [0.0, 0.14, 0.18], [-2.5, 2.5], 5.0, 20.0, 0.5),
        ],
        root_body: "base".into(),
        contact_bodies: vec!["leg_l".into(), "leg_r".into()],
        nominal_q: HashMap::new(),
        nominal_root: upright(0.5),
    }
}

/// Simulator settings for the toy target. The legs are light enough that the
/// default tangential contact damping is beyond the explicit stability limit
/// at the default step, and the default wrench scales would dominate a 2.75 kg
/// robot.
pub fn sim_config() -> SimConfig {
    let mut cfg = SimConfig {
        substeps: 8,
        wrench_force_scale: 10.0,
        wrench_torque_scale: 1.0,
        ..SimConfig::default()
    };
    cfg.contact.tangential_damping = 25.0;
    cfg
}

/// Training settings sized for the toy: 64 environments, 300 iterations.
/// The narrower initial exploration and looser KL target let the small
/// batch make progress, and the decaying upper step lets the parameters
/// settle once the policy tracks them. Position offsets are bounded to
/// 10 cm: a common shift of every pair moves the reference and the episode
/// start together, so its gradient only follows the policy's drift.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        ppo: PpoConfig {
            iterations: 300,
            num_envs: 64,
            desired_kl: 0.02,
            ..PpoConfig::default()
        },
        update: UpdateConfig {
            eta: 1e-2,
            alpha: 0.0,
            decay: 60.0,
        },
        bounds: ConstraintBox {
            delta_pos: 0.1,
            ..ConstraintBox::default()
        },
        init_log_std: -1.0,
        ..TrainConfig::default()
    }
}

/// The complete toy task with [`sim_config`] and all [`clips`].
pub fn task() -> Result<Task> {
    let s = source();
    let t = target();
    let pairs = Correspondences::new(correspondence_pairs(), &s, &t)?;
    let cal = calibrate(&s, &t, &pairs)?;
    let clips = clips(&s)?;
    Task::new(SimModel::new(t, sim_config())?, s, pairs, cal, clips)
}

pub fn source() -> Morphology {
    Morphology::new(source_def()).expect("toy source is valid")
}

pub fn target() -> Morphology {
    Morphology::new(target_def()).expect("toy target is valid")
}

pub fn correspondence_pairs() -> Vec<CorrespondencePair> {
    let pair = |s: &str, t: &str, root: bool| CorrespondencePair {
        source: s.into(),
        target: t.into(),
        orientation_mode: OrientationMode::Full,
        twist_axis: None,
        is_root: root,
    };
    vec![
        pair("pelvis", "base", true),
        pair("leg_l", "leg_l", false),
        pair("leg_r", "leg_r", false),
        pair("forearm", "arm", false),
    ]
}

/// Parameters of one scripted gait clip.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSpec {
    pub id: String,
    /// Forward pelvis speed, m/s.
    pub speed: f64,
    /// Hip swing amplitude, rad.
    pub leg_amp: f64,
    pub shoulder_amp: f64,
    /// Elbow angle oscillates in `[elbow_min, elbow_max]` (flexion negative).
    pub elbow_min: f64,
    pub elbow_max: f64,
    /// Stride frequency, Hz.
    pub freq: f64,
    pub duration: f64,
    pub fps: f64,
}

pub fn gait_specs() -> Vec<GaitSpec> {
    vec![
        GaitSpec {
            id: "walk".into(),
            speed: 0.55,
            leg_amp: 0.3,
            shoulder_amp: 0.4,
            elbow_min: -1.6,
            elbow_max: -1.0,
            freq: 0.9,
            duration: 4.0,
            fps: 50.0,
        },
        GaitSpec {
            id: "stroll".into(),
            speed: 0.3,
            leg_amp: 0.18,
            shoulder_amp: 0.25,
            elbow_min: -1.4,
            elbow_max: -1.1,
            freq: 0.8,
            duration: 4.0,
            fps: 50.0,
        },
        GaitSpec {
            id: "wave".into(),
            speed: 0.0,
            leg_amp: 0.0,
            shoulder_amp: 0.8,
            elbow_min: -1.9,
            elbow_max: -0.9,
            freq: 0.6,
            duration: 4.0,
            fps: 50.0,
        },
    ]
}

/// Samples a clip from the source morphology. Only poses are written; the
/// clip loader fills velocities by finite differences.
pub fn gait_clip(source: &Morphology, spec: &GaitSpec) -> Result<SourceMotionClip> {
    let n = (spec.duration * spec.fps).round() as usize + 1;
    let joint = |name: &str| source.joint_id(name).expect("toy joint");
    let (hl, hr, sh, el) = (joint("hip_l"), joint("hip_r"), joint("shoulder"), joint("elbow"));
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / spec.fps;
        let phase = 2.0 * PI * spec.freq * t;
        let swing = spec.leg_amp * phase.sin();
        let mut q = vec![0.0; source.n_joints()];
        q[hl] = swing;
        q[hr] = -swing;
        q[sh] = -spec.shoulder_amp * phase.sin();
        q[el] = spec.elbow_min + (spec.elbow_max - spec.elbow_min) * 0.5 * (1.0 + phase.cos());
        let root = Frame::from_pose(
            Vector3::new(spec.speed * t, 0.0, SOURCE_LEG * swing.cos()),
            nalgebra::Rotation3::identity(),
        );
        let body_frames = source.forward_kinematics(&q, None, &root)?;
        let record: BTreeMap<String, FrameRecord> = body_frames
            .iter()
            .enumerate()
            .map(|(b, f)| {
                let mut r = FrameRecord::from_frame(f);
                r.linvel = None;
                r.angvel = None;
                (source.body_name(b).to_string(), r)
            })
            .collect();
        frames.push(record);
    }
    SourceMotionClip::from_file(ClipFile {
        id: spec.id.clone(),
        fps: spec.fps,
        z_nom: None,
        frames,
    })
}

pub fn clips(source: &Morphology) -> Result<Vec<SourceMotionClip>> {
    gait_specs().iter().map(|s| gait_clip(source, s)).collect()
}
