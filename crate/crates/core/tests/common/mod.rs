#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retarget_core::bilevel::{grad_estimate, project, ttsa_step, ConstraintBox, RetargetParams, UpperBatch, UpperSample};
use retarget_core::frame::FrameRecord;
use retarget_core::metrics::ContactEstimate;
use retarget_core::morphology::{
    calibrate, BodySpec, Calibration, Collider, Correspondences, JointOrigin, JointSpec, Morphology, MorphologyDef, PdGains,
};
use retarget_core::objective::LossWeights;
use retarget_core::refmap::{map_reference, reference_jacobian, ClipFile, SourceMotionClip};
use retarget_core::rotmath::{exp_unchecked, log_unchecked};
use retarget_core::{toy, Frame};

pub const FOOT_R: f64 = 0.05;

pub fn sphere(radius: f64) -> Collider {
    Collider::Sphere { center: [0.0; 3], radius }
}

/// Star-shaped morphology: every listed body hangs off `pelvis`, so no two
/// of them are adjacent.
pub fn star(children: &[(&str, f64)], contact: &[&str]) -> Morphology {
    let body = |name: &str, collision: Vec<Collider>| BodySpec {
        name: name.into(),
        mass: 1.0,
        inertia: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]],
        com_offset: [0.0; 3],
        collision,
    };
    let mut bodies = vec![body("pelvis", vec![sphere(0.1)])];
    let mut joints = Vec::new();
    for (i, &(name, r)) in children.iter().enumerate() {
        bodies.push(body(name, vec![sphere(r)]));
        joints.push(JointSpec {
            name: format!("j_{name}"),
            parent_body: "pelvis".into(),
            child_body: name.into(),
            kind: "revolute".into(),
            axis: [0.0, 1.0, 0.0],
            origin: JointOrigin {
                xyz: [0.0, 0.2 * i as f64 - 0.2, -0.5],
                quat: [1.0, 0.0, 0.0, 0.0],
            },
            limits: [-1.0, 1.0],
            torque_limit: 10.0,
            pd_gains: PdGains { kp: 10.0, kd: 1.0 },
        });
    }
    Morphology::new(MorphologyDef {
        name: "star".into(),
        bodies,
        joints,
        root_body: "pelvis".into(),
        contact_bodies: contact.iter().map(|s| s.to_string()).collect(),
        nominal_q: HashMap::new(),
        nominal_root: FrameRecord::from_frame(&Frame::from_pose(Vector3::new(0.0, 0.0, 1.0), Rotation3::identity())),
    })
    .unwrap()
}

/// Pelvis, two feet and a hand; feet rest on the ground at `y = ±0.2`.
pub fn biped() -> Morphology {
    star(&[("foot_l", FOOT_R), ("foot_r", FOOT_R), ("hand", 0.05)], &["foot_l", "foot_r"])
}

pub fn standing(m: &Morphology, foot_velocity: Vector3<f64>, t: f64) -> Vec<Frame> {
    let at = |x: f64, y: f64, z: f64| Frame {
        linear_velocity: foot_velocity,
        ..Frame::from_pose(Vector3::new(x, y, z) + foot_velocity * t, Rotation3::identity())
    };
    let mut frames = vec![Frame::identity(); m.n_bodies()];
    frames[m.body_id("pelvis").unwrap()] = at(0.0, 0.0, 1.0);
    frames[m.body_id("foot_l").unwrap()] = at(0.0, 0.2, FOOT_R);
    frames[m.body_id("foot_r").unwrap()] = at(0.0, -0.2, FOOT_R);
    frames[m.body_id("hand").unwrap()] = at(0.4, 0.0, 0.8);
    frames
}

pub fn shifted(frames: &[Frame], d: Vector3<f64>) -> Vec<Frame> {
    frames.iter().map(|f| f.transformed(&Rotation3::identity(), &d)).collect()
}

pub fn all_contact(m: &Morphology, n: usize, fps: f64) -> ContactEstimate {
    ContactEstimate {
        fps,
        bodies: m.contact_bodies.clone(),
        flags: vec![vec![true; m.contact_bodies.len()]; n],
    }
}

pub fn within_one_percent(got: f64, want: f64) -> bool {
    (got - want).abs() <= 0.01 * want.abs()
}

/// Toy robot trajectory with swinging legs, a bobbing base that dips into
/// the ground and velocities from the joint rates.
pub fn toy_trajectory() -> (Morphology, Vec<Vec<Frame>>, ContactEstimate) {
    let m = toy::target();
    let fps = 50.0;
    let n = 120;
    let traj: Vec<Vec<Frame>> = (0..n)
        .map(|k| {
            let t = k as f64 / fps;
            let w = 2.0 * PI * 0.8;
            let q = [0.4 * (w * t).sin(), -0.4 * (w * t).sin(), 0.6 * (w * t).cos()];
            let qd = [0.4 * w * (w * t).cos(), -0.4 * w * (w * t).cos(), -0.6 * w * (w * t).sin()];
            let root = Frame {
                position: Vector3::new(0.3 * t, 0.0, 0.47 + 0.03 * (2.0 * w * t).cos()),
                rotation: Rotation3::from_euler_angles(0.0, 0.1 * (w * t).sin(), 0.05 * t),
                linear_velocity: Vector3::new(0.3, 0.0, -0.06 * w * (2.0 * w * t).sin()),
                angular_velocity: Vector3::new(0.0, 0.1 * w * (w * t).cos(), 0.05),
            };
            m.forward_kinematics(&q, Some(&qd), &root).unwrap()
        })
        .collect();
    let contacts = ContactEstimate {
        fps,
        bodies: m.contact_bodies.clone(),
        flags: (0..n).map(|k| vec![k % 25 < 15, (k + 12) % 25 < 15]).collect(),
    };
    (m, traj, contacts)
}

/// Two-footed stepping pattern: each foot is planted for the first 60% of
/// its cycle and swings forward one stride along a raised arc otherwise.
/// Returns the clip and the scripted stance flags per frame.
pub fn scripted_walk() -> (Morphology, SourceMotionClip, Vec<[bool; 2]>) {
    let r = 0.03;
    let m = star(&[("foot_l", r), ("foot_r", r)], &["foot_l", "foot_r"]);
    let fps = 100.0;
    let period = 1.2;
    let stride = 0.5;
    let stance = 0.6;
    let foot = |t: f64, offset: f64| -> (Vector3<f64>, bool) {
        let cycles = t / period + offset;
        let (c, phase) = (cycles.floor(), cycles.fract());
        if phase < stance {
            (Vector3::new(stride * c, 0.0, r), true)
        } else {
            let s = (phase - stance) / (1.0 - stance);
            (Vector3::new(stride * (c + s), 0.0, r + 0.06 * (PI * s).sin()), false)
        }
    };
    let mut frames = Vec::new();
    let mut truth = Vec::new();
    for k in 0..(4.0 * period * fps) as usize {
        let t = k as f64 / fps;
        let (l, sl) = foot(t, 0.0);
        let (rr, sr) = foot(t, 0.5);
        let rec = |p: Vector3<f64>| FrameRecord::from_frame(&Frame::from_pose(p, Rotation3::identity()));
        let mut f = BTreeMap::new();
        f.insert("pelvis".to_string(), rec(Vector3::new(0.5 * (l.x + rr.x), 0.0, 0.8)));
        f.insert("foot_l".to_string(), rec(l + Vector3::new(0.0, 0.1, 0.0)));
        f.insert("foot_r".to_string(), rec(rr - Vector3::new(0.0, 0.1, 0.0)));
        for v in f.values_mut() {
            v.linvel = None;
            v.angvel = None;
        }
        frames.push(f);
        truth.push([sl, sr]);
    }
    let clip = SourceMotionClip::from_file(ClipFile {
        id: "steps".into(),
        fps,
        z_nom: None,
        frames,
    })
    .unwrap();
    (m, clip, truth)
}


/// Toy source and a toy target standing rotated and with bent joints, so the
/// nominal transforms are far from identity.
pub fn skewed_problem() -> (Morphology, Morphology, Correspondences, Calibration) {
    let mut sdef = toy::source_def();
    sdef.nominal_q.insert("elbow".into(), -0.5);
    sdef.nominal_q.insert("hip_l".into(), 0.2);
    let mut tdef = toy::target_def();
    tdef.nominal_q.insert("shoulder".into(), 0.4);
    tdef.nominal_q.insert("hip_r".into(), -0.1);
    let yaw = UnitQuaternion::from_euler_angles(0.05, -0.1, 0.3);
    tdef.nominal_root.quat = [yaw.w, yaw.i, yaw.j, yaw.k];
    tdef.nominal_root.pos = [0.2, -0.1, 0.5];
    let s = Morphology::new(sdef).unwrap();
    let t = Morphology::new(tdef).unwrap();
    let pairs = Correspondences::new(toy::correspondence_pairs(), &s, &t).unwrap();
    let cal = calibrate(&s, &t, &pairs).unwrap();
    (s, t, pairs, cal)
}

/// Largest violation of the calibration equations over all pairs.
pub fn closure_error() -> f64 {
    let (s, t, pairs, cal) = skewed_problem();
    let (src, tgt) = (s.nominal_frames(), t.nominal_frames());
    let mut err: f64 = 0.0;
    for (p, c) in pairs.resolved.iter().zip(&cal.pairs) {
        let (m, g) = (&src[p.source], &tgt[p.target]);
        let x = m.position * cal.scale + m.rotation * c.x_nom;
        let r = m.rotation * c.r_nom;
        err = err.max((x - g.position).amax()).max((r.matrix() - g.rotation.matrix()).amax());
    }
    err
}

/// Largest deviation of mapped nominal source frames (zero parameters, zero
/// vertical offset) from the target nominal frames.
pub fn nominal_identity_error() -> f64 {
    let (s, t, pairs, cal) = skewed_problem();
    let (src, tgt) = (s.nominal_frames(), t.nominal_frames());
    let params = RetargetParams::zeros(pairs.len(), &["clip".to_string()]);
    let mut err: f64 = 0.0;
    for (b, p) in pairs.resolved.iter().enumerate() {
        let g = map_reference(&cal, &params, b, 0.0, &src[p.source]).unwrap();
        let want = &tgt[p.target];
        err = err.max((g.position - want.position).amax()).max((g.rotation.matrix() - want.rotation.matrix()).amax());
    }
    err
}

pub fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let mut v = |s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    Frame {
        position: v(1.0),
        rotation: exp_unchecked(&v(1.5)),
        linear_velocity: v(1.0),
        angular_velocity: v(2.0),
    }
}

pub fn random_params(rng: &mut ChaCha8Rng, n_pairs: usize, ids: &[String], b: &ConstraintBox) -> RetargetParams {
    let p = RetargetParams::zeros(n_pairs, ids);
    let flat: Vec<f64> = p.to_vec().iter().map(|_| rng.random_range(-1.0..1.0)).collect();
    project(&p.from_vec(&flat), b)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Worst relative error of the analytic reference partials against central
/// differences of the mapping over `n` random (pair, parameters, frame)
/// samples.
pub fn jacobian_fd_error(n: usize, seed: u64) -> f64 {
    let (_, _, pairs, cal) = skewed_problem();
    let ids = vec!["clip".to_string()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let b = rng.random_range(0..pairs.len());
        let p = random_params(&mut rng, pairs.len(), &ids, &ConstraintBox::default());
        let m = random_frame(&mut rng);
        let vertical = rng.random_range(-0.2..0.2);
        let j = reference_jacobian(&cal, &p, b, &m).unwrap();
        let map = |q: &RetargetParams, z: f64| map_reference(&cal, q, b, z, &m).unwrap();
        for k in 0..3 {
            let bump = |d: f64, ori: bool| {
                let mut q = p.clone();
                if ori {
                    q.ori[b][k] += d;
                } else {
                    q.pos[b][k] += d;
                }
                q
            };
            let (plus, minus) = (map(&bump(h, false), vertical), map(&bump(-h, false), vertical));
            let dx = (plus.position - minus.position) / (2.0 * h);
            let dv = (plus.linear_velocity - minus.linear_velocity) / (2.0 * h);
            // right-trivialized: R(p)ᵀ R(p ± h e_k) ≈ Exp(±h J e_k)
            let base = map(&p, vertical).rotation;
            let (rp, rm) = (map(&bump(h, true), vertical).rotation, map(&bump(-h, true), vertical).rotation);
            let dr = (log_unchecked(&(base.transpose() * rp)) - log_unchecked(&(base.transpose() * rm))) / (2.0 * h);
            for i in 0..3 {
                worst = worst
                    .max(rel(j.dx_dpos[(i, k)], dx[i]))
                    .max(rel(j.dv_dpos[(i, k)], dv[i]))
                    .max(rel(j.dr_dori[(i, k)], dr[i]));
            }
        }
        let dz = (map(&p, vertical + h).position - map(&p, vertical - h).position) / (2.0 * h);
        for i in 0..3 {
            worst = worst.max(rel(j.dx_dpz[i], dz[i]));
        }
    }
    worst
}

/// Outcome of projected descent on a fixed synthetic upper-level batch.
pub struct Convergence {
    /// Largest coordinate distance to the analytic constrained optimum.
    pub param_error: f64,
    /// Final loss minus the loss at the analytic optimum.
    pub loss_gap: f64,
    pub monotone: bool,
}

/// Simulated frames are produced by the mapping at parameters whose
/// orientation offsets lie outside the δ-ball while positions and vertical
/// offsets lie inside. With orientation and position losses separable, the
/// constrained optimum keeps the generating positions and projects the
/// orientation offsets radially onto the ball.
pub fn ttsa_convergence(steps: usize) -> Convergence {
    let (_, _, pairs, cal) = skewed_problem();
    let ids = vec!["a".to_string(), "b".to_string()];
    let b = ConstraintBox::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut star = RetargetParams::zeros(pairs.len(), &ids);
    for k in 0..pairs.len() {
        star.pos[k] = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        star.ori[k] = dir * rng.random_range(0.6..1.2);
    }
    star.p_z = vec![0.1, -0.2];
    let z_nom = vec![0.02, -0.01];
    let mut batch = UpperBatch::new();
    for i in 0..64 {
        let (pair, motion) = (i % pairs.len(), (i / pairs.len()) % 2);
        let source = random_frame(&mut rng);
        let sim = map_reference(&cal, &star, pair, z_nom[motion] + star.p_z[motion], &source).unwrap();
        batch.push(UpperSample { pair, motion, source, sim }, 1.0);
    }
    let mut optimum = star.clone();
    optimum.ori = star.ori.iter().map(|v| v * (b.delta_ori / v.norm())).collect();

    let w = LossWeights::default();
    let loss = |p: &RetargetParams| grad_estimate(&batch, p, &cal, &pairs, &z_nom, &w, 0.0);
    let mut p = RetargetParams::zeros(pairs.len(), &ids);
    let mut last = f64::INFINITY;
    let mut monotone = true;
    for _ in 0..steps {
        let est = loss(&p);
        // rounding at the optimum
        monotone &= est.loss <= last * (1.0 + 1e-12);
        last = est.loss;
        p = ttsa_step(&p, &est.grad, 0.02, &b).unwrap().0;
    }
    let param_error = p.to_vec().iter().zip(optimum.to_vec()).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
    Convergence {
        param_error,
        loss_gap: loss(&p).loss - loss(&optimum).loss,
        monotone,
    }
}

/// A standing clip of the toy source, lifted by `dz` in source units.
pub fn standing_source_clip(dz: f64) -> (Morphology, SourceMotionClip) {
    let s = toy::source();
    let rec: BTreeMap<String, FrameRecord> = s
        .nominal_frames()
        .iter()
        .enumerate()
        .map(|(b, f)| (s.body_name(b).to_string(), FrameRecord::from_frame(f)))
        .collect();
    let clip = SourceMotionClip::from_file(ClipFile {
        id: "stand".into(),
        fps: 30.0,
        z_nom: None,
        frames: vec![rec; 10],
    })
    .unwrap()
    .transformed(&Rotation3::identity(), &Vector3::new(0.0, 0.0, dz));
    (s, clip)
}
