use std::collections::HashMap;

use approx::assert_relative_eq;
use nalgebra::DVector;
use proptest::prelude::*;

use super::dynamics::{inverse_dynamics, kinetic_energy, mass_matrix, momentum};
use super::*;
use crate::frame::FrameRecord;
use crate::morphology::{BodySpec, Collider, JointOrigin, JointSpec, MorphologyDef};
use crate::rotmath::exp_unchecked;

fn body(name: &str, mass: f64, collision: Vec<Collider>) -> BodySpec {
    BodySpec {
        name: name.into(),
        mass,
        inertia: [[0.02 * mass, 0.0, 0.0], [0.0, 0.03 * mass, 0.001], [0.0, 0.001, 0.015 * mass]],
        com_offset: [0.01, -0.02, -0.1],
        collision,
    }
}

fn joint(name: &str, parent: &str, child: &str, axis: [f64; 3], xyz: [f64; 3], kp: f64) -> JointSpec {
    JointSpec {
        name: name.into(),
        parent_body: parent.into(),
        child_body: child.into(),
        kind: "revolute".into(),
        axis,
        origin: JointOrigin {
            xyz,
            quat: [0.98, 0.1, 0.0, 0.17],
        },
        limits: [-3.0, 3.0],
        torque_limit: 50.0,
        pd_gains: PdGains { kp, kd: kp / 20.0 },
    }
}

fn root_record(z: f64) -> FrameRecord {
    FrameRecord {
        pos: [0.0, 0.0, z],
        quat: [1.0, 0.0, 0.0, 0.0],
        linvel: None,
        angvel: None,
    }
}

/// Four-body branching chain without collision geometry.
fn chain() -> Morphology {
    chain_with_gain(20.0)
}

fn chain_with_gain(kp: f64) -> Morphology {
    let s = 0.6f64.sqrt();
    Morphology::new(MorphologyDef {
        name: "chain".into(),
        bodies: vec![body("a", 2.0, vec![]), body("b", 1.0, vec![]), body("c", 0.5, vec![]), body("d", 0.7, vec![])],
        joints: vec![
            joint("ab", "a", "b", [0.0, 1.0, 0.0], [0.1, 0.0, -0.2], kp),
            joint("bc", "b", "c", [s, 0.0, 0.4f64.sqrt()], [0.0, 0.05, -0.3], kp),
            joint("ad", "a", "d", [1.0, 0.0, 0.0], [-0.1, 0.2, 0.0], kp),
        ],
        root_body: "a".into(),
        contact_bodies: vec![],
        nominal_q: HashMap::new(),
        nominal_root: root_record(1.0),
    })
    .unwrap()
}

fn sphere_body(radius: f64, mass: f64) -> Morphology {
    let mut b = body("ball", mass, vec![Collider::Sphere {
        center: [0.0; 3],
        radius,
    }]);
    b.com_offset = [0.0; 3];
    Morphology::new(MorphologyDef {
        name: "ball".into(),
        bodies: vec![b],
        joints: vec![],
        root_body: "ball".into(),
        contact_bodies: vec!["ball".into()],
        nominal_q: HashMap::new(),
        nominal_root: root_record(radius),
    })
    .unwrap()
}

fn moving_state(model: &SimModel, seed: f64) -> SimState {
    let root = Frame {
        position: Vector3::new(0.1, -0.2, 1.5),
        rotation: exp_unchecked(&Vector3::new(0.3 * seed, -0.2, 0.5)),
        linear_velocity: Vector3::new(0.4, -0.1 * seed, 0.3),
        angular_velocity: Vector3::new(0.7, 0.2, -0.5 * seed),
    };
    let n = model.n_joints();
    let q = (0..n).map(|i| 0.3 * (i as f64 + seed).sin()).collect();
    let qd = (0..n).map(|i| 1.5 * (2.0 * i as f64 + seed).cos()).collect();
    model.state(root, q, qd).unwrap()
}

fn hold(s: &SimState) -> ControlInput {
    ControlInput {
        a_jts: s.q.clone(),
        wrench: Wrench::zero(),
    }
}

#[test]
fn deadband_examples() {
    let w = Wrench {
        force: Vector3::new(0.05, 0.3, -0.3),
        torque: Vector3::new(-0.1, 0.1, 0.0),
    };
    let d = apply_deadband(&w, 0.1);
    assert_eq!(d.force.x, 0.0);
    assert_relative_eq!(d.force.y, 0.2, epsilon = 1e-15);
    assert_relative_eq!(d.force.z, -0.2, epsilon = 1e-15);
    assert_eq!(d.torque, Vector3::zeros());
}

#[test]
fn pd_examples() {
    let gains = [PdGains { kp: 50.0, kd: 2.0 }; 3];
    let limits = [30.0; 3];
    let tau = pd_torques(&[0.0, 0.2, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.3, 4.0], &gains, &limits);
    assert_eq!(tau[0], 0.0);
    assert_relative_eq!(tau[1], 5.0, epsilon = 1e-12);
    assert_eq!(tau[2], 30.0);
}

proptest! {
    #[test]
    fn deadband_is_continuous(w in -3.0..3.0f64, eps in -0.5..0.5f64, d in 0.0..1.0f64) {
        let a = apply_deadband(&Wrench { force: Vector3::repeat(w), torque: Vector3::zeros() }, d);
        let b = apply_deadband(&Wrench { force: Vector3::repeat(w + eps), torque: Vector3::zeros() }, d);
        prop_assert!((a.force - b.force).amax() <= eps.abs() + 1e-15);
    }
}

#[test]
fn mass_matrix_matches_unit_acceleration_inverse_dynamics() {
    let m = chain();
    let chains = Chains::new(&m);
    let root = Frame::from_pose(Vector3::new(0.2, 0.1, 1.0), exp_unchecked(&Vector3::new(0.3, -0.4, 0.9)));
    let q = [0.4, -0.7, 1.1];
    let kin = Kinematics::new(&m, &root, &q, &[0.0; 3]);
    let mm = mass_matrix(&m, &chains, &kin);
    let n = 6 + m.n_joints();
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        let col = inverse_dynamics(&m, &chains, &kin, &[0.0; 3], &e, &Vector3::zeros());
        assert_relative_eq!(col, mm.column(k).into_owned(), epsilon = 1e-12);
    }
    assert!(mm.clone().cholesky().is_some());
}

#[test]
fn forward_and_inverse_dynamics_round_trip() {
    let model = SimModel::new(chain(), SimConfig::default()).unwrap();
    let s = moving_state(&model, 0.7);
    let kin = Kinematics::new(&model.morph, &s.root, &s.q, &s.qd);
    let tau = DVector::from_fn(9, |i, _| (i as f64 * 0.37).sin());
    let g = Vector3::new(0.0, 0.0, -9.81);
    let acc = forward_dynamics(&model.morph, &model.chains, &kin, &s.qd, &tau, &g).unwrap();
    let back = inverse_dynamics(&model.morph, &model.chains, &kin, &s.qd, &acc, &g);
    assert_relative_eq!(back, tau, epsilon = 1e-10);
}

#[test]
fn ballistic_free_body() {
    let mut cfg = SimConfig::default();
    cfg.joint_damping = 0.0;
    let model = SimModel::new(sphere_body(0.1, 1.5), cfg).unwrap();
    let z0 = 5.0;
    let root = Frame {
        position: Vector3::new(0.0, 0.0, z0),
        rotation: exp_unchecked(&Vector3::new(0.2, 0.1, 0.0)),
        linear_velocity: Vector3::new(0.5, 0.0, 0.0),
        angular_velocity: Vector3::new(1.0, -2.0, 0.5),
    };
    let mut s = model.state(root, vec![], vec![]).unwrap();
    let u = ControlInput {
        a_jts: vec![],
        wrench: Wrench::zero(),
    };
    for _ in 0..25 {
        s = model.step(&s, &u).unwrap();
    }
    let t = 0.5;
    assert_relative_eq!(s.time, t, epsilon = 1e-12);
    let expected = Vector3::new(0.5 * t, 0.0, z0 - 0.5 * 9.81 * t * t);
    assert!((s.root.position - expected).norm() < 1e-3);
}

#[test]
fn momentum_is_conserved_without_gravity() {
    let cfg = SimConfig {
        gravity: 0.0,
        ..SimConfig::default()
    };
    let model = SimModel::new(chain_with_gain(0.0), cfg).unwrap();
    let mut s = moving_state(&model, 1.3);
    let kin0 = Kinematics::new(&model.morph, &s.root, &s.q, &s.qd);
    let (p0, l0) = momentum(&model.morph, &kin0);
    let u = ControlInput {
        a_jts: vec![0.2, -0.3, 0.1],
        wrench: Wrench::zero(),
    };
    for _ in 0..100 {
        s = model.step(&s, &u).unwrap();
        assert!(!s.fault);
    }
    let kin = Kinematics::new(&model.morph, &s.root, &s.q, &s.qd);
    let (p, l) = momentum(&model.morph, &kin);
    assert!((p - p0).norm() <= 1e-6 * p0.norm(), "{p} vs {p0}");
    assert!((l - l0).norm() <= 1e-6 * l0.norm(), "{l} vs {l0}");
}

#[test]
fn pd_hold_is_dissipative() {
    let cfg = SimConfig {
        gravity: 0.0,
        joint_damping: 0.0,
        ..SimConfig::default()
    };
    let model = SimModel::new(chain(), cfg).unwrap();
    let mut s = moving_state(&model, 0.4);
    let u = hold(&s);
    let energy = |s: &SimState| {
        let kin = Kinematics::new(&model.morph, &s.root, &s.q, &s.qd);
        let spring: f64 = (0..3).map(|j| 0.5 * model.gains[j].kp * (u.a_jts[j] - s.q[j]).powi(2)).sum();
        kinetic_energy(&model.morph, &kin) + spring
    };
    let mut e = energy(&s);
    for _ in 0..50 {
        s = model.step(&s, &u).unwrap();
        let next = energy(&s);
        assert!(next <= e * (1.0 + 1e-9), "{next} > {e}");
        e = next;
    }
}

#[test]
fn sphere_rests_on_ground() {
    let mass = 1.0;
    let model = SimModel::new(sphere_body(0.1, mass), SimConfig::default()).unwrap();
    let mut s = model.nominal_state();
    let u = ControlInput {
        a_jts: vec![],
        wrench: Wrench::zero(),
    };
    for _ in 0..150 {
        s = model.step(&s, &u).unwrap();
    }
    let penetration = 0.1 - s.root.position.z;
    let analytic = mass * 9.81 / model.cfg.contact.stiffness;
    assert!(penetration > 0.0 && penetration < 5e-3);
    assert!((penetration - analytic).abs() < 0.1 * analytic, "{penetration} vs {analytic}");
    let normal: f64 = s.contact_points.iter().map(|c| c.normal_force).sum();
    assert!((normal - mass * 9.81).abs() < 0.02 * mass * 9.81, "{normal}");
}

#[test]
fn batch_matches_sequential_and_is_deterministic() {
    let model = Arc::new(SimModel::new(chain(), SimConfig::default()).unwrap());
    let n = 64;
    let mut batch = make_env_batch(model.clone(), n).unwrap();
    for (i, s) in batch.states.iter_mut().enumerate() {
        *s = moving_state(&model, i as f64 * 0.1);
    }
    let mut seq = batch.states.clone();
    let inputs = |k: usize| -> Vec<ControlInput> {
        (0..n)
            .map(|i| ControlInput {
                a_jts: (0..3).map(|j| ((i * 3 + j + k) as f64 * 0.21).sin()).collect(),
                wrench: Wrench {
                    force: Vector3::new(0.3, -0.2, (i as f64 * 0.1).cos()),
                    torque: Vector3::new(0.05, 0.2, -0.4),
                },
            })
            .collect()
    };
    for k in 0..10 {
        let u = inputs(k);
        batch.step(&u).unwrap();
        for (s, u) in seq.iter_mut().zip(&u) {
            *s = model.step(s, u).unwrap();
        }
    }
    assert_eq!(batch.states, seq);
    let mut again = make_env_batch(model.clone(), n).unwrap();
    for (i, s) in again.states.iter_mut().enumerate() {
        *s = moving_state(&model, i as f64 * 0.1);
    }
    for k in 0..10 {
        again.step(&inputs(k)).unwrap();
    }
    assert_eq!(again.states, batch.states);
}

#[test]
fn body_frames_follow_forward_kinematics() {
    let model = SimModel::new(chain(), SimConfig::default()).unwrap();
    let mut s = moving_state(&model, 0.9);
    s = model.step(&s, &hold(&s)).unwrap();
    let fk = model.morph.forward_kinematics(&s.q, Some(&s.qd), &s.root).unwrap();
    for (a, b) in fk.iter().zip(&s.body_frames) {
        assert!((a.position - b.position).norm() < 1e-9);
        assert!((a.rotation.matrix() - b.rotation.matrix()).amax() < 1e-9);
    }
}

#[test]
fn dimension_mismatch_and_divergence() {
    let model = SimModel::new(chain(), SimConfig::default()).unwrap();
    let s = model.nominal_state();
    let bad = ControlInput {
        a_jts: vec![0.0; 2],
        wrench: Wrench::zero(),
    };
    assert!(matches!(model.step(&s, &bad), Err(Error::Dimension { .. })));

    let cfg = SimConfig {
        wrench_force_scale: 1e7,
        ..SimConfig::default()
    };
    let model = SimModel::new(chain(), cfg).unwrap();
    let push = ControlInput {
        a_jts: s.q.clone(),
        wrench: Wrench {
            force: Vector3::new(10.0, 0.0, 0.0),
            torque: Vector3::zeros(),
        },
    };
    let out = model.step(&s, &push).unwrap();
    assert!(out.fault);
    assert_eq!(out.q, s.q);
    assert_eq!(model.step(&out, &push).unwrap(), out);
}

#[test]
fn invalid_config_is_rejected() {
    assert!(SimConfig { substeps: 0, ..SimConfig::default() }.validate().is_err());
    assert!(SimConfig { control_dt: 0.0, ..SimConfig::default() }.validate().is_err());
    let mut c = SimConfig::default();
    c.contact.stiffness = -1.0;
    assert!(c.validate().is_err());
}
