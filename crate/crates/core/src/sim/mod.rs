//! Desk-scale floating-base simulator: PD joint actuation, a deadbanded
//! residual root wrench and penalty ground contact, integrated with
//! fixed-step RK4 substeps under the control rate.

pub mod dynamics;

use std::sync::Arc;

use nalgebra::{DVector, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::morphology::{Morphology, PdGains};

use dynamics::{add_point_force, forward_dynamics, Chains, Kinematics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactConfig {
    /// N/m per contact sphere.
    pub stiffness: f64,
    /// N·s/m on the normal approach speed.
    pub damping: f64,
    pub friction: f64,
    /// Viscous tangential coefficient, N·s/m; the force is capped at μN.
    pub tangential_damping: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self {
            stiffness: 2e4,
            damping: 100.0,
            friction: 0.8,
            tangential_damping: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub control_dt: f64,
    pub substeps: usize,
    /// Magnitude of gravity along −z, m/s².
    pub gravity: f64,
    /// Deadband on the normalized wrench action.
    pub deadband: f64,
    /// N per unit of deadbanded force action.
    pub wrench_force_scale: f64,
    /// N·m per unit of deadbanded torque action.
    pub wrench_torque_scale: f64,
    pub contact: ContactConfig,
    /// N·m·s/rad viscous joint friction.
    pub joint_damping: f64,
    /// N·m/rad spring pushing back past a joint limit.
    pub limit_stiffness: f64,
    pub limit_damping: f64,
    /// Root or joint speed beyond which the state is declared divergent.
    pub max_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            control_dt: 0.02,
            substeps: 4,
            gravity: 9.81,
            deadband: 0.1,
            wrench_force_scale: 20.0,
            wrench_torque_scale: 5.0,
            contact: ContactConfig::default(),
            joint_damping: 0.05,
            limit_stiffness: 200.0,
            limit_damping: 2.0,
            max_speed: 200.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("control_dt", self.control_dt),
            ("contact.stiffness", self.contact.stiffness),
            ("max_speed", self.max_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be finite and > 0, got {v}")));
            }
        }
        let non_negative = [
            ("gravity", self.gravity),
            ("deadband", self.deadband),
            ("wrench_force_scale", self.wrench_force_scale),
            ("wrench_torque_scale", self.wrench_torque_scale),
            ("contact.damping", self.contact.damping),
            ("contact.friction", self.contact.friction),
            ("contact.tangential_damping", self.contact.tangential_damping),
            ("joint_damping", self.joint_damping),
            ("limit_stiffness", self.limit_stiffness),
            ("limit_damping", self.limit_damping),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.substeps == 0 {
            return Err(Error::Config("sim.substeps must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn physics_dt(&self) -> f64 {
        self.control_dt / self.substeps as f64
    }
}

/// Root wrench in world axes at the root origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }
}

/// One control command. `wrench` is in normalized action units; the
/// simulator deadbands and scales it (see [`SimConfig`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub a_jts: Vec<f64>,
    pub wrench: Wrench,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPoint {
    pub body: usize,
    pub point: Vector3<f64>,
    pub normal_force: f64,
    pub tangential_velocity: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub root: Frame,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// Derived from `root`, `q`, `qd` by forward kinematics.
    pub body_frames: Vec<Frame>,
    pub last_joint_torques: Vec<f64>,
    pub last_joint_acc: Vec<f64>,
    pub contact_points: Vec<ContactPoint>,
    /// Physical root wrench applied during the last step.
    pub applied_force: Vector3<f64>,
    pub applied_torque: Vector3<f64>,
    pub time: f64,
    /// Set once the integration diverged; stepping a faulted state is a no-op.
    pub fault: bool,
}

/// Componentwise `sgn(w)·max(0, |w| − d)`.
pub fn apply_deadband(w: &Wrench, d: f64) -> Wrench {
    let f = |x: f64| x.signum() * (x.abs() - d).max(0.0);
    Wrench {
        force: w.force.map(f),
        torque: w.torque.map(f),
    }
}

/// `τ_i = clamp(kp_i (a_i − q_i) − kd_i q̇_i, ±limit_i)`.
pub fn pd_torques(q: &[f64], qd: &[f64], a: &[f64], gains: &[PdGains], limits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    pd_torques_into(q, qd, a, gains, limits, &mut out);
    out
}

fn pd_torques_into(q: &[f64], qd: &[f64], a: &[f64], gains: &[PdGains], limits: &[f64], out: &mut [f64]) {
    for i in 0..q.len() {
        let tau = gains[i].kp * (a[i] - q[i]) - gains[i].kd * qd[i];
        out[i] = tau.clamp(-limits[i], limits[i]);
    }
}

/// Immutable simulation data shared by every environment.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub morph: Morphology,
    pub cfg: SimConfig,
    chains: Chains,
    gains: Vec<PdGains>,
    limits: Vec<f64>,
    /// (body, local sphere centre, radius) for every collision sphere.
    sites: Vec<(usize, Vector3<f64>, f64)>,
}

impl SimModel {
    pub fn new(morph: Morphology, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let chains = Chains::new(&morph);
        let gains = morph.joints.iter().map(|j| PdGains { kp: j.kp, kd: j.kd }).collect();
        let limits = morph.joints.iter().map(|j| j.torque_limit).collect();
        let sites = morph
            .bodies
            .iter()
            .enumerate()
            .flat_map(|(b, body)| {
                body.collision
                    .iter()
                    .flat_map(move |c| c.contact_centers().map(move |p| (b, p, c.radius())))
            })
            .collect();
        Ok(Self {
            morph,
            cfg,
            chains,
            gains,
            limits,
            sites,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.morph.n_joints()
    }

    pub fn gains(&self) -> &[PdGains] {
        &self.gains
    }

    pub fn torque_limits(&self) -> &[f64] {
        &self.limits
    }

    /// State at the given configuration with derived body frames.
    pub fn state(&self, root: Frame, q: Vec<f64>, qd: Vec<f64>) -> Result<SimState> {
        let n = self.n_joints();
        for (what, len) in [("joint positions", q.len()), ("joint velocities", qd.len())] {
            if len != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        let body_frames = self.morph.forward_kinematics(&q, Some(&qd), &root)?;
        let mut s = SimState {
            root,
            q,
            qd,
            body_frames,
            last_joint_torques: vec![0.0; n],
            last_joint_acc: vec![0.0; n],
            contact_points: Vec::new(),
            applied_force: Vector3::zeros(),
            applied_torque: Vector3::zeros(),
            time: 0.0,
            fault: false,
        };
        let kin = Kinematics {
            frames: s.body_frames.clone(),
            axes: Vec::new(),
        };
        s.contact_points = self.contacts(&kin);
        Ok(s)
    }

    /// Nominal configuration at rest.
    pub fn nominal_state(&self) -> SimState {
        let n = self.n_joints();
        self.state(self.morph.nominal_root, self.morph.nominal_q.clone(), vec![0.0; n])
            .expect("nominal dimensions match")
    }

    fn contacts(&self, kin: &Kinematics) -> Vec<ContactPoint> {
        let mut out = Vec::new();
        self.for_each_contact(kin, |body, point, normal, v_t, _| {
            out.push(ContactPoint {
                body,
                point,
                normal_force: normal,
                tangential_velocity: v_t,
            })
        });
        out
    }

    fn for_each_contact(&self, kin: &Kinematics, mut f: impl FnMut(usize, Vector3<f64>, f64, Vector3<f64>, Vector3<f64>)) {
        let c = &self.cfg.contact;
        for &(body, center, radius) in &self.sites {
            let frame = &kin.frames[body];
            let w = frame.transform_point(&center);
            let depth = radius - w.z;
            if depth <= 0.0 {
                continue;
            }
            let p = Vector3::new(w.x, w.y, w.z - radius);
            let v = frame.linear_velocity + frame.angular_velocity.cross(&(p - frame.position));
            let normal = (c.stiffness * depth - c.damping * v.z).max(0.0);
            let v_t = Vector3::new(v.x, v.y, 0.0);
            let speed = v_t.norm();
            let friction = if speed > 0.0 {
                -v_t * c.tangential_damping.min(c.friction * normal / speed)
            } else {
                Vector3::zeros()
            };
            f(body, p, normal, v_t, Vector3::new(friction.x, friction.y, normal));
        }
    }

    /// Time derivative of the flat state, plus the actuator torques used.
    fn derivative(&self, y: &[f64], a: &[f64], wrench: &Wrench, tau_out: &mut [f64]) -> Option<Vec<f64>> {
        let n = self.n_joints();
        let (root, q, qd) = unpack(y, n);
        let kin = Kinematics::new(&self.morph, &root, q, qd);
        pd_torques_into(q, qd, a, &self.gains, &self.limits, tau_out);
        let mut tau = DVector::zeros(6 + n);
        for k in 0..3 {
            tau[k] = wrench.force[k];
            tau[3 + k] = wrench.torque[k];
        }
        for (j, joint) in self.morph.joints.iter().enumerate() {
            let mut t = tau_out[j] - self.cfg.joint_damping * qd[j];
            if q[j] < joint.lower {
                t += self.cfg.limit_stiffness * (joint.lower - q[j]) - self.cfg.limit_damping * qd[j].min(0.0);
            } else if q[j] > joint.upper {
                t += self.cfg.limit_stiffness * (joint.upper - q[j]) - self.cfg.limit_damping * qd[j].max(0.0);
            }
            tau[6 + j] += t;
        }
        self.for_each_contact(&kin, |body, p, _, _, force| {
            add_point_force(&self.morph, &self.chains, &kin, body, &p, &force, &mut tau);
        });
        let g = Vector3::new(0.0, 0.0, -self.cfg.gravity);
        let nu_dot = forward_dynamics(&self.morph, &self.chains, &kin, qd, &tau, &g)?;

        let mut dy = vec![0.0; y.len()];
        dy[0..3].copy_from_slice(&y[7 + n..10 + n]);
        let quat = Quaternion::new(y[3], y[4], y[5], y[6]);
        let w = Quaternion::new(0.0, y[10 + n], y[11 + n], y[12 + n]);
        let dq = w * quat * 0.5;
        dy[3] = dq.w;
        dy[4] = dq.i;
        dy[5] = dq.j;
        dy[6] = dq.k;
        dy[7..7 + n].copy_from_slice(qd);
        dy[7 + n..].copy_from_slice(nu_dot.as_slice());
        Some(dy)
    }

    /// Advances one control step. A divergent integration returns the input
    /// state with `fault` set.
    pub fn step(&self, state: &SimState, u: &ControlInput) -> Result<SimState> {
        if u.a_jts.len() != self.n_joints() {
            return Err(Error::Dimension {
                what: "joint setpoints",
                expected: self.n_joints(),
                got: u.a_jts.len(),
            });
        }
        Ok(self.step_unchecked(state, u))
    }

    pub fn step_unchecked(&self, state: &SimState, u: &ControlInput) -> SimState {
        if state.fault {
            return state.clone();
        }
        let n = self.n_joints();
        let db = apply_deadband(&u.wrench, self.cfg.deadband);
        let wrench = Wrench {
            force: db.force * self.cfg.wrench_force_scale,
            torque: db.torque * self.cfg.wrench_torque_scale,
        };
        let h = self.cfg.physics_dt();
        let mut y = pack(state);
        let mut tau_sum = vec![0.0; n];
        let mut tau = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for _ in 0..self.cfg.substeps {
            let Some(k1) = self.derivative(&y, &u.a_jts, &wrench, &mut tau) else {
                return faulted(state);
            };
            let Some(k2) = self.derivative(&axpy(&y, h / 2.0, &k1), &u.a_jts, &wrench, &mut scratch) else {
                return faulted(state);
            };
            let Some(k3) = self.derivative(&axpy(&y, h / 2.0, &k2), &u.a_jts, &wrench, &mut scratch) else {
                return faulted(state);
            };
            let Some(k4) = self.derivative(&axpy(&y, h, &k3), &u.a_jts, &wrench, &mut scratch) else {
                return faulted(state);
            };
            for i in 0..y.len() {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let norm = (y[3] * y[3] + y[4] * y[4] + y[5] * y[5] + y[6] * y[6]).sqrt();
            for v in &mut y[3..7] {
                *v /= norm;
            }
            for (s, t) in tau_sum.iter_mut().zip(&tau) {
                *s += t / self.cfg.substeps as f64;
            }
        }
        let max_speed = self.cfg.max_speed;
        if y.iter().any(|v| !v.is_finite())
            || y[7 + n..].iter().any(|v| v.abs() > max_speed)
            || y[0..3].iter().any(|v| v.abs() > 1e4)
        {
            return faulted(state);
        }
        let (root, q, qd) = unpack(&y, n);
        let kin = Kinematics::new(&self.morph, &root, q, qd);
        let dt = self.cfg.control_dt;
        SimState {
            root,
            q: q.to_vec(),
            qd: qd.to_vec(),
            last_joint_acc: qd.iter().zip(&state.qd).map(|(a, b)| (a - b) / dt).collect(),
            last_joint_torques: tau_sum,
            contact_points: self.contacts(&kin),
            body_frames: kin.frames,
            applied_force: wrench.force,
            applied_torque: wrench.torque,
            time: state.time + dt,
            fault: false,
        }
    }
}

fn faulted(state: &SimState) -> SimState {
    log::debug!("simulation diverged at t = {:.3} s", state.time);
    SimState {
        fault: true,
        ..state.clone()
    }
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(y, k)| y + h * k).collect()
}

/// Flat layout `[x (3), quat w,i,j,k (4), q (n), v (3), ω (3), q̇ (n)]`.
fn pack(s: &SimState) -> Vec<f64> {
    let n = s.q.len();
    let mut y = Vec::with_capacity(13 + 2 * n);
    y.extend(s.root.position.iter());
    let quat = UnitQuaternion::from_rotation_matrix(&s.root.rotation);
    y.extend([quat.w, quat.i, quat.j, quat.k]);
    y.extend(&s.q);
    y.extend(s.root.linear_velocity.iter());
    y.extend(s.root.angular_velocity.iter());
    y.extend(&s.qd);
    y
}

fn unpack(y: &[f64], n: usize) -> (Frame, &[f64], &[f64]) {
    let quat = UnitQuaternion::from_quaternion(Quaternion::new(y[3], y[4], y[5], y[6]));
    let root = Frame {
        position: Vector3::new(y[0], y[1], y[2]),
        rotation: quat.to_rotation_matrix(),
        linear_velocity: Vector3::new(y[7 + n], y[8 + n], y[9 + n]),
        angular_velocity: Vector3::new(y[10 + n], y[11 + n], y[12 + n]),
    };
    (root, &y[7..7 + n], &y[13 + n..13 + 2 * n])
}

/// A set of independent environments sharing one model.
#[derive(Debug, Clone)]
pub struct EnvBatch {
    pub model: Arc<SimModel>,
    pub states: Vec<SimState>,
}

pub fn make_env_batch(model: Arc<SimModel>, n: usize) -> Result<EnvBatch> {
    if n == 0 {
        return Err(Error::Config("environment count must be ≥ 1".into()));
    }
    let s = model.nominal_state();
    Ok(EnvBatch {
        states: vec![s; n],
        model,
    })
}

impl EnvBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Steps every environment with its own input, in parallel.
    pub fn step(&mut self, inputs: &[ControlInput]) -> Result<()> {
        if inputs.len() != self.states.len() {
            return Err(Error::Dimension {
                what: "control inputs",
                expected: self.states.len(),
                got: inputs.len(),
            });
        }
        if let Some(u) = inputs.iter().find(|u| u.a_jts.len() != self.model.n_joints()) {
            return Err(Error::Dimension {
                what: "joint setpoints",
                expected: self.model.n_joints(),
                got: u.a_jts.len(),
            });
        }
        let model = &self.model;
        self.states
            .par_iter_mut()
            .zip(inputs.par_iter())
            .for_each(|(s, u)| *s = model.step_unchecked(s, u));
        Ok(())
    }
}

#[cfg(test)]
mod tests;
