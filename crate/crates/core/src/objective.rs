//! Tracking losses, the weighted upper-level loss and the per-step reward.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::morphology::{Correspondences, OrientationMode, ResolvedPair};
use crate::rotmath::{quat_log, TWIST_DEGENERATE};
use crate::sim::SimState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_x: f64,
    pub w_r: f64,
    pub w_v: f64,
    pub w_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_x: 10.0,
            w_r: 1.0,
            w_v: 0.0,
            w_w: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_x", self.w_x), ("w_r", self.w_r), ("w_v", self.w_v), ("w_w", self.w_w)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and ≥ 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-pair tracking errors between a reference frame `g` and a simulated
/// frame `s`. Each loss is the squared norm of the matching error vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyError {
    pub l_x: f64,
    pub l_r: f64,
    pub l_v: f64,
    pub l_w: f64,
    /// `x_g − x_s`
    pub e_x: Vector3<f64>,
    /// `v_g − v_s`
    pub e_v: Vector3<f64>,
    /// `ω_g − ω_s`
    pub e_w: Vector3<f64>,
    /// Rotation vector of the (possibly projected) orientation error.
    pub e_r: Vector3<f64>,
    /// Gradient of `l_r` w.r.t. a right perturbation `R_g → R_g Exp(u)`.
    pub grad_r: Vector3<f64>,
    /// The swing-twist split was ambiguous; `grad_r` is zero.
    pub degenerate: bool,
}

impl BodyError {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.w_x * self.l_x + w.w_r * self.l_r + w.w_v * self.l_v + w.w_w * self.l_w
    }
}

/// Orientation loss of the error rotation `err = R_sᵀ R_g` under `mode`,
/// with its right-trivialized gradient and the degeneracy flag.
pub fn orientation_loss(err: &Rotation3<f64>, mode: OrientationMode, axis: &Vector3<f64>) -> (f64, Vector3<f64>, Vector3<f64>, bool) {
    let q = *UnitQuaternion::from_rotation_matrix(err).quaternion();
    let q = if q.w < 0.0 { -q } else { q };
    let w = q.w;
    let v = q.imag();
    match mode {
        OrientationMode::Full => {
            let e = quat_log(&q);
            (e.norm_squared(), e, e * 2.0, false)
        }
        OrientationMode::Twist => {
            let y = v.dot(axis);
            let n2 = w * w + y * y;
            if n2.sqrt() < TWIST_DEGENERATE {
                return (0.0, Vector3::zeros(), Vector3::zeros(), true);
            }
            let theta = 2.0 * y.atan2(w);
            // dw = -½ v·u, dy = ½ (w a + a × v)·u
            let grad_y = (axis * w + axis.cross(&v)) * 0.5;
            let grad_x = v * -0.5;
            let grad = (grad_y * w - grad_x * y) * (4.0 * theta / n2);
            (theta * theta, axis * theta, grad, false)
        }
        OrientationMode::Swing => {
            let y = v.dot(axis);
            let n = (w * w + y * y).sqrt();
            if n < TWIST_DEGENERATE {
                let e = quat_log(&q);
                return (e.norm_squared(), e, Vector3::zeros(), true);
            }
            let perp = v - axis * y;
            let r = perp.norm();
            let theta = 2.0 * r.atan2(n);
            let ratio = if r < 1e-12 { 2.0 / n } else { theta / r };
            // imaginary part of q ⊗ twist⁻¹
            let swing = Quaternion::from_parts(n, (perp * w + axis.cross(&perp) * y) / n);
            let e = quat_log(&swing);
            let grad_y = (axis * w + axis.cross(&v)) * 0.5;
            let grad_x = v * -0.5;
            let grad_n = (grad_x * w + grad_y * y) / n;
            // r · grad_r, with the 1/r folded into `ratio`
            let r_grad_r = (perp * w + perp.cross(&v)) * 0.5;
            let denom = n * n + r * r;
            let grad = (r_grad_r * (n * ratio) - grad_n * (theta * r)) * (4.0 / denom);
            (theta * theta, e, grad, false)
        }
    }
}

pub fn body_losses(g: &Frame, s: &Frame, pair: &ResolvedPair) -> BodyError {
    let e_x = g.position - s.position;
    let e_v = g.linear_velocity - s.linear_velocity;
    let e_w = g.angular_velocity - s.angular_velocity;
    let err = s.rotation.transpose() * g.rotation;
    let (l_r, e_r, grad_r, degenerate) = orientation_loss(&err, pair.mode, &pair.twist_axis);
    BodyError {
        l_x: e_x.norm_squared(),
        l_r,
        l_v: e_v.norm_squared(),
        l_w: e_w.norm_squared(),
        e_x,
        e_v,
        e_w,
        e_r,
        grad_r,
        degenerate,
    }
}

/// `Σ_b (w_x ℓ_x + w_R ℓ_R + w_v ℓ_v + w_ω ℓ_ω)`.
pub fn upper_loss(errors: &[BodyError], w: &LossWeights) -> f64 {
    errors.iter().map(|e| e.weighted(w)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTerm {
    RootPosXy,
    RootHeight,
    RootOri,
    RootLinVel,
    RootAngVel,
    RbsPos,
    RbsOri,
    Survival,
    JointTorques,
    JointAcc,
    JointActionRate,
    JointActionAcc,
    RootForce,
    RootTorque,
}

impl RewardTerm {
    pub const ALL: [RewardTerm; 14] = [
        RewardTerm::RootPosXy,
        RewardTerm::RootHeight,
        RewardTerm::RootOri,
        RewardTerm::RootLinVel,
        RewardTerm::RootAngVel,
        RewardTerm::RbsPos,
        RewardTerm::RbsOri,
        RewardTerm::Survival,
        RewardTerm::JointTorques,
        RewardTerm::JointAcc,
        RewardTerm::JointActionRate,
        RewardTerm::JointActionAcc,
        RewardTerm::RootForce,
        RewardTerm::RootTorque,
    ];

    /// Terms that may be multiplied by the retargeting phase.
    pub const PHASE_SCALABLE: [RewardTerm; 4] =
        [RewardTerm::RbsPos, RewardTerm::RbsOri, RewardTerm::RootForce, RewardTerm::RootTorque];

    pub fn name(self) -> &'static str {
        match self {
            RewardTerm::RootPosXy => "root_pos_xy",
            RewardTerm::RootHeight => "root_height",
            RewardTerm::RootOri => "root_ori",
            RewardTerm::RootLinVel => "root_lin_vel",
            RewardTerm::RootAngVel => "root_ang_vel",
            RewardTerm::RbsPos => "rbs_pos",
            RewardTerm::RbsOri => "rbs_ori",
            RewardTerm::Survival => "survival",
            RewardTerm::JointTorques => "joint_torques",
            RewardTerm::JointAcc => "joint_acc",
            RewardTerm::JointActionRate => "joint_action_rate",
            RewardTerm::JointActionAcc => "joint_action_acc",
            RewardTerm::RootForce => "root_force",
            RewardTerm::RootTorque => "root_torque",
        }
    }
}

/// Weight table plus the set of terms scaled by the retargeting phase ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub weights: BTreeMap<RewardTerm, f64>,
    #[serde(default)]
    pub phase_scaled: BTreeSet<RewardTerm>,
}

impl RewardConfig {
    /// Retargeting preset: tracking and wrench-penalty weights used while the
    /// retargeting policy is trained.
    pub fn retargeting() -> Self {
        use RewardTerm::*;
        Self {
            weights: BTreeMap::from([
                (RootPosXy, 2.0),
                (RootHeight, 10.0),
                (RootOri, 2.0),
                (RootLinVel, 0.5),
                (RootAngVel, 0.5),
                (RbsPos, 2.0),
                (RbsOri, 2.0),
                (Survival, 20.0),
                (JointTorques, 1e-4),
                (JointAcc, 1e-6),
                (JointActionRate, 1e-2),
                (JointActionAcc, 1e-2),
                (RootForce, 1e-2),
                (RootTorque, 1e-2),
            ]),
            phase_scaled: BTreeSet::from([RbsPos, RbsOri, RootForce, RootTorque]),
        }
    }

    fn downstream(survival: f64, torques: f64, acc: f64, rate: f64, action_acc: f64) -> Self {
        use RewardTerm::*;
        Self {
            weights: BTreeMap::from([
                (RootPosXy, 5.0),
                (RootHeight, 5.0),
                (RootOri, 3.0),
                (RootLinVel, 0.5),
                (RootAngVel, 0.5),
                (RbsPos, 5.0),
                (RbsOri, 2.5),
                (Survival, survival),
                (JointTorques, torques),
                (JointAcc, acc),
                (JointActionRate, rate),
                (JointActionAcc, action_acc),
                (RootForce, 0.0),
                (RootTorque, 0.0),
            ]),
            phase_scaled: BTreeSet::new(),
        }
    }

    /// Downstream tracking preset, full-size humanoid column.
    pub fn downstream_g1() -> Self {
        Self::downstream(10.0, 1e-4, 2.5e-8, 0.15, 1e-2)
    }

    /// Downstream tracking preset, small humanoid column.
    pub fn downstream_lima() -> Self {
        Self::downstream(1.0, 1e-3, 2.5e-6, 3.0, 1.0)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "retargeting" => Ok(Self::retargeting()),
            "downstream_g1" => Ok(Self::downstream_g1()),
            "downstream_lima" => Ok(Self::downstream_lima()),
            other => Err(Error::Unknown {
                kind: "reward preset",
                name: other.to_string(),
            }),
        }
    }

    pub fn weight(&self, term: RewardTerm) -> f64 {
        self.weights.get(&term).copied().unwrap_or(0.0)
    }

    pub fn with_weight(mut self, term: RewardTerm, w: f64) -> Self {
        self.weights.insert(term, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((t, w)) = self.weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::Config(format!("reward weight {} is not finite ({w})", t.name())));
        }
        if let Some(t) = self.phase_scaled.iter().find(|t| !RewardTerm::PHASE_SCALABLE.contains(t)) {
            return Err(Error::Config(format!("reward term {} cannot be phase scaled", t.name())));
        }
        Ok(())
    }
}

/// Joint setpoints of the current and two previous control steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionHistory {
    pub current: Vec<f64>,
    pub prev: Vec<f64>,
    pub prev2: Vec<f64>,
}

/// Weighted per-term rewards; `total` is their sum in `terms` order.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub terms: Vec<(RewardTerm, f64)>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn get(&self, term: RewardTerm) -> f64 {
        self.terms.iter().find(|(t, _)| *t == term).map_or(0.0, |(_, v)| *v)
    }
}

/// Reward of one control step.
///
/// `reference` holds one frame per correspondence pair. The root pair feeds
/// the dedicated root rows; every other pair feeds the rigid-body rows.
/// Survival is paid only when `terminated` is false.
pub fn step_reward(
    state: &SimState,
    reference: &[Frame],
    pairs: &Correspondences,
    actions: &ActionHistory,
    psi: f64,
    terminated: bool,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    use RewardTerm::*;
    debug_assert!((0.0..=1.0).contains(&psi));
    let mut raw: BTreeMap<RewardTerm, f64> = BTreeMap::new();
    let mut rbs_pos = 0.0;
    let mut rbs_ori = 0.0;
    for (b, pair) in pairs.resolved.iter().enumerate() {
        let e = body_losses(&reference[b], &state.body_frames[pair.target], pair);
        if b == pairs.root {
            raw.insert(RootPosXy, -(e.e_x.x * e.e_x.x + e.e_x.y * e.e_x.y));
            raw.insert(RootHeight, -(e.e_x.z * e.e_x.z));
            raw.insert(RootOri, -e.l_r);
            raw.insert(RootLinVel, -e.l_v);
            raw.insert(RootAngVel, -e.l_w);
        } else {
            rbs_pos -= e.l_x;
            rbs_ori -= e.l_r;
        }
    }
    raw.insert(RbsPos, rbs_pos);
    raw.insert(RbsOri, rbs_ori);
    raw.insert(Survival, if terminated { 0.0 } else { 1.0 });
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    raw.insert(JointTorques, -sq(&state.last_joint_torques));
    raw.insert(JointAcc, -sq(&state.last_joint_acc));
    let rate: Vec<f64> = actions.current.iter().zip(&actions.prev).map(|(a, b)| a - b).collect();
    raw.insert(JointActionRate, -sq(&rate));
    let acc: Vec<f64> = actions
        .current
        .iter()
        .zip(&actions.prev)
        .zip(&actions.prev2)
        .map(|((a, b), c)| a - 2.0 * b + c)
        .collect();
    raw.insert(JointActionAcc, -sq(&acc));
    raw.insert(RootForce, -state.applied_force.abs().sum());
    raw.insert(RootTorque, -state.applied_torque.abs().sum());

    let mut terms = Vec::with_capacity(RewardTerm::ALL.len());
    let mut total = 0.0;
    for term in RewardTerm::ALL {
        let mut w = cfg.weight(term);
        if cfg.phase_scaled.contains(&term) {
            w *= psi;
        }
        let value = if w == 0.0 { 0.0 } else { w * raw[&term] };
        total += value;
        terms.push((term, value));
    }
    RewardBreakdown { terms, total }
}
