//! Episode plumbing for the tracking task: references, observations,
//! initialization and termination.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bilevel::RetargetParams;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::morphology::{Calibration, Correspondences, Morphology};
use crate::objective::ActionHistory;
use crate::refmap::{map_reference_unchecked, precompute_z_nom, SourceMotionClip};
use crate::rotmath::geodesic_angle;
use crate::sim::{ControlInput, SimModel, SimState, Wrench};

/// Episode and action settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Duration of the ψ ramp, s.
    pub t_ramp: f64,
    /// Std of the initial joint positions around the nominal pose, rad.
    pub init_sigma: f64,
    /// Joint setpoint offset per unit of raw action, rad.
    pub action_scale: f64,
    /// Raw actions are clipped to `±action_clip`.
    pub action_clip: f64,
    /// Upper bound of the tracked part of an episode, s.
    pub max_episode: f64,
    /// Minimum clip time left at the start frame, s.
    pub min_remaining: f64,
    pub thresholds: Thresholds,
    /// Standardized observations are clipped to `±obs_clip`.
    pub obs_clip: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            t_ramp: 1.0,
            init_sigma: 0.1,
            action_scale: 0.25,
            action_clip: 5.0,
            max_episode: 10.0,
            min_remaining: 1.0,
            thresholds: Thresholds::default(),
            obs_clip: 5.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [("t_ramp", self.t_ramp), ("init_sigma", self.init_sigma), ("min_remaining", self.min_remaining)];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be finite and ≥ 0, got {v}")));
            }
        }
        let positive = [
            ("action_scale", self.action_scale),
            ("action_clip", self.action_clip),
            ("max_episode", self.max_episode),
            ("obs_clip", self.obs_clip),
            ("thresholds.position", self.thresholds.position),
            ("thresholds.angle_deg", self.thresholds.angle_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Early-termination limits on the root tracking error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// m
    pub position: f64,
    /// Geodesic angle, degrees.
    pub angle_deg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            position: 1.0,
            angle_deg: 45.0,
        }
    }
}

/// True iff the simulator faulted or the root is more than `position` away
/// from its reference or rotated more than `angle_deg` from it.
pub fn check_termination(state: &SimState, g_root: &Frame, th: &Thresholds) -> bool {
    if state.fault {
        return true;
    }
    let dx = (state.root.position - g_root.position).norm();
    let angle = geodesic_angle(&state.root.rotation, &g_root.rotation);
    dx > th.position || angle > th.angle_deg.to_radians()
}

/// Everything an environment needs that does not change during training.
#[derive(Debug, Clone)]
pub struct Task {
    pub model: SimModel,
    pub source: Morphology,
    pub pairs: Correspondences,
    pub cal: Calibration,
    pub clips: Vec<SourceMotionClip>,
    /// Per clip.
    pub z_nom: Vec<f64>,
    /// `slots[clip][pair]`: column of the pair's source body in the clip.
    pub slots: Vec<Vec<usize>>,
}

impl Task {
    pub fn new(model: SimModel, source: Morphology, pairs: Correspondences, cal: Calibration, clips: Vec<SourceMotionClip>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("at least one motion clip is required".into()));
        }
        if pairs.root_pair().target != model.morph.root {
            return Err(Error::Correspondence("the root pair must map to the target root body".into()));
        }
        let mut slots = Vec::with_capacity(clips.len());
        let mut z_nom = Vec::with_capacity(clips.len());
        for clip in &clips {
            slots.push(
                pairs
                    .resolved
                    .iter()
                    .map(|p| clip.slot(source.body_name(p.source)))
                    .collect::<Result<Vec<_>>>()?,
            );
            z_nom.push(precompute_z_nom(clip, &source, &cal)?);
        }
        Ok(Self {
            model,
            source,
            pairs,
            cal,
            clips,
            z_nom,
            slots,
        })
    }

    pub fn motion_ids(&self) -> Vec<String> {
        self.clips.iter().map(|c| c.id.clone()).collect()
    }

    pub fn n_joints(&self) -> usize {
        self.model.n_joints()
    }

    pub fn act_dim(&self) -> usize {
        self.n_joints() + 6
    }

    pub fn proprio_dim(&self) -> usize {
        11 + 2 * self.n_joints() + 2 * self.act_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.proprio_dim() + GOAL_FEATURES * self.pairs.len()
    }

    /// Source frame of `pair` in `motion` at clip time `t`.
    pub fn source_frame(&self, motion: usize, pair: usize, t: f64) -> Frame {
        self.clips[motion].sample(self.slots[motion][pair], t)
    }

    /// Mapped references of all pairs at clip time `t`.
    pub fn references(&self, params: &RetargetParams, motion: usize, t: f64) -> Vec<Frame> {
        let vertical = self.z_nom[motion] + params.p_z[motion];
        (0..self.pairs.len())
            .map(|p| map_reference_unchecked(&self.cal, params, p, vertical, &self.source_frame(motion, p, t)))
            .collect()
    }
}

/// Per-pair goal features: position error, 6D relative rotation and the
/// reference twist, all in the simulated root frame.
pub const GOAL_FEATURES: usize = 15;

/// Progress of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeContext {
    pub motion: usize,
    pub start_frame: usize,
    pub t_ramp: f64,
    /// Control steps taken.
    pub steps: u64,
    pub dt: f64,
    /// Tracked duration after the ramp, s.
    pub horizon: f64,
}

impl EpisodeContext {
    pub fn elapsed(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn psi(&self) -> f64 {
        if self.t_ramp <= 0.0 {
            return 1.0;
        }
        (self.elapsed() / self.t_ramp).clamp(0.0, 1.0)
    }

    /// Clip time of the reference; playback is paused during the ramp.
    pub fn clip_time(&self, fps: f64) -> f64 {
        self.start_frame as f64 / fps + (self.elapsed() - self.t_ramp).max(0.0)
    }

    pub fn timed_out(&self) -> bool {
        self.elapsed() - self.t_ramp >= self.horizon - 1e-9
    }
}

/// References seen by the policy and the reward: while ψ < 1 the reference is
/// the paused start pose with zero twist.
pub fn episode_references(task: &Task, params: &RetargetParams, ctx: &EpisodeContext) -> (Vec<Frame>, Vec<Frame>) {
    let clip = &task.clips[ctx.motion];
    let t = ctx.clip_time(clip.fps);
    let mut refs = task.references(params, ctx.motion, t);
    let mut sources: Vec<Frame> = (0..task.pairs.len()).map(|p| task.source_frame(ctx.motion, p, t)).collect();
    if ctx.psi() < 1.0 {
        for f in refs.iter_mut().chain(sources.iter_mut()) {
            f.linear_velocity = Vector3::zeros();
            f.angular_velocity = Vector3::zeros();
        }
    }
    (refs, sources)
}

/// Start frame drawn uniformly among frames leaving at least
/// `min_remaining` seconds of clip.
pub fn sample_start_frame<R: Rng>(clip: &SourceMotionClip, cfg: &EnvConfig, rng: &mut R) -> usize {
    let last = clip.len() - 1;
    let reserve = (cfg.min_remaining * clip.fps).ceil() as usize;
    rng.random_range(0..=last.saturating_sub(reserve))
}

/// Root at the mapped root reference with zero twist, joints drawn around the
/// nominal pose and clamped to their limits, ψ = 0.
pub fn init_episode<R: Rng>(
    task: &Task,
    motion: usize,
    start_frame: usize,
    params: &RetargetParams,
    cfg: &EnvConfig,
    rng: &mut R,
) -> Result<(SimState, EpisodeContext)> {
    let clip = task.clips.get(motion).ok_or_else(|| Error::Unknown {
        kind: "motion",
        name: motion.to_string(),
    })?;
    if start_frame >= clip.len() {
        return Err(Error::Clip {
            clip: clip.id.clone(),
            reason: format!("start frame {start_frame} out of range (len {})", clip.len()),
        });
    }
    let t0 = start_frame as f64 / clip.fps;
    let vertical = task.z_nom[motion] + params.p_z[motion];
    let root_pair = task.pairs.root;
    let g = map_reference_unchecked(&task.cal, params, root_pair, vertical, &task.source_frame(motion, root_pair, t0));
    let root = Frame::from_pose(g.position, g.rotation);
    let morph = &task.model.morph;
    let mut q = morph.nominal_q.clone();
    if cfg.init_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.init_sigma).expect("finite sigma");
        for qi in &mut q {
            *qi += normal.sample(rng);
        }
    }
    morph.clamp_to_limits(&mut q);
    let n = q.len();
    let state = task.model.state(root, q, vec![0.0; n])?;
    let ctx = EpisodeContext {
        motion,
        start_frame,
        t_ramp: cfg.t_ramp,
        steps: 0,
        dt: task.model.cfg.control_dt,
        horizon: (clip.duration() - t0).min(cfg.max_episode),
    };
    Ok((state, ctx))
}

/// Proprioceptive observation `[h, gravity, v, ω, q, q̇, a_{t−1}, a_{t−2}, ψ]`
/// with gravity and twists in the root frame.
pub fn build_observation(state: &SimState, prev: &[f64], prev2: &[f64], psi: f64, out: &mut Vec<f64>) {
    let r_t = state.root.rotation.transpose();
    out.push(state.root.position.z);
    out.extend((r_t * Vector3::new(0.0, 0.0, -1.0)).iter());
    out.extend((r_t * state.root.linear_velocity).iter());
    out.extend((r_t * state.root.angular_velocity).iter());
    out.extend_from_slice(&state.q);
    out.extend_from_slice(&state.qd);
    out.extend_from_slice(prev);
    out.extend_from_slice(prev2);
    out.push(psi);
}

/// Appends the goal features of every pair.
pub fn build_goal(state: &SimState, refs: &[Frame], pairs: &Correspondences, out: &mut Vec<f64>) {
    let r_t = state.root.rotation.transpose();
    for (g, p) in refs.iter().zip(&pairs.resolved) {
        let s = &state.body_frames[p.target];
        out.extend((r_t * (g.position - s.position)).iter());
        let rel: Rotation3<f64> = s.rotation.transpose() * g.rotation;
        let m = rel.matrix();
        out.extend(m.column(0).iter());
        out.extend(m.column(1).iter());
        out.extend((r_t * g.linear_velocity).iter());
        out.extend((r_t * g.angular_velocity).iter());
    }
}

/// Mutable state of one training environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub state: SimState,
    pub ctx: EpisodeContext,
    /// Joint setpoints, for the smoothness rewards.
    pub setpoints: ActionHistory,
    /// Raw policy outputs of the two previous steps.
    pub prev: Vec<f64>,
    pub prev2: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub episode_return: f64,
}

impl Env {
    /// Starts a fresh episode on `motion`.
    pub fn reset(task: &Task, motion: usize, params: &RetargetParams, cfg: &EnvConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let start = sample_start_frame(&task.clips[motion], cfg, &mut rng);
        Self::start(task, motion, start, params, cfg, rng)
    }

    /// Starts a fresh episode on `motion` at `start_frame`.
    pub fn start(task: &Task, motion: usize, start_frame: usize, params: &RetargetParams, cfg: &EnvConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let (state, ctx) = init_episode(task, motion, start_frame, params, cfg, &mut rng)?;
        let q0 = task.model.morph.nominal_q.clone();
        Ok(Self {
            state,
            ctx,
            setpoints: ActionHistory {
                current: q0.clone(),
                prev: q0.clone(),
                prev2: q0,
            },
            prev: vec![0.0; task.act_dim()],
            prev2: vec![0.0; task.act_dim()],
            rng,
            episode_return: 0.0,
        })
    }

    /// Policy input before normalization.
    pub fn observe(&self, task: &Task, params: &RetargetParams) -> Vec<f64> {
        let (refs, _) = episode_references(task, params, &self.ctx);
        let mut obs = Vec::with_capacity(task.obs_dim());
        build_observation(&self.state, &self.prev, &self.prev2, self.ctx.psi(), &mut obs);
        build_goal(&self.state, &refs, &task.pairs, &mut obs);
        obs
    }
}

/// Maps a raw action to the simulator input: joint setpoints around the
/// nominal pose, then the normalized root wrench.
pub fn control_input(raw: &[f64], nominal_q: &[f64], cfg: &EnvConfig) -> ControlInput {
    let n = nominal_q.len();
    let c = |x: f64| x.clamp(-cfg.action_clip, cfg.action_clip);
    ControlInput {
        a_jts: (0..n).map(|i| nominal_q[i] + cfg.action_scale * c(raw[i])).collect(),
        wrench: Wrench {
            force: Vector3::new(c(raw[n]), c(raw[n + 1]), c(raw[n + 2])),
            torque: Vector3::new(c(raw[n + 3]), c(raw[n + 4]), c(raw[n + 5])),
        },
    }
}
