//! Lower-level reinforcement learning and the single-loop training driver.
//!
//! Each iteration snapshots the retargeting parameters, collects a rollout
//! with them, updates the policy with PPO and then takes one projected
//! gradient step on the parameters from the same rollout.

pub mod env;
pub mod nn;
pub mod ppo;
pub mod rollout;
pub mod sampler;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{grad_estimate, ttsa_step, ConstraintBox, RetargetParams, UpdateConfig};
use crate::error::{Error, Result};
use crate::frame::{Frame, FrameRecord};
use crate::objective::{LossWeights, RewardConfig};
use crate::refmap::ClipFile;

pub use env::{EnvConfig, Task, Thresholds};
pub use nn::{Adam, Mlp, Normalizer};
pub use ppo::{PpoConfig, PpoStats, Policy};
pub use rollout::RolloutStats;
pub use sampler::MotionSampler;

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub update: UpdateConfig,
    pub bounds: ConstraintBox,
    pub loss: LossWeights,
    pub reward: RewardConfig,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub sampler_epsilon: f64,
    /// When false the retargeting parameters are never updated.
    pub bilevel: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            env: EnvConfig::default(),
            update: UpdateConfig::default(),
            bounds: ConstraintBox::default(),
            loss: LossWeights::default(),
            reward: RewardConfig::retargeting(),
            hidden: vec![128, 128],
            init_log_std: -0.5,
            sampler_epsilon: 0.5,
            bilevel: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.env.validate()?;
        self.update.validate()?;
        self.bounds.validate()?;
        self.loss.validate()?;
        self.reward.validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be ≥ 1".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("init_log_std must be finite".into()));
        }
        if !(self.sampler_epsilon > 0.0 && self.sampler_epsilon.is_finite()) {
            return Err(Error::Config("sampler_epsilon must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub upper_loss: f64,
    /// `‖Δp‖` of the parameter step, 0 when bilevel updates are off.
    pub update_rate: f64,
    pub kl: f64,
    pub learning_rate: f64,
    /// Early terminations over finished episodes.
    pub failure_rate: f64,
    pub episodes: usize,
    pub upper_samples: usize,
    pub degenerate: usize,
    pub saturation_pos: f64,
    pub saturation_ori: f64,
    pub saturation_z: f64,
    pub entropy: f64,
    pub value_loss: f64,
}

/// Serializable training state; together with the config it fully
/// determines every later iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub iteration: usize,
    pub policy: Policy,
    pub adam: Adam,
    pub learning_rate: f64,
    pub normalizer: Normalizer,
    pub params: RetargetParams,
    pub sampler: MotionSampler,
    pub envs: Vec<env::Env>,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub struct Trainer<'a> {
    pub task: &'a Task,
    pub cfg: TrainConfig,
    pub state: TrainerState,
}

impl<'a> Trainer<'a> {
    /// Validates the configuration and seeds every environment. Nothing is
    /// simulated before validation succeeds.
    pub fn new(task: &'a Task, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let policy = Policy::new(task.obs_dim(), task.act_dim(), &cfg.hidden, cfg.init_log_std, &mut rng);
        let params = RetargetParams::zeros(task.pairs.len(), &task.motion_ids());
        let sampler = MotionSampler::new(task.clips.len(), cfg.sampler_epsilon)?;
        let uniform = task.clips.len();
        let envs = (0..cfg.ppo.num_envs)
            .map(|i| {
                let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                env_rng.set_stream(i as u64 + 1);
                env::Env::reset(task, i % uniform, &params, &cfg.env, env_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let state = TrainerState {
            iteration: 0,
            adam: Adam::new(policy.n_params()),
            learning_rate: cfg.ppo.learning_rate,
            normalizer: Normalizer::new(task.obs_dim(), cfg.env.obs_clip),
            policy,
            params,
            sampler,
            envs,
            rng,
        };
        Ok(Self { task, cfg, state })
    }

    pub fn from_checkpoint(task: &'a Task, ck: Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        let s = &ck.state;
        if s.policy.obs_dim() != task.obs_dim() || s.policy.act_dim() != task.act_dim() {
            return Err(Error::Config("checkpoint policy does not match the task dimensions".into()));
        }
        if s.params.motion_ids != task.motion_ids() || s.params.n_pairs() != task.pairs.len() {
            return Err(Error::Config("checkpoint parameters do not match the task clips or pairs".into()));
        }
        Ok(Self {
            task,
            cfg: ck.config,
            state: ck.state,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            state: self.state.clone(),
        }
    }

    /// One single-loop iteration: rollout, PPO update, parameter step.
    pub fn iterate(&mut self) -> Result<LogRow> {
        let cfg = &self.cfg;
        let st = &mut self.state;
        let snapshot = st.params.clone();
        let ro = rollout::rollout(
            self.task,
            &mut st.envs,
            &st.policy,
            &mut st.normalizer,
            &mut st.sampler,
            &snapshot,
            &cfg.env,
            &cfg.reward,
            cfg.ppo.steps_per_env,
            cfg.ppo.gamma,
            cfg.ppo.lambda,
        )?;
        let ppo = ppo::ppo_update(&mut st.policy, &mut st.adam, &ro.batch, &cfg.ppo, &mut st.learning_rate, &mut st.rng)?;

        let est = grad_estimate(&ro.upper, &snapshot, &self.task.cal, &self.task.pairs, &self.task.z_nom, &cfg.loss, cfg.update.alpha);
        let mut update_rate = 0.0;
        if cfg.bilevel && est.samples > 0 {
            let (next, delta) = ttsa_step(&snapshot, &est.grad, cfg.update.eta_at(snapshot.iteration), &cfg.bounds)?;
            st.params = next;
            update_rate = delta;
        } else {
            st.params.iteration += 1;
        }
        let sat = st.params.saturation(&cfg.bounds);
        let row = LogRow {
            iteration: st.iteration,
            mean_reward: ro.stats.mean_reward,
            upper_loss: est.loss,
            update_rate,
            kl: ppo.kl,
            learning_rate: ppo.learning_rate,
            failure_rate: if ro.stats.episodes > 0 {
                ro.stats.failures as f64 / ro.stats.episodes as f64
            } else {
                0.0
            },
            episodes: ro.stats.episodes,
            upper_samples: est.samples,
            degenerate: est.degenerate,
            saturation_pos: sat[0],
            saturation_ori: sat[1],
            saturation_z: sat[2],
            entropy: ppo.entropy,
            value_loss: ppo.value_loss,
        };
        st.iteration += 1;
        Ok(row)
    }

    /// Runs until `cfg.ppo.iterations`, appending rows to `log` and calling
    /// `on_iter` after each iteration.
    pub fn run<W: Write>(&mut self, log: Option<&mut csv::Writer<W>>, mut on_iter: impl FnMut(&Self, &LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        let mut log = log;
        while self.state.iteration < self.cfg.ppo.iterations {
            let row = self.iterate()?;
            if let Some(w) = log.as_deref_mut() {
                w.serialize(row).map_err(csv_error)?;
                w.flush().map_err(|e| Error::io("training log", e))?;
            }
            on_iter(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Deterministic playback of every clip with the current policy.
    pub fn export(&self) -> Result<Vec<RetargetedMotion>> {
        (0..self.task.clips.len())
            .map(|m| export_retarget(self.task, &self.state.policy, &self.state.normalizer, &self.state.params, m, &self.cfg.env))
            .collect()
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Parse {
        path: "csv".into(),
        message: e.to_string(),
    }
}

/// Simulated target trajectory of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetedMotion {
    pub id: String,
    pub fps: f64,
    /// The episode terminated before the end of the clip.
    pub failed: bool,
    /// `frames[t][body]`, target bodies.
    pub frames: Vec<Vec<Frame>>,
    /// `‖f‖` of the physical root force applied in the step ending at each frame.
    pub root_force: Vec<f64>,
}

impl RetargetedMotion {
    pub fn max_root_force(&self) -> f64 {
        self.root_force.iter().copied().fold(0.0, f64::max)
    }

    /// Clip file keyed by target body names.
    pub fn to_clip_file(&self, target: &crate::morphology::Morphology) -> ClipFile {
        ClipFile {
            id: self.id.clone(),
            fps: self.fps,
            z_nom: None,
            frames: self
                .frames
                .iter()
                .map(|bodies| {
                    bodies
                        .iter()
                        .enumerate()
                        .map(|(b, f)| (target.body_name(b).to_string(), FrameRecord::from_frame(f)))
                        .collect::<BTreeMap<_, _>>()
                })
                .collect(),
        }
    }
}

/// Plays `motion` from its first frame with the policy mean and no joint
/// noise. Frames are recorded from the end of the ramp at the control rate
/// until the clip ends or the episode terminates.
pub fn export_retarget(task: &Task, policy: &Policy, normalizer: &Normalizer, params: &RetargetParams, motion: usize, cfg: &EnvConfig) -> Result<RetargetedMotion> {
    let cfg = EnvConfig {
        init_sigma: 0.0,
        max_episode: f64::INFINITY,
        ..*cfg
    };
    let mut env = env::Env::start(task, motion, 0, params, &cfg, ChaCha8Rng::seed_from_u64(0))?;
    let dt = task.model.cfg.control_dt;
    let mut frames = Vec::new();
    let mut root_force = Vec::new();
    let mut failed = false;
    let mut obs = vec![0.0; task.obs_dim()];
    let no_reward = RewardConfig {
        weights: BTreeMap::new(),
        phase_scaled: Default::default(),
    };
    if env.ctx.psi() >= 1.0 {
        frames.push(env.state.body_frames.clone());
        root_force.push(env.state.applied_force.norm());
    }
    loop {
        let raw = env.observe(task, params);
        normalizer.apply(&raw, &mut obs);
        let mean = policy.mean(&DMatrix::from_column_slice(obs.len(), 1, &obs));
        let action: Vec<f64> = mean.iter().copied().collect();
        let out = rollout::env_step(task, &mut env, &action, params, &cfg, &no_reward);
        if out.terminated {
            failed = true;
            break;
        }
        if out.psi >= 1.0 {
            frames.push(env.state.body_frames.clone());
            root_force.push(env.state.applied_force.norm());
        }
        if out.timed_out {
            break;
        }
    }
    Ok(RetargetedMotion {
        id: task.clips[motion].id.clone(),
        fps: 1.0 / dt,
        failed,
        frames,
        root_force,
    })
}
