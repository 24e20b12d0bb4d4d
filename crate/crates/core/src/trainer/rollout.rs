//! On-policy data collection across a pool of environments.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::env::{check_termination, control_input, episode_references, Env, EnvConfig, Task};
use super::nn::Normalizer;
use super::ppo::{gae, log_prob, PpoBatch, Policy};
use super::sampler::MotionSampler;
use crate::bilevel::{RetargetParams, UpperBatch, UpperSample};
use crate::error::Result;
use crate::objective::{step_reward, RewardConfig};

/// Result of advancing one environment by one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminated: bool,
    pub timed_out: bool,
    /// ψ of the new state.
    pub psi: f64,
    /// One sample per pair; empty when the episode terminated.
    pub upper: Vec<UpperSample>,
}

/// Applies `raw` to `env`, advances its episode clock and scores the new
/// state against the references at the new time.
pub fn env_step(task: &Task, env: &mut Env, raw: &[f64], params: &RetargetParams, cfg: &EnvConfig, reward: &RewardConfig) -> StepOutcome {
    let morph = &task.model.morph;
    let u = control_input(raw, &morph.nominal_q, cfg);
    env.state = task.model.step_unchecked(&env.state, &u);
    env.ctx.steps += 1;
    env.setpoints.prev2 = std::mem::replace(&mut env.setpoints.prev, std::mem::replace(&mut env.setpoints.current, u.a_jts));
    env.prev2 = std::mem::replace(&mut env.prev, raw.iter().map(|a| a.clamp(-cfg.action_clip, cfg.action_clip)).collect());

    let psi = env.ctx.psi();
    let (refs, sources) = episode_references(task, params, &env.ctx);
    let terminated = check_termination(&env.state, &refs[task.pairs.root], &cfg.thresholds);
    let timed_out = !terminated && env.ctx.timed_out();
    let r = step_reward(&env.state, &refs, &task.pairs, &env.setpoints, psi, terminated, reward).total;
    env.episode_return += r;
    let upper = if terminated {
        Vec::new()
    } else {
        task.pairs
            .resolved
            .iter()
            .enumerate()
            .map(|(p, pair)| UpperSample {
                pair: p,
                motion: env.ctx.motion,
                source: sources[p],
                sim: env.state.body_frames[pair.target],
            })
            .collect()
    };
    StepOutcome {
        reward: r,
        terminated,
        timed_out,
        psi,
        upper,
    }
}

/// Aggregates of one rollout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub mean_reward: f64,
    pub episodes: usize,
    pub failures: usize,
    pub mean_episode_return: f64,
}

pub struct Rollout {
    pub batch: PpoBatch,
    pub upper: UpperBatch,
    pub stats: RolloutStats,
}

fn to_matrix(cols: &[Vec<f64>]) -> DMatrix<f64> {
    let rows = cols[0].len();
    DMatrix::from_fn(rows, cols.len(), |r, c| cols[c][r])
}

fn normalize(norm: &Normalizer, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|o| {
            let mut out = vec![0.0; o.len()];
            norm.apply(o, &mut out);
            out
        })
        .collect()
}

struct EnvStep {
    action: Vec<f64>,
    log_prob: f64,
    outcome: StepOutcome,
    /// Observation of the final state of a timed-out episode.
    final_obs: Option<Vec<f64>>,
    /// `(motion, failed, return)` of an episode that just ended.
    finished: Option<(usize, bool, f64)>,
}

/// Collects `horizon` steps from every environment with the stochastic
/// policy, resets finished episodes and computes GAE targets. Timeouts are
/// bootstrapped with the value of their final state.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    task: &Task,
    envs: &mut [Env],
    policy: &Policy,
    normalizer: &mut Normalizer,
    sampler: &mut MotionSampler,
    params: &RetargetParams,
    cfg: &EnvConfig,
    reward: &RewardConfig,
    horizon: usize,
    gamma: f64,
    lambda: f64,
) -> Result<Rollout> {
    let n_env = envs.len();
    let log_std: Vec<f64> = policy.log_std.iter().copied().collect();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let mut obs_cols = Vec::with_capacity(horizon * n_env);
    let mut act_cols = Vec::with_capacity(horizon * n_env);
    let mut mean_cols = Vec::with_capacity(horizon * n_env);
    let mut old_log_prob = Vec::with_capacity(horizon * n_env);
    let mut rewards = Vec::with_capacity(horizon);
    let mut values = Vec::with_capacity(horizon);
    let mut resets = Vec::with_capacity(horizon);
    let mut upper = UpperBatch::new();
    let mut stats = RolloutStats::default();
    let mut return_sum = 0.0;

    let mut raw_obs: Vec<Vec<f64>> = envs.par_iter().map(|e| e.observe(task, params)).collect();
    for _ in 0..horizon {
        for o in &raw_obs {
            normalizer.update(o);
        }
        let obs = normalize(normalizer, &raw_obs);
        let obs_m = to_matrix(&obs);
        let mean = policy.mean(&obs_m);
        let value = policy.value(&obs_m);
        let choose = WeightedIndex::new(sampler.probabilities()).expect("probabilities are positive");

        let steps: Vec<Result<EnvStep>> = envs
            .par_iter_mut()
            .enumerate()
            .map(|(e, env)| {
                let mu: Vec<f64> = mean.column(e).iter().copied().collect();
                let action: Vec<f64> = mu
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut env.rng);
                        m + s * z
                    })
                    .collect();
                let lp = log_prob(&mu, &log_std, &action);
                let outcome = env_step(task, env, &action, params, cfg, reward);
                let mut final_obs = None;
                let mut finished = None;
                if outcome.terminated || outcome.timed_out {
                    if outcome.timed_out {
                        final_obs = Some(env.observe(task, params));
                    }
                    finished = Some((env.ctx.motion, outcome.terminated, env.episode_return));
                    let motion = choose.sample(&mut env.rng);
                    let rng = ChaCha8Rng::from_rng(&mut env.rng);
                    *env = Env::reset(task, motion, params, cfg, rng)?;
                }
                Ok(EnvStep {
                    action,
                    log_prob: lp,
                    outcome,
                    final_obs,
                    finished,
                })
            })
            .collect();
        let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;

        let timeouts: Vec<(usize, Vec<f64>)> = steps.iter().enumerate().filter_map(|(e, s)| s.final_obs.clone().map(|o| (e, o))).collect();
        let mut step_rewards: Vec<f64> = steps.iter().map(|s| s.outcome.reward).collect();
        if !timeouts.is_empty() {
            let fin: Vec<Vec<f64>> = timeouts.iter().map(|(_, o)| o.clone()).collect();
            let v = policy.value(&to_matrix(&normalize(normalizer, &fin)));
            for ((e, _), v) in timeouts.iter().zip(v) {
                step_rewards[*e] += gamma * v;
            }
        }
        let mut step_resets = Vec::with_capacity(n_env);
        for (e, s) in steps.into_iter().enumerate() {
            stats.mean_reward += s.outcome.reward;
            for sample in s.outcome.upper {
                upper.push(sample, s.outcome.psi);
            }
            if let Some((motion, failed, ret)) = s.finished {
                sampler.record(motion, failed);
                return_sum += ret;
                stats.episodes += 1;
                stats.failures += usize::from(failed);
            }
            step_resets.push(s.finished.is_some());
            obs_cols.push(obs[e].clone());
            mean_cols.push(mean.column(e).iter().copied().collect::<Vec<_>>());
            act_cols.push(s.action);
            old_log_prob.push(s.log_prob);
        }
        rewards.push(step_rewards);
        values.push(value);
        resets.push(step_resets);
        raw_obs = envs.par_iter().map(|e| e.observe(task, params)).collect();
    }
    let last_values = policy.value(&to_matrix(&normalize(normalizer, &raw_obs)));
    let (adv, ret) = gae(&rewards, &values, &resets, &last_values, gamma, lambda);
    stats.mean_reward /= (horizon * n_env) as f64;
    stats.mean_episode_return = if stats.episodes > 0 { return_sum / stats.episodes as f64 } else { 0.0 };
    Ok(Rollout {
        batch: PpoBatch {
            obs: to_matrix(&obs_cols),
            actions: to_matrix(&act_cols),
            old_log_prob,
            old_mean: to_matrix(&mean_cols),
            old_log_std: policy.log_std.clone(),
            advantages: adv.into_iter().flatten().collect(),
            returns: ret.into_iter().flatten().collect(),
        },
        upper,
        stats,
    })
}
