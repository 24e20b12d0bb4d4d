//! Gaussian actor-critic and the clipped-surrogate PPO update.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{flatten, Adam, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub iterations: usize,
    pub num_envs: usize,
    /// Control steps collected per environment and iteration.
    pub steps_per_env: usize,
    pub mini_batches: usize,
    pub epochs: usize,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub desired_kl: f64,
    pub max_grad_norm: f64,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub max_learning_rate: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            num_envs: 4096,
            steps_per_env: 24,
            mini_batches: 4,
            epochs: 5,
            clip: 0.2,
            entropy_coef: 0.0025,
            value_coef: 1.0,
            gamma: 0.97,
            lambda: 0.95,
            desired_kl: 0.009,
            max_grad_norm: 1.0,
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            max_learning_rate: 1e-2,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("num_envs", self.num_envs),
            ("steps_per_env", self.steps_per_env),
            ("mini_batches", self.mini_batches),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("ppo.{name} must be ≥ 1")));
            }
        }
        if self.mini_batches > self.num_envs * self.steps_per_env {
            return Err(Error::Config("ppo.mini_batches exceeds the batch size".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!("ppo.clip must lie in (0, 1), got {}", self.clip)));
        }
        let positive = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("desired_kl", self.desired_kl),
            ("max_grad_norm", self.max_grad_norm),
            ("learning_rate", self.learning_rate),
            ("min_learning_rate", self.min_learning_rate),
            ("max_learning_rate", self.max_learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("ppo.{name} must be finite and > 0, got {v}")));
            }
        }
        if self.gamma > 1.0 || self.lambda > 1.0 {
            return Err(Error::Config("ppo.gamma and ppo.lambda must be ≤ 1".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0) {
            return Err(Error::Config("ppo coefficients must be ≥ 0".into()));
        }
        if self.min_learning_rate > self.max_learning_rate {
            return Err(Error::Config("ppo.min_learning_rate exceeds max_learning_rate".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian policy with a state-independent log-std and a separate
/// value network of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: DVector<f64>,
}

const LOG_2PI: f64 = 1.8378770664093453;

impl Policy {
    pub fn new<R: Rng>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Self {
            actor: Mlp::new(&sizes(act_dim), 0.01, rng),
            critic: Mlp::new(&sizes(1), 1.0, rng),
            log_std: DVector::from_element(act_dim, init_log_std),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        self.actor.forward(obs)
    }

    pub fn value(&self, obs: &DMatrix<f64>) -> Vec<f64> {
        self.critic.forward(obs).row(0).iter().copied().collect()
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        log_prob(mean, self.log_std.as_slice(), action)
    }

    /// `[actor, critic, log_std]`
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.actor.params();
        p.extend(self.critic.params());
        p.extend(self.log_std.iter());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let na = self.actor.n_params();
        let nc = self.critic.n_params();
        self.actor.set_params(&p[..na]);
        self.critic.set_params(&p[na..na + nc]);
        self.log_std.as_mut_slice().copy_from_slice(&p[na + nc..]);
    }

    pub fn n_params(&self) -> usize {
        self.actor.n_params() + self.critic.n_params() + self.act_dim()
    }
}

pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LOG_2PI
        })
        .sum()
}

/// Entropy of a diagonal Gaussian.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln())).sum()
}

/// Generalized advantage estimation over a `[step][env]` grid.
///
/// `resets[t][e]` marks that the episode ended after step `t`; the value of
/// the next state is then not bootstrapped (timeouts must already carry
/// their bootstrap inside `rewards`). Returns `(advantages, returns)`.
pub fn gae(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    resets: &[Vec<bool>],
    last_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t_len = rewards.len();
    let n_env = last_values.len();
    let mut adv = vec![vec![0.0; n_env]; t_len];
    let mut ret = vec![vec![0.0; n_env]; t_len];
    for e in 0..n_env {
        let mut running = 0.0;
        for t in (0..t_len).rev() {
            let next_value = if t + 1 < t_len { values[t + 1][e] } else { last_values[e] };
            let keep = if resets[t][e] { 0.0 } else { 1.0 };
            let delta = rewards[t][e] + gamma * next_value * keep - values[t][e];
            running = delta + gamma * lambda * keep * running;
            adv[t][e] = running;
            ret[t][e] = running + values[t][e];
        }
    }
    (adv, ret)
}

/// Flattened on-policy samples, one column per sample.
#[derive(Debug, Clone)]
pub struct PpoBatch {
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_prob: Vec<f64>,
    pub old_mean: DMatrix<f64>,
    pub old_log_std: DVector<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub kl: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub learning_rate: f64,
    /// Mean probability ratio at the first mini-batch of the first epoch.
    pub initial_ratio: f64,
}

fn kl_divergence(old_mean: &[f64], old_log_std: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    (0..mean.len())
        .map(|k| {
            let (so, sn) = (old_log_std[k].exp(), log_std[k].exp());
            log_std[k] - old_log_std[k] + (so * so + (old_mean[k] - mean[k]).powi(2)) / (2.0 * sn * sn) - 0.5
        })
        .sum()
}

/// Epochs × mini-batches of clipped-surrogate updates with a KL-adapted
/// learning rate. Advantages are standardized over the whole batch.
pub fn ppo_update<R: Rng>(policy: &mut Policy, adam: &mut Adam, batch: &PpoBatch, cfg: &PpoConfig, lr: &mut f64, rng: &mut R) -> Result<PpoStats> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Numerical("empty PPO batch".into()));
    }
    let mean_adv = batch.advantages.iter().sum::<f64>() / n as f64;
    let std_adv = (batch.advantages.iter().map(|a| (a - mean_adv).powi(2)).sum::<f64>() / n as f64).sqrt();
    let adv: Vec<f64> = batch.advantages.iter().map(|a| (a - mean_adv) / (std_adv + 1e-8)).collect();

    let act_dim = policy.act_dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mb = n.div_ceil(cfg.mini_batches);
    let mut stats = PpoStats::default();
    let mut updates = 0usize;
    let mut clipped = 0usize;
    let mut seen = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (chunk_id, idx) in order.chunks(mb).enumerate() {
            let b = idx.len();
            let obs = DMatrix::from_fn(batch.obs.nrows(), b, |r, c| batch.obs[(r, idx[c])]);
            let (mean, actor_cache) = policy.actor.forward_cached(&obs);
            let (value, critic_cache) = policy.critic.forward_cached(&obs);
            let log_std = policy.log_std.clone();
            let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();

            let mut kl = 0.0;
            for (c, &i) in idx.iter().enumerate() {
                let m: Vec<f64> = mean.column(c).iter().copied().collect();
                let om: Vec<f64> = batch.old_mean.column(i).iter().copied().collect();
                kl += kl_divergence(&om, batch.old_log_std.as_slice(), &m, log_std.as_slice());
            }
            kl /= b as f64;
            if kl > 2.0 * cfg.desired_kl {
                *lr = (*lr / 2.0).max(cfg.min_learning_rate);
            } else if kl < 0.5 * cfg.desired_kl && kl > 0.0 {
                *lr = (*lr * 2.0).min(cfg.max_learning_rate);
            }

            let mut g_mean = DMatrix::zeros(act_dim, b);
            let mut g_log_std = DVector::zeros(act_dim);
            let mut g_value = DMatrix::zeros(1, b);
            let mut surrogate = 0.0;
            let mut value_loss = 0.0;
            let mut ratio_sum = 0.0;
            for (c, &i) in idx.iter().enumerate() {
                let a = batch.actions.column(i);
                let mut logp = 0.0;
                for k in 0..act_dim {
                    let z = (a[k] - mean[(k, c)]) / std[k];
                    logp += -0.5 * z * z - log_std[k] - 0.5 * LOG_2PI;
                }
                let ratio = (logp - batch.old_log_prob[i]).exp();
                ratio_sum += ratio;
                let a_i = adv[i];
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                let unclipped_obj = ratio * a_i;
                let clipped_obj = clipped_ratio * a_i;
                surrogate += unclipped_obj.min(clipped_obj);
                if (ratio - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
                if unclipped_obj <= clipped_obj {
                    // d(−r A / b)/d logp
                    let dlogp = -ratio * a_i / b as f64;
                    for k in 0..act_dim {
                        let diff = a[k] - mean[(k, c)];
                        g_mean[(k, c)] += dlogp * diff / (std[k] * std[k]);
                        g_log_std[k] += dlogp * ((diff / std[k]).powi(2) - 1.0);
                    }
                }
                let err = value[(0, c)] - batch.returns[i];
                value_loss += err * err;
                g_value[(0, c)] = 2.0 * cfg.value_coef * err / b as f64;
            }
            for k in 0..act_dim {
                g_log_std[k] -= cfg.entropy_coef;
            }
            surrogate /= b as f64;
            value_loss /= b as f64;
            let loss = -surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy(log_std.as_slice());
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite PPO loss (surrogate {surrogate}, value {value_loss}) at epoch {epoch}, mini-batch {chunk_id}"
                )));
            }
            if epoch == 0 && chunk_id == 0 {
                stats.initial_ratio = ratio_sum / b as f64;
            }

            let mut grad = flatten(&policy.actor.backward(&actor_cache, &g_mean));
            grad.extend(flatten(&policy.critic.backward(&critic_cache, &g_value)));
            grad.extend(g_log_std.iter());
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            let mut params = policy.params();
            adam.step(&mut params, &grad, *lr);
            policy.set_params(&params);

            stats.kl += kl;
            stats.surrogate += surrogate;
            stats.value_loss += value_loss;
            updates += 1;
            seen += b;
        }
    }
    stats.kl /= updates as f64;
    stats.surrogate /= updates as f64;
    stats.value_loss /= updates as f64;
    stats.clip_fraction = clipped as f64 / seen as f64;
    stats.entropy = entropy(policy.log_std.as_slice());
    stats.learning_rate = *lr;
    Ok(stats)
}
