//! On-policy training: rollout buffers, advantage estimation and the PPO,
//! A2C, NLPO and supervised update rules.

mod rollout;
mod update;

pub use rollout::{collect_rollout, generate, Episode, Rollout, RolloutSpec};
pub use update::{
    a2c_update, minibatch_loss, minibatch_loss_value, ppo_update, supervised_loss,
    supervised_loss_value, supervised_update, Objective, SupervisedStats, UpdateParams,
    UpdateStats,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::decode::{sample_from_logits, top_p_mask, DecodeConfig, Sampled};
use crate::model::math::softmax;
use crate::model::PolicyModel;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Generalized advantage estimation for one terminated episode
/// (the value after the last step is zero).
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<AdvantageEstimate> {
    if rewards.len() != values.len() {
        return Err(Error::LengthMismatch {
            what: "rewards and values",
            left: rewards.len(),
            right: values.len(),
        });
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lam * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageEstimate {
        advantages,
        returns,
    })
}

/// Zero mean, unit standard deviation (population std floored at 1e-8).
/// A single advantage is returned unchanged, since centering would erase it.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Clipped surrogate and value loss over one minibatch, with gradients with
/// respect to the new log-probabilities, values and entropies.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub d_new_log_probs: Vec<f64>,
    pub d_values: Vec<f64>,
    pub d_entropies: Vec<f64>,
}

/// Per-step surrogate: returns `(objective, d objective / d new_log_prob,
/// clipped)` where the objective is `min(r A, clip(r, 1−ε, 1+ε) A)`.
pub(crate) fn clipped_surrogate(old_lp: f64, new_lp: f64, adv: f64, eps: f64) -> Result<(f64, f64, bool)> {
    let ratio = (new_lp - old_lp).exp();
    if !ratio.is_finite() {
        return Err(Error::NonFinite {
            what: "probability ratio",
            detail: format!("new log-prob {new_lp}, old log-prob {old_lp}"),
        });
    }
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        Ok((unclipped, unclipped, false))
    } else {
        Ok((clipped, 0.0, true))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn ppo_loss(
    old_log_probs: &[f64],
    new_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    new_values: &[f64],
    entropies: &[f64],
    eps_clip: f64,
    vf_coef: f64,
    ent_coef: f64,
) -> Result<PpoLoss> {
    let n = old_log_probs.len();
    for (what, len) in [
        ("new log-probs", new_log_probs.len()),
        ("advantages", advantages.len()),
        ("returns", returns.len()),
        ("values", new_values.len()),
        ("entropies", entropies.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                left: len,
                right: n,
            });
        }
    }
    if n == 0 {
        return Err(Error::EmptyRollout);
    }
    let inv = 1.0 / n as f64;
    let mut out = PpoLoss {
        total: 0.0,
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
        clip_fraction: 0.0,
        d_new_log_probs: vec![0.0; n],
        d_values: vec![0.0; n],
        d_entropies: vec![-ent_coef * inv; n],
    };
    for i in 0..n {
        let (obj, dobj, clipped) =
            clipped_surrogate(old_log_probs[i], new_log_probs[i], advantages[i], eps_clip)?;
        out.policy -= obj * inv;
        out.d_new_log_probs[i] = -dobj * inv;
        let err = new_values[i] - returns[i];
        out.value += err * err * inv;
        out.d_values[i] = vf_coef * 2.0 * err * inv;
        out.entropy += entropies[i] * inv;
        if clipped {
            out.clip_fraction += inv;
        }
    }
    out.total = out.policy + vf_coef * out.value - ent_coef * out.entropy;
    Ok(out)
}

/// Frozen masking policy for NLPO and its sync schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub model: PolicyModel,
    pub top_p: f64,
    pub sync_period: usize,
    /// Updates since the last sync.
    pub counter: usize,
}

impl MaskState {
    pub fn new(policy: &PolicyModel, top_p: f64, sync_period: usize) -> Result<Self> {
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {top_p} outside (0, 1]")));
        }
        if sync_period == 0 {
            return Err(Error::Config("mask sync period must be positive".into()));
        }
        Ok(MaskState {
            model: policy.clone(),
            top_p,
            sync_period,
            counter: 0,
        })
    }

    /// Keep-mask from the masking policy's next-token distribution.
    pub fn keep_mask(&self, mask_logits: &[f64]) -> Result<Vec<bool>> {
        top_p_mask(&softmax(mask_logits), self.top_p)
    }

    /// Counts one policy update and copies the policy in every
    /// `sync_period`-th call.
    pub fn sync(&mut self, policy: &PolicyModel) {
        self.counter += 1;
        if self.counter >= self.sync_period {
            self.model = policy.clone();
            self.counter = 0;
        }
    }
}

/// Samples from the policy restricted to the masking policy's top-p set.
pub fn nlpo_step_policy<R: Rng + ?Sized>(
    policy: &PolicyModel,
    mask: &MaskState,
    window: &[TokenId],
    generated: usize,
    dc: &DecodeConfig,
    rng: &mut R,
) -> Result<Sampled> {
    let keep = mask.keep_mask(&mask.model.forward(window)?.logits)?;
    let logits = policy.forward(window)?.logits;
    sample_from_logits(&logits, dc, generated, Some(&keep), rng)
}

/// Named algorithm of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "zero-shot")]
    ZeroShot,
    #[serde(rename = "supervised")]
    Supervised,
    #[serde(rename = "ppo")]
    Ppo,
    #[serde(rename = "nlpo")]
    Nlpo,
    #[serde(rename = "a2c")]
    A2c,
    #[serde(rename = "supervised+ppo")]
    SupervisedPpo,
    #[serde(rename = "supervised+nlpo")]
    SupervisedNlpo,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ZeroShot => "zero-shot",
            Algorithm::Supervised => "supervised",
            Algorithm::Ppo => "ppo",
            Algorithm::Nlpo => "nlpo",
            Algorithm::A2c => "a2c",
            Algorithm::SupervisedPpo => "supervised+ppo",
            Algorithm::SupervisedNlpo => "supervised+nlpo",
        }
    }

    pub fn uses_supervised(self) -> bool {
        matches!(
            self,
            Algorithm::Supervised | Algorithm::SupervisedPpo | Algorithm::SupervisedNlpo
        )
    }

    pub fn uses_rl(self) -> bool {
        matches!(
            self,
            Algorithm::Ppo
                | Algorithm::Nlpo
                | Algorithm::A2c
                | Algorithm::SupervisedPpo
                | Algorithm::SupervisedNlpo
        )
    }

    pub fn uses_mask(self) -> bool {
        matches!(self, Algorithm::Nlpo | Algorithm::SupervisedNlpo)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown algorithm `{s}`")))
    }
}

#[cfg(test)]
mod tests;
