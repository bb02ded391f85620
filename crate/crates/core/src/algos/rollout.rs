use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{compute_gae, MaskState};
use crate::data::Example;
use crate::env::TokenEnv;
use crate::error::{Error, Result};
use crate::model::decode::{sample_from_logits, DecodeConfig};
use crate::model::math::{kl_divergence, log_softmax};
use crate::model::{mix_seed, PolicyModel};
use crate::reward::{kl_regularized_rewards, TaskScorer};
use crate::vocab::{truncate_left, TokenId};

/// One finished episode with everything the updates need.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub example_index: usize,
    pub prompt: Vec<TokenId>,
    pub actions: Vec<TokenId>,
    /// Log-probability of each action under the distribution it was drawn
    /// from (decode filters and NLPO mask applied).
    pub log_probs: Vec<f64>,
    /// Log-probability under the unrestricted policy.
    pub policy_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    /// Exact per-step `KL(π_θ ‖ ρ)` over the full vocabulary.
    pub kl: Vec<f64>,
    pub values: Vec<f64>,
    /// Support each action was drawn from; `None` is the full vocabulary.
    pub supports: Vec<Option<Vec<bool>>>,
    pub task_reward: f64,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Model input whose outputs at positions `first_output()..` score the
    /// episode's actions: the prompt followed by all but the last action.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.actions[..self.actions.len().saturating_sub(1)]);
        s
    }

    pub fn first_output(&self) -> usize {
        self.prompt.len() - 1
    }

    pub fn dones(&self) -> Vec<bool> {
        (0..self.len()).map(|t| t + 1 == self.len()).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Recomputes shaped rewards for coefficient `beta`.
    pub fn shape(&mut self, beta: f64) -> Result<()> {
        self.rewards =
            kl_regularized_rewards(&self.policy_log_probs, &self.ref_log_probs, self.task_reward, beta)?;
        Ok(())
    }

    pub fn estimate_advantages(&mut self, gamma: f64, lam: f64) -> Result<()> {
        let est = compute_gae(&self.rewards, &self.values, gamma, lam)?;
        self.advantages = est.advantages;
        self.returns = est.returns;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub episodes: Vec<Episode>,
    /// Version of the policy that generated the episodes.
    pub version: u64,
}

impl Rollout {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn shape(&mut self, beta: f64) -> Result<()> {
        self.episodes.iter_mut().try_for_each(|e| e.shape(beta))
    }

    pub fn estimate_advantages(&mut self, gamma: f64, lam: f64) -> Result<()> {
        self.episodes
            .iter_mut()
            .try_for_each(|e| e.estimate_advantages(gamma, lam))
    }

    fn mean_over_steps(&self, f: impl Fn(&Episode) -> &[f64]) -> f64 {
        let n = self.num_steps();
        if n == 0 {
            return 0.0;
        }
        self.episodes.iter().flat_map(|e| f(e).iter()).sum::<f64>() / n as f64
    }

    fn mean_over_episodes(&self, f: impl Fn(&Episode) -> f64) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(f).sum::<f64>() / self.episodes.len() as f64
    }

    /// Mean exact per-token KL to the reference model.
    pub fn mean_kl(&self) -> f64 {
        self.mean_over_steps(|e| &e.kl)
    }

    pub fn mean_task_reward(&self) -> f64 {
        self.mean_over_episodes(|e| e.task_reward)
    }

    pub fn mean_total_reward(&self) -> f64 {
        self.mean_over_episodes(Episode::total_reward)
    }

    pub fn mean_length(&self) -> f64 {
        self.mean_over_episodes(|e| e.len() as f64)
    }

    // flattened per-step views

    pub fn flat_actions(&self) -> Vec<TokenId> {
        self.episodes.iter().flat_map(|e| e.actions.iter().copied()).collect()
    }

    pub fn flat_log_probs(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.log_probs.iter().copied()).collect()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.values.iter().copied()).collect()
    }

    pub fn flat_rewards(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.rewards.iter().copied()).collect()
    }

    pub fn flat_advantages(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.advantages.iter().copied()).collect()
    }
}

/// Everything needed to gather one batch of episodes.
pub struct RolloutSpec<'a> {
    pub policy: &'a PolicyModel,
    pub reference: &'a PolicyModel,
    pub mask: Option<&'a MaskState>,
    pub env: TokenEnv,
    pub examples: &'a [Example],
    pub decode: &'a DecodeConfig,
    pub scorer: &'a TaskScorer,
    pub beta: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

/// Runs `n_episodes` episodes in parallel. Episode `i` draws all of its
/// randomness from a generator seeded by `(seed, i)`, so the result does not
/// depend on the thread count. Rewards are shaped with `beta`; advantages are
/// left empty.
pub fn collect_rollout(spec: &RolloutSpec<'_>) -> Result<Rollout> {
    let episodes = (0..spec.n_episodes)
        .into_par_iter()
        .map(|i| run_episode(spec, mix_seed(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        episodes,
        version: spec.policy.version,
    })
}

fn prompt_window(prompt: &[TokenId], context: usize, horizon: usize) -> &[TokenId] {
    truncate_left(prompt, context.saturating_sub(horizon).max(1))
}

fn run_episode(spec: &RolloutSpec<'_>, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if spec.examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let example_index = rand::Rng::gen_range(&mut rng, 0..spec.examples.len());
    let example = &spec.examples[example_index];
    let mut state = spec.env.reset_to(example);
    let prompt = prompt_window(
        state.prompt(),
        spec.policy.config().context_len,
        spec.env.horizon,
    )
    .to_vec();

    let mut pol = spec.policy.begin(&prompt)?;
    let mut reference = spec.reference.begin(&prompt)?;
    let mut masker = spec.mask.map(|m| m.model.begin(&prompt)).transpose()?;

    let mut ep = Episode {
        example_index,
        prompt,
        actions: Vec::new(),
        log_probs: Vec::new(),
        policy_log_probs: Vec::new(),
        ref_log_probs: Vec::new(),
        kl: Vec::new(),
        values: Vec::new(),
        supports: Vec::new(),
        task_reward: 0.0,
        rewards: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    loop {
        let out = pol.output();
        let external = match (spec.mask, &masker) {
            (Some(m), Some(ms)) => Some(m.keep_mask(&ms.output().logits)?),
            _ => None,
        };
        let sampled = sample_from_logits(
            &out.logits,
            spec.decode,
            state.t(),
            external.as_deref(),
            &mut rng,
        )?;
        let a = sampled.action;
        let lp_full = log_softmax(&out.logits, None, 1.0);
        let lr_full = log_softmax(&reference.output().logits, None, 1.0);
        ep.actions.push(a);
        ep.log_probs.push(sampled.log_prob);
        ep.policy_log_probs.push(lp_full[a]);
        ep.ref_log_probs.push(lr_full[a]);
        ep.kl.push(kl_divergence(&lp_full, &lr_full));
        ep.values.push(out.value);
        ep.supports.push(sampled.keep);

        let step = spec.env.step(&state, a, |s, ex| spec.scorer.score(s.generation(), ex))?;
        state = step.state;
        if step.done {
            ep.task_reward = step.reward;
            break;
        }
        spec.policy.advance(&mut pol, a)?;
        spec.reference.advance(&mut reference, a)?;
        if let (Some(m), Some(ms)) = (spec.mask, masker.as_mut()) {
            m.model.advance(ms, a)?;
        }
    }
    ep.shape(spec.beta)?;
    Ok(ep)
}

/// Samples one continuation for `prompt`; the result ends with EOS unless
/// the horizon was reached first.
pub fn generate(
    model: &PolicyModel,
    prompt: &[TokenId],
    decode: &DecodeConfig,
    horizon: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = prompt_window(prompt, model.config().context_len, horizon);
    let mut st = model.begin(prompt)?;
    let mut out = Vec::new();
    for t in 0..horizon {
        let s = sample_from_logits(&st.output().logits, decode, t, None, &mut rng)?;
        out.push(s.action);
        if s.action == crate::vocab::EOS_ID {
            break;
        }
        if t + 1 < horizon {
            model.advance(&mut st, s.action)?;
        }
    }
    Ok(out)
}
