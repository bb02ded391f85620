//! Token-level generation environment with a sparse terminal reward.
//!
//! A state is a prompt followed by the tokens generated so far. Each step
//! appends one token; the episode ends on EOS or after `horizon` tokens, at
//! which point the reward function scores the result against the private
//! reference.

use rand::Rng;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS_ID};

pub const DEFAULT_HORIZON: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    prompt: Vec<TokenId>,
    actions: Vec<TokenId>,
    horizon: usize,
    done: bool,
    example: Example,
}

impl EnvState {
    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn actions(&self) -> &[TokenId] {
        &self.actions
    }

    pub fn t(&self) -> usize {
        self.actions.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// `prompt ++ actions`.
    pub fn observation(&self) -> Vec<TokenId> {
        let mut obs = self.prompt.clone();
        obs.extend_from_slice(&self.actions);
        obs
    }

    /// Generated tokens without a trailing EOS.
    pub fn generation(&self) -> &[TokenId] {
        crate::data::strip_eos(&self.actions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    /// Task reward, nonzero only on the terminal step.
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEnv {
    pub vocab_size: usize,
    pub horizon: usize,
}

impl TokenEnv {
    pub fn new(vocab_size: usize, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(TokenEnv {
            vocab_size,
            horizon,
        })
    }

    /// Starts an episode from a uniformly drawn example.
    pub fn reset<R: Rng + ?Sized>(&self, examples: &[Example], rng: &mut R) -> Result<EnvState> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let i = rng.gen_range(0..examples.len());
        Ok(self.reset_to(&examples[i]))
    }

    /// Starts an episode from a specific example.
    pub fn reset_to(&self, example: &Example) -> EnvState {
        EnvState {
            prompt: example.prompt.clone(),
            actions: Vec::new(),
            horizon: self.horizon,
            done: false,
            example: example.clone(),
        }
    }

    /// Appends `action`. On the terminal step `reward_fn` scores the final
    /// state against the episode's example.
    pub fn step<F>(&self, state: &EnvState, action: TokenId, reward_fn: F) -> Result<StepResult>
    where
        F: FnOnce(&EnvState, &Example) -> Result<f64>,
    {
        if state.done {
            return Err(Error::EpisodeDone);
        }
        if action >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: action,
                size: self.vocab_size,
            });
        }
        let mut next = state.clone();
        next.actions.push(action);
        next.done = action == EOS_ID || next.actions.len() >= next.horizon;
        let reward = if next.done {
            reward_fn(&next, &next.example)?
        } else {
            0.0
        };
        let done = next.done;
        Ok(StepResult {
            state: next,
            reward,
            done,
        })
    }
}
