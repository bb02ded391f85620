use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::{Episode, Rollout};
use super::{clipped_surrogate, normalize_advantages};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::math::log_softmax;
use crate::model::optim::{clip_grad_norm, Adam};
use crate::model::{mix_seed, OutputGrads, PolicyModel, SeqOutputs};
use crate::vocab::{truncate_left, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateParams {
    pub epochs: usize,
    /// Minimum number of steps per minibatch; whole episodes are packed
    /// until it is reached.
    pub minibatch_size: usize,
    pub eps_clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    /// Sampling temperature the rollouts used.
    pub temperature: f64,
}

impl Default for UpdateParams {
    fn default() -> Self {
        UpdateParams {
            epochs: 5,
            minibatch_size: 64,
            eps_clip: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Clipped probability-ratio surrogate.
    Clipped,
    /// Plain `log π · A` policy gradient.
    A2c,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Exact mean per-token KL to the reference over the rollout.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean `old − new` log-probability after each minibatch's forward pass.
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub gradient_steps: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    policy: f64,
    value: f64,
    entropy: f64,
    clipped: f64,
    approx_kl: f64,
}

/// Loss, gradient and step statistics for one minibatch of episodes.
/// Advantages are normalized across the minibatch's steps and every term is
/// averaged over those steps.
pub fn minibatch_loss(
    model: &PolicyModel,
    rollout: &Rollout,
    episodes: &[usize],
    hp: &UpdateParams,
    objective: Objective,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>, UpdateStats)> {
    let (seqs, adv) = prepare(rollout, episodes)?;
    let n = adv.iter().map(Vec::len).sum::<usize>();
    let parts: Vec<Mutex<Option<Result<Partial>>>> = episodes.iter().map(|_| Mutex::new(None)).collect();
    let batch: Vec<(&[TokenId], usize)> = seqs
        .iter()
        .zip(episodes)
        .map(|(s, &e)| (s.as_slice(), rollout.episodes[e].first_output()))
        .collect();
    let result = model.gradient(&batch, dropout_seed, |i, out, g| {
        let ep = &rollout.episodes[episodes[i]];
        let r = episode_loss(ep, &adv[i], n, out, g, hp, objective);
        let loss = match &r {
            Ok((l, _)) => *l,
            Err(_) => f64::NAN,
        };
        *parts[i].lock().expect("unpoisoned") = Some(r.map(|(_, p)| p));
        loss
    });
    let mut stats = UpdateStats::default();
    for p in parts {
        let p = p.into_inner().expect("unpoisoned").expect("every episode visited")?;
        stats.policy_loss += p.policy;
        stats.value_loss += p.value;
        stats.entropy += p.entropy;
        stats.clip_fraction += p.clipped;
        stats.approx_kl += p.approx_kl;
    }
    let (loss, grad) = result?;
    Ok((loss, grad, stats))
}

/// [`minibatch_loss`] without the gradient, for finite-difference checks.
pub fn minibatch_loss_value(
    model: &PolicyModel,
    rollout: &Rollout,
    episodes: &[usize],
    hp: &UpdateParams,
    objective: Objective,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let (seqs, adv) = prepare(rollout, episodes)?;
    let n = adv.iter().map(Vec::len).sum::<usize>();
    let batch: Vec<(&[TokenId], usize)> = seqs
        .iter()
        .zip(episodes)
        .map(|(s, &e)| (s.as_slice(), rollout.episodes[e].first_output()))
        .collect();
    model.loss_value(&batch, dropout_seed, |i, out, g| {
        let ep = &rollout.episodes[episodes[i]];
        episode_loss(ep, &adv[i], n, out, g, hp, objective).map_or(f64::NAN, |(l, _)| l)
    })
}

type Prepared = (Vec<Vec<TokenId>>, Vec<Vec<f64>>);

fn prepare(rollout: &Rollout, episodes: &[usize]) -> Result<Prepared> {
    if episodes.is_empty() {
        return Err(Error::EmptyRollout);
    }
    let mut flat = Vec::new();
    for &e in episodes {
        let ep = &rollout.episodes[e];
        if ep.advantages.len() != ep.len() || ep.returns.len() != ep.len() {
            return Err(Error::Config("advantages must be estimated before updating".into()));
        }
        flat.extend_from_slice(&ep.advantages);
    }
    let norm = normalize_advantages(&flat);
    let mut at = 0;
    let adv = episodes
        .iter()
        .map(|&e| {
            let len = rollout.episodes[e].len();
            let a = norm[at..at + len].to_vec();
            at += len;
            a
        })
        .collect();
    let seqs = episodes.iter().map(|&e| rollout.episodes[e].sequence()).collect();
    Ok((seqs, adv))
}

fn episode_loss(
    ep: &Episode,
    adv: &[f64],
    n: usize,
    out: &SeqOutputs,
    g: &mut OutputGrads,
    hp: &UpdateParams,
    objective: Objective,
) -> Result<(f64, Partial)> {
    let inv = 1.0 / n as f64;
    let temp = hp.temperature;
    let mut loss = 0.0;
    let mut part = Partial::default();
    let f = ep.first_output();
    for t in 0..ep.len() {
        let pos = f + t;
        let a = ep.actions[t];
        let lp = log_softmax(out.logits(pos), ep.supports[t].as_deref(), temp);
        let new_lp = lp[a];
        let entropy = -lp
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>();

        let (policy_term, d_new) = match objective {
            Objective::Clipped => {
                let (obj, dobj, clipped) = clipped_surrogate(ep.log_probs[t], new_lp, adv[t], hp.eps_clip)?;
                if clipped {
                    part.clipped += inv;
                }
                (-obj * inv, -dobj * inv)
            }
            Objective::A2c => {
                if !new_lp.is_finite() {
                    return Err(Error::NonFinite {
                        what: "log-probability",
                        detail: format!("action {a} at step {t}"),
                    });
                }
                (-new_lp * adv[t] * inv, -adv[t] * inv)
            }
        };
        let err = out.values[pos] - ep.returns[t];
        let value_term = err * err * inv;
        loss += policy_term + hp.vf_coef * value_term - hp.ent_coef * entropy * inv;
        part.policy += policy_term;
        part.value += value_term;
        part.entropy += entropy * inv;
        part.approx_kl += (ep.log_probs[t] - new_lp) * inv;

        g.dvalues[pos] += hp.vf_coef * 2.0 * err * inv;
        let d_ent = -hp.ent_coef * inv;
        let dl = g.logits_mut(pos);
        for (j, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let p = l.exp();
            let onehot = if j == a { 1.0 } else { 0.0 };
            dl[j] += (d_new * (onehot - p) - d_ent * p * (l + entropy)) / temp;
        }
    }
    Ok((loss, part))
}

fn check_rollout(model: &PolicyModel, rollout: &Rollout) -> Result<()> {
    if rollout.episodes.is_empty() || rollout.num_steps() == 0 {
        return Err(Error::EmptyRollout);
    }
    if rollout.version != model.version {
        return Err(Error::StaleRollout {
            rollout: rollout.version,
            model: model.version,
        });
    }
    Ok(())
}

fn run_update(
    model: &mut PolicyModel,
    adam: &mut Adam,
    rollout: &Rollout,
    hp: &UpdateParams,
    epochs: usize,
    objective: Objective,
    seed: u64,
) -> Result<UpdateStats> {
    check_rollout(model, rollout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let use_dropout = model.config().dropout > 0.0;
    let mut stats = UpdateStats {
        mean_kl: rollout.mean_kl(),
        ..UpdateStats::default()
    };
    let mut order: Vec<usize> = (0..rollout.episodes.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut start = 0;
        while start < order.len() {
            let mut end = start;
            let mut steps = 0;
            while end < order.len() && steps < hp.minibatch_size.max(1) {
                steps += rollout.episodes[order[end]].len();
                end += 1;
            }
            let dropout_seed = use_dropout.then(|| mix_seed(seed, stats.gradient_steps as u64));
            let (_, mut grad, mb) =
                minibatch_loss(model, rollout, &order[start..end], hp, objective, dropout_seed)?;
            let norm = clip_grad_norm(&mut grad, hp.max_grad_norm);
            adam.apply(model.params_mut(), &grad);
            stats.policy_loss += mb.policy_loss;
            stats.value_loss += mb.value_loss;
            stats.entropy += mb.entropy;
            stats.clip_fraction += mb.clip_fraction;
            stats.approx_kl += mb.approx_kl;
            stats.grad_norm += norm;
            stats.gradient_steps += 1;
            start = end;
        }
    }
    if stats.gradient_steps > 0 {
        let k = stats.gradient_steps as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.clip_fraction /= k;
        stats.approx_kl /= k;
        stats.grad_norm /= k;
    }
    model.version += 1;
    Ok(stats)
}

/// PPO: `hp.epochs` passes of clipped-surrogate minibatch steps over the
/// shuffled episodes. `seed` drives the shuffling (and dropout, if enabled).
pub fn ppo_update(
    model: &mut PolicyModel,
    adam: &mut Adam,
    rollout: &Rollout,
    hp: &UpdateParams,
    seed: u64,
) -> Result<UpdateStats> {
    run_update(model, adam, rollout, hp, hp.epochs, Objective::Clipped, seed)
}

/// A2C: one pass of unclipped policy-gradient minibatch steps.
pub fn a2c_update(
    model: &mut PolicyModel,
    adam: &mut Adam,
    rollout: &Rollout,
    hp: &UpdateParams,
    seed: u64,
) -> Result<UpdateStats> {
    run_update(model, adam, rollout, hp, 1, Objective::A2c, seed)
}

// ---------------------------------------------------------------------------
// Supervised

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedStats {
    pub loss: f64,
    pub grad_norm: f64,
}

fn teacher_forced(model: &PolicyModel, ex: &Example) -> (Vec<TokenId>, usize) {
    let room = (model.config().context_len + 1).saturating_sub(ex.reference.len()).max(1);
    let prompt = truncate_left(&ex.prompt, room);
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&ex.reference[..ex.reference.len().saturating_sub(1)]);
    (seq, prompt.len() - 1)
}

fn supervised_batch(model: &PolicyModel, examples: &[&Example]) -> Result<(Vec<(Vec<TokenId>, usize)>, usize)> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seqs: Vec<_> = examples.iter().map(|e| teacher_forced(model, e)).collect();
    let n = examples.iter().map(|e| e.reference.len()).sum();
    Ok((seqs, n))
}

fn cross_entropy(ex: &Example, n: usize, out: &SeqOutputs, g: &mut OutputGrads) -> f64 {
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for (r, &target) in ex.reference.iter().enumerate() {
        let pos = out.first_output + r;
        let lp = log_softmax(out.logits(pos), None, 1.0);
        loss -= lp[target] * inv;
        let d = g.logits_mut(pos);
        for (j, l) in lp.iter().enumerate() {
            d[j] += l.exp() * inv;
        }
        d[target] -= inv;
    }
    loss
}

/// Mean next-token cross-entropy of the references (prompt tokens are
/// context only) and its gradient.
pub fn supervised_loss(
    model: &PolicyModel,
    examples: &[&Example],
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<f64>)> {
    let (seqs, n) = supervised_batch(model, examples)?;
    let batch: Vec<(&[TokenId], usize)> = seqs.iter().map(|(s, f)| (s.as_slice(), *f)).collect();
    model.gradient(&batch, dropout_seed, |i, out, g| cross_entropy(examples[i], n, out, g))
}

pub fn supervised_loss_value(
    model: &PolicyModel,
    examples: &[&Example],
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let (seqs, n) = supervised_batch(model, examples)?;
    let batch: Vec<(&[TokenId], usize)> = seqs.iter().map(|(s, f)| (s.as_slice(), *f)).collect();
    model.loss_value(&batch, dropout_seed, |i, out, g| cross_entropy(examples[i], n, out, g))
}

/// One clipped Adam step on the teacher-forced cross-entropy of `examples`.
pub fn supervised_update(
    model: &mut PolicyModel,
    adam: &mut Adam,
    examples: &[&Example],
    max_grad_norm: f64,
    dropout_seed: Option<u64>,
) -> Result<SupervisedStats> {
    let (loss, mut grad) = supervised_loss(model, examples, dropout_seed)?;
    let grad_norm = clip_grad_norm(&mut grad, max_grad_norm);
    adam.apply(model.params_mut(), &grad);
    model.version += 1;
    Ok(SupervisedStats { loss, grad_norm })
}
