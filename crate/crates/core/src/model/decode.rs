//! Decoding filters and action sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::math::log_softmax;
use super::PolicyModel;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    /// EOS is unavailable until this many tokens have been generated.
    pub min_length: usize,
    pub max_new_tokens: usize,
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Sample,
            top_k: None,
            top_p: None,
            min_length: 0,
            max_new_tokens: 16,
            temperature: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config("top_p must lie in (0, 1]".into()));
            }
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Keep-mask combining the min-length rule, an external mask and the
    /// top-k / top-p filters, or `None` when every token stays available.
    ///
    /// Hard constraints apply first; top-k and top-p then act on the
    /// renormalized temperature-scaled distribution that remains.
    pub fn support(
        &self,
        logits: &[f64],
        generated: usize,
        external: Option<&[bool]>,
    ) -> Result<Option<Vec<bool>>> {
        let n = logits.len();
        let mut keep: Vec<bool> = match external {
            Some(m) if m.len() != n => {
                return Err(Error::LengthMismatch {
                    what: "keep-mask",
                    left: m.len(),
                    right: n,
                })
            }
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        if generated < self.min_length && EOS_ID < n {
            keep[EOS_ID] = false;
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::AllMasked);
        }
        if let Some(k) = self.top_k {
            let mut order: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            for &i in order.iter().skip(k) {
                keep[i] = false;
            }
        }
        if let Some(p) = self.top_p {
            let probs: Vec<f64> = log_softmax(logits, Some(&keep), self.temperature)
                .into_iter()
                .map(f64::exp)
                .collect();
            let nucleus = top_p_mask(&probs, p)?;
            keep.iter_mut().zip(nucleus).for_each(|(k, m)| *k &= m);
        }
        Ok(if keep.iter().all(|&k| k) { None } else { Some(keep) })
    }
}

/// Smallest probability-sorted prefix whose cumulative mass reaches `p`.
/// Ties are broken by ascending token id and at least one token is kept.
pub fn top_p_mask(probs: &[f64], p: f64) -> Result<Vec<bool>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("top-p fraction {p} outside (0, 1]")));
    }
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || (total - 1.0).abs() > 1e-9 || probs.iter().any(|&q| !(q >= 0.0)) {
        return Err(Error::NotNormalized(total));
    }
    if p >= 1.0 {
        return Ok(vec![true; probs.len()]);
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = vec![false; probs.len()];
    let mut cum = 0.0;
    for &i in &order {
        keep[i] = true;
        cum += probs[i];
        if cum >= p {
            return Ok(keep);
        }
    }
    // rounding left the prefix just short of p
    Ok(vec![true; probs.len()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub action: TokenId,
    /// Log-probability under the filtered distribution actually sampled.
    pub log_prob: f64,
    /// Support used, `None` when unrestricted.
    pub keep: Option<Vec<bool>>,
}

/// Picks an action from `logits` under `dc`, restricted to `keep`.
pub fn choose<R: Rng + ?Sized>(
    logits: &[f64],
    dc: &DecodeConfig,
    keep: Option<&[bool]>,
    rng: &mut R,
) -> Result<(TokenId, f64)> {
    if let Some(k) = keep {
        if !k.iter().any(|&x| x) {
            return Err(Error::AllMasked);
        }
    }
    let lp = log_softmax(logits, keep, dc.temperature);
    let action = match dc.mode {
        DecodeMode::Greedy => {
            let mut best = None;
            for (i, &v) in lp.iter().enumerate() {
                if v.is_finite() && best.map_or(true, |b: usize| v > lp[b]) {
                    best = Some(i);
                }
            }
            best.ok_or(Error::AllMasked)?
        }
        DecodeMode::Sample => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut pick = None;
            for (i, &v) in lp.iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                cum += v.exp();
                pick = Some(i);
                if u < cum {
                    break;
                }
            }
            pick.ok_or(Error::AllMasked)?
        }
    };
    Ok((action, lp[action]))
}

/// Applies the decode filters and samples in one call.
pub fn sample_from_logits<R: Rng + ?Sized>(
    logits: &[f64],
    dc: &DecodeConfig,
    generated: usize,
    external: Option<&[bool]>,
    rng: &mut R,
) -> Result<Sampled> {
    let keep = dc.support(logits, generated, external)?;
    let (action, log_prob) = choose(logits, dc, keep.as_deref(), rng)?;
    Ok(Sampled {
        action,
        log_prob,
        keep,
    })
}

impl PolicyModel {
    /// Samples the next action for `window`, where `generated` tokens of the
    /// window are already model output (for the min-length rule).
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        window: &[TokenId],
        generated: usize,
        dc: &DecodeConfig,
        mask: Option<&[bool]>,
        rng: &mut R,
    ) -> Result<Sampled> {
        let out = self.forward(window)?;
        sample_from_logits(&out.logits, dc, generated, mask, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn greedy() -> DecodeConfig {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn top_p_prefix() {
        let keep = top_p_mask(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap();
        assert_eq!(keep, vec![true, true, true, false]);
        assert_eq!(top_p_mask(&[0.5, 0.3, 0.15, 0.05], 1.0).unwrap(), vec![true; 4]);
        assert_eq!(
            top_p_mask(&[1.0, 0.0, 0.0], 0.3).unwrap(),
            vec![true, false, false]
        );
    }

    #[test]
    fn top_p_ties_prefer_low_ids() {
        assert_eq!(
            top_p_mask(&[0.25; 4], 0.5).unwrap(),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn top_p_rejects_unnormalized() {
        assert!(matches!(top_p_mask(&[0.5, 0.4], 0.9), Err(Error::NotNormalized(_))));
        assert!(top_p_mask(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn greedy_ties_pick_lowest_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = choose(&[1.0, 3.0, 3.0, 0.0], &greedy(), None, &mut rng).unwrap();
        assert_eq!(a, 1);
    }

    #[test]
    fn forced_choice_has_zero_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut keep = vec![false; 10];
        keep[7] = true;
        let dc = DecodeConfig::default();
        let (a, lp) = choose(&[0.3; 10], &dc, Some(&keep), &mut rng).unwrap();
        assert_eq!((a, lp), (7, 0.0));
        assert!(matches!(
            choose(&[0.3; 10], &dc, Some(&[false; 10]), &mut rng),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn min_length_blocks_eos() {
        let dc = DecodeConfig {
            min_length: 2,
            ..greedy()
        };
        let mut logits = vec![0.0; 5];
        logits[EOS_ID] = 10.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_from_logits(&logits, &dc, 1, None, &mut rng).unwrap();
        assert_ne!(s.action, EOS_ID);
        let s = sample_from_logits(&logits, &dc, 2, None, &mut rng).unwrap();
        assert_eq!(s.action, EOS_ID);
        assert!(s.keep.is_none());
    }

    #[test]
    fn top_k_keeps_largest_logits() {
        let dc = DecodeConfig {
            top_k: Some(2),
            ..DecodeConfig::default()
        };
        let keep = dc.support(&[0.1, 2.0, 1.0, 2.0], 5, None).unwrap().unwrap();
        assert_eq!(keep, vec![false, true, false, true]);
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let logits: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
        let dc = DecodeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[choose(&logits, &dc, None, &mut rng).unwrap().0] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }
}
