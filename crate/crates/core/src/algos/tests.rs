use super::*;
use crate::data::{generate_task_dataset, Dataset, Example, Sizes, TaskKind};
use crate::env::TokenEnv;
use crate::model::optim::Adam;
use crate::model::ModelConfig;
use crate::reward::TaskScorer;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + gamma * values.get(t + 1).copied().unwrap_or(0.0) - values[t])
        .collect();
    (0..n)
        .map(|t| (t..n).map(|k| (gamma * lam).powi((k - t) as i32) * delta[k]).sum())
        .collect()
}

#[test]
fn gae_worked_example() {
    let est = compute_gae(&[0.0, 0.0, 1.0], &[0.5; 3], 0.95, 0.95).unwrap();
    let oracle = brute_gae(&[0.0, 0.0, 1.0], &[0.5; 3], 0.95, 0.95);
    for (a, b) in est.advantages.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((est.advantages[2] - 0.5).abs() < 1e-15);
    assert!(compute_gae(&[0.0], &[0.0, 1.0], 0.9, 0.9).is_err());
}

#[test]
fn gae_lambda_zero_is_td_residual() {
    let r = [0.1, -0.2, 0.7];
    let v = [0.3, 0.4, 0.1];
    let est = compute_gae(&r, &v, 0.9, 0.0).unwrap();
    assert_eq!(est.advantages[0], r[0] + 0.9 * v[1] - v[0]);
    assert_eq!(est.advantages[2], r[2] - v[2]);
}

#[test]
fn bandit_mode_returns_equal_total_reward() {
    let r = [0.0, 0.0, 0.0, 0.65];
    let v = [0.3, 0.4, 0.1, -0.6];
    let est = compute_gae(&r, &v, 1.0, 1.0).unwrap();
    let total: f64 = r.iter().sum();
    for ret in est.returns {
        assert!((ret - total).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn gae_matches_brute_force(
        steps in prop::collection::vec((-1f64..1.0, -1f64..1.0), 1..13),
        gamma in 0f64..1.0,
        lam in 0f64..1.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = steps.into_iter().unzip();
        let est = compute_gae(&r, &v, gamma, lam).unwrap();
        for (a, b) in est.advantages.iter().zip(brute_gae(&r, &v, gamma, lam)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        let one = compute_gae(&r, &v, gamma, 1.0).unwrap();
        for t in 0..r.len() {
            let togo: f64 = (t..r.len()).map(|k| gamma.powi((k - t) as i32) * r[k]).sum();
            prop_assert!((one.returns[t] - togo).abs() < 1e-10);
        }
    }

    #[test]
    fn normalization_ignores_constant_shift(
        adv in prop::collection::vec(-5f64..5.0, 2..20),
        shift in -100f64..100.0,
    ) {
        let shifted: Vec<f64> = adv.iter().map(|a| a + shift).collect();
        let a = normalize_advantages(&adv);
        let b = normalize_advantages(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }
}

#[test]
fn ppo_loss_terms() {
    let adv = normalize_advantages(&[1.0, -0.5, 2.0]);
    let lp = [-1.0, -2.0, -0.5];
    let l = ppo_loss(&lp, &lp, &adv, &[0.0; 3], &[0.0; 3], &[0.0; 3], 0.2, 0.5, 0.0).unwrap();
    assert!(l.policy.abs() < 1e-12);
    assert_eq!(l.clip_fraction, 0.0);

    let new = [(1.5f64).ln()];
    let l = ppo_loss(&[0.0], &new, &[2.0], &[1.0], &[0.0], &[0.0], 0.2, 0.5, 0.0).unwrap();
    assert!((l.policy + 1.2 * 2.0).abs() < 1e-12);
    assert_eq!(l.clip_fraction, 1.0);
    assert_eq!(l.d_new_log_probs[0], 0.0);
    assert!((l.value - 1.0).abs() < 1e-15);
    assert!((l.total - (l.policy + 0.5)).abs() < 1e-12);

    assert!(ppo_loss(&[0.0], &[1e6], &[1.0], &[0.0], &[0.0], &[0.0], 0.2, 0.5, 0.0).is_err());
}

#[test]
fn ppo_loss_gradient_matches_finite_differences() {
    let old = [-1.0, -0.7, -2.2];
    let new = [-0.9, -0.75, -2.0];
    let adv = [0.8, -1.1, 0.3];
    let ret = [0.5, 0.1, -0.2];
    let val = [0.2, 0.3, 0.0];
    let ent = [1.0, 1.2, 0.7];
    let f = |n: &[f64], v: &[f64], e: &[f64]| {
        ppo_loss(&old, n, &adv, &ret, v, e, 0.2, 0.5, 0.01).unwrap().total
    };
    let l = ppo_loss(&old, &new, &adv, &ret, &val, &ent, 0.2, 0.5, 0.01).unwrap();
    let h = 1e-6;
    for i in 0..3 {
        let (mut a, mut b) = (new, new);
        a[i] += h;
        b[i] -= h;
        let fd = (f(&a, &val, &ent) - f(&b, &val, &ent)) / (2.0 * h);
        assert!((fd - l.d_new_log_probs[i]).abs() < 1e-7);
        let (mut a, mut b) = (val, val);
        a[i] += h;
        b[i] -= h;
        let fd = (f(&new, &a, &ent) - f(&new, &b, &ent)) / (2.0 * h);
        assert!((fd - l.d_values[i]).abs() < 1e-7);
        let (mut a, mut b) = (ent, ent);
        a[i] += h;
        b[i] -= h;
        let fd = (f(&new, &val, &a) - f(&new, &val, &b)) / (2.0 * h);
        assert!((fd - l.d_entropies[i]).abs() < 1e-7);
    }
}

struct Fixture {
    ds: Dataset,
    policy: PolicyModel,
    reference: PolicyModel,
    scorer: TaskScorer,
    decode: DecodeConfig,
}

fn fixture(d_model: usize) -> Fixture {
    let ds = generate_task_dataset(TaskKind::KeyValueVerbalization, 5, Sizes {
        train: 40,
        val: 4,
        test: 4,
        generic: 40,
    })
    .unwrap();
    let cfg = ModelConfig {
        vocab_size: ds.vocab.len(),
        d_model,
        ..ModelConfig::default()
    };
    let reference = PolicyModel::new(cfg, 1).unwrap();
    let policy = reference.clone_as_actor_critic(2);
    Fixture {
        ds,
        policy,
        reference,
        scorer: TaskScorer::KeyValue,
        decode: DecodeConfig {
            max_new_tokens: 6,
            ..DecodeConfig::default()
        },
    }
}

fn rollout(fx: &Fixture, policy: &PolicyModel, mask: Option<&MaskState>, n: usize, seed: u64) -> Rollout {
    let spec = RolloutSpec {
        policy,
        reference: &fx.reference,
        mask,
        env: TokenEnv::new(fx.ds.vocab.len(), 6).unwrap(),
        examples: &fx.ds.train,
        decode: &fx.decode,
        scorer: &fx.scorer,
        beta: 0.05,
        n_episodes: n,
        seed,
    };
    let mut r = collect_rollout(&spec).unwrap();
    r.estimate_advantages(0.95, 0.95).unwrap();
    r
}

#[test]
fn rollout_records_consistent_steps() {
    let fx = fixture(16);
    let r = rollout(&fx, &fx.policy, None, 8, 3);
    assert_eq!(r.episodes.len(), 8);
    for ep in &r.episodes {
        let n = ep.len();
        assert!(n >= 1 && n <= 6);
        for v in [&ep.log_probs, &ep.ref_log_probs, &ep.values, &ep.rewards, &ep.kl] {
            assert_eq!(v.len(), n);
        }
        // logits identical to the reference at start: KL exactly zero
        assert!(ep.kl.iter().all(|&k| k == 0.0));
        assert_eq!(ep.rewards[n - 1], ep.task_reward);
        assert_eq!(ep.sequence().len(), ep.prompt.len() + n - 1);
    }
    assert_eq!(r, rollout(&fx, &fx.policy, None, 8, 3));
    assert_eq!(r.flat_actions().len(), r.num_steps());
}

#[test]
fn rollout_log_probs_match_update_forward() {
    let fx = fixture(16);
    let r = rollout(&fx, &fx.policy, None, 6, 9);
    let hp = UpdateParams::default();
    let idx: Vec<usize> = (0..r.episodes.len()).collect();
    let (_, _, st) = minibatch_loss(&fx.policy, &r, &idx, &hp, Objective::Clipped, None).unwrap();
    assert_eq!(st.approx_kl, 0.0);
    assert_eq!(st.clip_fraction, 0.0);
}

fn perturbed(m: &PolicyModel, seed: u64, scale: f64) -> PolicyModel {
    let mut p = m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in p.params_mut() {
        *x += rng.gen_range(-scale..scale);
    }
    p
}

fn fd_check(value: impl Fn(&PolicyModel) -> f64, grad: &[f64], m: &PolicyModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let h = 1e-5;
    for i in sample(&mut rng, m.num_params(), 64) {
        let mut a = m.clone();
        a.params_mut()[i] += h;
        let mut b = m.clone();
        b.params_mut()[i] -= h;
        let fd = (value(&a) - value(&b)) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1e-6);
        assert!((fd - grad[i]).abs() / denom < 1e-4, "coord {i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn update_losses_match_finite_differences() {
    let fx = fixture(8);
    let behavior = perturbed(&fx.policy, 4, 0.3);
    let r = rollout(&fx, &behavior, None, 5, 1);
    let current = perturbed(&behavior, 5, 0.05);
    let idx: Vec<usize> = (0..r.episodes.len()).collect();
    let hp = UpdateParams {
        ent_coef: 0.01,
        ..UpdateParams::default()
    };
    for obj in [Objective::Clipped, Objective::A2c] {
        let (_, g, _) = minibatch_loss(&current, &r, &idx, &hp, obj, None).unwrap();
        fd_check(
            |m| minibatch_loss_value(m, &r, &idx, &hp, obj, None).unwrap(),
            &g,
            &current,
        );
    }
    let exs: Vec<&Example> = fx.ds.train.iter().take(4).collect();
    let (_, g) = supervised_loss(&current, &exs, None).unwrap();
    fd_check(|m| supervised_loss_value(m, &exs, None).unwrap(), &g, &current);
}

#[test]
fn positive_advantage_raises_action_probability() {
    let fx = fixture(16);
    let mut r = rollout(&fx, &fx.policy, None, 1, 2);
    let ep = &mut r.episodes[0];
    ep.actions.truncate(1);
    for v in [
        &mut ep.log_probs,
        &mut ep.policy_log_probs,
        &mut ep.ref_log_probs,
        &mut ep.kl,
        &mut ep.values,
        &mut ep.rewards,
    ] {
        v.truncate(1);
    }
    ep.supports.truncate(1);
    ep.advantages = vec![1.0];
    ep.returns = vec![0.0];
    let before = ep.log_probs[0];
    let a = ep.actions[0];
    let window = ep.prompt.clone();
    let mut m = fx.policy.clone();
    let mut adam = Adam::new(m.num_params(), 1e-3);
    let hp = UpdateParams {
        epochs: 1,
        ..UpdateParams::default()
    };
    ppo_update(&mut m, &mut adam, &r, &hp, 0).unwrap();
    assert!(m.log_prob(&window, a).unwrap() > before);
}

#[test]
fn zero_epochs_leave_parameters() {
    let fx = fixture(16);
    let r = rollout(&fx, &fx.policy, None, 4, 2);
    let mut m = fx.policy.clone();
    let mut adam = Adam::new(m.num_params(), 1e-3);
    let hp = UpdateParams {
        epochs: 0,
        ..UpdateParams::default()
    };
    ppo_update(&mut m, &mut adam, &r, &hp, 0).unwrap();
    assert_eq!(m.params(), fx.policy.params());
}

#[test]
fn updates_are_deterministic_and_reject_stale_rollouts() {
    let fx = fixture(16);
    let r = rollout(&fx, &fx.policy, None, 8, 2);
    let hp = UpdateParams::default();
    let run = |f: fn(&mut PolicyModel, &mut Adam, &Rollout, &UpdateParams, u64) -> Result<UpdateStats>| {
        let mut m = fx.policy.clone();
        let mut adam = Adam::new(m.num_params(), 1e-3);
        f(&mut m, &mut adam, &r, &hp, 11).unwrap();
        m
    };
    let a = run(ppo_update);
    assert_eq!(a, run(ppo_update));
    assert_ne!(a.params(), fx.policy.params());
    assert_eq!(run(a2c_update), run(a2c_update));

    let mut stale = a.clone();
    let mut adam = Adam::new(stale.num_params(), 1e-3);
    assert!(matches!(
        ppo_update(&mut stale, &mut adam, &r, &hp, 0),
        Err(Error::StaleRollout { .. })
    ));
    let empty = Rollout {
        episodes: vec![],
        version: fx.policy.version,
    };
    let mut m = fx.policy.clone();
    assert!(matches!(
        ppo_update(&mut m, &mut adam, &empty, &hp, 0),
        Err(Error::EmptyRollout)
    ));
}

#[test]
fn zero_advantages_give_no_policy_gradient() {
    let fx = fixture(8);
    let mut r = rollout(&fx, &fx.policy, None, 3, 2);
    for ep in &mut r.episodes {
        ep.advantages = vec![0.0; ep.len()];
        ep.returns = ep.values.clone();
    }
    let idx = [0, 1, 2];
    let hp = UpdateParams::default();
    let (_, g, _) = minibatch_loss(&fx.policy, &r, &idx, &hp, Objective::A2c, None).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn a2c_and_ppo_first_steps_agree_in_sign() {
    let fx = fixture(8);
    let r = rollout(&fx, &fx.policy, None, 4, 6);
    let idx: Vec<usize> = (0..4).collect();
    let hp = UpdateParams {
        vf_coef: 0.0,
        ..UpdateParams::default()
    };
    let (_, gp, _) = minibatch_loss(&fx.policy, &r, &idx, &hp, Objective::Clipped, None).unwrap();
    let (_, ga, _) = minibatch_loss(&fx.policy, &r, &idx, &hp, Objective::A2c, None).unwrap();
    // at ratio one the two objectives share their gradient
    for (a, b) in gp.iter().zip(&ga) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

#[test]
fn nlpo_with_full_nucleus_matches_ppo_exactly() {
    let fx = fixture(16);
    let hp = UpdateParams::default();
    let mut ppo = fx.policy.clone();
    let mut nlpo = fx.policy.clone();
    let mut mask = MaskState::new(&nlpo, 1.0, 2).unwrap();
    let mut adam_a = Adam::new(ppo.num_params(), 1e-3);
    let mut adam_b = Adam::new(nlpo.num_params(), 1e-3);
    for u in 0..4 {
        let ra = rollout(&fx, &ppo, None, 6, u);
        let rb = rollout(&fx, &nlpo, Some(&mask), 6, u);
        assert_eq!(ra, rb);
        ppo_update(&mut ppo, &mut adam_a, &ra, &hp, u).unwrap();
        ppo_update(&mut nlpo, &mut adam_b, &rb, &hp, u).unwrap();
        mask.sync(&nlpo);
        assert_eq!(ppo.params(), nlpo.params());
    }
}

#[test]
fn nlpo_mask_restricts_sampling() {
    let fx = fixture(16);
    let mut mask = MaskState::new(&fx.policy, 0.5, 3).unwrap();
    // make the masking policy put almost all mass on token 7
    let lay = mask.model.layout().clone();
    mask.model.params_mut()[lay.b_out.start + 7] = 50.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let window = fx.ds.train[0].prompt.clone();
    let s = nlpo_step_policy(&fx.policy, &mask, &window, 5, &fx.decode, &mut rng).unwrap();
    assert_eq!((s.action, s.log_prob), (7, 0.0));

    let r = rollout(&fx, &fx.policy, Some(&mask), 3, 1);
    for ep in &r.episodes {
        assert!(ep.actions.iter().all(|&a| a == 7));
        assert!(ep.log_probs.iter().all(|&l| l == 0.0));
        // the shaping term still uses the unrestricted policy
        assert!(ep.policy_log_probs.iter().all(|&l| l < 0.0));
    }
}

#[test]
fn mask_sync_schedule() {
    let fx = fixture(8);
    let mut m = fx.policy.clone();
    let mut mask = MaskState::new(&m, 0.9, 5).unwrap();
    let snapshot = mask.model.clone();
    for i in 0..4 {
        m.params_mut()[0] += 0.1;
        mask.sync(&m);
        assert_eq!(mask.model, snapshot, "after {} updates", i + 1);
    }
    m.params_mut()[0] += 0.1;
    mask.sync(&m);
    assert_eq!(mask.model.params(), m.params());
    assert_eq!(mask.counter, 0);

    let mut every = MaskState::new(&m, 0.9, 1).unwrap();
    m.params_mut()[1] += 0.1;
    every.sync(&m);
    assert_eq!(every.model.params(), m.params());
}

#[test]
fn supervised_memorizes_small_set() {
    let fx = fixture(16);
    let mut m = fx.policy.clone();
    let exs: Vec<&Example> = fx.ds.train.iter().take(10).collect();
    let mut adam = Adam::new(m.num_params(), 1e-2);
    let mut last = f64::INFINITY;
    for step in 0..50 {
        let s = supervised_update(&mut m, &mut adam, &exs, 1.0, None).unwrap();
        assert!(s.loss < last || step == 0, "step {step}: {} after {last}", s.loss);
        last = s.loss;
    }
    assert!(last < 1.0, "final loss {last}");
}

#[test]
fn algorithm_names_roundtrip() {
    for a in [
        Algorithm::ZeroShot,
        Algorithm::Supervised,
        Algorithm::Ppo,
        Algorithm::Nlpo,
        Algorithm::A2c,
        Algorithm::SupervisedPpo,
        Algorithm::SupervisedNlpo,
    ] {
        assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
    }
    assert!("sft".parse::<Algorithm>().is_err());
}
