//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 2 3`.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqrl::algos::{
    compute_gae, minibatch_loss, minibatch_loss_value, supervised_loss, supervised_loss_value, Episode,
    Objective, Rollout, UpdateParams,
};
use seqrl::data::{Example, Meta};
use seqrl::harness::{TrainConfig, Trainer};
use seqrl::model::{ModelConfig, PolicyModel};
use seqrl::vocab::{BOS_ID, EOS_ID};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

// ---------------------------------------------------------------------------
// Shared training runs

#[derive(Debug, Clone)]
struct RunSummary {
    val_task: f64,
    val_perplexity: f64,
    trailing_kl: f64,
    secs: f64,
    run_dir: Option<PathBuf>,
}

static SCRATCH: LazyLock<tempfile::TempDir> = LazyLock::new(|| tempfile::tempdir().expect("tempdir"));
static RUNS: LazyLock<Mutex<HashMap<String, Vec<RunSummary>>>> = LazyLock::new(Default::default);

fn config(overrides: &[&str]) -> TrainConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    TrainConfig::default().with_overrides(&o).expect("valid overrides")
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn trailing_kl(t: &Trainer) -> f64 {
    mean(t.rows().iter().rev().filter_map(|r| r.kl).take(20))
}

/// Runs (or recalls) every seed of a configuration. With `on_disk` the runs
/// write their run directories under the scratch dir.
fn runs(label: &str, overrides: &[&str], on_disk: bool) -> Vec<RunSummary> {
    if let Some(r) = RUNS.lock().unwrap().get(label) {
        return r.clone();
    }
    let mut cfg = config(overrides);
    cfg.output_dir = SCRATCH.path().join(label);
    let out: Vec<RunSummary> = SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let mut t = if on_disk {
                Trainer::create(&cfg, seed, false)
            } else {
                Trainer::new(&cfg, seed)
            }
            .expect("trainer");
            t.run_to_end().expect("training");
            let kl = trailing_kl(&t);
            let run_dir = t.run_dir().map(Path::to_path_buf);
            let report = t.finish().expect("final evaluation");
            let s = RunSummary {
                val_task: report.val.get("task_metric").expect("task metric"),
                val_perplexity: report.val.get("perplexity").expect("perplexity"),
                trailing_kl: kl,
                secs: start.elapsed().as_secs_f64(),
                run_dir,
            };
            eprintln!(
                "  [{label} seed {seed}] task {:.3} perplexity {:.2} trailing kl {:.4} ({:.0}s)",
                s.val_task, s.val_perplexity, s.trailing_kl, s.secs
            );
            s
        })
        .collect();
    RUNS.lock().unwrap().insert(label.to_owned(), out.clone());
    out
}

fn kl_runs() -> Vec<RunSummary> {
    runs("ppo-kl0.05", &["kl.target=0.05"], true)
}

fn zero_shot() -> Vec<RunSummary> {
    runs("zero-shot", &["algorithm=zero-shot"], false)
}

fn fmt_list(xs: impl IntoIterator<Item = f64>, digits: usize) -> String {
    xs.into_iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------------------
// 1: gradients

fn tiny_model(seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        context_len: 16,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    PolicyModel::new(cfg, seed).unwrap().clone_as_actor_critic(seed + 1)
}

fn random_episode(rng: &mut ChaCha8Rng) -> Episode {
    let p = rng.gen_range(1..5);
    let n = rng.gen_range(1..7);
    let mut prompt = vec![BOS_ID];
    prompt.extend((0..p).map(|_| rng.gen_range(3..11)));
    let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(2..11)).collect();
    let lp: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.5..-1.5)).collect();
    let mut ep = Episode {
        example_index: 0,
        prompt,
        actions,
        log_probs: lp.clone(),
        policy_log_probs: lp,
        ref_log_probs: (0..n).map(|_| rng.gen_range(-3.5..-1.5)).collect(),
        kl: vec![0.0; n],
        values: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        supports: vec![None; n],
        task_reward: rng.gen_range(0.0..1.0),
        rewards: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
    };
    ep.shape(0.1).unwrap();
    ep.estimate_advantages(0.95, 0.95).unwrap();
    ep
}

/// Worst relative error between `grad` and central differences of `value`
/// over `k` random coordinates.
fn fd_worst(model: &PolicyModel, grad: &[f64], k: usize, value: impl Fn(&PolicyModel) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    sample(&mut rng, model.num_params(), k)
        .into_iter()
        .map(|i| {
            let mut a = model.clone();
            a.params_mut()[i] += h;
            let mut b = model.clone();
            b.params_mut()[i] -= h;
            let fd = (value(&a) - value(&b)) / (2.0 * h);
            (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let model = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rollout = Rollout {
        episodes: (0..6).map(|_| random_episode(&mut rng)).collect(),
        version: model.version,
    };
    let idx: Vec<usize> = (0..rollout.episodes.len()).collect();
    let hp = UpdateParams {
        ent_coef: 0.01,
        ..UpdateParams::default()
    };
    let k = 64;
    let mut worst = Vec::new();
    for (name, obj) in [("ppo", Objective::Clipped), ("a2c", Objective::A2c)] {
        let (_, g, _) = minibatch_loss(&model, &rollout, &idx, &hp, obj, None).unwrap();
        let w = fd_worst(&model, &g, k, |m| {
            minibatch_loss_value(m, &rollout, &idx, &hp, obj, None).unwrap()
        });
        worst.push((name, w));
    }
    let examples: Vec<Example> = (0..4)
        .map(|_| {
            let mut reference: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(3..11)).collect();
            reference.push(EOS_ID);
            Example {
                prompt: vec![BOS_ID, rng.gen_range(3..11), rng.gen_range(3..11)],
                reference,
                meta: Meta::Record { fields: Vec::new() },
            }
        })
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, g) = supervised_loss(&model, &refs, None).unwrap();
    worst.push(("supervised", fd_worst(&model, &g, k, |m| supervised_loss_value(m, &refs, None).unwrap())));

    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, w)| *w <= 1e-4) && secs < 30.0;
    let detail = worst
        .iter()
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("worst relative error over {k} coords: {detail}; {secs:.1}s"))
}

// ---------------------------------------------------------------------------
// 2: metric oracles

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = common::oracle_discrepancies(&mut rng, 200);
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|(_, d)| *d).fold(0.0, f64::max);
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, d)| *d > 1e-12)
        .map(|(m, d)| format!("{m} {d:.1e}"))
        .collect();
    verdict(
        bad.is_empty() && secs < 10.0,
        format!("{} metrics, max |diff| {max:.1e} {:?}; {secs:.2}s", worst.len(), bad),
    )
}

// ---------------------------------------------------------------------------
// 3: GAE

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_adv: f64 = 0.0;
    let mut worst_ret: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=24);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = rng.gen_range(0.5..=1.0);
        let lam = rng.gen_range(0.0..=1.0);
        let v = |t: usize| if t < n { values[t] } else { 0.0 };
        let delta: Vec<f64> = (0..n).map(|t| rewards[t] + gamma * v(t + 1) - values[t]).collect();
        let est = compute_gae(&rewards, &values, gamma, lam).unwrap();
        for t in 0..n {
            let a: f64 = (t..n).map(|k| (gamma * lam).powi((k - t) as i32) * delta[k]).sum();
            worst_adv = worst_adv.max((a - est.advantages[t]).abs());
        }
        let full = compute_gae(&rewards, &values, gamma, 1.0).unwrap();
        for t in 0..n {
            let g: f64 = (t..n).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
            worst_ret = worst_ret.max((g - full.returns[t]).abs());
        }
    }
    verdict(
        worst_adv <= 1e-10 && worst_ret <= 1e-10,
        format!("100 episodes: advantage |diff| {worst_adv:.1e}, lambda=1 return |diff| {worst_ret:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 4: NLPO with p = 1

fn criterion_4() -> Verdict {
    let mut ppo = Trainer::new(&config(&["algorithm=ppo"]), 0).unwrap();
    let mut nlpo = Trainer::new(&config(&["algorithm=nlpo", "algo.top_p=1.0"]), 0).unwrap();
    let bits = |t: &Trainer| t.policy().params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut identical = bits(&ppo) == bits(&nlpo);
    let initial = bits(&ppo);
    for _ in 0..20 {
        ppo.step().unwrap();
        nlpo.step().unwrap();
        identical &= bits(&ppo) == bits(&nlpo);
    }
    let moved = bits(&ppo) != initial;
    verdict(
        identical && moved,
        format!("20 updates, parameters bit-identical at every update: {identical} (moved: {moved})"),
    )
}

// ---------------------------------------------------------------------------
// 5-9: sentiment trends

fn criterion_5() -> Verdict {
    let zs = zero_shot();
    let kl = kl_runs();
    let gains: Vec<f64> = kl.iter().zip(&zs).map(|(r, z)| r.val_task - z.val_task).collect();
    let ok = gains.iter().filter(|&&g| g >= 0.10).count();
    let slowest = kl.iter().map(|r| r.secs).fold(0.0, f64::max);
    verdict(
        ok >= 4 && slowest <= 300.0,
        format!("gain over zero-shot [{}]: {ok}/5 seeds >= 0.10; slowest seed {slowest:.0}s", fmt_list(gains, 3)),
    )
}

fn criterion_6() -> Verdict {
    let kl = kl_runs();
    let free = runs("ppo-no-kl", &["kl.target=inf"], false);
    let (t_kl, t_free) = (mean(kl.iter().map(|r| r.val_task)), mean(free.iter().map(|r| r.val_task)));
    let (p_kl, p_free) = (
        mean(kl.iter().map(|r| r.val_perplexity)),
        mean(free.iter().map(|r| r.val_perplexity)),
    );
    verdict(
        t_free >= t_kl && p_free > p_kl,
        format!("task {t_free:.3} (no KL) vs {t_kl:.3}; perplexity {p_free:.2} (no KL) vs {p_kl:.2}"),
    )
}

fn criterion_7() -> Verdict {
    let mdp = kl_runs();
    let bandit = runs("ppo-gamma1", &["algo.gamma=1.0"], false);
    let (p_mdp, p_bandit) = (
        mean(mdp.iter().map(|r| r.val_perplexity)),
        mean(bandit.iter().map(|r| r.val_perplexity)),
    );
    verdict(
        p_bandit > p_mdp,
        format!(
            "perplexity gamma=1.0 {p_bandit:.3} [{}] vs gamma=0.95 {p_mdp:.3} [{}]",
            fmt_list(bandit.iter().map(|r| r.val_perplexity), 2),
            fmt_list(mdp.iter().map(|r| r.val_perplexity), 2)
        ),
    )
}

fn criterion_8() -> Verdict {
    let kl = kl_runs();
    let ok = kl.iter().filter(|r| (0.025..=0.1).contains(&r.trailing_kl)).count();
    verdict(
        ok >= 4,
        format!(
            "trailing-20 KL [{}]: {ok}/5 within [0.025, 0.1]",
            fmt_list(kl.iter().map(|r| r.trailing_kl), 4)
        ),
    )
}

fn criterion_9() -> Verdict {
    let zs = mean(zero_shot().iter().map(|r| r.val_task));
    let few = mean(runs("ppo-fraction0.1", &["reward.classifier_fraction=0.1"], false).iter().map(|r| r.val_task));
    verdict(
        few - zs >= 0.05,
        format!("task {few:.3} with 10% labels vs zero-shot {zs:.3} (gain {:.3})", few - zs),
    )
}

// ---------------------------------------------------------------------------
// 10: warm start

fn criterion_10() -> Verdict {
    let ppo = runs("concept-ppo", &["task=concept_coverage", "algorithm=ppo"], false);
    let warm = runs("concept-sup-ppo", &["task=concept_coverage", "algorithm=supervised+ppo"], false);
    let (a, b) = (mean(ppo.iter().map(|r| r.val_task)), mean(warm.iter().map(|r| r.val_task)));
    verdict(b >= a, format!("coverage supervised+ppo {b:.3} vs ppo {a:.3}"))
}

// ---------------------------------------------------------------------------
// 11: resume

fn criterion_11() -> Verdict {
    let full = kl_runs()[0].run_dir.clone().expect("criterion-5 runs are on disk");
    let expected = std::fs::read(full.join("curve.csv")).unwrap();

    let mut cfg = config(&["kl.target=0.05"]);
    cfg.output_dir = SCRATCH.path().join("interrupted");
    let mut t = Trainer::create(&cfg, 0, false).unwrap();
    while t.update_index() < 100 {
        t.step().unwrap();
    }
    let run_dir = t.run_dir().unwrap().to_path_buf();
    drop(t);
    let ckpt = run_dir.join("step-100.ckpt");
    let resumed = Trainer::resume(&ckpt).unwrap();
    let from = resumed.update_index();
    resumed.finish().unwrap();
    let got = std::fs::read(run_dir.join("curve.csv")).unwrap();
    verdict(
        from == 100 && got == expected,
        format!(
            "resumed from update {from}; curve.csv {} bytes, identical: {}",
            got.len(),
            got == expected
        ),
    )
}

fn main() {
    let criteria: [fn() -> Verdict; 11] = [
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
        criterion_10,
        criterion_11,
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, check) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "criterion {n:>2}: {} {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
