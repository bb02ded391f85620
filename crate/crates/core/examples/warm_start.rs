//! Compares PPO from the pretrained base with PPO started from (and
//! regularized toward) a supervised checkpoint on the concept task.
//!
//! cargo run --release --example warm_start -- [updates] [seeds]

use seqrl::harness::{TrainConfig, Trainer};

fn main() -> seqrl::Result<()> {
    let mut args = std::env::args().skip(1);
    let updates: usize = args.next().map_or(100, |s| s.parse().expect("updates"));
    let seeds: u64 = args.next().map_or(2, |s| s.parse().expect("seeds"));
    for algo in ["zero-shot", "supervised", "ppo", "supervised+ppo"] {
        let cfg = TrainConfig::default().with_overrides(&[
            "task=concept_coverage".to_owned(),
            format!("algorithm={algo}"),
            format!("algo.updates={updates}"),
        ])?;
        let mut task = Vec::new();
        let mut ppl = Vec::new();
        for seed in 0..seeds {
            let r = Trainer::new(&cfg, seed)?.finish()?;
            task.push(r.val.get("task_metric").unwrap_or(f64::NAN));
            ppl.push(r.val.get("perplexity").unwrap_or(f64::NAN));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!("{algo:>15}: task {:.3}  perplexity {:.2}", mean(&task), mean(&ppl));
    }
    Ok(())
}
