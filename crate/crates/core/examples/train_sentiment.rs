//! Trains PPO on the sentiment task for one seed and prints the learning
//! curve as it goes.
//!
//! cargo run --release --example train_sentiment -- [updates] [seed] [key=value ...]

use seqrl::harness::{TrainConfig, Trainer};

fn main() -> seqrl::Result<()> {
    let mut args = std::env::args().skip(1);
    let updates: usize = args.next().map_or(60, |s| s.parse().expect("updates"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let mut overrides = vec![format!("algo.updates={updates}")];
    overrides.extend(args);
    let cfg = TrainConfig::default().with_overrides(&overrides)?;

    let t0 = std::time::Instant::now();
    let mut trainer = Trainer::new(&cfg, seed)?;
    let r0 = &trainer.rows()[0];
    println!(
        "start: task {:.3} perplexity {:.2} ({:.1}s)",
        r0.val_task_metric.unwrap_or(f64::NAN),
        r0.val_perplexity.unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
    while !trainer.is_finished() {
        let row = trainer.step()?;
        let line = format!(
            "update {:>4} reward {:.3} kl {:.4} beta {:.4} len {:.1}",
            row.update,
            row.task_reward.unwrap_or(f64::NAN),
            row.kl.unwrap_or(f64::NAN),
            row.beta.unwrap_or(f64::NAN),
            row.episode_length.unwrap_or(f64::NAN),
        );
        match row.val_task_metric {
            Some(v) => println!(
                "{line} | val task {v:.3} perplexity {:.2} ({:.1}s)",
                row.val_perplexity.unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f64()
            ),
            None => println!("{line}"),
        }
    }
    let kls: Vec<f64> = trainer.rows().iter().rev().take(20).filter_map(|r| r.kl).collect();
    println!("trailing kl {:.4}", kls.iter().sum::<f64>() / kls.len().max(1) as f64);
    let report = trainer.finish()?;
    println!("test task metric {:.3}", report.test.get("task_metric").unwrap_or(f64::NAN));
    Ok(())
}
