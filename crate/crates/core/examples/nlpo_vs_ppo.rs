//! Trains NLPO and PPO side by side on the sentiment task and prints the
//! validation curves. With top_p = 1 the two are identical.
//!
//! cargo run --release --example nlpo_vs_ppo -- [updates] [top_p]

use seqrl::harness::{TrainConfig, Trainer};

fn main() -> seqrl::Result<()> {
    let mut args = std::env::args().skip(1);
    let updates: usize = args.next().map_or(50, |s| s.parse().expect("updates"));
    let top_p: f64 = args.next().map_or(0.9, |s| s.parse().expect("top_p"));
    let base = TrainConfig::default().with_overrides(&[
        format!("algo.updates={updates}"),
        format!("algo.top_p={top_p}"),
    ])?;
    let mut runs = Vec::new();
    for algo in ["ppo", "nlpo"] {
        let cfg = base.with_overrides(&[format!("algorithm={algo}")])?;
        let mut t = Trainer::new(&cfg, 0)?;
        t.run_to_end()?;
        runs.push((algo, t));
    }
    println!("{:>6} {:>18} {:>18}", "update", "ppo task / ppl", "nlpo task / ppl");
    let rows = runs[0].1.rows().iter().zip(runs[1].1.rows());
    for (a, b) in rows.filter(|(a, _)| a.val_task_metric.is_some()) {
        println!(
            "{:>6} {:>8.3} / {:<7.2} {:>8.3} / {:<7.2}",
            a.update,
            a.val_task_metric.unwrap_or(f64::NAN),
            a.val_perplexity.unwrap_or(f64::NAN),
            b.val_task_metric.unwrap_or(f64::NAN),
            b.val_perplexity.unwrap_or(f64::NAN),
        );
    }
    let same = runs[0].1.policy().params() == runs[1].1.policy().params();
    println!("identical final parameters: {same}");
    Ok(())
}
