//! Runs a small discount-factor ablation, writes the summary table and
//! draws it.
//!
//! cargo run --release --example ablation_grid -- [out-dir] [updates]

use seqrl::harness::{run_ablation_grid, AblationAxis, TrainConfig};

fn main() -> seqrl::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "grid-gamma".into()));
    let updates: usize = args.next().map_or(40, |s| s.parse().expect("updates"));
    let cfg = TrainConfig::default().with_overrides(&[
        format!("algo.updates={updates}"),
        "seeds=[0, 1]".to_owned(),
    ])?;
    let values: Vec<String> = ["0.5", "0.95", "1.0"].map(String::from).to_vec();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let grid = run_ablation_grid(&cfg, AblationAxis::Gamma, &values, jobs, Some(&out), true)?;
    for row in &grid.rows {
        println!(
            "gamma {:>5}: task {:.3}  perplexity {:.2}  ({} ok, {} failed)",
            row.value,
            row.mean("task_metric").unwrap_or(f64::NAN),
            row.mean("perplexity").unwrap_or(f64::NAN),
            row.succeeded,
            row.failed
        );
    }
    let svg = seqrl::plot::ablation_svg(&out.join("summary.csv"))?;
    std::fs::write(out.join("ablation.svg"), svg).map_err(|e| seqrl::Error::Usage(e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}
