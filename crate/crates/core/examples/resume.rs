//! Interrupts a run, resumes it from its checkpoint and checks that the
//! learning curve matches the uninterrupted run byte for byte.
//!
//! cargo run --release --example resume -- [updates]

use seqrl::harness::{TrainConfig, Trainer};

fn main() -> seqrl::Result<()> {
    let updates: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("updates"));
    let tmp = std::env::temp_dir().join(format!("seqrl-resume-{}", std::process::id()));
    let cfg = |dir: &str| {
        TrainConfig::default().with_overrides(&[
            format!("algo.updates={updates}"),
            "checkpoint.interval=5".to_owned(),
            format!("output_dir={:?}", tmp.join(dir)),
        ])
    };

    let mut full = Trainer::create(&cfg("full")?, 0, true)?;
    full.run_to_end()?;
    let full_dir = full.run_dir().expect("on disk").to_path_buf();
    full.finish()?;

    let mut part = Trainer::create(&cfg("resumed")?, 0, true)?;
    while part.update_index() < updates / 2 {
        part.step()?;
    }
    let ckpt = Trainer::latest_checkpoint(part.run_dir().expect("on disk"))?.expect("checkpoint");
    drop(part);
    println!("resuming from {}", ckpt.display());
    let resumed = Trainer::resume(&ckpt)?;
    let resumed_dir = resumed.run_dir().expect("on disk").to_path_buf();
    resumed.finish()?;

    let read = |p: std::path::PathBuf| std::fs::read(&p).expect("curve exists");
    let same = read(full_dir.join("curve.csv")) == read(resumed_dir.join("curve.csv"));
    println!("curves identical: {same}");
    std::fs::remove_dir_all(&tmp).ok();
    Ok(())
}
