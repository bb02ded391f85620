//! Shows the adaptive KL coefficient reacting to measured KL above and below
//! its target, and the shaped per-token rewards it produces.

use seqrl::reward::{kl_regularized_rewards, KlController, KlSettings, TargetKl};

fn main() -> seqrl::Result<()> {
    let mut c = KlController::new(&KlSettings::default())?;
    println!("target 0.05, initial beta {:.4}", c.beta);
    for (phase, kl) in [("drifting", 0.2), ("on target", 0.05), ("too close", 0.01)] {
        for _ in 0..10 {
            c.update(kl);
        }
        println!("after 10 updates {phase:<10} (kl {kl}): beta {:.4}", c.beta);
    }
    let off = KlController::new(&KlSettings { target: TargetKl::Infinite, ..Default::default() })?;
    println!("target inf: beta {}", off.beta);

    let log_pi = [-1.0, -0.5, -2.0];
    let log_ref = [-1.2, -1.5, -1.0];
    let shaped = kl_regularized_rewards(&log_pi, &log_ref, 1.0, 0.1)?;
    println!("shaped rewards for terminal reward 1.0 and beta 0.1: {shaped:?}");
    Ok(())
}
