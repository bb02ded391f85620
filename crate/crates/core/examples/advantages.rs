//! Generalized advantage estimates for a sparse-reward episode under the
//! default discount and in bandit mode (gamma = lambda = 1).

use seqrl::algos::{compute_gae, normalize_advantages};

fn main() -> seqrl::Result<()> {
    let rewards = [-0.01, -0.02, 0.0, -0.01, 0.9];
    let values = [0.3, 0.35, 0.4, 0.5, 0.7];
    for (gamma, lam) in [(0.95, 0.95), (1.0, 1.0), (0.95, 0.0)] {
        let est = compute_gae(&rewards, &values, gamma, lam)?;
        println!("gamma {gamma} lambda {lam}");
        println!("  advantages {:?}", est.advantages);
        println!("  returns    {:?}", est.returns);
        println!("  normalized {:?}", normalize_advantages(&est.advantages));
    }
    Ok(())
}
