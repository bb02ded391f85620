//! Steps the token-level environment by hand: random actions until EOS or
//! the horizon, with the task reward arriving only on the final step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrl::data::{generate_task_dataset, Sizes, TaskKind};
use seqrl::env::TokenEnv;
use seqrl::reward::{task_reward, TaskScorer};

fn main() -> seqrl::Result<()> {
    let ds = generate_task_dataset(TaskKind::ConceptCoverage, 0, Sizes::default())?;
    let env = TokenEnv::new(ds.vocab.len(), 8)?;
    let scorer = TaskScorer::Coverage { coverage_weight: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    for episode in 0..3 {
        let mut state = env.reset(&ds.train, &mut rng)?;
        println!("episode {episode}: prompt {}", ds.vocab.decode(state.prompt())?.join(" "));
        loop {
            let action = rng.gen_range(0..ds.vocab.len());
            let step = env.step(&state, action, |s, ex| task_reward(&scorer, s, ex))?;
            println!(
                "  t={} action {:<12} reward {:.3} done {}",
                step.state.t(),
                ds.vocab.token(action)?,
                step.reward,
                step.done
            );
            state = step.state;
            if step.done {
                break;
            }
        }
    }
    Ok(())
}
