//! Trains the sentiment reward classifier on different label budgets and
//! reports held-out accuracy and a few scores.

use seqrl::data::{generate_task_dataset, Sizes, TaskKind};
use seqrl::reward::{sentiment_labels, ClassifierReward, ClassifierSettings};

fn main() -> seqrl::Result<()> {
    let ds = generate_task_dataset(TaskKind::SentimentContinuation, 0, Sizes::default())?;
    let labeled = sentiment_labels(&ds.generic, &ds.vocab)?;
    for fraction in [0.02, 0.1, 0.5, 1.0] {
        let clf = ClassifierReward::train(&labeled, fraction, 0, &ClassifierSettings::default())?;
        println!("fraction {fraction:>4}: held-out accuracy {:.3}", clf.accuracy);
    }
    let clf = ClassifierReward::train(&labeled, 1.0, 0, &ClassifierSettings::default())?;
    for text in ["the movie was wonderful", "the plot was dull and boring", "the film"] {
        let toks: Vec<&str> = text.split_whitespace().collect();
        println!("P(positive | {text:?}) = {:.3}", clf.score(&toks));
    }
    Ok(())
}
