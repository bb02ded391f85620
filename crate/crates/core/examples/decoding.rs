//! Samples continuations from the pretrained base model under greedy,
//! top-k and nucleus decoding.

use seqrl::algos::generate;
use seqrl::harness::{prepare_base, prepare_task, TrainConfig};
use seqrl::model::decode::{DecodeConfig, DecodeMode};

fn main() -> seqrl::Result<()> {
    let cfg = TrainConfig::default();
    let ctx = prepare_task(&cfg, 0)?;
    let base = prepare_base(&cfg, 0)?;
    let vocab = &ctx.dataset.vocab;
    let configs = [
        ("greedy", DecodeConfig { mode: DecodeMode::Greedy, ..Default::default() }),
        ("sample", DecodeConfig::default()),
        ("top-k 5", DecodeConfig { top_k: Some(5), ..Default::default() }),
        ("top-p 0.5", DecodeConfig { top_p: Some(0.5), ..Default::default() }),
        ("min length 8", DecodeConfig { min_length: 8, ..Default::default() }),
    ];
    for ex in ctx.dataset.val.iter().take(3) {
        println!("prompt: {}", vocab.decode(&ex.prompt)?.join(" "));
        for (name, dc) in &configs {
            let out = generate(&base, &ex.prompt, dc, dc.max_new_tokens, 7)?;
            println!("  {name:>13}: {}", vocab.decode(&out)?.join(" "));
        }
    }
    Ok(())
}
