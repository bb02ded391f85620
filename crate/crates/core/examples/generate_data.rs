//! Generates each synthetic task and prints a few examples.
//!
//! cargo run --example generate_data -- [out-dir]

use seqrl::data::{generate_task_dataset, Sizes, TaskKind};

fn main() -> seqrl::Result<()> {
    let out = std::env::args().nth(1);
    for task in TaskKind::ALL {
        let ds = generate_task_dataset(task, 0, Sizes::default())?;
        println!("== {} (vocabulary {} tokens)", task.name(), ds.vocab.len());
        for ex in ds.train.iter().take(3) {
            println!("  prompt:    {}", ds.vocab.decode(&ex.prompt)?.join(" "));
            println!("  reference: {}", ds.vocab.decode(&ex.reference)?.join(" "));
            println!("  meta:      {:?}", ex.meta);
        }
        if let Some(dir) = &out {
            let dir = std::path::Path::new(dir).join(task.name());
            ds.write_dir(&dir)?;
            println!("  written to {}", dir.display());
        }
    }
    Ok(())
}
