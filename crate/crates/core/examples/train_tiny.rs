//! A few training steps of the cycle-consistent model on a toy dataset,
//! printing each loss term.

use pointrecon::dataset::{Dataset, DatasetConfig};
use pointrecon::trainer::{TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let data = Dataset::generate(
        &DatasetConfig {
            train: 16,
            val: 2,
            test: 2,
            ..DatasetConfig::default()
        },
        0,
    )?;
    let preset = std::env::args().nth(1).unwrap_or_else(|| "cc".into());
    let cfg = TrainConfig {
        iterations: 8,
        freeze_at: 6,
        batch_size: 2,
        k_views: 2,
        ..TrainConfig::preset(&preset)?
    };
    let mut trainer = Trainer::new(&data, cfg)?;
    for _ in 0..8 {
        let r = trainer.step()?;
        let terms: Vec<String> = r.terms().iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("{:>3} {:?}  {}", r.iteration, r.phase, terms.join("  "));
    }
    println!("pose frozen: {}", trainer.is_frozen());
    Ok(())
}
