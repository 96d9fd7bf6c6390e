//! Part segmentation transfer: labels on one reconstruction are copied to
//! other instances of the same category through the point index.

use pointrecon::dataset::{Dataset, DatasetConfig, Split};
use pointrecon::evaluator::{fit_alignment, part_transfer, EvalConfig};
use pointrecon::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let data = Dataset::generate(
        &DatasetConfig {
            train: 16,
            val: 4,
            test: 8,
            ..DatasetConfig::default()
        },
        4,
    )?;
    let cfg = TrainConfig {
        iterations: 10,
        freeze_at: 8,
        batch_size: 2,
        k_views: 1,
        ..TrainConfig::preset("cc")?
    };
    let ck = train(&data, &cfg, None, None)?.checkpoint;
    let test = data.ids(Split::Test);
    let reference = test[0];
    let category = data.category(reference)?;
    let targets: Vec<usize> = test[1..]
        .iter()
        .copied()
        .filter(|&id| data.category(id).ok() == Some(category))
        .collect();
    if targets.is_empty() {
        println!("no other {} in the test split", category.name());
        return Ok(());
    }
    let alignment = fit_alignment(&ck, &data, &EvalConfig { align_step_deg: 10.0, ..EvalConfig::default() })?;
    let (report, _) = part_transfer(&ck, &data, reference, &targets, None, &alignment)?;
    let parts = category.part_names();
    for (name, iou) in parts.iter().zip(&report.part_iou) {
        println!("{name:>8}: {}", iou.map_or("absent".into(), |v| format!("{v:.3}")));
    }
    println!("mean part IoU over {} targets: {:.3}", targets.len(), report.mean_iou);
    Ok(())
}
