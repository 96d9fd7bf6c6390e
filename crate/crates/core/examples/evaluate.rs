//! Trains briefly, then reports the shape, pose and color metrics on the
//! test split with and without global alignment.

use pointrecon::dataset::{Dataset, DatasetConfig, Split};
use pointrecon::evaluator::{evaluate, EvalConfig};
use pointrecon::trainer::{train, TrainConfig};

fn main() -> anyhow::Result<()> {
    let data = Dataset::generate(
        &DatasetConfig {
            train: 16,
            val: 4,
            test: 4,
            ..DatasetConfig::default()
        },
        5,
    )?;
    let cfg = TrainConfig {
        iterations: 10,
        freeze_at: 8,
        batch_size: 2,
        k_views: 1,
        ..TrainConfig::preset("cc")?
    };
    let ck = train(&data, &cfg, None, None)?.checkpoint;
    for align in [false, true] {
        let ecfg = EvalConfig {
            align,
            align_step_deg: 5.0,
            color_views: 2,
            ..EvalConfig::default()
        };
        let r = evaluate(&ck, &data, Split::Test, &ecfg)?;
        println!(
            "align {align:5}: chamfer×100 {:.2}  emd×100 {:.2}  pose median {:.1}° (flip {:.1}°)  color L2 {:.4?}  rotation {:.0}°{}",
            r.chamfer_x100,
            r.emd_x100.unwrap_or(f64::NAN),
            r.pose.median_noflip,
            r.pose.median_flip,
            r.color_l2,
            r.alignment.azimuth_deg,
            if r.alignment.flipped { " flipped" } else { "" }
        );
    }
    Ok(())
}
