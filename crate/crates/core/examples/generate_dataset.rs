//! Generates a small synthetic dataset, writes it to disk and reads it back.

use pointrecon::dataset::{Dataset, DatasetConfig, Split};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = DatasetConfig {
        train: 12,
        val: 3,
        test: 3,
        ..DatasetConfig::default()
    };
    let data = Dataset::generate(&cfg, 42)?;
    data.write(dir.path())?;
    let back = Dataset::open(dir.path())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let ids = back.ids(split);
        let cats: Vec<&str> = ids.iter().map(|&id| back.category(id).map(|c| c.name())).collect::<Result<_, _>>()?;
        println!("{split:?}: {} instances {cats:?}", ids.len());
    }
    let s = back.sample(0)?;
    let coverage = s.mask.data().iter().sum::<f64>() / s.mask.data().len() as f64;
    println!("sample 0: image {:?}, silhouette covers {:.1}%", s.image.shape(), 100.0 * coverage);
    println!("ground-truth reads so far: {}", back.gt_reads());
    Ok(())
}
