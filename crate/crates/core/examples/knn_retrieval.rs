//! Builds the embedding index over the training split and retrieves the
//! nearest training images for a few validation images.

use pointrecon::dataset::{Dataset, DatasetConfig, KnnIndex, Split};
use pointrecon::networks::Checkpoint;
use pointrecon::trainer::TrainConfig;

fn main() -> anyhow::Result<()> {
    let data = Dataset::generate(
        &DatasetConfig {
            train: 30,
            val: 3,
            test: 0,
            ..DatasetConfig::default()
        },
        2,
    )?;
    // An untrained encoder still groups images by silhouette statistics.
    let ck = Checkpoint::fresh(&TrainConfig::default());
    let index = KnnIndex::build(&data, &ck.recon)?;
    println!("indexed {} images, {}-d embeddings", index.len(), index.dim());
    for id in data.ids(Split::Val) {
        let hits = index.query_image(&ck.recon, &data.sample(id)?.image, 3, None)?;
        let cat = data.category(id)?.name();
        let found: Vec<String> = hits
            .iter()
            .map(|&(j, d)| Ok(format!("{j}:{}@{d:.3}", data.category(j)?.name())))
            .collect::<anyhow::Result<_>>()?;
        println!("val {id} ({cat}) -> {}", found.join(", "));
    }
    Ok(())
}
