//! Set distances between two noisy copies of a shape.

use pointrecon::dataset::{sample_instance, Category};
use pointrecon::geometry::{chamfer, emd, emd_exact, PointCloud, RigidRotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let car = sample_instance(Category::CarLike, 256, &mut rng);
    for noise in [0.0, 0.01, 0.05] {
        let jittered = PointCloud::new(
            car.points
                .iter()
                .map(|p| p.map(|v| v + rng.gen_range(-noise..=noise)))
                .collect(),
        );
        let e = emd(&car, &jittered)?;
        println!(
            "noise {noise:.2}: chamfer×100 {:8.4}  emd×100 {:8.4} (exact solver: {})",
            100.0 * chamfer(&car, &jittered)?,
            100.0 * e.value,
            e.exact
        );
    }

    // Rotation changes both distances; on small clouds the exact solver is cheap.
    let small = car.select(&(0..64).collect::<Vec<_>>());
    let turned = small.rotated(&RigidRotation::about_z(30.0));
    println!(
        "30° turn of 64 points: chamfer×100 {:.3}  emd×100 {:.3}",
        100.0 * chamfer(&small, &turned)?,
        100.0 * emd_exact(&small, &turned)?.value
    );
    Ok(())
}
