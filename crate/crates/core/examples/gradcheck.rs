//! Finite-difference checks of a few differentiable operations.

use pointrecon::diffcore::{grad_check, Tensor};
use pointrecon::geometry::chamfer_var;
use pointrecon::render::{project_points, render_mask, RenderSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |n: usize, scale: f64| Tensor::new(&[n, 3], (0..3 * n).map(|_| rng.gen_range(-scale..scale)).collect());
    let q = random(6, 0.4)?;
    let p = random(5, 0.4)?;
    let r = grad_check(|t, x| chamfer_var(x, t.constant(q.clone())), &p, 1e-6, 1e-4)?;
    println!("chamfer        max rel err {:.2e}  passed {}", r.max_rel_error, r.passed);

    let settings = RenderSettings::default();
    let pts = random(8, 0.3)?;
    let r = grad_check(
        |t, x| {
            let proj = project_points(x, t.scalar(30.0), t.scalar(10.0), &settings).map_err(|e| pointrecon::diffcore::DiffError::Invalid { op: "project", msg: e.to_string() })?;
            let m = render_mask(proj.uv, &settings).map_err(|e| pointrecon::diffcore::DiffError::Invalid { op: "mask", msg: e.to_string() })?;
            Ok(m.sum())
        },
        &pts,
        1e-6,
        1e-3,
    )?;
    println!("render_mask    max rel err {:.2e}  passed {}", r.max_rel_error, r.passed);
    Ok(())
}
