//! Renders a solid ball from a few viewpoints and compares the thresholded
//! silhouette with the analytic disc. Writes PNGs to the directory given as
//! the first argument (default: a temp dir).

use pointrecon::geometry::{PointCloud, Viewpoint};
use pointrecon::imageio::{save_mask, save_rgb};
use pointrecon::render::{image_of, iou, mask_of, sphere_silhouette, threshold, RenderSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    while points.len() < 1024 {
        let p = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5f64)];
        if p.iter().map(|v| v * v).sum::<f64>() <= 0.25 {
            colors.push([p[0] + 0.5, p[1] + 0.5, p[2] + 0.5]);
            points.push(p);
        }
    }
    let ball = PointCloud::with_colors(points, colors)?;
    let settings = RenderSettings::default();
    let disc = sphere_silhouette(0.5, &settings);

    for (i, az) in [0.0, 90.0, 200.0].into_iter().enumerate() {
        let v = Viewpoint::new(az, 20.0);
        let mask = mask_of(&ball, &v, &settings)?;
        println!("azimuth {az:>5}: IoU vs disc {:.3}", iou(&threshold(&mask), &disc));
        save_mask(out.join(format!("ball_mask_{i}.png")), &mask)?;
        save_rgb(out.join(format!("ball_rgb_{i}.png")), &image_of(&ball, &v, &settings)?)?;
    }
    println!("wrote PNGs to {}", out.display());
    Ok(())
}
