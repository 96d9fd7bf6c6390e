//! Acceptance criteria 1–10. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout so the verdicts show up without `--nocapture`.
//!
//! Criteria that need the full 40k-iteration, three-seed training budget are
//! `#[ignore]`d; run them with `cargo test --release --test acceptance -- --ignored`.

use std::io::Write;
use std::sync::OnceLock;

use pointrecon::dataset::{Category, Dataset, DatasetConfig, Split};
use pointrecon::diffcore::{grad_check, grad_check_at, DiffError, GradCheckReport, Tape, Tensor, Var};
use pointrecon::evaluator::{evaluate, evaluate_with, fit_alignment, predict, EvalConfig};
use pointrecon::geometry::{chamfer, chamfer_var, emd, emd_auction, emd_exact, PointCloud, Viewpoint};
use pointrecon::iso::{optimize, IsoConfig};
use pointrecon::losses::{
    affinity_loss, bce_mask_loss, geometric_cycle_loss, image_loss, iso_objective, mask_loss, nn_consistency_loss,
    pose_cycle_loss, pose_total, recon_total, squared_distance_transform, symmetry_loss, LossWeights, THETA_POS,
};
use pointrecon::networks::{stack_images, Checkpoint, PoseNet, ReconNet};
use pointrecon::ply::{self, PlyEncoding};
use pointrecon::render::{
    iou, mask_of, project_points, render_color, render_mask, sphere_silhouette, threshold, RenderSettings,
};
use pointrecon::trainer::{log_csv, train, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    // Bypasses the test harness's output capture.
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn d<E: std::fmt::Display>(e: E) -> DiffError {
    DiffError::Invalid {
        op: "acceptance",
        msg: e.to_string(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_cloud(n: usize, scale: f64, r: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| r.gen_range(-scale..scale))).collect())
}

/// Every projected point keeps clear of the kernel cut-off around every
/// nearby pixel centre, so finite differences do not straddle it.
fn away_from_truncation(uv: &Tensor, s: &RenderSettings) -> bool {
    let r = 3.0 * s.sigma;
    uv.data().chunks(2).all(|p| {
        (-4i64..=4).all(|dr| {
            (-4i64..=4).all(|dc| {
                let du = p[0] - (p[0].round() + dc as f64);
                let dv = p[1] - (p[1].round() + dr as f64);
                ((du * du + dv * dv).sqrt() - r).abs() > 0.02
            })
        })
    })
}

fn projected_uv(points: &Tensor, v: &Viewpoint, s: &RenderSettings) -> Tensor {
    let tape = Tape::new();
    let proj = project_points(tape.constant(points.clone()), tape.scalar(v.azimuth), tape.scalar(v.elevation), s).unwrap();
    (*proj.uv.value()).clone()
}

/// Points and a viewpoint whose projection is safe for finite differences.
fn renderable(n: usize, r: &mut ChaCha8Rng, s: &RenderSettings) -> (Tensor, Viewpoint) {
    loop {
        let pts = random_cloud(n, 0.3, r).positions_tensor();
        let v = Viewpoint::new(r.gen_range(0.0..360.0), r.gen_range(-20.0..40.0));
        if away_from_truncation(&projected_uv(&pts, &v, s), s) {
            return (pts, v);
        }
    }
}

fn weighted_sum<'t>(t: &'t Tape, x: Var<'t>, w: &Tensor) -> Result<Var<'t>, DiffError> {
    Ok(x.mul(t.constant(w.clone()))?.sum())
}

/// Every GT positive pixel is also a predicted positive, so the nearest
/// predicted pixel of each GT positive is itself.
fn self_covering_mask(pred: &Tensor) -> Tensor {
    pred.map(|v| if v > THETA_POS + 0.01 { 1.0 } else { 0.0 })
}

struct Suite {
    results: Vec<(&'static str, GradCheckReport)>,
}

impl Suite {
    fn add(&mut self, name: &'static str, r: GradCheckReport) {
        self.results.push((name, r));
    }

    /// Merges several reports of one operation.
    fn add_all(&mut self, name: &'static str, rs: Vec<GradCheckReport>) {
        let mut merged = rs[0].clone();
        for r in &rs[1..] {
            merged.probes += r.probes;
            merged.passed &= r.passed;
            if r.max_rel_error > merged.max_rel_error {
                merged.max_rel_error = r.max_rel_error;
            }
        }
        merged.passed &= rs.iter().all(|r| r.passed);
        self.add(name, merged);
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let start = std::time::Instant::now();
    let s = RenderSettings::default();
    let mut r = rng(101);
    let mut suite = Suite { results: Vec::new() };

    // Renderer.
    let (pts, v) = renderable(8, &mut r, &s);
    let w_uv = random_tensor(&[8, 2], -1.0, 1.0, &mut r);
    let w_depth = random_tensor(&[8], -1.0, 1.0, &mut r);
    suite.add(
        "project_points (points)",
        grad_check(
            |t, x| {
                let p = project_points(x, t.scalar(v.azimuth), t.scalar(v.elevation), &s).map_err(d)?;
                weighted_sum(t, p.uv, &w_uv)?.add(weighted_sum(t, p.depth, &w_depth)?)
            },
            &pts,
            1e-6,
            1e-4,
        )
        .unwrap(),
    );
    let mut angle_reports = Vec::new();
    for _ in 0..10 {
        let (pts, v) = renderable(8, &mut r, &s);
        angle_reports.push(
            grad_check(
                |t, a| {
                    let p = project_points(t.constant(pts.clone()), a.narrow(0, 0, 1)?, a.narrow(0, 1, 1)?, &s).map_err(d)?;
                    weighted_sum(t, p.uv, &w_uv)?.add(weighted_sum(t, p.depth, &w_depth)?)
                },
                &Tensor::from_vec(vec![v.azimuth, v.elevation]),
                1e-5,
                1e-4,
            )
            .unwrap(),
        );
    }
    suite.add_all("project_points (angles)", angle_reports);

    let w_mask = random_tensor(&[64, 64], -1.0, 1.0, &mut r);
    let (pts12, v12) = renderable(12, &mut r, &s);
    let uv = projected_uv(&pts12, &v12, &s);
    suite.add(
        "render_mask",
        grad_check(|t, x| weighted_sum(t, render_mask(x, &s).map_err(d)?, &w_mask), &uv, 1e-6, 1e-3).unwrap(),
    );
    let w_img = random_tensor(&[3, 64, 64], -1.0, 1.0, &mut r);
    let colors = random_tensor(&[8, 3], 0.0, 1.0, &mut r);
    suite.add(
        "render_color (points)",
        grad_check(
            |t, x| {
                let p = project_points(x, t.scalar(v.azimuth), t.scalar(v.elevation), &s).map_err(d)?;
                weighted_sum(t, render_color(&p, t.constant(colors.clone()), &s).map_err(d)?, &w_img)
            },
            &pts,
            1e-6,
            1e-3,
        )
        .unwrap(),
    );
    suite.add(
        "render_color (colors)",
        grad_check(
            |t, c| {
                let p = project_points(t.constant(pts.clone()), t.scalar(v.azimuth), t.scalar(v.elevation), &s).map_err(d)?;
                weighted_sum(t, render_color(&p, c, &s).map_err(d)?, &w_img)
            },
            &colors,
            1e-5,
            1e-4,
        )
        .unwrap(),
    );

    // Set distance.
    let p8 = random_tensor(&[8, 3], -0.5, 0.5, &mut r);
    let q9 = random_tensor(&[9, 3], -0.5, 0.5, &mut r);
    suite.add(
        "chamfer",
        grad_check(|t, x| chamfer_var(x, t.constant(q9.clone())), &p8, 1e-6, 1e-4).unwrap(),
    );

    // Losses.
    let gt_img = random_tensor(&[3, 4, 4], 0.0, 1.0, &mut r);
    let img = random_tensor(&[3, 4, 4], 0.0, 1.0, &mut r);
    suite.add("image_loss", grad_check(|_t, x| image_loss(x, &gt_img).map_err(d), &img, 1e-6, 1e-4).unwrap());
    let gt5 = Tensor::new(&[5, 5], (0..25).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap();
    let pred5 = random_tensor(&[5, 5], 0.1, 0.9, &mut r);
    suite.add("bce_mask_loss", grad_check(|_t, x| bce_mask_loss(x, &gt5).map_err(d), &pred5, 1e-6, 1e-4).unwrap());
    suite.add(
        "affinity_loss",
        grad_check(|_t, x| Ok(affinity_loss(x, &gt5).map_err(d)?.0), &pred5, 1e-6, 1e-3).unwrap(),
    );
    // The training mask loss keeps the affinity's selection weights fixed;
    // its gradient is that of BCE plus the distance-transform term over h·w.
    let dt = Tensor::new(&[5, 5], squared_distance_transform(&gt5).unwrap()).unwrap();
    let surrogate = grad_check(
        |t, x| bce_mask_loss(x, &gt5).map_err(d)?.add(weighted_sum(t, x, &dt)?.mul_scalar(1.0 / 25.0)),
        &pred5,
        1e-6,
        1e-4,
    )
    .unwrap();
    let tape = Tape::new();
    let x = tape.var(pred5.clone());
    let g_mask = tape.backward(mask_loss(x, &gt5).unwrap().0).unwrap().get_or_zeros(x);
    let tape = Tape::new();
    let x = tape.var(pred5.clone());
    let g_sur = tape
        .backward(bce_mask_loss(x, &gt5).unwrap().add(weighted_sum(&tape, x, &dt).unwrap().mul_scalar(1.0 / 25.0)).unwrap())
        .unwrap()
        .get_or_zeros(x);
    let same = g_mask.data().iter().zip(g_sur.data()).all(|(a, b)| (a - b).abs() <= 1e-12);
    suite.add(
        "mask_loss (fixed selection)",
        GradCheckReport {
            passed: surrogate.passed && same,
            ..surrogate
        },
    );
    let covered = Tensor::new(&[5, 5], (0..25).map(|_| r.gen_range(0.1..0.9)).collect()).unwrap();
    let gt_cov = self_covering_mask(&covered);
    suite.add(
        "mask_loss (covered)",
        grad_check(|_t, x| Ok(mask_loss(x, &gt_cov).map_err(d)?.0), &covered, 1e-6, 1e-3).unwrap(),
    );

    let q8 = random_tensor(&[8, 3], -0.5, 0.5, &mut r);
    suite.add(
        "geometric_cycle_loss",
        grad_check(
            |t, x| geometric_cycle_loss(x, &[t.constant(q8.clone()), x.mul_scalar(0.5)]).map_err(d),
            &p8,
            1e-6,
            1e-4,
        )
        .unwrap(),
    );
    let views: Vec<Viewpoint> = (0..10).map(|_| Viewpoint::new(r.gen_range(0.0..360.0), r.gen_range(-20.0..40.0))).collect();
    let guesses = Tensor::from_vec(
        views
            .iter()
            .flat_map(|v| [v.azimuth + r.gen_range(-150.0..150.0), v.elevation + r.gen_range(-20.0..20.0)])
            .collect(),
    );
    suite.add(
        "pose_cycle_loss",
        grad_check(
            |_t, x| {
                let pairs = (0..10)
                    .map(|i| Ok((x.narrow(0, 2 * i, 1)?, x.narrow(0, 2 * i + 1, 1)?)))
                    .collect::<Result<Vec<_>, DiffError>>()?;
                pose_cycle_loss(&views, &pairs).map_err(d)
            },
            &guesses,
            1e-6,
            1e-4,
        )
        .unwrap(),
    );
    let (nn_pts, nn_views) = loop {
        let (pts, v) = renderable(8, &mut r, &s);
        let other = Viewpoint::new(r.gen_range(0.0..360.0), r.gen_range(-20.0..40.0));
        if away_from_truncation(&projected_uv(&pts, &other, &s), &s) {
            break (pts, [v, other]);
        }
    };
    let nn_masks: Vec<Tensor> = nn_views
        .iter()
        .map(|v| self_covering_mask(&mask_of(&PointCloud::from_tensors(&nn_pts, None).unwrap(), v, &s).unwrap()))
        .collect();
    suite.add(
        "nn_consistency_loss",
        grad_check(
            |_t, x| nn_consistency_loss(x, &nn_masks.iter().collect::<Vec<_>>(), &nn_views, &s).map_err(d),
            &nn_pts,
            1e-6,
            1e-3,
        )
        .unwrap(),
    );
    let sym_pts = Tensor::new(
        &[8, 3],
        (0..8)
            .flat_map(|i| {
                let y = r.gen_range(0.05..0.4) * if i % 2 == 0 { 1.0 } else { -1.0 };
                [r.gen_range(-0.4..0.4), y, r.gen_range(-0.4..0.4)]
            })
            .collect(),
    )
    .unwrap();
    suite.add(
        "symmetry_loss",
        grad_check(|_t, x| Ok(symmetry_loss(x).map_err(d)?.0), &sym_pts, 1e-6, 1e-4).unwrap(),
    );
    let w = LossWeights::default();
    suite.add(
        "iso_objective",
        grad_check(
            |t, x| iso_objective(&w, t.scalar(0.1), t.scalar(0.2), x, &q8).map_err(d),
            &sym_pts,
            1e-6,
            1e-4,
        )
        .unwrap(),
    );
    let mut totals = Vec::new();
    for _ in 0..4 {
        let x = random_tensor(&[5], 0.0, 2.0, &mut r);
        totals.push(
            grad_check(
                |_t, x| {
                    let parts = (0..5).map(|i| x.narrow(0, i, 1).map(|v| v.sum())).collect::<Result<Vec<_>, _>>()?;
                    let a = recon_total(&w, parts[0], parts[1], Some(parts[2]), Some(parts[3]), Some(parts[4])).map_err(d)?;
                    a.add(pose_total(&w, parts[0], parts[1], Some(parts[4])).map_err(d)?)
                },
                &x,
                1e-6,
                1e-4,
            )
            .unwrap(),
        );
    }
    suite.add_all("recon_total + pose_total", totals);

    // Networks.
    let image = random_tensor(&[3, 64, 64], 0.0, 1.0, &mut r);
    let net = ReconNet::init(4);
    let target = random_tensor(&[1024, 3], -0.4, 0.4, &mut r);
    let w_col = random_tensor(&[1024, 3], -1.0, 1.0, &mut r);
    for (label, name) in [("recon forward (structure)", "s.e1.w"), ("recon forward (color)", "c.d2.w")] {
        let w0 = net.params.get(name).unwrap().clone();
        let probes: Vec<usize> = (0..20).map(|_| r.gen_range(0..w0.len())).collect();
        suite.add(
            label,
            grad_check_at(
                |t, wv| {
                    let mut p = net.params.bind_frozen(t);
                    p.set(name, wv);
                    let out = ReconNet::forward(&p, t.constant(stack_images(&[&image])?))?;
                    chamfer_var(out.positions_of(0)?, t.constant(target.clone()))?
                        .add(weighted_sum(t, out.colors_of(0)?, &w_col)?)
                },
                &w0,
                &probes,
                1e-6,
                1e-4,
            )
            .unwrap(),
        );
    }
    let pose = PoseNet::init(4);
    let w0 = pose.params.get("e2.w").unwrap().clone();
    let probes: Vec<usize> = (0..20).map(|_| r.gen_range(0..w0.len())).collect();
    suite.add(
        "pose forward",
        grad_check_at(
            |t, wv| {
                let mut p = pose.params.bind_frozen(t);
                p.set("e2.w", wv);
                let out = PoseNet::forward(&p, &pose.range, t.constant(stack_images(&[&image])?))?;
                out.azimuth.mul_scalar(0.7).add(out.elevation.mul_scalar(-1.3))?.sum().into_ok()
            },
            &w0,
            &probes,
            1e-6,
            1e-4,
        )
        .unwrap(),
    );

    let failed: Vec<String> = suite
        .results
        .iter()
        .filter(|(_, r)| !r.passed || r.probes < 20)
        .map(|(n, r)| format!("{n}: {} probes, max rel err {:.2e}", r.probes, r.max_rel_error))
        .collect();
    let worst = suite.results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failed.is_empty() && elapsed < 300.0;
    report(
        "1",
        pass,
        &format!(
            "{} operations, worst relative error {worst:.2e}, {elapsed:.1}s{}",
            suite.results.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join("; ")) }
        ),
    );
    assert!(pass);
}

trait IntoOk: Sized {
    fn into_ok(self) -> Result<Self, DiffError> {
        Ok(self)
    }
}
impl IntoOk for Var<'_> {}

fn brute_chamfer(p: &PointCloud, q: &PointCloud) -> f64 {
    let one = |a: &PointCloud, b: &PointCloud| -> f64 {
        a.points
            .iter()
            .map(|x| {
                b.points
                    .iter()
                    .map(|y| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    one(p, q) + one(q, p)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for perm in permutations(n - 1) {
        for i in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(i, n - 1);
            out.push(p);
        }
    }
    out
}

fn brute_emd(p: &PointCloud, q: &PointCloud) -> f64 {
    permutations(p.len())
        .iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| (0..3).map(|k| (p.points[i][k] - q.points[j][k]).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_02_metric_oracles() {
    let mut r = rng(202);
    let mut chamfer_err: f64 = 0.0;
    for _ in 0..200 {
        let (p, q) = (random_cloud(5, 1.0, &mut r), random_cloud(5, 1.0, &mut r));
        chamfer_err = chamfer_err.max((chamfer(&p, &q).unwrap() - brute_chamfer(&p, &q)).abs());
    }
    let mut emd_err: f64 = 0.0;
    for i in 0..100 {
        let n = 1 + i % 7;
        let (p, q) = (random_cloud(n, 1.0, &mut r), random_cloud(n, 1.0, &mut r));
        emd_err = emd_err.max((emd(&p, &q).unwrap().value - brute_emd(&p, &q)).abs());
    }
    let (p, q) = (random_cloud(256, 0.5, &mut r), random_cloud(256, 0.5, &mut r));
    let exact = emd_exact(&p, &q).unwrap().value;
    let approx = emd_auction(&p, &q, 0.01).unwrap();
    let rel = (approx.value - exact) / exact;
    // Larger clouds take the approximate path automatically.
    let (p, q) = (random_cloud(300, 0.5, &mut r), random_cloud(300, 0.5, &mut r));
    let auto = emd(&p, &q).unwrap();
    let auto_rel = (auto.value - emd_exact(&p, &q).unwrap().value) / auto.value;
    let pass = chamfer_err <= 1e-12 && emd_err <= 1e-12 && (0.0..=0.01).contains(&rel) && !auto.exact && auto_rel.abs() <= 0.01;
    report(
        "2",
        pass,
        &format!(
            "chamfer max |err| {chamfer_err:.1e} over 200 pairs, emd max |err| {emd_err:.1e} over 100 pairs, \
             auction N=256 gap {:.3}%, automatic N=300 gap {:.3}%",
            100.0 * rel,
            100.0 * auto_rel
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_03_analytic_rendering() {
    let mut r = rng(303);
    let s = RenderSettings::default();
    let mut pts = Vec::new();
    while pts.len() < 1024 {
        let p = [0; 3].map(|_| r.gen_range(-0.5..0.5f64));
        if p.iter().map(|v| v * v).sum::<f64>() <= 0.25 {
            pts.push(p);
        }
    }
    let ball = PointCloud::new(pts);
    let disc = sphere_silhouette(0.5, &s);
    let ious: Vec<f64> = (0..20)
        .map(|_| {
            let v = Viewpoint::new(r.gen_range(0.0..360.0), r.gen_range(-90.0..90.0));
            iou(&threshold(&mask_of(&ball, &v, &s).unwrap()), &disc)
        })
        .collect();
    let min_iou = ious.iter().copied().fold(1.0, f64::min);
    let tape = Tape::new();
    let v = Viewpoint::new(r.gen_range(0.0..360.0), r.gen_range(-40.0..40.0));
    let proj = project_points(tape.constant(Tensor::zeros(&[1, 3])), tape.scalar(v.azimuth), tape.scalar(v.elevation), &s).unwrap();
    let (uv, depth) = (proj.uv.value(), proj.depth.value());
    let centre = uv.data() == [s.intrinsics.cx, s.intrinsics.cy] && depth.data() == [2.0];
    let pass = min_iou >= 0.9 && centre;
    report(
        "3",
        pass,
        &format!("min IoU {min_iou:.3} over 20 views; centre -> {:?} depth {:?}", uv.data(), depth.data()),
    );
    assert!(pass);
}

/// Mean val Chamfer×100 after training `preset` on the full synthetic set.
fn full_budget_val_chamfer(data: &Dataset, preset: &str, seed: u64, edit: impl Fn(&mut TrainConfig)) -> (Checkpoint, f64) {
    let mut cfg = TrainConfig::preset(preset).unwrap();
    cfg.seed = seed;
    edit(&mut cfg);
    let ck = train(data, &cfg, None, None).unwrap().checkpoint;
    let rep = evaluate(&ck, data, Split::Val, &EvalConfig::default()).unwrap();
    (ck, rep.chamfer_x100)
}

#[test]
#[ignore = "needs 2×3 full 40k-iteration training runs (≈10 h each on one core)"]
fn criterion_04_cycle_consistency_beats_no_cc() {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let data = Dataset::generate(&DatasetConfig::default(), seed).unwrap();
        let (_, cc) = full_budget_val_chamfer(&data, "cc", seed, |_| {});
        let (_, no_cc) = full_budget_val_chamfer(&data, "no-cc", seed, |_| {});
        let ratio = cc / no_cc;
        wins += usize::from(ratio <= 0.7);
        lines.push(format!("seed {seed}: {cc:.2}/{no_cc:.2} = {ratio:.3}"));
    }
    let pass = wins >= 2;
    report("4", pass, &lines.join(", "));
    assert!(pass);
}

#[test]
#[ignore = "needs 4×3 full 40k-iteration training runs"]
fn criterion_05_neighbour_count_trend() {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let data = Dataset::generate(&DatasetConfig::default(), seed).unwrap();
        let c: Vec<f64> = [0usize, 1, 2, 4]
            .iter()
            .map(|&n| {
                full_budget_val_chamfer(&data, "nn", seed, |cfg| {
                    cfg.nn_enabled = n > 0;
                    cfg.nn_neighbors = n.max(1);
                })
                .1
            })
            .collect();
        let ok = c[1] <= c[0] && c[2] <= c[0] && c[3] >= c[1].min(c[2]);
        wins += usize::from(ok);
        lines.push(format!("seed {seed}: n=0,1,2,4 -> {:.2}, {:.2}, {:.2}, {:.2}", c[0], c[1], c[2], c[3]));
    }
    let pass = wins >= 2;
    report("5", pass, &lines.join("; "));
    assert!(pass);
}

/// Briefly trained cycle-consistent model shared by the desk-budget criteria.
struct Trained {
    data: Dataset,
    ck: Checkpoint,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = Dataset::generate(
            &DatasetConfig {
                train: 120,
                val: 20,
                test: 20,
                ..DatasetConfig::default()
            },
            3,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 400,
            freeze_at: 300,
            batch_size: 4,
            k_views: 2,
            ..TrainConfig::preset("cc").unwrap()
        };
        let ck = train(&data, &cfg, None, None).unwrap().checkpoint;
        Trained { data, ck }
    })
}

#[test]
fn criterion_06_flip_rule_never_hurts() {
    let t = trained();
    let cfg = EvalConfig {
        align_step_deg: 5.0,
        color_views: 0,
        emd: false,
        ..EvalConfig::default()
    };
    let alignment = fit_alignment(&t.ck, &t.data, &cfg).unwrap();
    let mut ok = true;
    let mut lines = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let ids = t.data.ids(split);
        let rep = evaluate_with(&t.ck, &t.data, &ids, split, alignment, &cfg).unwrap();
        ok &= rep.pose.median_flip <= rep.pose.median_noflip
            && rep.pose.accuracy_flip >= rep.pose.accuracy_noflip
            && rep.instances.iter().all(|m| m.pose_error_flip <= m.pose_error_noflip);
        lines.push(format!("{split:?} median {:.1}° -> {:.1}°", rep.pose.median_noflip, rep.pose.median_flip));
    }
    report("6 (flip rule)", ok, &lines.join(", "));
    assert!(ok);
}

#[test]
#[ignore = "needs a full 40k-iteration training run"]
fn criterion_06_trained_pose_accuracy() {
    let data = Dataset::generate(&DatasetConfig::default(), 0).unwrap();
    let (ck, _) = full_budget_val_chamfer(&data, "cc", 0, |_| {});
    let cfg = EvalConfig::default();
    let alignment = fit_alignment(&ck, &data, &cfg).unwrap();
    let cars: Vec<usize> = data
        .ids(Split::Test)
        .into_iter()
        .filter(|&id| data.category(id).unwrap() == Category::CarLike)
        .collect();
    let rep = evaluate_with(&ck, &data, &cars, Split::Test, alignment, &cfg).unwrap();
    let pass = rep.pose.median_flip < 30.0;
    report("6 (trained pose)", pass, &format!("car-like median flip error {:.1}°", rep.pose.median_flip));
    assert!(pass);
}

fn mean_prediction_symmetry(ck: &Checkpoint, data: &Dataset) -> f64 {
    let preds = predict(ck, data, &data.ids(Split::Val)).unwrap();
    let total: f64 = preds
        .iter()
        .map(|p| {
            let t = Tape::new();
            symmetry_loss(t.constant(p.cloud.positions_tensor())).unwrap().0.item()
        })
        .sum();
    total / preds.len() as f64
}

#[test]
fn criterion_07_symmetry() {
    let full = Dataset::generate(&DatasetConfig::default(), 0).unwrap();
    let worst = (0..full.len())
        .map(|id| {
            let t = Tape::new();
            let gt = full.ground_truth(id).unwrap().cloud;
            symmetry_loss(t.constant(gt.positions_tensor())).unwrap().0.item()
        })
        .fold(0.0, f64::max);

    let data = Dataset::generate(
        &DatasetConfig {
            train: 60,
            val: 10,
            test: 0,
            ..DatasetConfig::default()
        },
        3,
    )
    .unwrap();
    let run = |sym: bool| {
        let cfg = TrainConfig {
            iterations: 100,
            freeze_at: 75,
            batch_size: 4,
            k_views: 1,
            sym_enabled: sym,
            ..TrainConfig::preset("cc").unwrap()
        };
        mean_prediction_symmetry(&train(&data, &cfg, None, None).unwrap().checkpoint, &data)
    };
    let (without, with) = (run(false), run(true));
    let reduction = 1.0 - with / without;
    let pass = worst <= 1e-9 && reduction >= 0.5;
    report(
        "7",
        pass,
        &format!(
            "max GT symmetry loss {worst:.1e} over {} clouds; prediction symmetry {without:.4} -> {with:.4} \
             ({:.0}% lower, 100 iterations each)",
            full.len(),
            100.0 * reduction
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_iso_improves_fit_with_bounded_drift() {
    let t = trained();
    let cfg = IsoConfig::default();
    let ids = t.data.ids(Split::Test);
    assert_eq!(ids.len(), 20);
    let (mut before, mut after, mut drift) = (0.0, 0.0, 0.0);
    for &id in &ids {
        let r = optimize(&t.ck, t.data.sample(id).unwrap(), &cfg).unwrap().report;
        assert!(r.failure.is_none(), "{r:?}");
        before += r.iou_before;
        after += r.iou_after;
        drift += r.drift_chamfer_x100;
    }
    let n = ids.len() as f64;
    let (before, after, drift) = (before / n, after / n, drift / n);
    let pass = after > before && drift <= 1.0;
    report(
        "8",
        pass,
        &format!("mean input-view IoU {before:.4} -> {after:.4}, mean drift chamfer×100 {drift:.3} over 20 samples"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_supervision_hygiene() {
    let data = Dataset::generate(
        &DatasetConfig {
            train: 12,
            val: 2,
            test: 2,
            ..DatasetConfig::default()
        },
        9,
    )
    .unwrap();
    let mut reads = Vec::new();
    for preset in ["no-cc", "cc", "nn", "nn-sym", "geometric-only", "pose-only"] {
        let before = data.gt_reads();
        let cfg = TrainConfig {
            iterations: 6,
            freeze_at: 4,
            batch_size: 2,
            k_views: 1,
            nn_build_at: Some(1),
            ..TrainConfig::preset(preset).unwrap()
        };
        let mut trainer = Trainer::new(&data, cfg).unwrap();
        for _ in 0..6 {
            trainer.step().unwrap();
        }
        reads.push(data.gt_reads() - before);
    }
    let clean = reads.iter().all(|&r| r == 0);

    let cfg = TrainConfig {
        iterations: 5,
        freeze_at: 3,
        batch_size: 2,
        k_views: 2,
        seed: 17,
        ..TrainConfig::preset("nn-sym").unwrap()
    };
    let a = train(&data, &cfg, None, None).unwrap();
    let b = train(&data, &cfg, None, None).unwrap();
    let bits = |log: &[pointrecon::trainer::StepReport]| -> Vec<u64> {
        log.iter().flat_map(|s| s.terms().into_iter().map(|(_, v)| v.to_bits())).collect()
    };
    let identical = log_csv(&a.log) == log_csv(&b.log) && bits(&a.log) == bits(&b.log) && a.checkpoint == b.checkpoint;
    let pass = clean && identical;
    report(
        "9",
        pass,
        &format!("ground-truth reads during training {reads:?}; identical-seed loss curves bit-identical: {identical}"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_round_trip_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1010);
    let n = 300;
    let cloud = PointCloud::with_colors(
        (0..n).map(|_| [0; 3].map(|_| r.gen_range(-0.5..0.5))).collect(),
        (0..n).map(|_| [0; 3].map(|_| r.gen_range(0.0..1.0))).collect(),
    )
    .unwrap()
    .with_labels((0..n).map(|i| (i % 3) as u32).collect())
    .unwrap();
    let mut ok = true;
    for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
        let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        ply::write_ply(&a, &cloud, enc).unwrap();
        ply::write_ply(&b, &ply::read_ply(&a).unwrap(), enc).unwrap();
        ok &= std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    }
    let ck = Checkpoint::fresh(&TrainConfig::default());
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    ok &= std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    report("10", ok, "ASCII PLY, binary PLY and checkpoint second writes byte-identical");
    assert!(ok);
}
