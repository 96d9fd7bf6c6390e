//! Command-line driver. Every command writes `stamp.json` beside its outputs
//! and removes what it created if it fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, DatasetConfig, KnnIndex, Split};
use crate::evaluator::{self, EvalConfig};
use crate::geometry::{PointCloud, Viewpoint};
use crate::imageio;
use crate::iso::{self, IsoConfig};
use crate::networks::Checkpoint;
use crate::ply::{self, PlyEncoding};
use crate::render;
use crate::trainer::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "pointrecon", version, about = "Single-view point cloud reconstruction with cycle consistency")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(GenDataArgs),
    /// Train reconstruction and pose networks.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Inference-stage optimization on one sample.
    Iso(IsoArgs),
    /// Reconstruct one image; writes a PLY and a strip of projections.
    Render(RenderArgs),
    /// Nearest training neighbours of an image in embedding space.
    Knn(KnnArgs),
    /// Transfer part labels by point index.
    PartTransfer(PartTransferArgs),
    /// Plot a training log.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON dataset config; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// One of no-cc, cc, nn, nn-sym, geometric-only, pose-only, high-lr, full-schedule.
    #[arg(long, default_value = "cc")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub freeze_at: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k_views: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Validation instances used for logged metrics (0 disables).
    #[arg(long, default_value_t = 10)]
    pub val_instances: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub report: PathBuf,
    /// JSON evaluation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct IsoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample_id: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 64×64 RGB PNG.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub views: usize,
    #[arg(long, default_value_t = 20.0)]
    pub elevation: f64,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Output strip PNG; a JSON list of neighbours is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartTransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// PLY with per-point labels, or whitespace-separated integers. Without
    /// it the reference reconstruction is labeled from its ground truth.
    #[arg(long)]
    pub reference_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub reference_id: usize,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 10)]
    pub targets: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Stamp<'a> {
    command: &'a str,
    args: Vec<String>,
    config_sha256: String,
    seed: Option<u64>,
    version: &'static str,
}

/// Paths created by a command; removed on drop unless committed.
struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            created: Vec::new(),
            committed: false,
        }
    }

    /// Creates `dir` if needed, remembering it when it is new.
    fn dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.exists() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            self.created.push(dir.to_path_buf());
        }
        Ok(())
    }

    fn file(&mut self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            self.dir(parent)?;
        }
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_stamp(dir: &Path, command: &str, config_json: &str, seed: Option<u64>) -> Result<()> {
    let stamp = Stamp {
        command,
        args: std::env::args().collect(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    fs::write(dir.join("stamp.json"), serde_json::to_string_pretty(&stamp)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Merges the keys of a JSON object file over `base`, rejecting unknown keys.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, path: &Path) -> Result<T> {
    let mut value = serde_json::to_value(base)?;
    let patch: serde_json::Value = read_json(path)?;
    let (Some(obj), Some(p)) = (value.as_object_mut(), patch.as_object()) else {
        bail!("{} must hold a JSON object", path.display());
    };
    for (k, v) in p {
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut out = Outputs::new();
    match cli.command {
        Command::GenData(a) => gen_data(a, &mut out)?,
        Command::Train(a) => train(a, &mut out)?,
        Command::Eval(a) => eval(a, &mut out)?,
        Command::Iso(a) => run_iso(a, &mut out)?,
        Command::Render(a) => render_image(a, &mut out)?,
        Command::Knn(a) => knn(a, &mut out)?,
        Command::PartTransfer(a) => part_transfer(a, &mut out)?,
        Command::Plot(a) => plot(a, &mut out)?,
    }
    out.committed = true;
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &mut Outputs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => overlay(&DatasetConfig::default(), p)?,
        None => DatasetConfig::default(),
    };
    cfg.train = a.train.unwrap_or(cfg.train);
    cfg.val = a.val.unwrap_or(cfg.val);
    cfg.test = a.test.unwrap_or(cfg.test);
    out.dir(&a.out)?;
    let data = Dataset::generate(&cfg, a.seed)?;
    data.write(&a.out)?;
    write_stamp(&a.out, "gen-data", &serde_json::to_string(&cfg)?, Some(a.seed))?;
    println!("wrote {} instances to {}", data.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, out: &mut Outputs) -> Result<()> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(p) = &a.config {
        cfg = overlay(&cfg, p)?;
    }
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.freeze_at = a.freeze_at.unwrap_or(cfg.freeze_at.min(cfg.iterations));
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.k_views = a.k_views.unwrap_or(cfg.k_views);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.validate()?;
    let data = Dataset::open(&a.data)?;
    out.dir(&a.out)?;
    write_stamp(&a.out, "train", &cfg.to_json(), Some(cfg.seed))?;

    // Validation metrics read ground truth of the validation split only.
    let val_ids: Vec<usize> = data.ids(Split::Val).into_iter().take(a.val_instances).collect();
    let ecfg = EvalConfig {
        align: false,
        color_views: 0,
        emd: false,
        ..EvalConfig::default()
    };
    let mut monitor = |ck: &Checkpoint| -> std::result::Result<BTreeMap<String, f64>, String> {
        let r = evaluator::evaluate_with(ck, &data, &val_ids, Split::Val, evaluator::Alignment::identity(), &ecfg)
            .map_err(|e| e.to_string())?;
        eprintln!(
            "iteration {:>7}  val chamfer×100 {:.3}  pose median {:.1}°",
            ck.iteration, r.chamfer_x100, r.pose.median_flip
        );
        Ok(BTreeMap::from([
            ("chamfer_x100".to_string(), r.chamfer_x100),
            ("pose_median_flip".to_string(), r.pose.median_flip),
        ]))
    };
    let monitor: Option<&mut trainer::Monitor<'_>> = if val_ids.is_empty() { None } else { Some(&mut monitor) };
    let outcome = trainer::train(&data, &cfg, Some(&a.out), monitor)?;
    println!(
        "trained {} iterations; final checkpoint {}",
        outcome.log.len(),
        outcome.checkpoints.last().map_or_else(String::new, |p| p.display().to_string())
    );
    Ok(())
}

fn eval(a: EvalArgs, out: &mut Outputs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => overlay(&EvalConfig::default(), p)?,
        None => EvalConfig::default(),
    };
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    cfg.view_range = ck.config.view_range;
    cfg.render = ck.config.render;
    let report = evaluator::evaluate(&ck, &data, a.split, &cfg)?;
    out.file(&a.report)?;
    fs::write(&a.report, report.to_json())?;
    write_stamp(&parent_dir(&a.report), "eval", &serde_json::to_string(&cfg)?, Some(cfg.seed))?;
    println!(
        "{:?}: chamfer×100 {:.3}  emd×100 {}  pose median {:.1}° (flip {:.1}°)",
        a.split,
        report.chamfer_x100,
        report.emd_x100.map_or("-".into(), |v| format!("{v:.3}")),
        report.pose.median_noflip,
        report.pose.median_flip
    );
    Ok(())
}

fn run_iso(a: IsoArgs, out: &mut Outputs) -> Result<()> {
    let mut cfg = IsoConfig::default();
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let sample = data.sample(a.sample_id)?;
    let result = iso::optimize(&ck, sample, &cfg)?;
    out.dir(&a.out)?;
    ply::write_ply(a.out.join("before.ply"), &result.initial, PlyEncoding::Ascii)?;
    ply::write_ply(a.out.join("after.ply"), &result.refined, PlyEncoding::Ascii)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&result.report)?)?;
    write_stamp(&a.out, "iso", &serde_json::to_string(&cfg)?, None)?;
    let r = &result.report;
    if let Some(f) = &r.failure {
        bail!("optimization failed: {f}");
    }
    println!(
        "input-view IoU {:.4} -> {:.4}; drift chamfer×100 {:.4}",
        r.iou_before, r.iou_after, r.drift_chamfer_x100
    );
    Ok(())
}

/// Images laid side by side on a white canvas.
fn strip(images: &[image::RgbImage]) -> image::RgbImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w: u32 = images.iter().map(|i| i.width() + 2).sum();
    let mut canvas = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let mut x = 0;
    for img in images {
        image::imageops::overlay(&mut canvas, img, x as i64, 0);
        x += img.width() + 2;
    }
    canvas
}

fn render_image(a: RenderArgs, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let image = imageio::load_rgb(&a.image)?;
    let cloud = ck.recon.reconstruct(&image)?;
    let pose = ck.pose.predict(&[&image])?[0];
    out.dir(&a.out)?;
    ply::write_ply(a.out.join("reconstruction.ply"), &cloud, PlyEncoding::Ascii)?;
    let settings = &ck.config.render;
    let mut tiles = vec![imageio::rgb_to_png(&image)?, imageio::rgb_to_png(&render::image_of(&cloud, &pose, settings)?)?];
    for i in 0..a.views {
        let v = Viewpoint::new(pose.azimuth + 360.0 * i as f64 / a.views.max(1) as f64, a.elevation);
        tiles.push(imageio::rgb_to_png(&render::image_of(&cloud, &v, settings)?)?);
    }
    strip(&tiles).save(a.out.join("projections.png"))?;
    fs::write(a.out.join("pose.json"), serde_json::to_string_pretty(&pose)?)?;
    write_stamp(&a.out, "render", "{}", None)?;
    println!(
        "predicted view azimuth {:.1}° elevation {:.1}°; wrote {}",
        pose.azimuth,
        pose.elevation,
        a.out.display()
    );
    Ok(())
}

fn knn(a: KnnArgs, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let image = imageio::load_rgb(&a.image)?;
    let index = KnnIndex::build(&data, &ck.recon)?;
    let k = a.k.min(index.len());
    let found = index.query_image(&ck.recon, &image, k, None)?;
    let mut tiles = vec![imageio::rgb_to_png(&image)?];
    for (id, _) in &found {
        tiles.push(imageio::rgb_to_png(&data.sample(*id)?.image)?);
    }
    out.file(&a.out)?;
    strip(&tiles).save(&a.out)?;
    let list = a.out.with_extension("json");
    out.file(&list)?;
    let entries: Vec<_> = found
        .iter()
        .map(|(id, d)| serde_json::json!({"id": id, "distance": d}))
        .collect();
    fs::write(&list, serde_json::to_string_pretty(&entries)?)?;
    write_stamp(&parent_dir(&a.out), "knn", "{}", None)?;
    for (id, d) in &found {
        println!("{id}\t{d:.5}");
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<u32>> {
    if path.extension().is_some_and(|e| e == "ply") {
        return ply::read_ply(path)?
            .labels
            .ok_or_else(|| anyhow!("{} has no label property", path.display()));
    }
    fs::read_to_string(path)?
        .split_whitespace()
        .map(|t| t.parse::<u32>().with_context(|| format!("bad label {t:?}")))
        .collect()
}

fn part_transfer(a: PartTransferArgs, out: &mut Outputs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let data = Dataset::open(&a.data)?;
    let labels = a.reference_labels.as_deref().map(read_labels).transpose()?;
    let category = data.category(a.reference_id)?;
    let targets: Vec<usize> = data
        .ids(a.split)
        .into_iter()
        .filter(|&id| id != a.reference_id && data.category(id).ok() == Some(category))
        .take(a.targets)
        .collect();
    if targets.is_empty() {
        bail!("no {} targets in split {:?}", category.name(), a.split);
    }
    let ecfg = EvalConfig {
        view_range: ck.config.view_range,
        render: ck.config.render,
        ..EvalConfig::default()
    };
    let alignment = evaluator::fit_alignment(&ck, &data, &ecfg)?;
    let (report, clouds) = evaluator::part_transfer(&ck, &data, a.reference_id, &targets, labels, &alignment)?;
    out.dir(&a.out)?;
    let palette = [[0.9, 0.2, 0.2], [0.2, 0.7, 0.2], [0.2, 0.3, 0.9]];
    for (id, c) in targets.iter().zip(&clouds) {
        let colors = c.labels.as_ref().expect("labeled").iter().map(|&l| palette[l as usize % 3]).collect();
        let colored = PointCloud::with_colors(c.points.clone(), colors)?.with_labels(c.labels.clone().expect("labeled"))?;
        ply::write_ply(a.out.join(format!("target_{id:05}.ply")), &colored, PlyEncoding::Ascii)?;
    }
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_stamp(&a.out, "part-transfer", "{}", None)?;
    println!("mean part IoU {:.3} over {} targets", report.mean_iou, targets.len());
    Ok(())
}

const PLOT_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// One panel per non-empty column, log10 scale when the series is positive.
pub fn plot_log(text: &str) -> Result<image::RgbImage> {
    let (header, rows) = trainer::parse_log_csv(text).map_err(|e| anyhow!(e))?;
    let series: Vec<(usize, Vec<(f64, f64)>)> = (2..header.len())
        .map(|c| {
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r[0]?, r[c]?))).collect();
            (c, pts)
        })
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if series.is_empty() {
        bail!("log has no data");
    }
    let (pw, ph, pad) = (480u32, 120u32, 8u32);
    let mut img = image::RgbImage::from_pixel(pw + 2 * pad, (ph + pad) * series.len() as u32 + pad, image::Rgb([255, 255, 255]));
    let x_max = rows.iter().filter_map(|r| r[0]).fold(1.0f64, f64::max);
    for (k, (_, pts)) in series.iter().enumerate() {
        let top = pad + k as u32 * (ph + pad);
        let log = pts.iter().all(|p| p.1 > 0.0);
        let ys: Vec<f64> = pts.iter().map(|p| if log { p.1.log10() } else { p.1 }).collect();
        let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for x in 0..pw {
            img.put_pixel(pad + x, top + ph - 1, image::Rgb([160, 160, 160]));
        }
        for y in 0..ph {
            img.put_pixel(pad, top + y, image::Rgb([160, 160, 160]));
        }
        let color = image::Rgb(PLOT_COLORS[k % PLOT_COLORS.len()]);
        let to_px = |x: f64, y: f64| {
            let px = pad as f64 + x / x_max * (pw - 1) as f64;
            let py = top as f64 + (ph - 1) as f64 * (1.0 - (y - lo) / span);
            (px, py)
        };
        let mut prev: Option<(f64, f64)> = None;
        for (p, y) in pts.iter().zip(&ys) {
            let cur = to_px(p.0, *y);
            let from = prev.unwrap_or(cur);
            let n = ((cur.0 - from.0).abs().max((cur.1 - from.1).abs()).ceil() as usize).max(1);
            for s in 0..=n {
                let t = s as f64 / n as f64;
                let (x, y) = (from.0 + t * (cur.0 - from.0), from.1 + t * (cur.1 - from.1));
                img.put_pixel(x.round() as u32, y.round() as u32, color);
            }
            prev = Some(cur);
        }
    }
    Ok(img)
}

fn plot(a: PlotArgs, out: &mut Outputs) -> Result<()> {
    let text = fs::read_to_string(&a.log).with_context(|| format!("reading {}", a.log.display()))?;
    let img = plot_log(&text)?;
    out.file(&a.out)?;
    img.save(&a.out)?;
    let header = text.lines().next().unwrap_or_default();
    write_stamp(&parent_dir(&a.out), "plot", header, None)?;
    println!("panels: {}", header.split(',').skip(2).collect::<Vec<_>>().join(", "));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Result<()> {
        let parsed = Cli::try_parse_from(std::iter::once("pointrecon").chain(args.iter().copied()))?;
        run(parsed)
    }

    #[test]
    fn unknown_flags_fail() {
        assert!(Cli::try_parse_from(["pointrecon", "eval", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["pointrecon", "nope"]).is_err());
    }

    #[test]
    fn failed_command_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let report = dir.path().join("sub/report.json");
        let err = cli(&[
            "eval",
            "--ckpt",
            dir.path().join("missing.bin").to_str().unwrap(),
            "--data",
            dir.path().to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]);
        assert!(err.is_err());
        assert!(!dir.path().join("sub").exists());
    }

    #[test]
    fn config_overlay_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"k_views": 2}"#).unwrap();
        let c: TrainConfig = overlay(&TrainConfig::default(), &p).unwrap();
        assert_eq!(c.k_views, 2);
        fs::write(&p, r#"{"k_viewz": 2}"#).unwrap();
        assert!(overlay(&TrainConfig::default(), &p).is_err());
    }

    #[test]
    fn plot_draws_panels() {
        let log = "iteration,phase,image,mask\n0,1,0.5,10\n1,1,0.4,8\n2,2,0.3,\n";
        let img = plot_log(log).unwrap();
        assert_eq!(img.height(), (120 + 8) * 2 + 8);
        assert!(plot_log("iteration,phase\n").is_err());
    }
}
