//! Shape, pose and color metrics, global alignment, and index-based
//! correspondence applications.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, GroundTruth, Split};
use crate::diffcore::{DiffError, Tape};
use crate::geometry::{angular_error, chamfer, emd, GeometryError, PointCloud, RigidRotation, ViewSampler, Viewpoint};
use crate::networks::{stack_images, Checkpoint, PoseNet, ReconNet, NUM_POINTS};
use crate::render::{image_of, RenderError, RenderSettings};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("split {0:?} has no instances")]
    EmptySplit(Split),
    #[error("expected {expected} labels, got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("cloud {0} carries no {1}")]
    Missing(usize, &'static str),
    #[error("{0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ground-truth points kept for the set metrics.
    pub gt_points: usize,
    pub align: bool,
    pub align_step_deg: f64,
    /// Also search the upside-down half of the rotation grid.
    pub align_flip: bool,
    /// Points per cloud during the alignment search.
    pub align_points: usize,
    /// Cap on validation instances used for alignment.
    pub align_instances: Option<usize>,
    pub accuracy_deg: f64,
    pub color_views: usize,
    pub emd: bool,
    pub seed: u64,
    pub view_range: ViewSampler,
    pub render: RenderSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gt_points: NUM_POINTS,
            align: true,
            align_step_deg: 1.0,
            align_flip: true,
            align_points: 256,
            align_instances: None,
            accuracy_deg: 30.0,
            color_views: 10,
            emd: true,
            seed: 0,
            view_range: ViewSampler::default(),
            render: RenderSettings::default(),
        }
    }
}

fn instance_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// Subsample of `n` points drawn with a fixed per-instance stream; clouds
/// with at most `n` points are returned whole.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64, id: usize) -> PointCloud {
    if cloud.len() <= n {
        return cloud.clone();
    }
    let mut idx = sample_indices(&mut instance_rng(seed, id), cloud.len(), n).into_vec();
    idx.sort_unstable();
    cloud.select(&idx)
}

/// Network outputs for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub cloud: PointCloud,
    pub view: Viewpoint,
}

/// Runs both networks over `ids` in chunks.
pub fn predict(ck: &Checkpoint, dataset: &Dataset, ids: &[usize]) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(16) {
        let images = chunk
            .iter()
            .map(|&id| dataset.sample(id).map(|s| &s.image))
            .collect::<Result<Vec<_>, _>>()?;
        let tape = Tape::new();
        let x = tape.constant(stack_images(&images)?);
        let recon = ReconNet::forward(&ck.recon.params.bind_frozen(&tape), x)?;
        let pose = PoseNet::forward(&ck.pose.params.bind_frozen(&tape), &ck.pose.range, x)?;
        for (b, &id) in chunk.iter().enumerate() {
            out.push(Prediction {
                id,
                cloud: recon.cloud_of(b)?,
                view: pose.viewpoint(b),
            });
        }
    }
    Ok(out)
}

/// Rotation `Rz(azimuth) · F` taking predictions into the ground-truth frame,
/// where `F` is a half turn about `x` when `flipped`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub azimuth_deg: f64,
    pub flipped: bool,
    /// Mean Chamfer on the alignment set at this rotation (unscaled).
    pub mean_chamfer: Option<f64>,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            azimuth_deg: 0.0,
            flipped: false,
            mean_chamfer: None,
        }
    }

    pub fn rotation(&self) -> RigidRotation {
        let z = RigidRotation::about_z(self.azimuth_deg);
        if self.flipped {
            z.compose(&RigidRotation::about_x(180.0))
        } else {
            z
        }
    }
}

/// Grid search over up-axis rotations (and optionally the flipped half)
/// minimizing mean Chamfer between rotated predictions and ground truth.
pub fn global_align(preds: &[PointCloud], gts: &[PointCloud], cfg: &EvalConfig) -> Result<Alignment, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch(preds.len(), gts.len()));
    }
    let n = cfg.align_instances.map_or(preds.len(), |c| c.min(preds.len()));
    let sub = |c: &PointCloud, i: usize, salt: u64| sample_points(c, cfg.align_points, cfg.seed ^ salt, i);
    let p: Vec<PointCloud> = preds[..n].iter().enumerate().map(|(i, c)| sub(c, i, 0xa1)).collect();
    let g: Vec<PointCloud> = gts[..n].iter().enumerate().map(|(i, c)| sub(c, i, 0xa2)).collect();
    let steps = (360.0 / cfg.align_step_deg).round().max(1.0) as usize;
    let flips: &[bool] = if cfg.align_flip { &[false, true] } else { &[false] };
    let mut best = Alignment::identity();
    let mut best_mean = f64::INFINITY;
    for &flipped in flips {
        for s in 0..steps {
            let cand = Alignment {
                azimuth_deg: s as f64 * cfg.align_step_deg,
                flipped,
                mean_chamfer: None,
            };
            let r = cand.rotation();
            let mut total = 0.0;
            for (a, b) in p.iter().zip(&g) {
                total += chamfer(&a.rotated(&r), b)?;
            }
            let mean = total / n.max(1) as f64;
            if mean < best_mean {
                best_mean = mean;
                best = Alignment {
                    mean_chamfer: Some(mean),
                    ..cand
                };
            }
        }
    }
    Ok(best)
}

/// Predicted viewpoint expressed in the ground-truth frame.
pub fn align_view(view: &Viewpoint, r: &RigidRotation) -> Viewpoint {
    Viewpoint::from_direction(r.apply(view.direction()))
}

/// Per-instance `(no-flip, flip)` angular errors. The flip variant re-scores
/// errors above 90° with the azimuth turned by 180° and keeps the smaller.
pub fn pose_errors(pred: &[Viewpoint], gt: &[Viewpoint], r: &RigidRotation) -> Vec<(f64, f64)> {
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let e = angular_error(&align_view(p, r), g);
            let f = if e > 90.0 {
                let turned = Viewpoint::new(p.azimuth + 180.0, p.elevation);
                e.min(angular_error(&align_view(&turned, r), g))
            } else {
                e
            };
            (e, f)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub median_noflip: f64,
    pub median_flip: f64,
    /// Fractions in `[0, 1]` with error below the threshold.
    pub accuracy_noflip: f64,
    pub accuracy_flip: f64,
    pub threshold_deg: f64,
}

pub fn pose_metrics(errors: &[(f64, f64)], threshold_deg: f64) -> PoseMetrics {
    let (e, f): (Vec<f64>, Vec<f64>) = errors.iter().copied().unzip();
    let acc = |v: &[f64]| v.iter().filter(|x| **x < threshold_deg).count() as f64 / v.len().max(1) as f64;
    PoseMetrics {
        median_noflip: median(&e),
        median_flip: median(&f),
        accuracy_noflip: acc(&e),
        accuracy_flip: acc(&f),
        threshold_deg,
    }
}

/// Unscaled `(chamfer, emd)` of one prediction against its ground truth.
pub fn shape_distances(pred: &PointCloud, gt: &PointCloud, with_emd: bool) -> Result<(f64, Option<f64>), EvalError> {
    let c = chamfer(pred, gt)?;
    let e = if with_emd && pred.len() == gt.len() {
        Some(emd(pred, gt)?.value)
    } else {
        None
    };
    Ok((c, e))
}

/// Mean over pixels of the per-pixel RGB distance between renders of `pred`
/// and `gt` from `views` viewpoints drawn with a fixed per-instance stream.
pub fn color_distance(pred: &PointCloud, gt: &PointCloud, id: usize, cfg: &EvalConfig) -> Result<f64, EvalError> {
    if pred.colors.is_none() {
        return Err(EvalError::Missing(id, "colors"));
    }
    if gt.colors.is_none() {
        return Err(EvalError::Missing(id, "colors"));
    }
    let mut rng = instance_rng(cfg.seed ^ 0xc0, id);
    let pixels = cfg.render.pixels();
    let mut total = 0.0;
    for _ in 0..cfg.color_views {
        let v = cfg.view_range.sample(&mut rng);
        let a = image_of(pred, &v, &cfg.render)?;
        let b = image_of(gt, &v, &cfg.render)?;
        let (a, b) = (a.data(), b.data());
        let mut sum = 0.0;
        for p in 0..pixels {
            let d: f64 = (0..3).map(|c| (a[c * pixels + p] - b[c * pixels + p]).powi(2)).sum();
            sum += d.sqrt();
        }
        total += sum / pixels as f64;
    }
    Ok(total / cfg.color_views.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: usize,
    pub chamfer_x100: f64,
    pub emd_x100: Option<f64>,
    pub pose_error_noflip: f64,
    pub pose_error_flip: f64,
    pub color_l2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub iteration: u64,
    pub chamfer_x100: f64,
    pub emd_x100: Option<f64>,
    pub pose: PoseMetrics,
    pub color_l2: Option<f64>,
    pub alignment: Alignment,
    pub instances: Vec<InstanceMetrics>,
    pub config: EvalConfig,
}

impl MetricReport {
    /// Every reported value is finite and non-negative.
    pub fn is_well_formed(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let p = &self.pose;
        ok(self.chamfer_x100)
            && self.emd_x100.is_none_or(ok)
            && self.color_l2.is_none_or(ok)
            && [p.median_noflip, p.median_flip, p.accuracy_noflip, p.accuracy_flip]
                .into_iter()
                .all(ok)
            && self.instances.iter().all(|i| {
                ok(i.chamfer_x100)
                    && i.emd_x100.is_none_or(ok)
                    && ok(i.pose_error_noflip)
                    && ok(i.pose_error_flip)
                    && i.color_l2.is_none_or(ok)
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn ground_truths(dataset: &Dataset, ids: &[usize]) -> Result<Vec<GroundTruth>, EvalError> {
    ids.iter()
        .map(|&id| dataset.ground_truth(id).map_err(EvalError::from))
        .collect()
}

/// Alignment fitted on the validation split.
pub fn fit_alignment(ck: &Checkpoint, dataset: &Dataset, cfg: &EvalConfig) -> Result<Alignment, EvalError> {
    if !cfg.align {
        return Ok(Alignment::identity());
    }
    let ids = dataset.ids(Split::Val);
    if ids.is_empty() {
        return Err(EvalError::EmptySplit(Split::Val));
    }
    let ids = &ids[..cfg.align_instances.map_or(ids.len(), |c| c.min(ids.len()))];
    let preds: Vec<PointCloud> = predict(ck, dataset, ids)?.into_iter().map(|p| p.cloud).collect();
    let gts: Vec<PointCloud> = ground_truths(dataset, ids)?.into_iter().map(|g| g.cloud).collect();
    global_align(&preds, &gts, cfg)
}

/// All metrics for one split, with the alignment fitted on the validation split.
pub fn evaluate(ck: &Checkpoint, dataset: &Dataset, split: Split, cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    let ids = dataset.ids(split);
    if ids.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let alignment = fit_alignment(ck, dataset, cfg)?;
    evaluate_with(ck, dataset, &ids, split, alignment, cfg)
}

/// Metrics for explicit `ids` under a given alignment.
pub fn evaluate_with(
    ck: &Checkpoint,
    dataset: &Dataset,
    ids: &[usize],
    split: Split,
    alignment: Alignment,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    let preds = predict(ck, dataset, ids)?;
    let gts = ground_truths(dataset, ids)?;
    let r = alignment.rotation();
    let pv: Vec<Viewpoint> = preds.iter().map(|p| p.view).collect();
    let gv: Vec<Viewpoint> = gts.iter().map(|g| g.view).collect();
    let perrs = pose_errors(&pv, &gv, &r);
    let mut instances = Vec::with_capacity(ids.len());
    for ((p, g), &(e, f)) in preds.iter().zip(&gts).zip(&perrs) {
        let aligned = p.cloud.rotated(&r);
        let gt = sample_points(&g.cloud, cfg.gt_points, cfg.seed, p.id);
        let (c, m) = shape_distances(&aligned, &gt, cfg.emd)?;
        let color = if cfg.color_views > 0 {
            Some(color_distance(&aligned, &g.cloud, p.id, cfg)?)
        } else {
            None
        };
        instances.push(InstanceMetrics {
            id: p.id,
            chamfer_x100: 100.0 * c,
            emd_x100: m.map(|v| 100.0 * v),
            pose_error_noflip: e,
            pose_error_flip: f,
            color_l2: color,
        });
    }
    let n = instances.len() as f64;
    let mean_opt = |f: &dyn Fn(&InstanceMetrics) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = instances.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    Ok(MetricReport {
        split,
        iteration: ck.iteration,
        chamfer_x100: instances.iter().map(|i| i.chamfer_x100).sum::<f64>() / n,
        emd_x100: mean_opt(&|i| i.emd_x100),
        color_l2: mean_opt(&|i| i.color_l2),
        pose: pose_metrics(&perrs, cfg.accuracy_deg),
        alignment,
        instances,
        config: cfg.clone(),
    })
}

/// A fixed color per point index from a 2D map over index space.
pub fn uv_colors(n: usize) -> Vec<[f64; 3]> {
    let side = (n as f64).sqrt().ceil().max(2.0) as usize;
    (0..n)
        .map(|i| {
            let u = (i % side) as f64 / (side - 1) as f64;
            let v = (i / side) as f64 / (side - 1) as f64;
            [u, v, 1.0 - 0.5 * (u + v)]
        })
        .collect()
}

/// Recolors every cloud with [`uv_colors`] so equal indices share a color.
pub fn export_uv_correspondence(clouds: &[PointCloud]) -> Vec<PointCloud> {
    clouds
        .iter()
        .map(|c| PointCloud {
            points: c.points.clone(),
            colors: Some(uv_colors(c.len())),
            labels: c.labels.clone(),
        })
        .collect()
}

/// Label of the nearest ground-truth point for every predicted point.
pub fn nearest_labels(pred: &PointCloud, gt: &PointCloud) -> Result<Vec<u32>, EvalError> {
    let labels = gt.labels.as_ref().ok_or(EvalError::Missing(0, "labels"))?;
    Ok(pred
        .points
        .iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (q, &l) in gt.points.iter().zip(labels) {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.0 {
                    best = (d, l);
                }
            }
            best.1
        })
        .collect())
}

/// Mean over point indices of the share of instances agreeing with the most
/// common nearest-part label at that index.
pub fn part_consistency(labels: &[Vec<u32>]) -> f64 {
    let Some(first) = labels.first() else {
        return f64::NAN;
    };
    let n = first.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut counts = std::collections::BTreeMap::new();
        for l in labels {
            *counts.entry(l[i]).or_insert(0usize) += 1;
        }
        total += *counts.values().max().expect("nonempty") as f64 / labels.len() as f64;
    }
    total / n as f64
}

/// Copies label `i` of the reference onto point `i` of every target.
pub fn transfer_part_labels(reference: &[u32], targets: &[PointCloud]) -> Result<Vec<PointCloud>, EvalError> {
    if reference.len() != NUM_POINTS {
        return Err(EvalError::LabelCount {
            expected: NUM_POINTS,
            got: reference.len(),
        });
    }
    targets
        .iter()
        .map(|t| {
            if t.len() != reference.len() {
                return Err(EvalError::LabelCount {
                    expected: t.len(),
                    got: reference.len(),
                });
            }
            Ok(t.clone().with_labels(reference.to_vec())?)
        })
        .collect()
}

/// Per-part IoU over points; `None` where the part is absent from both.
pub fn part_iou(pred: &[u32], gt: &[u32], parts: u32) -> Vec<Option<f64>> {
    (0..parts)
        .map(|k| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (a, b) in pred.iter().zip(gt) {
                let (x, y) = (*a == k, *b == k);
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartTransferReport {
    pub reference_id: usize,
    pub targets: Vec<usize>,
    /// Mean IoU per part over targets where the part occurs.
    pub part_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// Transfers reference labels to each target reconstruction and scores them
/// against the nearest ground-truth part of every point. Without explicit
/// labels, the reference is labeled from its own ground truth.
pub fn part_transfer(
    ck: &Checkpoint,
    dataset: &Dataset,
    reference_id: usize,
    targets: &[usize],
    reference_labels: Option<Vec<u32>>,
    alignment: &Alignment,
) -> Result<(PartTransferReport, Vec<PointCloud>), EvalError> {
    let r = alignment.rotation();
    let reference_labels = match reference_labels {
        Some(l) => l,
        None => {
            let p = predict(ck, dataset, &[reference_id])?.remove(0);
            nearest_labels(&p.cloud.rotated(&r), &dataset.ground_truth(reference_id)?.cloud)?
        }
    };
    let preds = predict(ck, dataset, targets)?;
    let clouds: Vec<PointCloud> = preds.iter().map(|p| p.cloud.clone()).collect();
    let labeled = transfer_part_labels(&reference_labels, &clouds)?;
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for (p, l) in preds.iter().zip(&labeled) {
        let gt = nearest_labels(&p.cloud.rotated(&r), &dataset.ground_truth(p.id)?.cloud)?;
        for (k, v) in part_iou(l.labels.as_ref().expect("labeled"), &gt, 3).into_iter().enumerate() {
            if let Some(v) = v {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let part_iou: Vec<Option<f64>> = (0..3).map(|k| (counts[k] > 0).then(|| sums[k] / counts[k] as f64)).collect();
    let present: Vec<f64> = part_iou.iter().flatten().copied().collect();
    let mean_iou = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok((
        PartTransferReport {
            reference_id,
            targets: targets.to_vec(),
            part_iou,
            mean_iou,
        },
        labeled,
    ))
}
