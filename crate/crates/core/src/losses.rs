//! Projection, cycle, neighbour, symmetry and regularization losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{CustomOp, DiffError, Tensor, Var};
use crate::geometry::{chamfer_var, partition_xz, Viewpoint};
use crate::render::{project_points, render_mask, RenderError, RenderSettings};

pub const BCE_EPS: f64 = 1e-7;
/// Soft-mask level above which a predicted pixel counts as positive.
pub const THETA_POS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{0} needs at least one element")]
    Empty(&'static str),
    #[error("{what}: {left} vs {right} elements")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("weight {name} is negative ({value})")]
    NegativeWeight { name: &'static str, value: f64 },
}

/// Coefficients of the reconstruction, pose and refinement objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub eta_nn: f64,
    pub kappa_sym: f64,
    pub lambda_reg: f64,
    pub kappa_iso_sym: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 1e4,
            gamma: 1.0,
            rho: 1.0,
            eta_nn: 100.0,
            kappa_sym: 100.0,
            lambda_reg: 500.0,
            kappa_iso_sym: 500.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("eta_nn", self.eta_nn),
            ("kappa_sym", self.kappa_sym),
            ("lambda_reg", self.lambda_reg),
            ("kappa_iso_sym", self.kappa_iso_sym),
        ];
        for (name, value) in all {
            if !(value >= 0.0) {
                return Err(LossError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), LossError> {
    if a != b {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean over pixels of the squared RGB difference; images are `[3, H, W]`.
pub fn image_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>, LossError> {
    let s = pred.shape();
    same_shape("image_loss", &s, gt.shape())?;
    if s.len() != 3 {
        return Err(DiffError::ShapeMismatch {
            op: "image_loss",
            lhs: s,
            rhs: vec![3, 0, 0],
        }
        .into());
    }
    let hw = (s[1] * s[2]) as f64;
    Ok(pred.sub(pred.tape().constant(gt.clone()))?.square().sum().mul_scalar(1.0 / hw))
}

/// Mean binary cross-entropy with the prediction clamped to `[ε, 1 − ε]`.
pub fn bce_mask_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>, LossError> {
    same_shape("bce_mask_loss", &pred.shape(), gt.shape())?;
    let tape = pred.tape();
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS);
    let m = tape.constant(gt.clone());
    let not_m = tape.constant(gt.map(|v| 1.0 - v));
    let pos = m.mul(p.log()?)?;
    let neg = not_m.mul(p.neg().add_scalar(1.0).log()?)?;
    Ok(pos.add(neg)?.mean().neg())
}

/// Exact squared Euclidean distance transform to the nearest positive pixel
/// of a binary `[H, W]` mask; `None` when the mask has no positives.
pub fn squared_distance_transform(mask: &Tensor) -> Option<Vec<f64>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if !mask.data().iter().any(|&v| v >= 0.5) {
        return None;
    }
    const FAR: f64 = 1e20;
    fn pass(f: &[f64], out: &mut [f64]) {
        // Lower envelope of parabolas rooted at (q, f[q]).
        let n = f.len();
        let mut v = vec![0usize; n];
        let mut z = vec![0.0f64; n + 1];
        let mut k = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }
    let mut grid: Vec<f64> = mask.data().iter().map(|&v| if v >= 0.5 { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        pass(&col, &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let row = grid[r * w..(r + 1) * w].to_vec();
        pass(&row, &mut grid[r * w..(r + 1) * w]);
    }
    Some(grid)
}

/// Which side of the affinity loss had no positive pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AffinityFlags {
    pub gt_empty: bool,
    pub pred_empty: bool,
}

struct Affinity {
    dt: Option<Vec<f64>>,
    /// (predicted pixel receiving the gradient, squared distance) per GT positive.
    partners: Vec<(usize, f64)>,
    second_term_grad: bool,
}

impl CustomOp for Affinity {
    fn name(&self) -> &'static str {
        "affinity_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let mut dm = match &self.dt {
            Some(dt) => Tensor::new(inputs[0].shape(), dt.iter().map(|d| g * d).collect()).expect("shape"),
            None => Tensor::zeros(inputs[0].shape()),
        };
        if self.second_term_grad {
            for &(k, d2) in &self.partners {
                dm.data_mut()[k] += g * d2;
            }
        }
        vec![Some(dm)]
    }
}

/// Affinity between a soft predicted mask and a binary GT mask, both `[H, W]`:
/// `Σ_ij min_{kl∈M₊} d²·M̂_ij·M_kl + Σ_ij min_{kl∈M̂₊} d²·M_ij·M̂_kl`.
/// A side without positives contributes zero and is flagged.
pub fn affinity_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<(Var<'t>, AffinityFlags), LossError> {
    affinity(pred, gt, true)
}

fn affinity<'t>(pred: Var<'t>, gt: &Tensor, second_term_grad: bool) -> Result<(Var<'t>, AffinityFlags), LossError> {
    let s = pred.shape();
    same_shape("affinity_loss", &s, gt.shape())?;
    if s.len() != 2 {
        return Err(DiffError::ShapeMismatch {
            op: "affinity_loss",
            lhs: s,
            rhs: vec![0, 0],
        }
        .into());
    }
    let w = s[1];
    let m = pred.value();
    let md = m.data();
    let dt = squared_distance_transform(gt);
    let mut flags = AffinityFlags {
        gt_empty: dt.is_none(),
        pred_empty: false,
    };
    let mut total = dt
        .as_ref()
        .map_or(0.0, |dt| dt.iter().zip(md).map(|(d, v)| d * v).sum());

    let positives: Vec<usize> = (0..md.len()).filter(|&k| md[k] > THETA_POS).collect();
    flags.pred_empty = positives.is_empty();
    let mut partners = Vec::new();
    if !positives.is_empty() {
        for (ij, _) in gt.data().iter().enumerate().filter(|(_, &v)| v >= 0.5) {
            if md[ij] > THETA_POS {
                partners.push((ij, 0.0));
                continue;
            }
            let (i, j) = ((ij / w) as f64, (ij % w) as f64);
            let mut best = (f64::INFINITY, 0, 0.0);
            for &kl in &positives {
                let (k, l) = ((kl / w) as f64, (kl % w) as f64);
                let d2 = (i - k).powi(2) + (j - l).powi(2);
                let v = d2 * md[kl];
                if v < best.0 {
                    best = (v, kl, d2);
                }
            }
            total += best.0;
            partners.push((best.1, best.2));
        }
    }
    let op = Rc::new(Affinity {
        dt,
        partners,
        second_term_grad,
    });
    Ok((pred.tape().custom(op, &[pred], Tensor::scalar(total)), flags))
}

/// Training mask loss: `L_bce + L_aff / (h·w)`.
///
/// The affinity value is the literal one, but the predicted mask inside the
/// second term only selects the nearest predicted pixel and carries no
/// gradient. With the literal gradient that term can only push predicted mass
/// down, and training collapses the cloud to a point within a few dozen steps.
pub fn mask_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<(Var<'t>, AffinityFlags), LossError> {
    let s = pred.shape();
    let bce = bce_mask_loss(pred, gt)?;
    let (aff, flags) = affinity(pred, gt, false)?;
    let hw = (s[0] * s[1]) as f64;
    Ok((bce.add(aff.mul_scalar(1.0 / hw))?, flags))
}

/// Sum of Chamfer distances between `cloud` and each re-encoded cloud.
pub fn geometric_cycle_loss<'t>(cloud: Var<'t>, cycled: &[Var<'t>]) -> Result<Var<'t>, LossError> {
    let (first, rest) = cycled.split_first().ok_or(LossError::Empty("geometric_cycle_loss"))?;
    let mut total = chamfer_var(cloud, *first)?;
    for c in rest {
        total = total.add(chamfer_var(cloud, *c)?)?;
    }
    Ok(total)
}

/// Azimuth difference `pred − target` shifted by a multiple of 360 into `[-180, 180]`.
fn wrapped_azimuth<'t>(pred: Var<'t>, target: f64) -> Var<'t> {
    let delta = pred.add_scalar(-target);
    let shift = (delta.value().data()[0] / 360.0).round() * 360.0;
    delta.add_scalar(-shift)
}

/// `(1/k) Σ |wrap(Δaz)| + |Δel|` between sampled viewpoints and the pose
/// network's predictions on their renders.
pub fn pose_cycle_loss<'t>(sampled: &[Viewpoint], predicted: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>, LossError> {
    if sampled.len() != predicted.len() {
        return Err(LossError::LengthMismatch {
            what: "pose_cycle_loss",
            left: sampled.len(),
            right: predicted.len(),
        });
    }
    if sampled.is_empty() {
        return Err(LossError::Empty("pose_cycle_loss"));
    }
    let mut total: Option<Var<'t>> = None;
    for (v, &(az, el)) in sampled.iter().zip(predicted) {
        let term = wrapped_azimuth(az, v.azimuth)
            .abs()
            .add(el.add_scalar(-v.elevation).abs())?
            .sum();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("nonempty").mul_scalar(1.0 / sampled.len() as f64))
}

/// Mask losses of `cloud` rendered from each neighbour's (detached) predicted
/// pose against that neighbour's silhouette.
pub fn nn_consistency_loss<'t>(
    cloud: Var<'t>,
    neighbour_masks: &[&Tensor],
    neighbour_poses: &[Viewpoint],
    settings: &RenderSettings,
) -> Result<Var<'t>, LossError> {
    if neighbour_masks.len() != neighbour_poses.len() {
        return Err(LossError::LengthMismatch {
            what: "nn_consistency_loss",
            left: neighbour_masks.len(),
            right: neighbour_poses.len(),
        });
    }
    if neighbour_masks.is_empty() {
        return Err(LossError::Empty("nn_consistency_loss"));
    }
    let tape = cloud.tape();
    let mut total: Option<Var<'t>> = None;
    for (mask, pose) in neighbour_masks.iter().zip(neighbour_poses) {
        let proj = project_points(cloud, tape.scalar(pose.azimuth), tape.scalar(pose.elevation), settings)?;
        let (l, _) = mask_loss(render_mask(proj.uv, settings)?, mask)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Chamfer distance between the `y ≥ 0` half of an `[N, 3]` cloud and the
/// mirror image of its `y < 0` half. Returns zero and `true` when a half is empty.
pub fn symmetry_loss<'t>(cloud: Var<'t>) -> Result<(Var<'t>, bool), LossError> {
    let value = cloud.value();
    let pts: Vec<[f64; 3]> = value.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let halves = partition_xz(&pts);
    if halves.degenerate() {
        return Ok((cloud.tape().scalar(0.0), true));
    }
    let tape = cloud.tape();
    let plus = cloud.index_select(&halves.positive)?;
    let minus = cloud
        .index_select(&halves.negative)?
        .mul(tape.constant(Tensor::new(&[1, 3], vec![1.0, -1.0, 1.0])?))?;
    Ok((chamfer_var(plus, minus)?, false))
}

fn add_weighted<'t>(acc: Var<'t>, weight: f64, term: Option<Var<'t>>) -> Result<Var<'t>, LossError> {
    match term {
        Some(t) if weight != 0.0 => Ok(acc.add(t.mul_scalar(weight))?),
        _ => Ok(acc),
    }
}

/// `α(L_I + L_M) + β L_G + η L_NN + κ L_sym`; absent terms are skipped.
pub fn recon_total<'t>(
    w: &LossWeights,
    image: Var<'t>,
    mask: Var<'t>,
    geometric: Option<Var<'t>>,
    nn: Option<Var<'t>>,
    sym: Option<Var<'t>>,
) -> Result<Var<'t>, LossError> {
    w.validate()?;
    let acc = image.add(mask)?.mul_scalar(w.alpha);
    let acc = add_weighted(acc, w.beta, geometric)?;
    let acc = add_weighted(acc, w.eta_nn, nn)?;
    add_weighted(acc, w.kappa_sym, sym)
}

/// `γ(L_I + L_M) + ρ L_pose`.
pub fn pose_total<'t>(w: &LossWeights, image: Var<'t>, mask: Var<'t>, pose: Option<Var<'t>>) -> Result<Var<'t>, LossError> {
    w.validate()?;
    let acc = image.add(mask)?.mul_scalar(w.gamma);
    add_weighted(acc, w.rho, pose)
}

/// `α(L_I + L_M) + λ d_Ch(P̂, P̂₀) + κ L_sym(P̂) / N` for inference-stage refinement.
pub fn iso_objective<'t>(
    w: &LossWeights,
    image: Var<'t>,
    mask: Var<'t>,
    cloud: Var<'t>,
    initial: &Tensor,
) -> Result<Var<'t>, LossError> {
    w.validate()?;
    let reg = chamfer_var(cloud, cloud.tape().constant(initial.clone()))?;
    // Symmetry is averaged over points; summed, it swamps the image terms
    // whenever the learned frame is not aligned with the xz plane.
    let (sym, _) = symmetry_loss(cloud)?;
    let n = cloud.shape()[0].max(1) as f64;
    Ok(image
        .add(mask)?
        .mul_scalar(w.alpha)
        .add(reg.mul_scalar(w.lambda_reg))?
        .add(sym.mul_scalar(w.kappa_iso_sym / n))?)
}
