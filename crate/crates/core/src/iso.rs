//! Inference-stage optimization: per-sample fine-tuning of the
//! reconstruction network against its own input image.

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::diffcore::{DiffError, Tape, Tensor};
use crate::geometry::{chamfer, GeometryError, PointCloud, Viewpoint};
use crate::losses::{image_loss, iso_objective, mask_loss, LossError, LossWeights};
use crate::networks::{stack_images, Checkpoint, ReconNet};
use crate::render::{iou, mask_of, project_points, render_color, render_mask, threshold, RenderError, RenderSettings};
use crate::trainer::{adam_update, OptimizerState, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum IsoError {
    #[error("invalid iso config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsoConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Image and mask weight.
    pub alpha: f64,
    /// Chamfer tie to the initial prediction.
    pub lambda_reg: f64,
    pub kappa_sym: f64,
    /// Largest acceptable Chamfer×100 between refined and initial clouds.
    pub drift_bound: f64,
}

impl Default for IsoConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            steps: 50,
            learning_rate: 1e-4,
            alpha: w.alpha,
            lambda_reg: w.lambda_reg,
            kappa_sym: w.kappa_iso_sym,
            drift_bound: 1.0,
        }
    }
}

impl IsoConfig {
    pub fn validate(&self) -> Result<(), IsoError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.lambda_reg) && ok(self.kappa_sym)) {
            return Err(IsoError::Config("weights must be finite and non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(IsoError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda_reg: self.lambda_reg,
            kappa_iso_sym: self.kappa_sym,
            ..LossWeights::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoReport {
    pub sample_id: usize,
    pub view: Viewpoint,
    pub steps_run: usize,
    pub iou_before: f64,
    pub iou_after: f64,
    pub drift_chamfer_x100: f64,
    pub within_drift_bound: bool,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Set when a non-finite objective stopped the run; the initial prediction is returned.
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct IsoOutcome {
    pub initial: PointCloud,
    pub refined: PointCloud,
    pub recon: ReconNet,
    pub report: IsoReport,
}

/// Objective value and reconstruction for fixed parameters.
fn evaluate(
    net: &ReconNet,
    x: &Tensor,
    sample: &Sample,
    view: &Viewpoint,
    initial: &Tensor,
    w: &LossWeights,
    settings: &RenderSettings,
) -> Result<(f64, PointCloud), IsoError> {
    let tape = Tape::new();
    let p = net.params.bind_frozen(&tape);
    let out = ReconNet::forward(&p, tape.constant(x.clone()))?;
    let obj = objective(&tape, out.positions_of(0)?, out.colors_of(0)?, sample, view, initial, w, settings)?;
    Ok((obj.item(), out.cloud_of(0)?))
}

#[allow(clippy::too_many_arguments)]
fn objective<'t>(
    tape: &'t Tape,
    cloud: crate::diffcore::Var<'t>,
    colors: crate::diffcore::Var<'t>,
    sample: &Sample,
    view: &Viewpoint,
    initial: &Tensor,
    w: &LossWeights,
    settings: &RenderSettings,
) -> Result<crate::diffcore::Var<'t>, IsoError> {
    let proj = project_points(cloud, tape.scalar(view.azimuth), tape.scalar(view.elevation), settings)?;
    let li = image_loss(render_color(&proj, colors, settings)?, &sample.image)?;
    let (lm, _) = mask_loss(render_mask(proj.uv, settings)?, &sample.mask)?;
    Ok(iso_objective(w, li, lm, cloud, initial)?)
}

/// Fine-tunes a copy of the reconstruction network on one sample with the
/// pose held at the pose network's prediction. The checkpoint is not modified.
pub fn optimize(ck: &Checkpoint, sample: &Sample, cfg: &IsoConfig) -> Result<IsoOutcome, IsoError> {
    cfg.validate()?;
    let settings = &ck.config.render;
    let w = cfg.weights();
    let view = ck.pose.predict(&[&sample.image])?[0];
    let x = stack_images(&[&sample.image])?;
    let mut net = ck.recon.clone();
    let initial = net.reconstruct(&sample.image)?;
    let initial_t = initial.positions_tensor();
    let input_iou = |c: &PointCloud| -> Result<f64, IsoError> { Ok(iou(&threshold(&mask_of(c, &view, settings)?), &sample.mask)) };
    let (objective_before, _) = evaluate(&net, &x, sample, &view, &initial_t, &w, settings)?;
    let iou_before = input_iou(&initial)?;

    let mut opt = OptimizerState::new(&net.params);
    let mut failure = None;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = net.params.bind(&tape);
        let out = ReconNet::forward(&p, tape.constant(x.clone()))?;
        let obj = objective(&tape, out.positions_of(0)?, out.colors_of(0)?, sample, &view, &initial_t, &w, settings)?;
        if !obj.item().is_finite() {
            failure = Some(format!("non-finite objective {} at step {step}", obj.item()));
            break;
        }
        let g = tape.backward_wrt(obj, &p.vars)?;
        let grads: Vec<Tensor> = p.vars.iter().map(|v| g.get_or_zeros(*v)).collect();
        match adam_update(&mut opt, &mut net.params, &grads, cfg.learning_rate) {
            Ok(()) => steps_run += 1,
            Err(TrainError::NonFiniteGradient { name }) => {
                failure = Some(format!("non-finite gradient for {name} at step {step}"));
                break;
            }
            Err(e) => return Err(IsoError::Config(e.to_string())),
        }
    }

    let (net, refined, objective_after) = if failure.is_some() {
        (ck.recon.clone(), initial.clone(), objective_before)
    } else {
        let (obj, cloud) = evaluate(&net, &x, sample, &view, &initial_t, &w, settings)?;
        (net, cloud, obj)
    };
    let drift = 100.0 * chamfer(&refined, &initial)?;
    let report = IsoReport {
        sample_id: sample.id,
        view,
        steps_run,
        iou_before,
        iou_after: input_iou(&refined)?,
        drift_chamfer_x100: drift,
        within_drift_bound: drift <= cfg.drift_bound,
        objective_before,
        objective_after,
        failure,
    };
    Ok(IsoOutcome {
        initial,
        refined,
        recon: net,
        report,
    })
}
