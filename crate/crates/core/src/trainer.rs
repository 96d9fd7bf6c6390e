//! Two-phase joint training of the reconstruction and pose networks.
//!
//! Phase 1 trains both networks with projection and cycle losses. At the
//! freeze iteration the pose network stops updating, the cycle terms drop
//! out and the reconstruction network continues on projection losses alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{KnnError, KnnIndex};
use crate::dataset::{Dataset, DatasetError, Split};
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::geometry::{ViewSampler, Viewpoint};
use crate::losses::{
    geometric_cycle_loss, image_loss, mask_loss, nn_consistency_loss, pose_cycle_loss, pose_total, recon_total,
    symmetry_loss, LossError, LossWeights,
};
use crate::networks::{stack_images, Checkpoint, CheckpointError, ParamSet, PoseNet, ReconNet, NUM_POINTS};
use crate::render::{project_points, render_color, render_mask, RenderError, RenderSettings};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: {terms}")]
    NonFiniteLoss { iteration: usize, terms: String },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradientShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("monitor: {0}")]
    Monitor(String),
}

/// Every weight and schedule constant of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Cycle views sampled per instance per step.
    pub k_views: usize,
    pub n_points: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    /// First iteration of phase 2.
    pub freeze_at: usize,
    /// Image/mask weight used in phase 2.
    pub phase2_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Geometric cycle term `L_G`.
    pub geometric_cycle: bool,
    /// Pose cycle term `L_pose`.
    pub pose_cycle: bool,
    pub nn_enabled: bool,
    /// Neighbours used per instance per step.
    pub nn_neighbors: usize,
    /// Neighbour pool the per-step neighbours are drawn from.
    pub nn_pool: usize,
    /// Index build iteration; `None` means `freeze_at / 2`.
    pub nn_build_at: Option<usize>,
    pub sym_enabled: bool,
    /// Render the cycle views from a detached copy of the cloud.
    pub cycle_stop_gradient: bool,
    pub view_range: ViewSampler,
    pub render: RenderSettings,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables monitor calls.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_views: 4,
            n_points: NUM_POINTS,
            weights: LossWeights::default(),
            learning_rate: 5e-5,
            iterations: 40_000,
            freeze_at: 20_000,
            phase2_alpha: 10.0,
            batch_size: 8,
            seed: 0,
            geometric_cycle: true,
            pose_cycle: true,
            nn_enabled: false,
            nn_neighbors: 2,
            nn_pool: 5,
            nn_build_at: None,
            sym_enabled: false,
            cycle_stop_gradient: false,
            view_range: ViewSampler::default(),
            render: RenderSettings::default(),
            checkpoint_every: 5_000,
            val_every: 1_000,
        }
    }
}

/// The geometric cycle term is averaged over points so that the default
/// weight balances against the per-pixel image and mask losses.
const PER_POINT: f64 = 1.0 / NUM_POINTS as f64;

/// Named configurations.
pub const PRESETS: [&str; 8] = [
    "no-cc",
    "cc",
    "nn",
    "nn-sym",
    "geometric-only",
    "pose-only",
    "high-lr",
    "full-schedule",
];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        match name {
            "cc" => {}
            "no-cc" => {
                c.geometric_cycle = false;
                c.pose_cycle = false;
            }
            "nn" => c.nn_enabled = true,
            "nn-sym" => {
                c.nn_enabled = true;
                c.sym_enabled = true;
            }
            "geometric-only" => c.pose_cycle = false,
            "pose-only" => c.geometric_cycle = false,
            "high-lr" => c.learning_rate = 5e-4,
            "full-schedule" => {
                c.iterations = 400_000;
                c.freeze_at = 200_000;
                c.checkpoint_every = 50_000;
                c.val_every = 10_000;
            }
            other => {
                return Err(TrainError::Config(format!(
                    "unknown preset {other}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.k_views == 0 {
            return bad("k_views must be at least 1".into());
        }
        if self.n_points != NUM_POINTS {
            return bad(format!("n_points must be {NUM_POINTS} for the fixed decoder"));
        }
        if self.freeze_at > self.iterations {
            return bad(format!("freeze_at {} exceeds iterations {}", self.freeze_at, self.iterations));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.phase2_alpha >= 0.0) {
            return bad("phase2_alpha must be non-negative".into());
        }
        if self.nn_enabled && (self.nn_neighbors == 0 || self.nn_neighbors > self.nn_pool) {
            return bad(format!(
                "need 1 <= nn_neighbors ({}) <= nn_pool ({})",
                self.nn_neighbors, self.nn_pool
            ));
        }
        if self.view_range.elevation_min > self.view_range.elevation_max {
            return bad("elevation range is inverted".into());
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn nn_build_iteration(&self) -> usize {
        self.nn_build_at.unwrap_or(self.freeze_at / 2)
    }

    /// Weights in force at `iteration`.
    pub fn weights_at(&self, iteration: usize) -> LossWeights {
        let mut w = self.weights;
        if !self.geometric_cycle {
            w.beta = 0.0;
        }
        if !self.pose_cycle {
            w.rho = 0.0;
        }
        if !self.nn_enabled {
            w.eta_nn = 0.0;
        }
        if !self.sym_enabled {
            w.kappa_sym = 0.0;
        }
        if iteration >= self.freeze_at {
            w.beta = 0.0;
            w.rho = 0.0;
            w.alpha = self.phase2_alpha;
        }
        w
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam step. `grads` is aligned with `params`.
/// Nothing is modified when any gradient is non-finite or misshapen.
pub fn adam_update(state: &mut OptimizerState, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    for ((name, p), g) in params.entries().iter().zip(grads) {
        if g.shape() != p.shape() {
            return Err(TrainError::GradientShape {
                name: name.clone(),
                got: g.shape().to_vec(),
                expected: p.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Batch-mean loss terms of one step. Absent terms were disabled or skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub phase: u8,
    pub image: f64,
    pub mask: f64,
    pub geometric: Option<f64>,
    pub pose: Option<f64>,
    pub nn: Option<f64>,
    pub sym: Option<f64>,
    pub recon_total: f64,
    pub pose_total: Option<f64>,
    /// Metrics supplied by the monitor on this iteration.
    pub val: BTreeMap<String, f64>,
}

impl StepReport {
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let mut t = vec![("image", self.image), ("mask", self.mask)];
        let opt = [
            ("geometric", self.geometric),
            ("pose", self.pose),
            ("nn", self.nn),
            ("sym", self.sym),
        ];
        t.extend(opt.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))));
        t.push(("recon_total", self.recon_total));
        if let Some(p) = self.pose_total {
            t.push(("pose_total", p));
        }
        t
    }

    fn diagnostic(&self) -> String {
        self.terms()
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Mean of per-sample scalar losses.
fn batch_mean<'t>(terms: &[Var<'t>]) -> Result<Var<'t>, DiffError> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc.mul_scalar(1.0 / terms.len() as f64))
}

/// Reconstruction and pose networks with their optimizers and schedule state.
pub struct Trainer<'d> {
    dataset: &'d Dataset,
    config: TrainConfig,
    pub recon: ReconNet,
    pub pose: PoseNet,
    recon_opt: OptimizerState,
    pose_opt: OptimizerState,
    iteration: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    /// Per training id, its nearest training neighbours.
    pools: Option<BTreeMap<usize, Vec<usize>>>,
    log: Vec<StepReport>,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d Dataset, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.ids(Split::Train).is_empty() {
            return Err(TrainError::Config("dataset has no training instances".into()));
        }
        let ck = Checkpoint::fresh(&config);
        Ok(Self {
            dataset,
            recon_opt: OptimizerState::new(&ck.recon.params),
            pose_opt: OptimizerState::new(&ck.pose.params),
            recon: ck.recon,
            pose: ck.pose,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0000),
            config,
            iteration: 0,
            order: Vec::new(),
            cursor: 0,
            pools: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[StepReport] {
        &self.log
    }

    pub fn is_frozen(&self) -> bool {
        self.iteration >= self.config.freeze_at
    }

    pub fn neighbour_pools(&self) -> Option<&BTreeMap<usize, Vec<usize>>> {
        self.pools.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration as u64,
            recon: self.recon.clone(),
            pose: self.pose.clone(),
            config: self.config.clone(),
        }
    }

    /// Next batch of training ids; reshuffled every epoch.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = self.dataset.ids(Split::Train);
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Embeds the training set with the current encoder and stores each
    /// instance's `nn_pool` nearest neighbours.
    pub fn build_neighbour_index(&mut self) -> Result<KnnIndex, TrainError> {
        let index = KnnIndex::build(self.dataset, &self.recon)?;
        let k = self.config.nn_pool.min(index.len().saturating_sub(1));
        let mut pools = BTreeMap::new();
        for (slot, &id) in index.ids().iter().enumerate() {
            let n = index.query(index.embedding(slot), k, Some(id))?;
            pools.insert(id, n.into_iter().map(|(j, _)| j).collect());
        }
        self.pools = Some(pools);
        Ok(index)
    }

    /// One optimization step on the next batch.
    pub fn step(&mut self) -> Result<StepReport, TrainError> {
        if self.config.nn_enabled && self.pools.is_none() && self.iteration >= self.config.nn_build_iteration() {
            self.build_neighbour_index()?;
        }
        let batch = self.next_batch();
        let report = self.train_step(&batch)?;
        self.iteration += 1;
        self.log.push(report.clone());
        Ok(report)
    }

    /// Forward, loss and update on an explicit batch of training ids.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepReport, TrainError> {
        let cfg = &self.config;
        let frozen = self.iteration >= cfg.freeze_at;
        let w = self.weights_now();
        let samples = batch
            .iter()
            .map(|&id| self.dataset.sample(id))
            .collect::<Result<Vec<_>, _>>()?;
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let settings = &cfg.render;

        let tape = Tape::new();
        let rp = self.recon.params.bind(&tape);
        let pp = if frozen {
            self.pose.params.bind_frozen(&tape)
        } else {
            self.pose.params.bind(&tape)
        };
        let x = tape.constant(stack_images(&images)?);
        let out = ReconNet::forward(&rp, x)?;
        let pose = PoseNet::forward(&pp, &self.pose.range, x)?;

        let want_geo = w.beta > 0.0;
        let want_pose = w.rho > 0.0;
        let want_nn = w.eta_nn > 0.0 && self.pools.is_some();
        let want_sym = w.kappa_sym > 0.0;

        let mut li = Vec::new();
        let mut lm = Vec::new();
        let mut lg = Vec::new();
        let mut lp = Vec::new();
        let mut lnn = Vec::new();
        let mut lsym = Vec::new();
        for (b, s) in samples.iter().enumerate() {
            let cloud = out.positions_of(b)?;
            let colors = out.colors_of(b)?;
            let (az, el) = pose.of(b)?;
            let proj = project_points(cloud, az, el, settings)?;
            li.push(image_loss(render_color(&proj, colors, settings)?, &s.image)?);
            lm.push(mask_loss(render_mask(proj.uv, settings)?, &s.mask)?.0);

            if want_geo || want_pose {
                let views: Vec<Viewpoint> = (0..cfg.k_views).map(|_| cfg.view_range.sample(&mut self.rng)).collect();
                let source = if cfg.cycle_stop_gradient { cloud.detach() } else { cloud };
                let mut renders = Vec::with_capacity(views.len());
                for v in &views {
                    let p = project_points(source, tape.scalar(v.azimuth), tape.scalar(v.elevation), settings)?;
                    let img = render_color(&p, colors, settings)?;
                    renders.push(img.reshape(&[1, 3, settings.intrinsics.height, settings.intrinsics.width])?);
                }
                let stacked = tape.concat(&renders, 0)?;
                if want_geo {
                    let cycled = ReconNet::forward_structure(&rp, stacked)?;
                    let clouds = (0..views.len())
                        .map(|i| cycled.narrow(0, i, 1)?.reshape(&[NUM_POINTS, 3]))
                        .collect::<Result<Vec<_>, _>>()?;
                    lg.push(geometric_cycle_loss(cloud, &clouds)?.mul_scalar(PER_POINT));
                }
                if want_pose {
                    let pred = PoseNet::forward(&pp, &self.pose.range, stacked.detach())?;
                    let pairs = (0..views.len()).map(|i| pred.of(i)).collect::<Result<Vec<_>, _>>()?;
                    lp.push(pose_cycle_loss(&views, &pairs)?);
                }
            }

            if want_nn {
                let pool = &self.pools.as_ref().expect("checked")[&batch[b]];
                if !pool.is_empty() {
                    let n = cfg.nn_neighbors.min(pool.len());
                    let chosen: Vec<usize> = pool.choose_multiple(&mut self.rng, n).copied().collect();
                    let neighbours = chosen
                        .iter()
                        .map(|&j| self.dataset.sample(j))
                        .collect::<Result<Vec<_>, _>>()?;
                    let poses = self
                        .pose
                        .predict(&neighbours.iter().map(|s| &s.image).collect::<Vec<_>>())?;
                    let masks: Vec<&Tensor> = neighbours.iter().map(|s| &s.mask).collect();
                    lnn.push(nn_consistency_loss(cloud, &masks, &poses, settings)?);
                }
            }
            if want_sym {
                lsym.push(symmetry_loss(cloud)?.0);
            }
        }

        let mean_opt = |v: &[Var<'_>]| -> Result<Option<f64>, DiffError> {
            Ok(if v.is_empty() { None } else { Some(batch_mean(v)?.item()) })
        };
        let image = batch_mean(&li)?;
        let mask = batch_mean(&lm)?;
        let geo = if lg.is_empty() { None } else { Some(batch_mean(&lg)?) };
        let pose_term = if lp.is_empty() { None } else { Some(batch_mean(&lp)?) };
        let nn = if lnn.is_empty() { None } else { Some(batch_mean(&lnn)?) };
        let sym = if lsym.is_empty() { None } else { Some(batch_mean(&lsym)?) };
        let r_total = recon_total(&w, image, mask, geo, nn, sym)?;
        let p_total = if frozen { None } else { Some(pose_total(&w, image, mask, pose_term)?) };

        let report = StepReport {
            iteration: self.iteration,
            phase: if frozen { 2 } else { 1 },
            image: image.item(),
            mask: mask.item(),
            geometric: mean_opt(&lg)?,
            pose: mean_opt(&lp)?,
            nn: mean_opt(&lnn)?,
            sym: mean_opt(&lsym)?,
            recon_total: r_total.item(),
            pose_total: p_total.map(|v| v.item()),
            val: BTreeMap::new(),
        };
        if report.terms().iter().any(|(_, v)| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                iteration: self.iteration,
                terms: report.diagnostic(),
            });
        }

        let rg = tape.backward_wrt(r_total, &rp.vars)?;
        let recon_grads: Vec<Tensor> = rp.vars.iter().map(|v| rg.get_or_zeros(*v)).collect();
        let pose_grads = match p_total {
            Some(t) => {
                let g = tape.backward_wrt(t, &pp.vars)?;
                Some(pp.vars.iter().map(|v| g.get_or_zeros(*v)).collect::<Vec<_>>())
            }
            None => None,
        };
        let lr = self.config.learning_rate;
        adam_update(&mut self.recon_opt, &mut self.recon.params, &recon_grads, lr)?;
        if let Some(g) = pose_grads {
            adam_update(&mut self.pose_opt, &mut self.pose.params, &g, lr)?;
        }
        Ok(report)
    }

    fn weights_now(&self) -> LossWeights {
        self.config.weights_at(self.iteration)
    }

    /// Replaces the networks (e.g. to resume); optimizer moments restart.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) {
        self.recon = ck.recon.clone();
        self.pose = ck.pose.clone();
        self.recon_opt = OptimizerState::new(&self.recon.params);
        self.pose_opt = OptimizerState::new(&self.pose.params);
        self.iteration = ck.iteration as usize;
    }
}

/// Validation hook called every `val_every` iterations and after the last one.
/// Returns named metrics for the log.
pub type Monitor<'a> = dyn FnMut(&Checkpoint) -> Result<BTreeMap<String, f64>, String> + 'a;

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepReport>,
    /// Intermediate and final checkpoint files, in order.
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the full schedule. With `out_dir`, writes `config.json`, periodic
/// `ckpt_<iteration>.bin`, `final.bin` and `log.csv` there.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(dataset, config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), config.to_json())?;
    }
    let mut checkpoints = Vec::new();
    for it in 0..config.iterations {
        let mut report = trainer.step()?;
        let last = it + 1 == config.iterations;
        if let Some(m) = monitor.as_mut() {
            if last || (config.val_every > 0 && it % config.val_every == 0) {
                report.val = m(&trainer.checkpoint()).map_err(TrainError::Monitor)?;
                trainer.log.last_mut().expect("just pushed").val = report.val.clone();
            }
        }
        if let Some(dir) = out_dir {
            let done = it + 1;
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && !last {
                let path = dir.join(format!("ckpt_{done:07}.bin"));
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        let path = dir.join("final.bin");
        checkpoint.save(&path)?;
        checkpoints.push(path);
        fs::write(dir.join("log.csv"), log_csv(trainer.log()))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log: trainer.log,
        checkpoints,
    })
}

const CSV_TERMS: [&str; 8] = [
    "image",
    "mask",
    "geometric",
    "pose",
    "nn",
    "sym",
    "recon_total",
    "pose_total",
];

/// CSV with one row per iteration; disabled terms and missing metrics are empty.
pub fn log_csv(log: &[StepReport]) -> String {
    let metrics: Vec<String> = log
        .iter()
        .flat_map(|r| r.val.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = String::from("iteration,phase");
    for t in CSV_TERMS {
        write!(out, ",{t}").unwrap();
    }
    for m in &metrics {
        write!(out, ",val_{m}").unwrap();
    }
    out.push('\n');
    for r in log {
        write!(out, "{},{}", r.iteration, r.phase).unwrap();
        let terms = r.terms();
        for t in CSV_TERMS {
            match terms.iter().find(|(n, _)| *n == t) {
                Some((_, v)) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        for m in &metrics {
            match r.val.get(m) {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Parsed training log: header names and rows (empty cells become `None`).
pub fn parse_log_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or("empty log")?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|e| format!("line {}: {e}", n + 2))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(format!("line {}: {} cells, header has {}", n + 2, row.len(), header.len()));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetConfig;
    use proptest::prelude::*;

    fn tiny_data() -> Dataset {
        Dataset::generate(
            &DatasetConfig {
                train: 6,
                val: 2,
                test: 2,
                ..DatasetConfig::default()
            },
            5,
        )
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k_views: 1,
            batch_size: 2,
            iterations: 3,
            freeze_at: 2,
            learning_rate: 1e-4,
            checkpoint_every: 1,
            val_every: 0,
            ..TrainConfig::default()
        }
    }

    fn scalar_params(v: f64) -> ParamSet {
        ParamSet::new(vec![("x".into(), Tensor::from_vec(vec![v, -v, 2.0 * v]))])
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = scalar_params(1.5);
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        for _ in 0..3 {
            adam_update(&mut s, &mut p, &[Tensor::zeros(&[3])], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = scalar_params(1.0);
        let mut s = OptimizerState::new(&p);
        let g = Tensor::from_vec(vec![3.0, -0.2, 1e-3]);
        adam_update(&mut s, &mut p, &[g], 0.01).unwrap();
        let got = p.get("x").unwrap().data();
        let expect = [1.0 - 0.01, -1.0 + 0.01, 2.0 - 0.01];
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let target = [0.7, -1.3, 2.1];
        let mut p = ParamSet::new(vec![("x".into(), Tensor::zeros(&[3]))]);
        let mut s = OptimizerState::new(&p);
        let mut steps = 0;
        for i in 0..5000 {
            let x = p.get("x").unwrap().data().to_vec();
            if x.iter().zip(target).all(|(a, b)| (a - b).abs() < 1e-6) {
                steps = i;
                break;
            }
            let g: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            let lr = if i < 3000 { 0.05 } else { 1e-3 };
            adam_update(&mut s, &mut p, &[Tensor::from_vec(g)], lr).unwrap();
            steps = i + 1;
        }
        let x = p.get("x").unwrap().data();
        assert!(x.iter().zip(target).all(|(a, b)| (a - b).abs() < 1e-6), "{x:?} after {steps}");
    }

    #[test]
    fn adam_rejects_bad_gradients_without_side_effects() {
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut s = OptimizerState::new(&p);
        let nan = Tensor::from_vec(vec![0.0, f64::NAN, 0.0]);
        assert!(matches!(
            adam_update(&mut s, &mut p, &[nan], 0.1),
            Err(TrainError::NonFiniteGradient { .. })
        ));
        assert!(matches!(
            adam_update(&mut s, &mut p, &[Tensor::zeros(&[2])], 0.1),
            Err(TrainError::GradientShape { .. })
        ));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn presets_and_validation() {
        for name in PRESETS {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("bogus").is_err());
        let nocc = TrainConfig::preset("no-cc").unwrap().weights_at(0);
        assert_eq!((nocc.beta, nocc.rho), (0.0, 0.0));
        let cc = TrainConfig::default();
        assert_eq!((cc.k_views, cc.n_points, cc.learning_rate), (4, 1024, 5e-5));
        let late = cc.weights_at(cc.freeze_at);
        assert_eq!((late.alpha, late.beta, late.rho), (10.0, 0.0, 0.0));
        assert_eq!(cc.weights_at(cc.freeze_at - 1).alpha, 100.0);
        let bad = TrainConfig {
            freeze_at: 10,
            iterations: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { k_views: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::from_json(r#"{"k_viewz": 3}"#).is_err());
        let round = TrainConfig::from_json(&TrainConfig::preset("nn-sym").unwrap().to_json()).unwrap();
        assert_eq!(round, TrainConfig::preset("nn-sym").unwrap());
    }

    #[test]
    fn step_reports_enabled_terms_and_never_touches_ground_truth() {
        let data = tiny_data();
        let cfg = TrainConfig {
            nn_enabled: true,
            sym_enabled: true,
            nn_build_at: Some(0),
            nn_pool: 3,
            ..tiny_config()
        };
        let mut t = Trainer::new(&data, cfg).unwrap();
        let r = t.step().unwrap();
        assert_eq!(r.phase, 1);
        for field in [r.geometric, r.pose, r.nn, r.sym, r.pose_total] {
            assert!(field.unwrap().is_finite());
        }
        assert!(r.image.is_finite() && r.mask.is_finite());
        let pools = t.neighbour_pools().unwrap();
        assert_eq!(pools.len(), 6);
        assert!(pools.iter().all(|(id, p)| p.len() == 3 && !p.contains(id)));
        assert_eq!(data.gt_reads(), 0);
    }

    #[test]
    fn gradient_isolation() {
        let data = tiny_data();
        // Only the pose objective is active: reconstruction must not move.
        let mut cfg = TrainConfig {
            geometric_cycle: false,
            ..tiny_config()
        };
        cfg.weights.alpha = 0.0;
        let mut t = Trainer::new(&data, cfg).unwrap();
        let (r0, p0) = (t.recon.params.clone(), t.pose.params.clone());
        t.step().unwrap();
        assert_eq!(t.recon.params, r0);
        assert_ne!(t.pose.params, p0);

        // Only the reconstruction objective is active: pose must not move.
        let mut cfg = TrainConfig {
            pose_cycle: false,
            ..tiny_config()
        };
        cfg.weights.gamma = 0.0;
        let mut t = Trainer::new(&data, cfg).unwrap();
        let (r0, p0) = (t.recon.params.clone(), t.pose.params.clone());
        t.step().unwrap();
        assert_eq!(t.pose.params, p0);
        assert_ne!(t.recon.params, r0);
    }

    #[test]
    fn train_is_deterministic_and_freezes_pose() {
        let data = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let a = train(&data, &tiny_config(), Some(dir.path()), None).unwrap();
        let b = train(&data, &tiny_config(), None, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 1, 2]);
        assert!(a.log[2].geometric.is_none() && a.log[2].pose_total.is_none());

        // Checkpoints after iterations 2 and 3 straddle only phase-2 steps.
        assert_eq!(a.checkpoints.len(), 3);
        let c2 = Checkpoint::load(&a.checkpoints[1]).unwrap();
        let c3 = Checkpoint::load(&a.checkpoints[2]).unwrap();
        assert_eq!(c2.iteration, 2);
        assert_eq!(c2.pose.params, c3.pose.params);
        assert_ne!(c2.recon.params, c3.recon.params);

        let (header, rows) = parse_log_csv(&fs::read_to_string(dir.path().join("log.csv")).unwrap()).unwrap();
        assert_eq!(header[0], "iteration");
        assert_eq!(rows.len(), 3);
        assert_eq!(data.gt_reads(), 0);
    }

    #[test]
    fn monitor_metrics_reach_the_log() {
        let data = tiny_data();
        let cfg = TrainConfig {
            iterations: 2,
            freeze_at: 2,
            val_every: 1,
            ..tiny_config()
        };
        let mut calls = 0;
        let mut m = |ck: &Checkpoint| {
            calls += 1;
            Ok(BTreeMap::from([("it".to_string(), ck.iteration as f64)]))
        };
        let out = train(&data, &cfg, None, Some(&mut m)).unwrap();
        assert_eq!(calls, 2);
        assert_eq!(out.log[1].val["it"], 2.0);
        assert!(log_csv(&out.log).lines().next().unwrap().ends_with("val_it"));
    }

    proptest! {
        #[test]
        fn adam_step_never_exceeds_lr_scale(g in prop::collection::vec(-1e3f64..1e3, 1..8), lr in 1e-5f64..1e-1) {
            let n = g.len();
            let mut p = ParamSet::new(vec![("x".into(), Tensor::zeros(&[n]))]);
            let mut s = OptimizerState::new(&p);
            adam_update(&mut s, &mut p, &[Tensor::from_vec(g)], lr).unwrap();
            prop_assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() <= lr * (1.0 + 1e-9)));
        }
    }
}
