//! Deterministic training loop: rasterize, forward, match every branch,
//! score-weighted loss, backward, Adam.
//!
//! Scenes inside a mini-batch are processed in parallel, but their
//! gradients are reduced in scene-index order, so a run is bitwise
//! reproducible from its configuration.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_teacher_boxes, teacher_set_from_predictions, ExportConfig, Scene, TeacherBoxes};
use crate::error::{Error, Result};
use crate::matching::{Assignment, LabeledBox, NO_OBJECT};
use crate::metrics::{
    average_precision, coco_iou_thresholds, detections_from_predictions, instability_score, instability_score_aux,
    ApSummary, IsNormalization, MatchLog, SceneMatch,
};
use crate::model::{
    rasterize_scene, ForwardCache, ModelDims, ModelParams, ParamGrads, Predictions, RasterConfig, SceneGrid,
};
use crate::supervision::{
    branch_loss, build_branches, gen_noisy_boxes, match_branches, AuxPipeline, LossBreakdown, NoisyBoxes,
    SupervisionConfig, SupervisionMode, TeacherSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Ground truth only, or teachers supplied programmatically.
    #[default]
    None,
    /// One teacher-box file per teacher.
    Offline { paths: Vec<PathBuf> },
    /// Frozen teacher checkpoints run alongside the student.
    Online { checkpoints: Vec<PathBuf> },
    /// A single teacher tracking the student by exponential moving average.
    MeanTeacher { momentum: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub model: ModelDims,
    pub raster: RasterConfig,
    pub supervision: SupervisionConfig,
    /// Ablation rewrites applied to every scene's teacher sets.
    pub aux: AuxPipeline,
    /// Adds one set of jittered ground-truth boxes as an extra teacher.
    pub noisy_boxes: Option<NoisyBoxes>,
    /// Box extraction for online and mean teachers.
    pub export: ExportConfig,
    pub teacher_mode: TeacherMode,
    pub is_normalization: IsNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 1,
            model: ModelDims::default(),
            raster: RasterConfig::default(),
            supervision: SupervisionConfig::default(),
            aux: AuxPipeline::default(),
            noisy_boxes: None,
            export: ExportConfig::default(),
            teacher_mode: TeacherMode::None,
            is_normalization: IsNormalization::GtCount,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("batch_size and eval_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if let TeacherMode::MeanTeacher { momentum } = self.teacher_mode {
            if !(momentum > 0.0 && momentum < 1.0) {
                return Err(Error::InvalidConfig(format!("mean-teacher momentum {momentum} must lie in (0, 1)")));
            }
        }
        self.model.validate()?;
        self.supervision.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total_loss: f64,
    /// Mean weighted loss per branch id, in branch order.
    pub branch_losses: Vec<(String, f64)>,
    /// Validation AP; absent on epochs that skip evaluation.
    pub val_ap: Option<ApSummary>,
    /// Instability relative to the previous epoch; absent on the first.
    pub instability: Option<f64>,
    pub instability_aux: Option<f64>,
    /// Not written to log files, which must be reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub logs: Vec<EpochLog>,
    pub match_history: Vec<MatchLog>,
}

/// Adam moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch { expected: params.len(), actual: grads.len() });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    Ok(())
}

/// `teacher <- m * teacher + (1 - m) * student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    if teacher.dims() != student.dims() {
        return Err(Error::ShapeMismatch { expected: teacher.values().len(), actual: student.values().len() });
    }
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::InvalidConfig(format!("momentum {momentum} must lie in (0, 1]")));
    }
    for (t, s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

/// Runs frozen teachers on a scene grid and extracts their boxes exactly as
/// the offline export does.
pub fn run_online_teachers(
    checkpoints: &[ModelParams],
    grid: &SceneGrid,
    export: &ExportConfig,
) -> Result<Vec<TeacherSet>> {
    checkpoints
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let preds = p.forward(grid)?;
            Ok(teacher_set_from_predictions(&preds, &online_teacher_id(i), export.score_threshold, export.max_boxes))
        })
        .collect()
}

pub fn online_teacher_id(i: usize) -> String {
    format!("online-{i}")
}

/// Already-loaded teacher sources, for callers that keep everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TeacherSources {
    pub offline: Vec<TeacherBoxes>,
    pub online: Vec<ModelParams>,
}

impl TeacherSources {
    pub fn resolve(mode: &TeacherMode) -> Result<Self> {
        match mode {
            TeacherMode::Offline { paths } => Ok(Self {
                offline: paths.iter().map(|p| load_teacher_boxes(p)).collect::<Result<_>>()?,
                online: vec![],
            }),
            TeacherMode::Online { checkpoints } => Ok(Self {
                offline: vec![],
                online: checkpoints.iter().map(|p| ModelParams::load(p)).collect::<Result<_>>()?,
            }),
            TeacherMode::None | TeacherMode::MeanTeacher { .. } => Ok(Self::default()),
        }
    }
}

/// Everything the loss needs for one scene: gradients with respect to the
/// parameters, the loss breakdown and the per-branch assignments.
pub struct SceneStep {
    pub loss: LossBreakdown,
    pub assignments: Vec<Assignment>,
    pub grads: ParamGrads,
}

/// Forward, matching, loss and backward for one scene.
pub fn scene_step(
    params: &ModelParams,
    grid: &SceneGrid,
    gt: &[LabeledBox],
    teachers: &[TeacherSet],
    cfg: &SupervisionConfig,
) -> Result<SceneStep> {
    let (loss, assignments, cache) = scene_forward(params, grid, gt, teachers, cfg)?;
    let mut grads = ParamGrads::zeros(params.dims());
    params.backward_into(grid, &cache, &loss.grads, &mut grads)?;
    Ok(SceneStep { loss, assignments, grads })
}

fn scene_forward(
    params: &ModelParams,
    grid: &SceneGrid,
    gt: &[LabeledBox],
    teachers: &[TeacherSet],
    cfg: &SupervisionConfig,
) -> Result<(LossBreakdown, Vec<Assignment>, ForwardCache)> {
    let (preds, cache) = params.forward_with_cache(grid)?;
    let branches = build_branches(gt, teachers, cfg)?;
    let assignments = match_branches(&preds, &branches, &cfg.cost_weights)?;
    let loss = branch_loss(&preds, &branches, &assignments, cfg)?;
    Ok((loss, assignments, cache))
}

/// Total loss for fixed assignments.
pub fn scene_loss_fixed(
    params: &ModelParams,
    grid: &SceneGrid,
    gt: &[LabeledBox],
    teachers: &[TeacherSet],
    assignments: &[Assignment],
    cfg: &SupervisionConfig,
) -> Result<f64> {
    let preds = params.forward(grid)?;
    let branches = build_branches(gt, teachers, cfg)?;
    Ok(branch_loss(&preds, &branches, assignments, cfg)?.total)
}

fn scene_match_record(scene: &Scene, assignments: &[Assignment], mode: SupervisionMode) -> SceneMatch {
    let gt_count = scene.objects.len();
    let gt = match mode {
        SupervisionMode::Concat => assignments[0]
            .as_indices()
            .into_iter()
            .map(|t| if t >= 0 && (t as usize) < gt_count { t } else { NO_OBJECT })
            .collect(),
        _ => assignments[0].as_indices(),
    };
    let aux = match mode {
        SupervisionMode::Parallel => assignments[1..].iter().map(Assignment::as_indices).collect(),
        _ => Vec::new(),
    };
    SceneMatch { scene_id: scene.id.clone(), gt_count, gt, aux }
}

pub fn rasterize_all(scenes: &[Scene], dims: &ModelDims, raster: &RasterConfig) -> Result<Vec<SceneGrid>> {
    scenes.par_iter().map(|s| rasterize_scene(s, dims, raster)).collect()
}

pub fn predict_all(params: &ModelParams, grids: &[SceneGrid]) -> Result<Vec<Predictions>> {
    grids.par_iter().map(|g| params.forward(g)).collect()
}

/// COCO-style AP of a model on a dataset.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], raster: &RasterConfig) -> Result<ApSummary> {
    let grids = rasterize_all(scenes, params.dims(), raster)?;
    evaluate_grids(params, scenes, &grids)
}

fn evaluate_grids(params: &ModelParams, scenes: &[Scene], grids: &[SceneGrid]) -> Result<ApSummary> {
    let preds = predict_all(params, grids)?;
    let dets: Vec<_> = scenes.iter().zip(&preds).flat_map(|(s, p)| detections_from_predictions(&s.id, p)).collect();
    let gts: Vec<_> = scenes.iter().map(|s| (s.id.clone(), s.objects.clone())).collect();
    Ok(average_precision(&dets, &gts, &coco_iou_thresholds()))
}

/// Per-scene teacher sets before the ablation pipeline.
fn base_teacher_sets(
    scenes: &[Scene],
    grids: &[SceneGrid],
    sources: &TeacherSources,
    noisy: &[Option<TeacherSet>],
    export: &ExportConfig,
    mean_teacher: Option<&ModelParams>,
) -> Result<Vec<Vec<TeacherSet>>> {
    scenes
        .par_iter()
        .zip(grids.par_iter())
        .zip(noisy.par_iter())
        .map(|((scene, grid), noisy)| {
            let mut sets: Vec<TeacherSet> = sources.offline.iter().map(|t| t.for_scene(&scene.id)).collect();
            sets.extend(run_online_teachers(&sources.online, grid, export)?);
            if let Some(teacher) = mean_teacher {
                let preds = teacher.forward(grid)?;
                sets.push(teacher_set_from_predictions(
                    &preds,
                    "mean-teacher",
                    export.score_threshold,
                    export.max_boxes,
                ));
            }
            if let Some(n) = noisy {
                sets.push(n.clone());
            }
            Ok(sets)
        })
        .collect()
}

fn prepared_teacher_sets(
    scenes: &[Scene],
    grids: &[SceneGrid],
    sources: &TeacherSources,
    noisy: &[Option<TeacherSet>],
    cfg: &TrainConfig,
    mean_teacher: Option<&ModelParams>,
) -> Result<Vec<Vec<TeacherSet>>> {
    let base = base_teacher_sets(scenes, grids, sources, noisy, &cfg.export, mean_teacher)?;
    Ok(base
        .into_iter()
        .zip(scenes)
        .map(|(sets, s)| cfg.aux.apply(sets, &s.objects, cfg.supervision.max_boxes_per_teacher))
        .collect())
}

/// Trains with teachers resolved from `cfg.teacher_mode`.
pub fn train(train_set: &[Scene], val_set: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let sources = TeacherSources::resolve(&cfg.teacher_mode)?;
    train_with(train_set, val_set, cfg, &sources)
}

pub fn train_with(
    train_set: &[Scene],
    val_set: &[Scene],
    cfg: &TrainConfig,
    sources: &TeacherSources,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = cfg.model;
    for t in &sources.online {
        if t.dims().input_len() != dims.input_len() {
            return Err(Error::InvalidConfig("online teacher grid shape differs from the student's".into()));
        }
    }
    let mut rng = crate::rng_for(cfg.seed);
    let mut params = ModelParams::init(dims, &mut rng)?;
    let mut adam = AdamState::new(params.values().len());
    let hyper = AdamHyper { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, epsilon: cfg.epsilon };
    let momentum = match cfg.teacher_mode {
        TeacherMode::MeanTeacher { momentum } => Some(momentum),
        _ => None,
    };
    let mut ema = momentum.map(|_| params.clone());

    let grids = rasterize_all(train_set, &dims, &cfg.raster)?;
    let val_grids = rasterize_all(val_set, &dims, &cfg.raster)?;
    let noisy: Vec<Option<TeacherSet>> = match &cfg.noisy_boxes {
        Some(n) => {
            let mut noise_rng = crate::rng_for(cfg.seed ^ 0x6e6f_6973_7900);
            train_set
                .iter()
                .map(|s| gen_noisy_boxes(&s.objects, n, "noisy", &mut noise_rng).map(Some))
                .collect::<Result<_>>()?
        }
        None => vec![None; train_set.len()],
    };
    let mut teacher_sets = prepared_teacher_sets(train_set, &grids, sources, &noisy, cfg, ema.as_ref())?;
    let gts: Vec<Vec<LabeledBox>> = train_set.iter().map(|s| s.objects.clone()).collect();

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut history: Vec<MatchLog> = Vec::with_capacity(cfg.epochs);
    let mut history_teachers: Vec<Vec<Vec<TeacherSet>>> = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if epoch > 0 {
            if let Some(teacher) = &ema {
                teacher_sets = prepared_teacher_sets(train_set, &grids, sources, &noisy, cfg, Some(teacher))?;
            }
        }
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut branch_sums: Vec<(String, f64, usize)> = Vec::new();
        let mut grads = ParamGrads::zeros(&dims);
        for batch in order.chunks(cfg.batch_size) {
            let steps: Vec<(LossBreakdown, Vec<Assignment>, ForwardCache)> = batch
                .par_iter()
                .map(|&i| scene_forward(&params, &grids[i], &gts[i], &teacher_sets[i], &cfg.supervision))
                .collect::<Result<_>>()?;
            grads.values.fill(0.0);
            for (&i, (loss, _, cache)) in batch.iter().zip(&steps) {
                params.backward_into(&grids[i], cache, &loss.grads, &mut grads)?;
                loss_sum += loss.total;
                // branches keep their position across scenes, so ids may repeat
                for (k, b) in loss.branches.iter().enumerate() {
                    let w = b.weighted(&cfg.supervision);
                    match branch_sums.get_mut(k) {
                        Some(entry) => {
                            entry.1 += w;
                            entry.2 += 1;
                        }
                        None => branch_sums.push((b.branch_id.clone(), w, 1)),
                    }
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(params.values_mut(), &grads.values, &mut adam, &hyper)?;
            if let (Some(teacher), Some(m)) = (ema.as_mut(), momentum) {
                ema_update(teacher, &params, m)?;
            }
        }

        let snapshot = match_snapshot(&params, train_set, &grids, &teacher_sets, cfg, epoch)?;
        let (instability, instability_aux) = match history.last() {
            Some(prev) => {
                let prev_teachers = history_teachers.last().expect("teacher history tracks match history");
                let is = instability_score(prev, &snapshot, cfg.is_normalization)?;
                let is_aux = instability_score_aux(
                    prev,
                    &snapshot,
                    prev_teachers,
                    &logged_teachers(&teacher_sets, cfg.supervision.mode),
                    &gts,
                    cfg.is_normalization,
                )?;
                (Some(is), Some(is_aux))
            }
            None => (None, None),
        };
        history.push(snapshot);
        history_teachers.push(logged_teachers(&teacher_sets, cfg.supervision.mode));
        if history_teachers.len() > 1 {
            history_teachers.remove(0);
        }

        let last = epoch + 1 == cfg.epochs;
        let val_ap = if last || (epoch + 1) % cfg.eval_every == 0 {
            Some(evaluate_grids(&params, val_set, &val_grids)?)
        } else {
            None
        };
        let n = train_set.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            mean_total_loss: loss_sum / n,
            branch_losses: branch_sums.into_iter().map(|(id, s, c)| (id, s / c as f64)).collect(),
            val_ap,
            instability,
            instability_aux,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { params, logs, match_history: history })
}

/// Teacher sets that own auxiliary match rows in the logs for `mode`.
fn logged_teachers(sets: &[Vec<TeacherSet>], mode: SupervisionMode) -> Vec<Vec<TeacherSet>> {
    match mode {
        SupervisionMode::Parallel => sets.to_vec(),
        _ => vec![Vec::new(); sets.len()],
    }
}

/// Matching-only pass with fixed parameters.
fn match_snapshot(
    params: &ModelParams,
    scenes: &[Scene],
    grids: &[SceneGrid],
    teacher_sets: &[Vec<TeacherSet>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<MatchLog> {
    let records: Vec<SceneMatch> = (0..scenes.len())
        .into_par_iter()
        .map(|i| {
            let preds = params.forward(&grids[i])?;
            let branches = build_branches(&scenes[i].objects, &teacher_sets[i], &cfg.supervision)?;
            let assignments = match_branches(&preds, &branches, &cfg.supervision.cost_weights)?;
            Ok(scene_match_record(&scenes[i], &assignments, cfg.supervision.mode))
        })
        .collect::<Result<_>>()?;
    Ok(MatchLog { epoch, scenes: records })
}

/// Per-scene teacher sets exactly as the trainer would supervise with them,
/// for inspection and tests.
pub fn supervision_sets(
    train_set: &[Scene],
    cfg: &TrainConfig,
    sources: &TeacherSources,
) -> Result<Vec<Vec<TeacherSet>>> {
    let grids = rasterize_all(train_set, &cfg.model, &cfg.raster)?;
    let noisy = match &cfg.noisy_boxes {
        Some(n) => {
            let mut noise_rng = crate::rng_for(cfg.seed ^ 0x6e6f_6973_7900);
            train_set
                .iter()
                .map(|s| gen_noisy_boxes(&s.objects, n, "noisy", &mut noise_rng).map(Some))
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![None; train_set.len()],
    };
    prepared_teacher_sets(train_set, &grids, sources, &noisy, cfg, None)
}
