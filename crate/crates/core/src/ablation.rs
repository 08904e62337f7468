//! Multi-seed ablation suites: each arm is a supervision variant trained
//! from the same base configuration, reported as mean and standard
//! deviation over seeds.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{predict_teacher_sets, DatasetSpec, Scene, TeacherBoxes};
use crate::error::{Error, Result};
use crate::metrics::ApSummary;
use crate::model::ModelParams;
use crate::supervision::{NoisyBoxes, SupervisionMode};
use crate::trainer::{train_with, TeacherSources, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Tab2,
    Tab5,
    Fig7,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab2" => Ok(Self::Tab2),
            "tab5" => Ok(Self::Tab5),
            "fig7" => Ok(Self::Fig7),
            other => Err(Error::InvalidConfig(format!("unknown suite {other:?}"))),
        }
    }
}

/// Where the teacher of every seed comes from.
#[derive(Debug, Clone)]
pub enum TeacherSource {
    /// The same teacher files for every seed.
    Files(Vec<TeacherBoxes>),
    /// A ground-truth-only model of the student's architecture, trained for
    /// this many epochs separately for every seed.
    Trained { epochs: usize },
}

#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub config: TrainConfig,
    /// Supervise through frozen teacher checkpoints instead of box files.
    pub online: bool,
    pub uses_teachers: bool,
}

fn arm(name: &str, base: &TrainConfig, online: bool, uses_teachers: bool, edit: impl FnOnce(&mut TrainConfig)) -> Arm {
    let mut config = base.clone();
    edit(&mut config);
    Arm { name: name.to_string(), config, online, uses_teachers }
}

/// The arms of a suite, derived from `base`.
pub fn suite_arms(suite: Suite, base: &TrainConfig, with_online: bool) -> Vec<Arm> {
    let baseline = arm("baseline", base, false, false, |c| c.supervision.mode = SupervisionMode::GtOnly);
    let teacher = |name: &str| {
        arm(name, base, false, true, |c| {
            c.supervision.mode = SupervisionMode::Parallel;
            c.supervision.score_weighting = true;
        })
    };
    match suite {
        Suite::Tab2 => vec![
            baseline,
            arm("concat", base, false, true, |c| c.supervision.mode = SupervisionMode::Concat),
            arm("parallel", base, false, true, |c| {
                c.supervision.mode = SupervisionMode::Parallel;
                c.supervision.score_weighting = false;
            }),
            teacher("parallel+score"),
        ],
        Suite::Tab5 => {
            let mut arms = vec![
                baseline,
                arm("noisy", base, false, false, |c| {
                    c.supervision.mode = SupervisionMode::Parallel;
                    c.supervision.score_weighting = true;
                    c.noisy_boxes = Some(NoisyBoxes::default());
                }),
                teacher("teacher"),
            ];
            if with_online {
                let mut online = teacher("teacher-online");
                online.online = true;
                arms.push(online);
            }
            arms
        }
        Suite::Fig7 => [None, Some(0.1), Some(0.3), Some(0.5)]
            .into_iter()
            .map(|f| {
                let name = match f {
                    None => "all".to_string(),
                    Some(t) => format!("iou>{t}"),
                };
                let mut a = teacher(&name);
                a.config.aux.iou_filter = f;
                a
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation; zero for a single run.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std =
            if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub ap: ApSummary,
    /// Mean instability over the last five epochs.
    pub is_tail: f64,
    pub is_aux_tail: f64,
    pub is_per_epoch: Vec<f64>,
    pub is_aux_per_epoch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub runs: Vec<RunResult>,
    pub ap: Stat,
    pub ap50: Stat,
    pub ap75: Stat,
    pub is_tail: Stat,
    pub is_aux_tail: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub teacher_ap: Vec<ApSummary>,
    pub arms: Vec<ArmResult>,
}

impl SuiteResult {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// Comparison table in AP points.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| arm | AP | AP50 | AP75 | IS (last 5) | IS aux (last 5) |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for a in &self.arms {
            let pct = |s: &Stat| format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.std);
            let raw = |s: &Stat| format!("{:.3} ± {:.3}", s.mean, s.std);
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                a.arm,
                pct(&a.ap),
                pct(&a.ap50),
                pct(&a.ap75),
                raw(&a.is_tail),
                raw(&a.is_aux_tail)
            );
        }
        out
    }
}

fn tail_mean(xs: &[f64], k: usize) -> f64 {
    let tail = &xs[xs.len().saturating_sub(k)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

struct SeedTeachers {
    boxes: Vec<TeacherBoxes>,
    checkpoints: Vec<ModelParams>,
    ap: Option<ApSummary>,
}

fn teacher_for_seed(
    source: &TeacherSource,
    base: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    seed: u64,
) -> Result<SeedTeachers> {
    match source {
        TeacherSource::Files(files) => Ok(SeedTeachers { boxes: files.clone(), checkpoints: vec![], ap: None }),
        TeacherSource::Trained { epochs } => {
            let mut cfg = base.clone();
            cfg.epochs = *epochs;
            cfg.seed = seed.wrapping_add(0x7465_6163);
            cfg.supervision.mode = SupervisionMode::GtOnly;
            cfg.noisy_boxes = None;
            let outcome = train_with(train_set, val_set, &cfg, &TeacherSources::default())?;
            let ap = outcome.logs.last().and_then(|l| l.val_ap);
            let sets = predict_teacher_sets(&outcome.params, train_set, &base.raster, &base.export, "teacher-0")?;
            let boxes = TeacherBoxes::new("teacher-0", sets);
            Ok(SeedTeachers { boxes: vec![boxes], checkpoints: vec![outcome.params], ap })
        }
    }
}

/// Runs every arm of `suite` for each seed. Arms and seeds run concurrently;
/// each run is deterministic on its own.
pub fn run_suite(
    suite: Suite,
    base: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    source: &TeacherSource,
    seeds: &[u64],
) -> Result<SuiteResult> {
    let with_online = matches!(source, TeacherSource::Trained { .. });
    let arms = suite_arms(suite, base, with_online);
    let (arms, teacher_ap) = run_arms(&arms, base, train_set, val_set, source, seeds)?;
    Ok(SuiteResult { suite, seeds: seeds.to_vec(), teacher_ap, arms })
}

/// Runs arbitrary arms; returns their results and each seed's teacher AP
/// when teachers are trained.
pub fn run_arms(
    arms: &[Arm],
    base: &TrainConfig,
    train_set: &[Scene],
    val_set: &[Scene],
    source: &TeacherSource,
    seeds: &[u64],
) -> Result<(Vec<ArmResult>, Vec<ApSummary>)> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let teachers: Vec<SeedTeachers> = if arms.iter().any(|a| a.uses_teachers) {
        seeds.par_iter().map(|&s| teacher_for_seed(source, base, train_set, val_set, s)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..seeds.len()).map(move |s| (a, s))).collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(a, s)| {
            let arm = &arms[a];
            let mut cfg = arm.config.clone();
            cfg.seed = seeds[s];
            let sources = match (arm.uses_teachers, arm.online) {
                (false, _) => TeacherSources::default(),
                (true, false) => TeacherSources { offline: teachers[s].boxes.clone(), online: vec![] },
                (true, true) => TeacherSources { offline: vec![], online: teachers[s].checkpoints.clone() },
            };
            let outcome = train_with(train_set, val_set, &cfg, &sources)?;
            let ap = outcome.logs.last().and_then(|l| l.val_ap).expect("last epoch is always evaluated");
            let is: Vec<f64> = outcome.logs.iter().filter_map(|l| l.instability).collect();
            let is_aux: Vec<f64> = outcome.logs.iter().filter_map(|l| l.instability_aux).collect();
            Ok(RunResult {
                seed: seeds[s],
                ap,
                is_tail: tail_mean(&is, 5),
                is_aux_tail: tail_mean(&is_aux, 5),
                is_per_epoch: is,
                is_aux_per_epoch: is_aux,
            })
        })
        .collect::<Result<_>>()?;

    let results = arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let runs: Vec<RunResult> = runs[a * seeds.len()..(a + 1) * seeds.len()].to_vec();
            let pick = |f: fn(&RunResult) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
            ArmResult {
                arm: arm.name.clone(),
                ap: pick(|r| r.ap.ap),
                ap50: pick(|r| r.ap.ap50),
                ap75: pick(|r| r.ap.ap75),
                is_tail: pick(|r| r.is_tail),
                is_aux_tail: pick(|r| r.is_aux_tail),
                runs,
            }
        })
        .collect();
    Ok((results, teachers.iter().filter_map(|t| t.ap).collect()))
}

/// The desk-scale benchmark: training and validation scene specs.
pub fn standard_datasets() -> (DatasetSpec, DatasetSpec) {
    let spec = |num_scenes, seed| DatasetSpec {
        num_scenes,
        classes: 3,
        object_count_range: (1, 3),
        size_range: (0.2, 0.4),
        seed,
        ..Default::default()
    };
    (spec(500, 1), spec(200, 2))
}

/// Student settings of the desk-scale benchmark. Teachers export at most 15
/// boxes so that concatenated targets fit the 20 queries.
pub fn standard_config() -> TrainConfig {
    let mut cfg = TrainConfig { epochs: 60, eval_every: 60, ..Default::default() };
    cfg.export.max_boxes = 15;
    cfg
}

pub const STANDARD_TEACHER_EPOCHS: usize = 30;
