use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use teach_detr::ablation::{run_suite, standard_config, Suite, TeacherSource};
use teach_detr::data::{
    export_teacher_boxes, generate_dataset, load_dataset, load_teacher_boxes, save_dataset, DatasetSpec, ExportConfig,
    Scene,
};
use teach_detr::metrics::{category_box_ratio, newly_annotated_fraction, MetricsReport};
use teach_detr::supervision::NoisyBoxes;
use teach_detr::trainer::{evaluate, train, EpochLog, TeacherMode, TrainConfig, TrainOutcome};
use teach_detr::{ModelDims, ModelParams, SupervisionMode};

#[derive(Parser)]
#[command(name = "teach-detr", version, about = "Auxiliary teacher-box supervision for set-prediction detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a ground-truth-only model to serve as a teacher.
    TrainTeacher(TrainTeacherArgs),
    /// Run a checkpoint over a dataset and write its boxes as a teacher file.
    ExportBoxes(ExportArgs),
    /// Train a student with any combination of auxiliary supervision.
    TrainStudent(TrainStudentArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Teacher-box statistics against ground truth.
    Stats(StatsArgs),
    /// Run a multi-seed ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_objects: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    min_size: Option<f64>,
    #[arg(long)]
    max_size: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Args, Clone)]
struct TrainCommon {
    /// Training scenes.
    #[arg(long)]
    data: PathBuf,
    /// Validation scenes; defaults to the training scenes.
    #[arg(long)]
    val: Option<PathBuf>,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Epoch logs as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Per-epoch matching snapshots as JSON lines.
    #[arg(long)]
    match_log: Option<PathBuf>,
    /// Final metrics report (AP and instability per epoch).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    GtOnly,
    Parallel,
    Concat,
}

#[derive(Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// One offline teacher per file.
    #[arg(long = "teacher-boxes")]
    teacher_boxes: Vec<PathBuf>,
    /// Frozen teacher checkpoints run during training.
    #[arg(long = "online-teacher")]
    online_teachers: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    no_score_weighting: bool,
    #[arg(long)]
    negative_score: Option<f64>,
    /// Add jittered ground-truth boxes (3 groups, shift 0.4, scale 0.4) as a teacher.
    #[arg(long)]
    noisy_boxes: bool,
    /// Keep teacher boxes whose IoU with some GT box exceeds this.
    #[arg(long)]
    iou_filter: Option<f64>,
    #[arg(long)]
    replace_labels: bool,
    #[arg(long)]
    replace_scores_iou: bool,
    /// Fuse all teachers into one set by classwise NMS at this IoU.
    #[arg(long)]
    nms_fuse: Option<f64>,
    /// Keep only teacher boxes that overlap no GT box.
    #[arg(long)]
    newly_annotated_only: bool,
    /// Use an EMA of the student as the teacher, with this momentum.
    #[arg(long)]
    mean_teacher: Option<f64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "teacher-0")]
    teacher_id: String,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    max_boxes: Option<usize>,
    /// TOML file whose raster and export sections apply.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "teacher-boxes", required = true)]
    teacher_boxes: Vec<PathBuf>,
    /// IoU above which a teacher box counts toward its class.
    #[arg(long, default_value_t = 0.5)]
    iou_min: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Fixed teacher files; without them a teacher is trained per seed.
    #[arg(long)]
    teachers: Vec<PathBuf>,
    #[arg(long, default_value_t = 30)]
    teacher_epochs: usize,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// TOML settings; defaults to the desk-scale benchmark preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for results.json and table.md.
    #[arg(long)]
    out: PathBuf,
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: teach_detr::Error| e.to_string())
}

/// A failure attributable to the command line rather than the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn logging() -> bool {
    !matches!(std::env::var("TEACH_DETR_LOG").as_deref(), Ok("off") | Ok("quiet") | Ok("error"))
}

fn info(msg: impl AsRef<str>) {
    if logging() {
        eprintln!("{}", msg.as_ref());
    }
}

fn warn(msg: impl AsRef<str>) {
    eprintln!("warning: {}", msg.as_ref());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher(a),
        Command::ExportBoxes(a) => export_boxes(a),
        Command::TrainStudent(a) => train_student(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        num_scenes: a.scenes,
        classes: a.classes,
        object_count_range: (
            a.min_objects.unwrap_or(d.object_count_range.0),
            a.max_objects.unwrap_or(d.object_count_range.1),
        ),
        size_range: (a.min_size.unwrap_or(d.size_range.0), a.max_size.unwrap_or(d.size_range.1)),
        min_center_separation: a.separation.unwrap_or(d.min_center_separation),
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let scenes = generate_dataset(&spec)?;
    save_dataset(&scenes, &a.out)?;
    println!("{}", dataset_summary(&scenes, a.classes));
    Ok(())
}

fn dataset_summary(scenes: &[Scene], classes: usize) -> String {
    let mut hist = vec![0usize; classes];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if o.class < classes {
            hist[o.class] += 1;
        }
    }
    let total: usize = hist.iter().sum();
    let per_class: Vec<String> = hist.iter().map(|h| h.to_string()).collect();
    format!("scenes={} objects={} per_class=[{}]", scenes.len(), total, per_class.join(","))
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn common_config(c: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = read_config(c.config.as_deref())?;
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(lr) = c.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(b) = c.batch_size {
        cfg.batch_size = b;
    }
    Ok(cfg)
}

fn load_sets(c: &TrainCommon) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train_set = load_dataset(&c.data)?;
    let val_set = match &c.val {
        Some(p) => load_dataset(p)?,
        None => train_set.clone(),
    };
    Ok((train_set, val_set))
}

fn check_classes(scenes: &[Scene], dims: &ModelDims) -> Result<()> {
    if let Some(bad) = scenes.iter().flat_map(|s| &s.objects).find(|o| o.class >= dims.classes) {
        return Err(usage(format!("dataset has class {} but the model has {} classes", bad.class, dims.classes)));
    }
    Ok(())
}

fn run_training(c: &TrainCommon, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (train_set, val_set) = load_sets(c)?;
    check_classes(&train_set, &cfg.model)?;
    let outcome = train(&train_set, &val_set, cfg)?;
    for l in &outcome.logs {
        let ap = l.val_ap.map(|a| format!(" AP={:.4}", a.ap)).unwrap_or_default();
        let is = l.instability.map(|v| format!(" IS={v:.4}")).unwrap_or_default();
        info(format!("epoch {:>3} loss={:.4}{ap}{is} ({:.2}s)", l.epoch, l.mean_total_loss, l.seconds));
    }
    outcome.params.save(&c.out)?;
    if let Some(p) = &c.log {
        write_json_lines(p, &outcome.logs)?;
    }
    if let Some(p) = &c.match_log {
        write_json_lines(p, &outcome.match_history)?;
    }
    if let Some(p) = &c.metrics {
        write_json(p, &metrics_report(&outcome.logs)?)?;
    }
    Ok(outcome)
}

fn metrics_report(logs: &[EpochLog]) -> Result<MetricsReport> {
    let ap = logs.last().and_then(|l| l.val_ap).context("no evaluated epoch")?;
    let is = logs.iter().filter_map(|l| l.instability).collect();
    let is_aux = logs.iter().filter_map(|l| l.instability_aux).collect();
    Ok(MetricsReport::new(ap, is, is_aux))
}

fn write_json_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_teacher(a: TrainTeacherArgs) -> Result<()> {
    let mut cfg = common_config(&a.common)?;
    cfg.supervision.mode = SupervisionMode::GtOnly;
    cfg.teacher_mode = TeacherMode::None;
    cfg.noisy_boxes = None;
    let outcome = run_training(&a.common, &cfg)?;
    if let Some(ap) = outcome.logs.last().and_then(|l| l.val_ap) {
        println!("AP={:.4} AP50={:.4} AP75={:.4}", ap.ap, ap.ap50, ap.ap75);
    }
    Ok(())
}

fn train_student(a: TrainStudentArgs) -> Result<()> {
    let mut cfg = common_config(&a.common)?;
    if let Some(m) = a.mode {
        cfg.supervision.mode = match m {
            ModeArg::GtOnly => SupervisionMode::GtOnly,
            ModeArg::Parallel => SupervisionMode::Parallel,
            ModeArg::Concat => SupervisionMode::Concat,
        };
    }
    if a.no_score_weighting {
        cfg.supervision.score_weighting = false;
    }
    if let Some(n) = a.negative_score {
        cfg.supervision.negative_score = n;
    }
    if a.iou_filter.is_some() {
        cfg.aux.iou_filter = a.iou_filter;
    }
    if a.nms_fuse.is_some() {
        cfg.aux.nms_fuse = a.nms_fuse;
    }
    cfg.aux.replace_labels |= a.replace_labels;
    cfg.aux.replace_scores_iou |= a.replace_scores_iou;
    cfg.aux.newly_annotated_only |= a.newly_annotated_only;
    if a.noisy_boxes {
        cfg.noisy_boxes = Some(NoisyBoxes::default());
    }

    let sources = [!a.teacher_boxes.is_empty(), !a.online_teachers.is_empty(), a.mean_teacher.is_some()];
    if sources.iter().filter(|&&s| s).count() > 1 {
        return Err(usage("--teacher-boxes, --online-teacher and --mean-teacher are mutually exclusive"));
    }
    if !a.teacher_boxes.is_empty() {
        cfg.teacher_mode = TeacherMode::Offline { paths: a.teacher_boxes.clone() };
    } else if !a.online_teachers.is_empty() {
        cfg.teacher_mode = TeacherMode::Online { checkpoints: a.online_teachers.clone() };
    } else if let Some(m) = a.mean_teacher {
        cfg.teacher_mode = TeacherMode::MeanTeacher { momentum: m };
    }

    if cfg.supervision.mode == SupervisionMode::GtOnly {
        if cfg.teacher_mode != TeacherMode::None || cfg.noisy_boxes.is_some() || !cfg.aux.is_identity() {
            warn("--mode gt-only ignores all teacher flags");
        }
        cfg.teacher_mode = TeacherMode::None;
        cfg.noisy_boxes = None;
        cfg.aux = Default::default();
    }
    let teacher_count = match &cfg.teacher_mode {
        TeacherMode::None => 0,
        TeacherMode::Offline { paths } => paths.len(),
        TeacherMode::Online { checkpoints } => checkpoints.len(),
        TeacherMode::MeanTeacher { .. } => 1,
    } + usize::from(cfg.noisy_boxes.is_some());
    if cfg.aux.nms_fuse.is_some() && teacher_count < 2 {
        warn("--nms-fuse with a single teacher only removes that teacher's own overlaps");
    }
    if cfg.supervision.mode != SupervisionMode::GtOnly && teacher_count == 0 {
        warn("no teacher supplied; training reduces to ground truth only");
    }
    if cfg.supervision.mode == SupervisionMode::Concat {
        check_concat_capacity(&a.common, &cfg)?;
    }
    info(format!("training with {teacher_count} teacher(s), mode {:?}", cfg.supervision.mode));
    let outcome = run_training(&a.common, &cfg)?;
    if let Some(ap) = outcome.logs.last().and_then(|l| l.val_ap) {
        println!("AP={:.4} AP50={:.4} AP75={:.4}", ap.ap, ap.ap50, ap.ap75);
    }
    Ok(())
}

/// Concatenated targets must fit in the query budget on every scene.
fn check_concat_capacity(c: &TrainCommon, cfg: &TrainConfig) -> Result<()> {
    let TeacherMode::Offline { paths } = &cfg.teacher_mode else {
        return Ok(());
    };
    let scenes = load_dataset(&c.data)?;
    let teachers = paths.iter().map(|p| load_teacher_boxes(p)).collect::<teach_detr::Result<Vec<_>>>()?;
    let noisy = cfg.noisy_boxes.as_ref().map_or(0, |n| n.groups);
    for s in &scenes {
        let sets = teachers.iter().map(|t| t.for_scene(&s.id)).collect();
        let sets = cfg.aux.apply(sets, &s.objects, cfg.supervision.max_boxes_per_teacher);
        let total = s.objects.len() * (1 + noisy) + sets.iter().map(|t| t.boxes.len()).sum::<usize>();
        if total > cfg.model.queries {
            return Err(usage(format!(
                "--mode concat: scene {} has {total} targets for {} queries; export fewer boxes per teacher",
                s.id, cfg.model.queries
            )));
        }
    }
    Ok(())
}

fn export_boxes(a: ExportArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let mut export: ExportConfig = cfg.export;
    if let Some(t) = a.score_threshold {
        export.score_threshold = t;
    }
    if let Some(m) = a.max_boxes {
        export.max_boxes = m;
    }
    if export.max_boxes == 0 {
        return Err(usage("--max-boxes must be at least 1"));
    }
    let params = ModelParams::load(&a.checkpoint)?;
    let scenes = load_dataset(&a.data)?;
    export_teacher_boxes(&params, &scenes, &cfg.raster, &export, &a.teacher_id, &a.out)?;
    let boxes = load_teacher_boxes(&a.out)?;
    let total: usize = boxes.iter().map(|(_, s)| s.boxes.len()).sum();
    println!("scenes={} boxes={}", scenes.len(), total);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let params = ModelParams::load(&a.checkpoint)?;
    let scenes = load_dataset(&a.data)?;
    check_classes(&scenes, params.dims())?;
    let ap = evaluate(&params, &scenes, &cfg.raster)?;
    write_json(&a.report, &MetricsReport::new(ap, vec![], vec![]))?;
    println!("| metric | value |");
    println!("|---|---|");
    println!("| AP | {:.4} |", ap.ap);
    println!("| AP50 | {:.4} |", ap.ap50);
    println!("| AP75 | {:.4} |", ap.ap75);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let scenes = load_dataset(&a.data)?;
    let classes = scenes.iter().flat_map(|s| &s.objects).map(|o| o.class + 1).max().unwrap_or(0);
    let gts: Vec<_> = scenes.iter().map(|s| s.objects.clone()).collect();
    let mut report = BTreeMap::new();
    for path in &a.teacher_boxes {
        let t = load_teacher_boxes(path)?;
        let sets: Vec<_> = scenes.iter().map(|s| t.for_scene(&s.id)).collect();
        let boxes: usize = sets.iter().map(|s| s.boxes.len()).sum();
        let fresh = newly_annotated_fraction(&sets, &gts)?;
        let ratio = category_box_ratio(&sets, &gts, a.iou_min, classes)?;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!("teacher {}: boxes={boxes} newly_annotated_fraction={}", t.teacher_id, fmt(fresh));
        for (c, r) in ratio.iter().enumerate() {
            println!("  class {c}: boxes_per_gt(IoU>{})={}", a.iou_min, fmt(*r));
        }
        report.insert(
            t.teacher_id.clone(),
            serde_json::json!({
                "boxes": boxes,
                "newly_annotated_fraction": fresh,
                "category_box_ratio": ratio,
            }),
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(Some(p))?,
        None => standard_config(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let train_set = load_dataset(&a.data)?;
    let val_set = load_dataset(&a.val)?;
    check_classes(&train_set, &cfg.model)?;
    let source = if a.teachers.is_empty() {
        TeacherSource::Trained { epochs: a.teacher_epochs }
    } else {
        TeacherSource::Files(a.teachers.iter().map(|p| load_teacher_boxes(p)).collect::<teach_detr::Result<_>>()?)
    };
    let seeds: Vec<u64> = (0..a.seeds).map(|s| cfg.seed + s).collect();
    let result = run_suite(a.suite, &cfg, &train_set, &val_set, &source, &seeds)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("results.json"), &result)?;
    let table = result.table();
    fs::write(a.out.join("table.md"), &table).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{table}");
    Ok(())
}
