//! COCO-style average precision, matching instability scores and teacher-box
//! corpus statistics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::{LabeledBox, NO_OBJECT};
use crate::model::Predictions;
use crate::supervision::{max_iou_to_gt, TeacherSet};

/// Reattribution threshold: an auxiliary match counts as a match to a GT box
/// only when their IoU is strictly greater than this.
pub const AUX_REATTRIBUTION_IOU: f64 = 0.5;

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene_id: String,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Every query/class pair of a prediction as a scored detection.
pub fn detections_from_predictions(scene_id: &str, preds: &Predictions) -> Vec<Detection> {
    let mut out = Vec::with_capacity(preds.num_queries() * preds.num_classes());
    for q in 0..preds.num_queries() {
        for (class, &score) in preds.probs(q).iter().enumerate() {
            out.push(Detection { scene_id: scene_id.to_string(), bbox: preds.bbox(q), class, score });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApSummary {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

/// Mean AP over `iou_thresholds`, plus AP at 0.5 and 0.75. Classes without
/// ground truth are left out of every mean; with no ground truth at all the
/// result is zero.
pub fn average_precision(dets: &[Detection], gts: &[(String, Vec<LabeledBox>)], iou_thresholds: &[f64]) -> ApSummary {
    let eval = ApEvaluator::new(dets, gts);
    let mean = |ts: &[f64]| {
        if ts.is_empty() {
            return 0.0;
        }
        ts.iter().map(|&t| eval.ap_at(t)).sum::<f64>() / ts.len() as f64
    };
    ApSummary { ap: mean(iou_thresholds), ap50: eval.ap_at(0.5), ap75: eval.ap_at(0.75) }
}

struct ApEvaluator<'a> {
    /// per class: detections sorted by descending score
    dets: HashMap<usize, Vec<&'a Detection>>,
    /// (scene, class) -> gt boxes
    gts: HashMap<(&'a str, usize), Vec<BBox>>,
    positives: HashMap<usize, usize>,
}

impl<'a> ApEvaluator<'a> {
    fn new(dets: &'a [Detection], gts: &'a [(String, Vec<LabeledBox>)]) -> Self {
        let mut by_class: HashMap<usize, Vec<&Detection>> = HashMap::new();
        for d in dets {
            by_class.entry(d.class).or_default().push(d);
        }
        for v in by_class.values_mut() {
            v.sort_by(|a, b| b.score.total_cmp(&a.score));
        }
        let mut gt_map: HashMap<(&str, usize), Vec<BBox>> = HashMap::new();
        let mut positives: HashMap<usize, usize> = HashMap::new();
        for (scene, objects) in gts {
            for o in objects {
                gt_map.entry((scene.as_str(), o.class)).or_default().push(o.bbox);
                *positives.entry(o.class).or_default() += 1;
            }
        }
        Self { dets: by_class, gts: gt_map, positives }
    }

    fn ap_at(&self, threshold: f64) -> f64 {
        let mut classes: Vec<usize> = self.positives.keys().copied().collect();
        classes.sort_unstable();
        if classes.is_empty() {
            return 0.0;
        }
        let sum: f64 = classes.iter().map(|&c| self.class_ap(c, threshold)).sum();
        sum / classes.len() as f64
    }

    fn class_ap(&self, class: usize, threshold: f64) -> f64 {
        let npos = self.positives[&class];
        let Some(dets) = self.dets.get(&class) else {
            return 0.0;
        };
        let mut taken: HashMap<&str, Vec<bool>> = HashMap::new();
        let mut tp_flags = Vec::with_capacity(dets.len());
        for d in dets {
            let key = (d.scene_id.as_str(), class);
            let hit = self.gts.get(&key).and_then(|boxes| {
                let used = taken.entry(d.scene_id.as_str()).or_insert_with(|| vec![false; boxes.len()]);
                let mut best: Option<(usize, f64)> = None;
                for (g, gb) in boxes.iter().enumerate() {
                    if used[g] {
                        continue;
                    }
                    let v = iou(&d.bbox, gb);
                    if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
                best.map(|(g, _)| {
                    used[g] = true;
                })
            });
            tp_flags.push(hit.is_some());
        }
        interpolated_ap(&tp_flags, npos)
    }
}

/// 101-point interpolated AP for detections already sorted by descending
/// score, flagged true-positive or not.
pub fn interpolated_ap(tp_flags: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// One scene's matching results for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMatch {
    pub scene_id: String,
    pub gt_count: usize,
    /// Per query: matched GT index or -1.
    pub gt: Vec<i64>,
    /// Per teacher, per query: matched teacher-box index or -1.
    pub aux: Vec<Vec<i64>>,
}

/// All scenes' matching results for one epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchLog {
    pub epoch: usize,
    pub scenes: Vec<SceneMatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IsNormalization {
    /// Changed queries divided by the scene's GT count.
    #[default]
    GtCount,
    /// Changed queries divided by the number of queries.
    Queries,
}

fn check_comparable(a: &MatchLog, b: &MatchLog) -> Result<()> {
    if a.scenes.len() != b.scenes.len() {
        return Err(Error::EpochMismatch(format!("{} vs {} scenes", a.scenes.len(), b.scenes.len())));
    }
    for (x, y) in a.scenes.iter().zip(&b.scenes) {
        if x.scene_id != y.scene_id || x.gt_count != y.gt_count {
            return Err(Error::EpochMismatch(format!("scene `{}` vs `{}`", x.scene_id, y.scene_id)));
        }
        if x.gt.len() != y.gt.len() {
            return Err(Error::EpochMismatch(format!(
                "scene `{}`: {} vs {} queries",
                x.scene_id,
                x.gt.len(),
                y.gt.len()
            )));
        }
        if let Some(bad) = x.gt.iter().chain(&y.gt).find(|&&i| i < NO_OBJECT || i >= x.gt_count as i64) {
            return Err(Error::EpochMismatch(format!("scene `{}`: GT index {bad} out of range", x.scene_id)));
        }
    }
    Ok(())
}

fn mean_change<'s>(pairs: impl Iterator<Item = (&'s SceneMatch, Vec<i64>, Vec<i64>)>, norm: IsNormalization) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for (scene, a, b) in pairs {
        if scene.gt_count == 0 {
            continue;
        }
        let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64;
        let denom = match norm {
            IsNormalization::GtCount => scene.gt_count,
            IsNormalization::Queries => a.len(),
        };
        total += changed / denom as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Mean over scenes with ground truth of the number of queries whose GT
/// index changed between two epochs, normalized per `norm`.
pub fn instability_score(log_t: &MatchLog, log_t1: &MatchLog, norm: IsNormalization) -> Result<f64> {
    check_comparable(log_t, log_t1)?;
    Ok(mean_change(log_t.scenes.iter().zip(&log_t1.scenes).map(|(a, b)| (a, a.gt.clone(), b.gt.clone())), norm))
}

/// Per-query GT indices where negatives matched to an auxiliary box that
/// overlaps some GT box by IoU > 0.5 are credited to that GT box (best IoU
/// wins, ties to the lower index). Teachers are consulted in order.
pub fn reattribute(scene: &SceneMatch, teachers: &[TeacherSet], gt: &[LabeledBox]) -> Result<Vec<i64>> {
    if scene.aux.len() != teachers.len() {
        return Err(Error::EpochMismatch(format!(
            "scene `{}`: {} teacher match rows for {} teacher sets",
            scene.scene_id,
            scene.aux.len(),
            teachers.len()
        )));
    }
    let mut out = scene.gt.clone();
    for (q, slot) in out.iter_mut().enumerate() {
        if *slot != NO_OBJECT {
            continue;
        }
        for (row, set) in scene.aux.iter().zip(teachers) {
            let j = row.get(q).copied().unwrap_or(NO_OBJECT);
            if j == NO_OBJECT {
                continue;
            }
            let b = set.boxes.get(j as usize).ok_or_else(|| {
                Error::EpochMismatch(format!("scene `{}`: teacher box {j} out of range", scene.scene_id))
            })?;
            if let Some((i, v)) = max_iou_to_gt(&b.bbox, gt) {
                if v > AUX_REATTRIBUTION_IOU {
                    *slot = i as i64;
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Instability after crediting auxiliary matches to nearby GT boxes.
/// `teachers_t[s]` / `teachers_t1[s]` are the teacher sets that produced
/// scene `s`'s auxiliary matches in each epoch; `gts[s]` is its ground truth.
pub fn instability_score_aux(
    log_t: &MatchLog,
    log_t1: &MatchLog,
    teachers_t: &[Vec<TeacherSet>],
    teachers_t1: &[Vec<TeacherSet>],
    gts: &[Vec<LabeledBox>],
    norm: IsNormalization,
) -> Result<f64> {
    check_comparable(log_t, log_t1)?;
    let n = log_t.scenes.len();
    if teachers_t.len() != n || teachers_t1.len() != n || gts.len() != n {
        return Err(Error::EpochMismatch("teacher sets and ground truth must cover every logged scene".into()));
    }
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let a = reattribute(&log_t.scenes[s], &teachers_t[s], &gts[s])?;
        let b = reattribute(&log_t1.scenes[s], &teachers_t1[s], &gts[s])?;
        rows.push((&log_t.scenes[s], a, b));
    }
    Ok(mean_change(rows.into_iter(), norm))
}

fn check_aligned(teachers: &[TeacherSet], gts: &[Vec<LabeledBox>]) -> Result<()> {
    if teachers.len() != gts.len() {
        return Err(Error::ShapeMismatch { expected: gts.len(), actual: teachers.len() });
    }
    Ok(())
}

/// Per class: teacher boxes with IoU > `iou_min` to a same-class GT box,
/// divided by the class's GT count. `None` for classes without GT.
/// `teachers[s]` and `gts[s]` belong to the same scene.
pub fn category_box_ratio(
    teachers: &[TeacherSet],
    gts: &[Vec<LabeledBox>],
    iou_min: f64,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    check_aligned(teachers, gts)?;
    let mut hits = vec![0usize; classes];
    let mut gt_counts = vec![0usize; classes];
    for (set, gt) in teachers.iter().zip(gts) {
        for g in gt.iter().filter(|g| g.class < classes) {
            gt_counts[g.class] += 1;
        }
        for b in set.boxes.iter().filter(|b| b.class < classes) {
            let hit = gt.iter().filter(|g| g.class == b.class).any(|g| iou(&b.bbox, &g.bbox) > iou_min);
            if hit {
                hits[b.class] += 1;
            }
        }
    }
    Ok(hits.iter().zip(&gt_counts).map(|(&h, &g)| (g > 0).then(|| h as f64 / g as f64)).collect())
}

/// Fraction of teacher boxes overlapping no GT box; `None` without boxes.
pub fn newly_annotated_fraction(teachers: &[TeacherSet], gts: &[Vec<LabeledBox>]) -> Result<Option<f64>> {
    check_aligned(teachers, gts)?;
    let mut total = 0usize;
    let mut fresh = 0usize;
    for (set, gt) in teachers.iter().zip(gts) {
        for b in &set.boxes {
            total += 1;
            if gt.iter().all(|g| iou(&b.bbox, &g.bbox) == 0.0) {
                fresh += 1;
            }
        }
    }
    Ok((total > 0).then(|| fresh as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "IS_per_epoch")]
    pub is_per_epoch: Vec<f64>,
    #[serde(rename = "IS_aux_per_epoch")]
    pub is_aux_per_epoch: Vec<f64>,
}

impl MetricsReport {
    pub fn new(ap: ApSummary, is_per_epoch: Vec<f64>, is_aux_per_epoch: Vec<f64>) -> Self {
        Self { ap: ap.ap, ap50: ap.ap50, ap75: ap.ap75, is_per_epoch, is_aux_per_epoch }
    }
}
