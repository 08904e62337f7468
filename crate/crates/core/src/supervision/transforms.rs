//! Teacher-set rewrites used by the supervision ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TeacherBox, TeacherSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::matching::LabeledBox;

/// Merges ground truth and every teacher's boxes into one target list,
/// ground truth first, teachers in order. Scores are dropped.
pub fn concat_targets(gt: &[LabeledBox], teachers: &[TeacherSet], queries: usize) -> Result<Vec<LabeledBox>> {
    let total = gt.len() + teachers.iter().map(|t| t.boxes.len()).sum::<usize>();
    if total > queries {
        return Err(Error::TooManyTargets { targets: total, queries });
    }
    let mut out = gt.to_vec();
    out.extend(teachers.iter().flat_map(|t| t.targets()));
    Ok(out)
}

/// Keeps the `max_count` highest-scoring boxes in their original order.
pub fn filter_top_scores(t: &TeacherSet, max_count: usize) -> TeacherSet {
    if t.boxes.len() <= max_count {
        return t.clone();
    }
    let mut order: Vec<usize> = (0..t.boxes.len()).collect();
    // stable: equal scores keep their original order
    order.sort_by(|&a, &b| t.boxes[b].score().total_cmp(&t.boxes[a].score()));
    order.truncate(max_count);
    order.sort_unstable();
    TeacherSet::new(t.teacher_id.clone(), order.into_iter().map(|i| t.boxes[i]).collect())
}

/// Highest IoU of `b` against any ground-truth box and the index achieving
/// it; ties go to the lower index. `None` when there is no ground truth.
pub fn max_iou_to_gt(b: &BBox, gt: &[LabeledBox]) -> Option<(usize, f64)> {
    gt.iter().enumerate().map(|(i, g)| (i, iou(b, &g.bbox))).fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((i, v)),
    })
}

/// Boxes whose best IoU to the ground truth strictly exceeds `threshold`.
pub fn filter_by_iou(t: &TeacherSet, gt: &[LabeledBox], threshold: f64) -> TeacherSet {
    let boxes =
        t.boxes.iter().filter(|b| max_iou_to_gt(&b.bbox, gt).is_some_and(|(_, v)| v > threshold)).copied().collect();
    TeacherSet::new(t.teacher_id.clone(), boxes)
}

/// Boxes that overlap no ground-truth box at all.
pub fn newly_annotated(t: &TeacherSet, gt: &[LabeledBox]) -> TeacherSet {
    let boxes = t.boxes.iter().filter(|b| max_iou_to_gt(&b.bbox, gt).is_none_or(|(_, v)| v == 0.0)).copied().collect();
    TeacherSet::new(t.teacher_id.clone(), boxes)
}

/// Relabels each overlapping box with its best-IoU ground-truth class.
pub fn replace_labels_with_gt(t: &TeacherSet, gt: &[LabeledBox]) -> TeacherSet {
    let boxes = t
        .boxes
        .iter()
        .map(|b| match max_iou_to_gt(&b.bbox, gt) {
            Some((i, v)) if v > 0.0 => TeacherBox { class: gt[i].class, ..*b },
            _ => *b,
        })
        .collect();
    TeacherSet::new(t.teacher_id.clone(), boxes)
}

/// Replaces each overlapping box's score with its best IoU to ground truth.
pub fn replace_scores_with_iou(t: &TeacherSet, gt: &[LabeledBox]) -> TeacherSet {
    let boxes = t
        .boxes
        .iter()
        .map(|b| match max_iou_to_gt(&b.bbox, gt) {
            Some((_, v)) if v > 0.0 => TeacherBox { score: v.min(1.0), ..*b },
            _ => *b,
        })
        .collect();
    TeacherSet::new(t.teacher_id.clone(), boxes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisyBoxes {
    pub groups: usize,
    pub shift: f64,
    pub scale: f64,
}

impl Default for NoisyBoxes {
    fn default() -> Self {
        Self { groups: 3, shift: 0.4, scale: 0.4 }
    }
}

/// Jittered copies of the ground truth: `groups` passes over the boxes,
/// each shifting centers by up to `shift` of the extent and rescaling by up
/// to `scale`. Scores are the IoU with the source box; a copy that no longer
/// overlaps its source has no valid score and is dropped.
pub fn gen_noisy_boxes<R: Rng + ?Sized>(
    gt: &[LabeledBox],
    noise: &NoisyBoxes,
    teacher_id: &str,
    rng: &mut R,
) -> Result<TeacherSet> {
    if noise.groups == 0 || !(0.0..1.0).contains(&noise.shift) || !(0.0..1.0).contains(&noise.scale) {
        return Err(Error::InvalidConfig(format!(
            "noisy boxes need groups >= 1 and shift, scale in [0, 1): {noise:?}"
        )));
    }
    let mut boxes = Vec::with_capacity(noise.groups * gt.len());
    for _ in 0..noise.groups {
        for g in gt {
            let b = g.bbox;
            let mut u = || rng.random_range(-1.0..1.0);
            let cx = b.cx() + u() * noise.shift * b.w();
            let cy = b.cy() + u() * noise.shift * b.h();
            let w = b.w() * (1.0 + u() * noise.scale);
            let h = b.h() * (1.0 + u() * noise.scale);
            let jittered = BBox::new(cx, cy, w, h)?;
            let score = iou(&jittered, &b).min(1.0);
            if score > 0.0 {
                boxes.push(TeacherBox::new(jittered, g.class, score)?);
            }
        }
    }
    Ok(TeacherSet::new(teacher_id, boxes))
}

/// Classwise greedy NMS over the union of all teachers' boxes. Survivors are
/// returned in descending score order; equal scores keep teacher order.
pub fn nms_fuse(teachers: &[TeacherSet], iou_threshold: f64, fused_id: &str) -> TeacherSet {
    let mut pool: Vec<TeacherBox> = teachers.iter().flat_map(|t| t.boxes.iter().copied()).collect();
    pool.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<TeacherBox> = Vec::new();
    for cand in pool {
        let suppressed = kept.iter().any(|k| k.class == cand.class && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            kept.push(cand);
        }
    }
    TeacherSet::new(fused_id, kept)
}

/// Ablation rewrites applied to a scene's teacher sets before supervision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxPipeline {
    /// Merge all teachers into one set with classwise NMS at this IoU.
    pub nms_fuse: Option<f64>,
    pub replace_labels: bool,
    pub replace_scores_iou: bool,
    /// Keep only boxes whose IoU to ground truth exceeds this value.
    pub iou_filter: Option<f64>,
    /// Keep only boxes that overlap no ground truth.
    pub newly_annotated_only: bool,
}

impl AuxPipeline {
    /// Applies, in order: fusion, relabeling, rescoring, IoU filtering and
    /// finally the per-teacher top-score cap.
    pub fn apply(&self, teachers: Vec<TeacherSet>, gt: &[LabeledBox], max_boxes: usize) -> Vec<TeacherSet> {
        let mut sets = match self.nms_fuse {
            Some(thr) if !teachers.is_empty() => vec![nms_fuse(&teachers, thr, "nms-fused")],
            _ => teachers,
        };
        for set in &mut sets {
            if self.replace_labels {
                *set = replace_labels_with_gt(set, gt);
            }
            if self.replace_scores_iou {
                *set = replace_scores_with_iou(set, gt);
            }
            if let Some(thr) = self.iou_filter {
                *set = filter_by_iou(set, gt, thr);
            }
            if self.newly_annotated_only {
                *set = newly_annotated(set, gt);
            }
            *set = filter_top_scores(set, max_boxes);
        }
        sets
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}
