//! Ground-truth plus teacher-box supervision.
//!
//! Every target set (the ground truth and each teacher) is matched to the
//! queries on its own. A matched teacher box scales its classification and
//! box losses by the teacher's confidence score; the queries left unmatched
//! by a teacher learn "no object" at a reduced weight. All branch losses are
//! summed into one scalar.

mod focal;
mod transforms;

use serde::{Deserialize, Serialize};

pub use self::focal::Focal;
pub use self::transforms::{
    concat_targets, filter_by_iou, filter_top_scores, gen_noisy_boxes, max_iou_to_gt, newly_annotated, nms_fuse,
    replace_labels_with_gt, replace_scores_with_iou, AuxPipeline, NoisyBoxes,
};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_grad, l1_box, BBox};
use crate::matching::{build_cost_matrix, hungarian, Assignment, CostWeights, LabeledBox};
use crate::model::{sigmoid, Predictions};

/// Branch id of the ground-truth branch.
pub const GT_BRANCH: &str = "gt";
/// Branch id of the single merged branch in concat mode.
pub const CONCAT_BRANCH: &str = "concat";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherBox {
    pub bbox: BBox,
    pub class: usize,
    score: f64,
}

impl TeacherBox {
    pub fn new(bbox: BBox, class: usize, score: f64) -> Result<Self> {
        if !(score > 0.0 && score <= 1.0) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Self { bbox, class, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn with_score(self, score: f64) -> Result<Self> {
        Self::new(self.bbox, self.class, score)
    }

    pub fn labeled(&self) -> LabeledBox {
        LabeledBox::new(self.bbox, self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSet {
    pub teacher_id: String,
    pub boxes: Vec<TeacherBox>,
}

impl TeacherSet {
    pub fn new(teacher_id: impl Into<String>, boxes: Vec<TeacherBox>) -> Self {
        Self { teacher_id: teacher_id.into(), boxes }
    }

    /// Boxes as matching targets. Scores are deliberately left behind.
    pub fn targets(&self) -> Vec<LabeledBox> {
        self.boxes.iter().map(TeacherBox::labeled).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionMode {
    GtOnly,
    Parallel,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisionConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    /// Weight of the no-object loss on queries a teacher leaves unmatched.
    pub negative_score: f64,
    pub max_boxes_per_teacher: usize,
    pub mode: SupervisionMode,
    pub score_weighting: bool,
    pub cost_weights: CostWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            negative_score: 0.5,
            max_boxes_per_teacher: 50,
            mode: SupervisionMode::Parallel,
            score_weighting: true,
            cost_weights: CostWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl SupervisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.negative_score > 0.0 && self.negative_score <= 1.0) {
            return Err(Error::InvalidConfig(format!("negative_score {} must lie in (0, 1]", self.negative_score)));
        }
        if self.max_boxes_per_teacher == 0 {
            return Err(Error::InvalidConfig("max_boxes_per_teacher must be at least 1".into()));
        }
        for (name, v) in
            [("lambda_cls", self.lambda_cls), ("lambda_l1", self.lambda_l1), ("lambda_giou", self.lambda_giou)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0 && self.focal_gamma >= 0.0) {
            return Err(Error::InvalidConfig("focal alpha must lie in (0, 1) and gamma be nonnegative".into()));
        }
        Ok(())
    }

    fn focal(&self) -> Focal {
        Focal { alpha: self.focal_alpha, gamma: self.focal_gamma }
    }
}

/// One target set together with its per-target and negative-query weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub targets: Vec<LabeledBox>,
    pub target_weights: Vec<f64>,
    pub negative_weight: f64,
}

/// Splits the supervision into branches in the fixed order: ground truth
/// first, then teachers as given. `gt_only` ignores teachers; `concat` folds
/// everything into one unit-weight branch.
pub fn build_branches(gt: &[LabeledBox], teachers: &[TeacherSet], cfg: &SupervisionConfig) -> Result<Vec<Branch>> {
    let gt_branch = |id: &str, targets: Vec<LabeledBox>| Branch {
        id: id.to_string(),
        target_weights: vec![1.0; targets.len()],
        targets,
        negative_weight: 1.0,
    };
    Ok(match cfg.mode {
        SupervisionMode::GtOnly => vec![gt_branch(GT_BRANCH, gt.to_vec())],
        SupervisionMode::Concat => vec![gt_branch(CONCAT_BRANCH, concat_targets(gt, teachers, usize::MAX)?)],
        SupervisionMode::Parallel => {
            let mut branches = vec![gt_branch(GT_BRANCH, gt.to_vec())];
            for t in teachers {
                let (target_weights, negative_weight) = if cfg.score_weighting {
                    (t.boxes.iter().map(TeacherBox::score).collect(), cfg.negative_score)
                } else {
                    (vec![1.0; t.boxes.len()], 1.0)
                };
                branches.push(Branch {
                    id: t.teacher_id.clone(),
                    targets: t.targets(),
                    target_weights,
                    negative_weight,
                });
            }
            branches
        }
    })
}

/// One Hungarian assignment per branch, in branch order.
pub fn match_all(
    preds: &Predictions,
    gt: &[LabeledBox],
    teachers: &[TeacherSet],
    cfg: &SupervisionConfig,
) -> Result<Vec<Assignment>> {
    let branches = build_branches(gt, teachers, cfg)?;
    match_branches(preds, &branches, &cfg.cost_weights)
}

pub fn match_branches(preds: &Predictions, branches: &[Branch], weights: &CostWeights) -> Result<Vec<Assignment>> {
    branches.iter().map(|b| build_cost_matrix(preds, &b.targets, weights).map(|c| hungarian(&c))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLoss {
    pub branch_id: String,
    /// Weighted focal loss summed over queries and classes.
    pub cls_loss: f64,
    /// Weighted l1 distance summed over matched queries.
    pub l1_loss: f64,
    /// Weighted `1 - GIoU` summed over matched queries.
    pub giou_loss: f64,
}

impl BranchLoss {
    pub fn weighted(&self, cfg: &SupervisionConfig) -> f64 {
        cfg.lambda_cls * self.cls_loss + cfg.lambda_l1 * self.l1_loss + cfg.lambda_giou * self.giou_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub branches: Vec<BranchLoss>,
    pub total: f64,
    /// Gradient of `total` with respect to the raw network outputs.
    pub grads: Vec<f64>,
}

pub fn compute_loss(
    preds: &Predictions,
    gt: &[LabeledBox],
    teachers: &[TeacherSet],
    assignments: &[Assignment],
    cfg: &SupervisionConfig,
) -> Result<LossBreakdown> {
    let branches = build_branches(gt, teachers, cfg)?;
    branch_loss(preds, &branches, assignments, cfg)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and raw-output gradient for prebuilt branches and their assignments.
pub fn branch_loss(
    preds: &Predictions,
    branches: &[Branch],
    assignments: &[Assignment],
    cfg: &SupervisionConfig,
) -> Result<LossBreakdown> {
    if branches.len() != assignments.len() {
        return Err(Error::AssignmentMismatch(format!(
            "{} branches but {} assignments",
            branches.len(),
            assignments.len()
        )));
    }
    let n = preds.num_queries();
    let c = preds.num_classes();
    let stride = 4 + c;
    let focal = cfg.focal();
    let mut grads = vec![0.0; n * stride];
    let mut records = Vec::with_capacity(branches.len());
    let mut total = 0.0;

    for (branch, assignment) in branches.iter().zip(assignments) {
        if assignment.num_queries() != n || assignment.num_targets() != branch.targets.len() {
            return Err(Error::AssignmentMismatch(format!(
                "branch `{}`: assignment covers {} queries / {} targets, expected {n} / {}",
                branch.id,
                assignment.num_queries(),
                assignment.num_targets(),
                branch.targets.len()
            )));
        }
        if let Some(bad) = branch.targets.iter().find(|t| t.class >= c) {
            return Err(Error::InvalidClass { class: bad.class, num_classes: c });
        }
        let mut rec = BranchLoss { branch_id: branch.id.clone(), cls_loss: 0.0, l1_loss: 0.0, giou_loss: 0.0 };
        for q in 0..n {
            let target = assignment.target_of(q);
            let weight = target.map_or(branch.negative_weight, |t| branch.target_weights[t]);
            let positive_class = target.map(|t| branch.targets[t].class);
            let g = &mut grads[q * stride..(q + 1) * stride];

            for (k, &logit) in preds.logits(q).iter().enumerate() {
                let (loss, dl) = focal.loss_and_grad(logit, positive_class == Some(k));
                rec.cls_loss += weight * loss;
                g[4 + k] += cfg.lambda_cls * weight * dl;
            }

            if let Some(t) = target {
                let pb = preds.bbox(q);
                let tb = branch.targets[t].bbox;
                rec.l1_loss += weight * l1_box(&pb, &tb);
                rec.giou_loss += weight * (1.0 - giou(&pb, &tb));
                let dg = giou_grad(&pb, &tb);
                let fields = pb.to_array();
                let target_fields = tb.to_array();
                for k in 0..4 {
                    let d_field =
                        cfg.lambda_l1 * weight * sign(fields[k] - target_fields[k]) - cfg.lambda_giou * weight * dg[k];
                    let s = sigmoid(preds.raw_box(q)[k]);
                    g[k] += d_field * s * (1.0 - s);
                }
            }
        }
        total += rec.weighted(cfg);
        records.push(rec);
    }
    if !total.is_finite() {
        return Err(Error::InvalidConfig(format!("non-finite total loss {total}")));
    }
    Ok(LossBreakdown { branches: records, total, grads })
}
