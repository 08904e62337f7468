use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teach_detr::model::SceneGrid;
use teach_detr::supervision::{
    branch_loss, build_branches, compute_loss, match_all, match_branches, SupervisionConfig, SupervisionMode,
};
use teach_detr::trainer::{scene_loss_fixed, scene_step};
use teach_detr::{BBox, LabeledBox, ModelDims, ModelParams, Predictions, TeacherBox, TeacherSet};

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.05..0.4),
        rng.random_range(0.05..0.4),
    )
    .unwrap()
}

fn random_gt(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<LabeledBox> {
    (0..n).map(|_| LabeledBox::new(random_box(rng), rng.random_range(0..classes))).collect()
}

fn random_teacher(rng: &mut ChaCha8Rng, id: &str, n: usize, classes: usize) -> TeacherSet {
    let boxes = (0..n)
        .map(|_| TeacherBox::new(random_box(rng), rng.random_range(0..classes), rng.random_range(0.05..1.0)).unwrap())
        .collect();
    TeacherSet::new(id, boxes)
}

fn random_grid(rng: &mut ChaCha8Rng, dims: &ModelDims) -> SceneGrid {
    let mut g = SceneGrid::zeros(dims.classes, dims.grid_height, dims.grid_width);
    for v in &mut g.values {
        *v = rng.random_range(0.0..1.0);
    }
    g
}

fn random_preds(rng: &mut ChaCha8Rng, queries: usize, classes: usize) -> Predictions {
    let raw = (0..queries * (4 + classes)).map(|_| rng.random_range(-2.0..2.0)).collect();
    Predictions::from_raw(raw, queries, classes).unwrap()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let dims = ModelDims { classes: 3, grid_height: 8, grid_width: 8, hidden: 6, queries: 6 };
    let cfg = SupervisionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let h = 1e-6;
    for _ in 0..20 {
        let params = ModelParams::init(dims, &mut rng).unwrap();
        let grid = random_grid(&mut rng, &dims);
        let n_gt = rng.random_range(1..=3);
        let gt = random_gt(&mut rng, n_gt, 3);
        let teachers: Vec<TeacherSet> = (0..2)
            .map(|k| {
                let m = rng.random_range(0..=4);
                random_teacher(&mut rng, &format!("t{k}"), m, 3)
            })
            .collect();
        let step = scene_step(&params, &grid, &gt, &teachers, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..params.values().len() {
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let lp = scene_loss_fixed(&plus, &grid, &gt, &teachers, &step.assignments, &cfg).unwrap();
            let lm = scene_loss_fixed(&minus, &grid, &gt, &teachers, &step.assignments, &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = step.grads.values[i];
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}

#[test]
fn raw_output_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = SupervisionConfig::default();
    let h = 1e-6;
    for _ in 0..50 {
        let n = rng.random_range(3..=10);
        let preds = random_preds(&mut rng, n, 3);
        let (n_gt, n_t) = (rng.random_range(0..=n.min(3)), rng.random_range(0..=n.min(4)));
        let gt = random_gt(&mut rng, n_gt, 3);
        let teachers = vec![random_teacher(&mut rng, "a", n_t, 3)];
        let assignments = match_all(&preds, &gt, &teachers, &cfg).unwrap();
        let loss = compute_loss(&preds, &gt, &teachers, &assignments, &cfg).unwrap();
        for i in 0..preds.raw().len() {
            let at = |d: f64| {
                let mut raw = preds.raw().to_vec();
                raw[i] += d;
                let p = Predictions::from_raw(raw, n, 3).unwrap();
                compute_loss(&p, &gt, &teachers, &assignments, &cfg).unwrap().total
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let g = loss.grads[i];
            assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-3), "raw {i}: {g} vs {fd}");
        }
    }
}

#[test]
fn teacher_box_contribution_is_linear_in_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = SupervisionConfig::default();
    for _ in 0..50 {
        let preds = random_preds(&mut rng, 8, 3);
        let gt = random_gt(&mut rng, 2, 3);
        let teacher = random_teacher(&mut rng, "t", 3, 3);
        let assignments = match_all(&preds, &gt, std::slice::from_ref(&teacher), &cfg).unwrap();
        let total_with = |s: f64| {
            let mut t = teacher.clone();
            t.boxes[0] = t.boxes[0].with_score(s).unwrap();
            let branches = build_branches(&gt, &[t], &cfg).unwrap();
            assert_eq!(branches[1].target_weights[0], s);
            branch_loss(&preds, &branches, &assignments, &cfg).unwrap().total
        };
        let without = {
            let mut branches = build_branches(&gt, std::slice::from_ref(&teacher), &cfg).unwrap();
            branches[1].target_weights[0] = 0.0;
            branch_loss(&preds, &branches, &assignments, &cfg).unwrap().total
        };
        let c3 = total_with(0.3) - without;
        let c6 = total_with(0.6) - without;
        assert!(c3 > 0.0);
        assert!((c6 - 2.0 * c3).abs() <= 1e-12 * c6.abs().max(1.0), "{c3} {c6}");
    }
}

#[test]
fn negative_teacher_queries_weigh_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let cfg = SupervisionConfig::default();
    assert_eq!(cfg.negative_score, 0.5);
    let preds = random_preds(&mut rng, 6, 3);
    let empty = TeacherSet::new("t", vec![]);
    let assignments = match_all(&preds, &[], std::slice::from_ref(&empty), &cfg).unwrap();
    let loss = compute_loss(&preds, &[], &[empty], &assignments, &cfg).unwrap();
    // with no targets anywhere the teacher branch is exactly half the GT branch
    assert_eq!(loss.branches[1].cls_loss, 0.5 * loss.branches[0].cls_loss);
    assert!(loss.branches[0].cls_loss > 0.0);
}

#[test]
fn zero_teachers_parallel_equals_gt_only_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let dims = ModelDims { classes: 3, grid_height: 8, grid_width: 8, hidden: 16, queries: 10 };
    for _ in 0..20 {
        let params = ModelParams::init(dims, &mut rng).unwrap();
        let grid = random_grid(&mut rng, &dims);
        let gt = random_gt(&mut rng, 3, 3);
        let parallel = SupervisionConfig::default();
        let gt_only = SupervisionConfig { mode: SupervisionMode::GtOnly, ..Default::default() };
        let a = scene_step(&params, &grid, &gt, &[], &parallel).unwrap();
        let b = scene_step(&params, &grid, &gt, &[], &gt_only).unwrap();
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        assert_eq!(a.loss.grads, b.loss.grads);
        assert_eq!(a.grads, b.grads);
    }
}

#[test]
fn teacher_order_does_not_change_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let cfg = SupervisionConfig::default();
    for _ in 0..20 {
        let preds = random_preds(&mut rng, 10, 3);
        let gt = random_gt(&mut rng, 2, 3);
        let t = vec![random_teacher(&mut rng, "a", 3, 3), random_teacher(&mut rng, "b", 4, 3)];
        let rev: Vec<TeacherSet> = t.iter().rev().cloned().collect();
        let la = compute_loss(&preds, &gt, &t, &match_all(&preds, &gt, &t, &cfg).unwrap(), &cfg).unwrap();
        let lb = compute_loss(&preds, &gt, &rev, &match_all(&preds, &gt, &rev, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(la.branches[1], lb.branches[2]);
        assert_eq!(la.branches[2], lb.branches[1]);
        assert!((la.total - lb.total).abs() <= 1e-12 * la.total.abs());
    }
}

#[test]
fn concat_is_a_single_unit_weight_branch() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let cfg = SupervisionConfig { mode: SupervisionMode::Concat, ..Default::default() };
    let preds = random_preds(&mut rng, 10, 3);
    let gt = random_gt(&mut rng, 2, 3);
    let t = vec![random_teacher(&mut rng, "a", 3, 3)];
    let branches = build_branches(&gt, &t, &cfg).unwrap();
    assert_eq!(branches.len(), 1);
    assert_eq!(branches[0].targets.len(), 5);
    assert!(branches[0].target_weights.iter().all(|&w| w == 1.0));
    assert_eq!(match_branches(&preds, &branches, &cfg.cost_weights).unwrap().len(), 1);
    let too_many = vec![random_teacher(&mut rng, "a", 9, 3)];
    assert!(match_all(&preds, &gt, &too_many, &cfg).is_err());
}
