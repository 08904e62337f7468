use teach_detr::data::{generate_dataset, predict_teacher_sets, DatasetSpec, Scene, TeacherBoxes};
use teach_detr::model::RasterConfig;
use teach_detr::supervision::{SupervisionConfig, SupervisionMode};
use teach_detr::trainer::{
    rasterize_all, run_online_teachers, scene_step, train_with, AdamHyper, AdamState, TeacherSources, TrainConfig,
};
use teach_detr::{ModelDims, ModelParams};

/// One large object per scene, one class, quiet grids.
fn easy_scenes() -> Vec<Scene> {
    generate_dataset(&DatasetSpec {
        num_scenes: 12,
        classes: 1,
        object_count_range: (1, 1),
        size_range: (0.3, 0.45),
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn easy_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 1,
        eval_every: 10,
        model: ModelDims { classes: 1, grid_height: 16, grid_width: 16, hidden: 64, queries: 4 },
        raster: RasterConfig { noise_sigma: 0.01, ..Default::default() },
        supervision: SupervisionConfig { mode: SupervisionMode::GtOnly, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn baseline_fits_the_easy_fixture() {
    let scenes = easy_scenes();
    let out = train_with(&scenes, &scenes, &easy_config(), &TeacherSources::default()).unwrap();
    let ap = out.logs.last().unwrap().val_ap.unwrap();
    assert!(ap.ap > 0.9, "AP {ap:?}");
    assert_eq!(out.match_history.len(), 50);
    assert!(out.logs.iter().all(|l| l.mean_total_loss.is_finite()));
    assert!(out.logs[0].instability.is_none());
    assert!(out.logs[1..].iter().all(|l| l.instability.is_some() && l.instability_aux.is_some()));
}

#[test]
fn frozen_batch_loss_decreases_for_ten_steps() {
    let scenes = easy_scenes();
    let cfg = easy_config();
    let grids = rasterize_all(&scenes[..8], &cfg.model, &cfg.raster).unwrap();
    let mut params = ModelParams::init(cfg.model, &mut teach_detr::rng_for(1)).unwrap();
    let mut adam = AdamState::new(params.values().len());
    let hyper = AdamHyper::with_lr(cfg.learning_rate);
    let mut previous = f64::INFINITY;
    for _ in 0..10 {
        let mut grads = vec![0.0; params.values().len()];
        let mut total = 0.0;
        for (s, g) in scenes[..8].iter().zip(&grids) {
            let step = scene_step(&params, g, &s.objects, &[], &cfg.supervision).unwrap();
            total += step.loss.total;
            for (a, b) in grads.iter_mut().zip(&step.grads.values) {
                *a += b / 8.0;
            }
        }
        assert!(total < previous, "{total} after {previous}");
        previous = total;
        teach_detr::trainer::adam_step(params.values_mut(), &grads, &mut adam, &hyper).unwrap();
    }
}

#[test]
fn same_seed_reproduces_the_run() {
    let scenes = easy_scenes();
    let cfg = TrainConfig { epochs: 4, ..easy_config() };
    let a = train_with(&scenes, &scenes, &cfg, &TeacherSources::default()).unwrap();
    let b = train_with(&scenes, &scenes, &cfg, &TeacherSources::default()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.match_history, b.match_history);
    for (x, y) in a.logs.iter().zip(&b.logs) {
        assert_eq!(x.mean_total_loss.to_bits(), y.mean_total_loss.to_bits());
        assert_eq!(x.val_ap, y.val_ap);
    }
    let other = train_with(&scenes, &scenes, &TrainConfig { seed: 9, ..cfg }, &TeacherSources::default()).unwrap();
    assert_ne!(a.params, other.params);
}

#[test]
fn offline_and_online_teachers_are_equivalent() {
    let scenes = easy_scenes();
    let base = easy_config();
    let teacher =
        train_with(&scenes, &scenes, &TrainConfig { epochs: 5, seed: 3, ..base.clone() }, &TeacherSources::default())
            .unwrap()
            .params;
    let sets = predict_teacher_sets(&teacher, &scenes, &base.raster, &base.export, "online-0").unwrap();
    let grids = rasterize_all(&scenes, &base.model, &base.raster).unwrap();
    for ((id, set), grid) in sets.iter().zip(&grids) {
        let online = run_online_teachers(std::slice::from_ref(&teacher), grid, &base.export).unwrap();
        assert_eq!(&online[0], set, "scene {id}");
    }

    let student = TrainConfig {
        epochs: 3,
        supervision: SupervisionConfig { mode: SupervisionMode::Parallel, ..Default::default() },
        ..base
    };
    let offline = TeacherSources { offline: vec![TeacherBoxes::new("online-0", sets)], online: vec![] };
    let online = TeacherSources { offline: vec![], online: vec![teacher] };
    let a = train_with(&scenes, &scenes, &student, &offline).unwrap();
    let b = train_with(&scenes, &scenes, &student, &online).unwrap();
    for (x, y) in a.logs.iter().zip(&b.logs) {
        assert_eq!(x.mean_total_loss.to_bits(), y.mean_total_loss.to_bits());
        assert_eq!(x.branch_losses, y.branch_losses);
    }
    assert_eq!(a.params, b.params);
}

#[test]
fn empty_online_teacher_list_is_ground_truth_only() {
    let scenes = easy_scenes();
    let cfg = TrainConfig { epochs: 2, ..easy_config() };
    let parallel = TrainConfig {
        supervision: SupervisionConfig { mode: SupervisionMode::Parallel, ..Default::default() },
        ..cfg.clone()
    };
    let a = train_with(&scenes, &scenes, &cfg, &TeacherSources::default()).unwrap();
    let b = train_with(&scenes, &scenes, &parallel, &TeacherSources::default()).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn mean_teacher_adds_its_own_branch() {
    let scenes = easy_scenes();
    let cfg = TrainConfig {
        epochs: 3,
        teacher_mode: teach_detr::trainer::TeacherMode::MeanTeacher { momentum: 0.9 },
        supervision: SupervisionConfig { mode: SupervisionMode::Parallel, ..Default::default() },
        ..easy_config()
    };
    let out = train_with(&scenes, &scenes, &cfg, &TeacherSources::default()).unwrap();
    assert!(out.logs.iter().all(|l| l.branch_losses.iter().any(|(id, _)| id == "mean-teacher")));
}
