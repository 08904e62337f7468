use teach_detr::data::{
    generate_dataset, load_dataset, load_teacher_boxes, save_dataset, save_teacher_boxes, DatasetSpec,
};
use teach_detr::{BBox, Error, ModelDims, ModelParams, TeacherBox, TeacherSet};

#[test]
fn dataset_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenes.jsonl");
    let scenes = generate_dataset(&DatasetSpec { num_scenes: 30, seed: 4, ..Default::default() }).unwrap();
    save_dataset(&scenes, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), scenes);
    let first = std::fs::read(&path).unwrap();
    save_dataset(&load_dataset(&path).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn teacher_boxes_round_trip_and_reject_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let b = TeacherBox::new(BBox::new(0.4, 0.5, 0.2, 0.1).unwrap(), 2, 0.625).unwrap();
    let sets =
        vec![("s0".to_string(), TeacherSet::new("t", vec![b])), ("s1".to_string(), TeacherSet::new("t", vec![]))];
    save_teacher_boxes(&sets, &path).unwrap();
    let loaded = load_teacher_boxes(&path).unwrap();
    assert_eq!(loaded.teacher_id, "t");
    assert_eq!(loaded.for_scene("s0"), sets[0].1);
    assert!(loaded.for_scene("unknown").boxes.is_empty());

    let line =
        r#"{"scene_id":"s0","teacher_id":"t","boxes":[{"cx":0.5,"cy":0.5,"w":0.1,"h":0.1,"class":0,"score":1.5}]}"#;
    std::fs::write(&path, format!("\n{line}\n")).unwrap();
    assert!(matches!(load_teacher_boxes(&path), Err(Error::Parse { line: 2, .. })));
    let ok = r#"{"scene_id":"s0","teacher_id":"t","boxes":[]}"#;
    std::fs::write(&path, format!("{ok}\n{ok}\n")).unwrap();
    assert!(matches!(load_teacher_boxes(&path), Err(Error::DuplicateSceneId { line: 2, .. })));
    std::fs::write(&path, "not json\n").unwrap();
    assert!(matches!(load_teacher_boxes(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let dims = ModelDims { classes: 2, grid_height: 4, grid_width: 4, hidden: 5, queries: 3 };
    let params = ModelParams::init(dims, &mut teach_detr::rng_for(8)).unwrap();
    params.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), params);
    assert_eq!(&std::fs::read(&path).unwrap()[..8], b"TDETRCKP");
    assert!(ModelParams::load(&dir.path().join("missing")).is_err());
}
