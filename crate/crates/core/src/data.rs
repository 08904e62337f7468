//! Synthetic scenes, dataset files and the offline teacher-box pipeline.
//!
//! Both file formats are JSON lines. Dataset lines look like
//! `{"id":"scene-000000","objects":[{"cx":..,"cy":..,"w":..,"h":..,"class":0}]}`
//! and teacher-box lines like
//! `{"scene_id":"scene-000000","teacher_id":"t0","boxes":[{"cx":..,"cy":..,"w":..,"h":..,"class":0,"score":0.9}]}`.
//! Floats are written in shortest round-trip form, so loading a saved file
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::LabeledBox;
use crate::model::{ModelDims, ModelParams, Predictions, RasterConfig};
use crate::supervision::{filter_top_scores, TeacherBox, TeacherSet};

/// Maximum center-sampling attempts before an object is placed regardless
/// of separation.
const PLACEMENT_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<LabeledBox>,
}

impl Scene {
    pub fn new(id: impl Into<String>, objects: Vec<LabeledBox>) -> Self {
        Self { id: id.into(), objects }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub num_scenes: usize,
    pub classes: usize,
    /// Inclusive object count range.
    pub object_count_range: (usize, usize),
    /// Inclusive range for both width and height.
    pub size_range: (f64, f64),
    pub min_center_separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_scenes: 500,
            classes: 3,
            object_count_range: (1, 5),
            size_range: (0.1, 0.3),
            min_center_separation: 0.15,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_count_range;
        let (smin, smax) = self.size_range;
        if self.classes == 0 {
            return Err(Error::InvalidSpec("classes must be at least 1".into()));
        }
        if lo > hi {
            return Err(Error::InvalidSpec(format!("object count range ({lo}, {hi}) is empty")));
        }
        if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
            return Err(Error::InvalidSpec(format!("size range ({smin}, {smax}) must satisfy 0 < min <= max <= 1")));
        }
        if !(self.min_center_separation >= 0.0 && self.min_center_separation.is_finite()) {
            return Err(Error::InvalidSpec("min_center_separation must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let mut rng = crate::rng_for(spec.seed);
    let (lo, hi) = spec.object_count_range;
    let (smin, smax) = spec.size_range;
    let sep2 = spec.min_center_separation * spec.min_center_separation;
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    for i in 0..spec.num_scenes {
        let count = rng.random_range(lo..=hi);
        let mut objects: Vec<LabeledBox> = Vec::with_capacity(count);
        for _ in 0..count {
            let class = rng.random_range(0..spec.classes);
            let w = rng.random_range(smin..=smax);
            let h = rng.random_range(smin..=smax);
            let mut center = (0.5, 0.5);
            for _ in 0..PLACEMENT_RETRIES {
                center = (rng.random_range(w / 2.0..=1.0 - w / 2.0), rng.random_range(h / 2.0..=1.0 - h / 2.0));
                let clear = objects.iter().all(|o| {
                    let dx = o.bbox.cx() - center.0;
                    let dy = o.bbox.cy() - center.1;
                    dx * dx + dy * dy >= sep2
                });
                if clear {
                    break;
                }
            }
            objects.push(LabeledBox::new(BBox::new(center.0, center.1, w, h)?, class));
        }
        scenes.push(Scene::new(format!("scene-{i:06}"), objects));
    }
    Ok(scenes)
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: String,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
struct TeacherBoxRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct TeacherRecord {
    scene_id: String,
    teacher_id: String,
    boxes: Vec<TeacherBoxRecord>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(out: &mut impl Write, path: &Path, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec).expect("records serialize");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads non-blank lines as `(1-based line number, parsed record)`.
fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

pub fn save_dataset(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for s in scenes {
        let rec = SceneRecord {
            id: s.id.clone(),
            objects: s
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    cx: o.bbox.cx(),
                    cy: o.bbox.cy(),
                    w: o.bbox.w(),
                    h: o.bbox.h(),
                    class: o.class,
                })
                .collect(),
        };
        write_line(&mut out, path, &rec)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Scene>> {
    let mut seen = std::collections::HashSet::new();
    read_lines::<SceneRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateSceneId { path: path.to_path_buf(), scene_id: rec.id, line });
            }
            let objects = rec
                .objects
                .iter()
                .map(|o| {
                    BBox::new(o.cx, o.cy, o.w, o.h)
                        .map(|b| LabeledBox::new(b, o.class))
                        .map_err(|e| parse_err(path, line, e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Scene::new(rec.id, objects))
        })
        .collect()
}

/// Per-query `(box, argmax class, max probability)` with scores below
/// `score_threshold` dropped and at most `max_boxes` survivors.
pub fn teacher_set_from_predictions(
    preds: &Predictions,
    teacher_id: &str,
    score_threshold: f64,
    max_boxes: usize,
) -> TeacherSet {
    let boxes = (0..preds.num_queries())
        .filter_map(|q| {
            let (class, score) = preds.top_class(q);
            if score < score_threshold || score <= 0.0 {
                return None;
            }
            TeacherBox::new(preds.bbox(q), class, score).ok()
        })
        .collect();
    filter_top_scores(&TeacherSet::new(teacher_id, boxes), max_boxes.max(1))
}

/// Teacher-box export settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportConfig {
    pub score_threshold: f64,
    pub max_boxes: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, max_boxes: 50 }
    }
}

/// Runs a teacher over every scene; one teacher set per scene, in dataset order.
pub fn predict_teacher_sets(
    params: &ModelParams,
    scenes: &[Scene],
    raster: &RasterConfig,
    export: &ExportConfig,
    teacher_id: &str,
) -> Result<Vec<(String, TeacherSet)>> {
    let dims: &ModelDims = params.dims();
    scenes
        .iter()
        .map(|s| {
            let grid = crate::model::rasterize_scene(s, dims, raster)?;
            let preds = params.forward(&grid)?;
            Ok((
                s.id.clone(),
                teacher_set_from_predictions(&preds, teacher_id, export.score_threshold, export.max_boxes),
            ))
        })
        .collect()
}

pub fn export_teacher_boxes(
    params: &ModelParams,
    scenes: &[Scene],
    raster: &RasterConfig,
    export: &ExportConfig,
    teacher_id: &str,
    path: &Path,
) -> Result<()> {
    let sets = predict_teacher_sets(params, scenes, raster, export, teacher_id)?;
    save_teacher_boxes(&sets, path)
}

pub fn save_teacher_boxes(sets: &[(String, TeacherSet)], path: &Path) -> Result<()> {
    let mut out = create(path)?;
    for (scene_id, set) in sets {
        let rec = TeacherRecord {
            scene_id: scene_id.clone(),
            teacher_id: set.teacher_id.clone(),
            boxes: set
                .boxes
                .iter()
                .map(|b| TeacherBoxRecord {
                    cx: b.bbox.cx(),
                    cy: b.bbox.cy(),
                    w: b.bbox.w(),
                    h: b.bbox.h(),
                    class: b.class,
                    score: b.score(),
                })
                .collect(),
        };
        write_line(&mut out, path, &rec)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// One teacher's boxes for a whole dataset, keyed by scene id.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBoxes {
    pub teacher_id: String,
    sets: BTreeMap<String, TeacherSet>,
}

impl TeacherBoxes {
    pub fn new(teacher_id: impl Into<String>, sets: impl IntoIterator<Item = (String, TeacherSet)>) -> Self {
        Self { teacher_id: teacher_id.into(), sets: sets.into_iter().collect() }
    }

    /// The scene's teacher set; scenes the teacher never saw get an empty set.
    pub fn for_scene(&self, scene_id: &str) -> TeacherSet {
        self.sets.get(scene_id).cloned().unwrap_or_else(|| TeacherSet::new(self.teacher_id.clone(), Vec::new()))
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TeacherSet)> {
        self.sets.iter()
    }
}

pub fn load_teacher_boxes(path: &Path) -> Result<TeacherBoxes> {
    let mut sets = BTreeMap::new();
    let mut teacher_id: Option<String> = None;
    for (line, rec) in read_lines::<TeacherRecord>(path)? {
        match &teacher_id {
            None => teacher_id = Some(rec.teacher_id.clone()),
            Some(t) if *t != rec.teacher_id => {
                return Err(parse_err(path, line, format!("teacher id `{}` differs from `{t}`", rec.teacher_id)));
            }
            Some(_) => {}
        }
        let boxes = rec
            .boxes
            .iter()
            .map(|b| {
                let bbox = BBox::new(b.cx, b.cy, b.w, b.h).map_err(|e| parse_err(path, line, e.to_string()))?;
                TeacherBox::new(bbox, b.class, b.score).map_err(|e| parse_err(path, line, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if sets.contains_key(&rec.scene_id) {
            return Err(Error::DuplicateSceneId { path: path.to_path_buf(), scene_id: rec.scene_id, line });
        }
        sets.insert(rec.scene_id, TeacherSet::new(rec.teacher_id, boxes));
    }
    let teacher_id = teacher_id.unwrap_or_else(|| {
        path.file_stem().map_or_else(|| "teacher".to_string(), |s| s.to_string_lossy().into_owned())
    });
    Ok(TeacherBoxes { teacher_id, sets })
}
