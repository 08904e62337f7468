//! The query-based toy detector: a rasterized scene grid fed through two
//! affine layers with a positive-part nonlinearity, emitting `N` query
//! slots of `4 + C` raw outputs each.
//!
//! Raw output layout per query: four box parameters followed by `C` class
//! logits. Boxes are the elementwise sigmoid of the box parameters,
//! class probabilities the sigmoid of the logits.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Smallest width/height a decoded box may take when a logit saturates.
const MIN_EXTENT: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub classes: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub hidden: usize,
    pub queries: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { classes: 3, grid_height: 16, grid_width: 16, hidden: 256, queries: 20 }
    }
}

impl ModelDims {
    pub fn input_len(&self) -> usize {
        self.classes * self.grid_height * self.grid_width
    }

    pub fn query_len(&self) -> usize {
        4 + self.classes
    }

    pub fn output_len(&self) -> usize {
        self.queries * self.query_len()
    }

    pub fn param_count(&self) -> usize {
        let (i, h, o) = (self.input_len(), self.hidden, self.output_len());
        h * i + h + o * h + o
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.grid_height == 0 || self.grid_width == 0 || self.hidden == 0 || self.queries == 0 {
            return Err(Error::InvalidConfig(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Rasterization settings shared by every consumer of scene grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    /// Blob standard deviation as a fraction of the object's extent.
    pub blob_scale: f64,
    pub noise_sigma: f64,
    /// Seeds the per-scene pixel noise, so a scene always rasterizes to the
    /// same grid.
    pub noise_seed: u64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { blob_scale: 0.25, noise_sigma: 0.05, noise_seed: 17 }
    }
}

/// `C x H x W` intensity grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SceneGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Renders each object as an axis-aligned Gaussian blob in its class
/// channel, then adds clipped Gaussian pixel noise.
pub fn rasterize<R: Rng + ?Sized>(
    scene: &Scene,
    dims: &ModelDims,
    cfg: &RasterConfig,
    rng: &mut R,
) -> Result<SceneGrid> {
    let (h, w) = (dims.grid_height, dims.grid_width);
    let mut grid = SceneGrid::zeros(dims.classes, h, w);
    for obj in &scene.objects {
        if obj.class >= dims.classes {
            return Err(Error::InvalidClass { class: obj.class, num_classes: dims.classes });
        }
        let b = obj.bbox;
        let sx = cfg.blob_scale * b.w();
        let sy = cfg.blob_scale * b.h();
        let plane = &mut grid.values[obj.class * h * w..(obj.class + 1) * h * w];
        for y in 0..h {
            let py = (y as f64 + 0.5) / h as f64;
            let ey = (py - b.cy()) * (py - b.cy()) / (2.0 * sy * sy);
            for x in 0..w {
                let px = (x as f64 + 0.5) / w as f64;
                let ex = (px - b.cx()) * (px - b.cx()) / (2.0 * sx * sx);
                plane[y * w + x] += (-(ex + ey)).exp();
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal =
            Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
        for v in &mut grid.values {
            *v = (*v + normal.sample(rng)).max(0.0);
        }
    }
    Ok(grid)
}

/// Deterministic rasterization: the noise stream is keyed on the raster
/// seed and the scene id.
pub fn rasterize_scene(scene: &Scene, dims: &ModelDims, cfg: &RasterConfig) -> Result<SceneGrid> {
    let mut rng = crate::rng_for(cfg.noise_seed ^ fnv1a(scene.id.as_bytes()));
    rasterize(scene, dims, cfg, &mut rng)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Decoded network outputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    queries: usize,
    classes: usize,
    raw: Vec<f64>,
    boxes: Vec<BBox>,
    probs: Vec<f64>,
}

impl Predictions {
    pub fn from_raw(raw: Vec<f64>, queries: usize, classes: usize) -> Result<Self> {
        let stride = 4 + classes;
        if raw.len() != queries * stride {
            return Err(Error::ShapeMismatch { expected: queries * stride, actual: raw.len() });
        }
        let mut boxes = Vec::with_capacity(queries);
        let mut probs = Vec::with_capacity(queries * classes);
        for q in raw.chunks_exact(stride) {
            let cx = sigmoid(q[0]);
            let cy = sigmoid(q[1]);
            let w = sigmoid(q[2]).max(MIN_EXTENT);
            let h = sigmoid(q[3]).max(MIN_EXTENT);
            boxes.push(BBox::new(cx, cy, w, h)?);
            probs.extend(q[4..].iter().map(|&l| sigmoid(l)));
        }
        Ok(Self { queries, classes, raw, boxes, probs })
    }

    pub fn num_queries(&self) -> usize {
        self.queries
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn raw_box(&self, query: usize) -> &[f64] {
        let s = 4 + self.classes;
        &self.raw[query * s..query * s + 4]
    }

    pub fn logits(&self, query: usize) -> &[f64] {
        let s = 4 + self.classes;
        &self.raw[query * s + 4..(query + 1) * s]
    }

    pub fn bbox(&self, query: usize) -> BBox {
        self.boxes[query]
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn prob(&self, query: usize, class: usize) -> f64 {
        self.probs[query * self.classes + class]
    }

    pub fn probs(&self, query: usize) -> &[f64] {
        &self.probs[query * self.classes..(query + 1) * self.classes]
    }

    /// `(argmax class, max probability)` for a query; ties go to the lower class.
    pub fn top_class(&self, query: usize) -> (usize, f64) {
        self.probs(query).iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |best, (c, p)| {
            if p > best.1 {
                (c, p)
            } else {
                best
            }
        })
    }
}

/// Flat parameter vector laid out as `[w1 | b1 | w2 | b2]`, weights row-major
/// by output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    values: Vec<f64>,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self { values: vec![0.0; dims.param_count()] }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.values {
            *a *= k;
        }
    }
}

struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
}

impl ModelDims {
    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.input_len(), self.hidden, self.output_len());
        let b1 = h * i;
        let w2 = b1 + h;
        let b2 = w2 + o * h;
        Offsets { b1, w2, b2 }
    }
}

/// Hidden-layer state kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self { values: vec![0.0; dims.param_count()], dims }
    }

    pub fn from_values(dims: ModelDims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.param_count() {
            return Err(Error::ShapeMismatch { expected: dims.param_count(), actual: values.len() });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer1_bias(&self) -> &[f64] {
        let o = self.dims.offsets();
        &self.values[o.b1..o.w2]
    }

    pub fn layer2_bias(&self) -> &[f64] {
        &self.values[self.dims.offsets().b2..]
    }

    fn check_grid(&self, grid: &SceneGrid) -> Result<()> {
        if grid.values.len() != self.dims.input_len() {
            return Err(Error::ShapeMismatch { expected: self.dims.input_len(), actual: grid.values.len() });
        }
        Ok(())
    }

    pub fn forward_with_cache(&self, grid: &SceneGrid) -> Result<(Predictions, ForwardCache)> {
        self.check_grid(grid)?;
        let d = &self.dims;
        let (n_in, n_hidden, n_out) = (d.input_len(), d.hidden, d.output_len());
        let off = d.offsets();
        let w1 = &self.values[..off.b1];
        let b1 = &self.values[off.b1..off.w2];
        let w2 = &self.values[off.w2..off.b2];
        let b2 = &self.values[off.b2..];

        let x = &grid.values;
        let pre: Vec<f64> = (0..n_hidden).map(|j| b1[j] + dot(&w1[j * n_in..(j + 1) * n_in], x)).collect();
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let raw: Vec<f64> = (0..n_out).map(|k| b2[k] + dot(&w2[k * n_hidden..(k + 1) * n_hidden], &hidden)).collect();
        let preds = Predictions::from_raw(raw, d.queries, d.classes)?;
        Ok((preds, ForwardCache { pre, hidden }))
    }

    pub fn forward(&self, grid: &SceneGrid) -> Result<Predictions> {
        self.forward_with_cache(grid).map(|(p, _)| p)
    }

    /// Accumulates parameter gradients for upstream gradient `grad_raw`
    /// (same layout as the raw outputs) into `grads`.
    pub fn backward_into(
        &self,
        grid: &SceneGrid,
        cache: &ForwardCache,
        grad_raw: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<()> {
        self.check_grid(grid)?;
        let d = &self.dims;
        let (n_in, n_hidden, n_out) = (d.input_len(), d.hidden, d.output_len());
        if grad_raw.len() != n_out {
            return Err(Error::ShapeMismatch { expected: n_out, actual: grad_raw.len() });
        }
        if grads.values.len() != self.values.len() {
            return Err(Error::ShapeMismatch { expected: self.values.len(), actual: grads.values.len() });
        }
        let off = d.offsets();
        let w2 = &self.values[off.w2..off.b2];
        let (g_w1, rest) = grads.values.split_at_mut(off.b1);
        let (g_b1, rest) = rest.split_at_mut(n_hidden);
        let (g_w2, g_b2) = rest.split_at_mut(n_out * n_hidden);

        let mut g_hidden = vec![0.0; n_hidden];
        for k in 0..n_out {
            let g = grad_raw[k];
            if g == 0.0 {
                continue;
            }
            g_b2[k] += g;
            let row = &mut g_w2[k * n_hidden..(k + 1) * n_hidden];
            axpy(row, g, &cache.hidden);
            axpy(&mut g_hidden, g, &w2[k * n_hidden..(k + 1) * n_hidden]);
        }
        let x = &grid.values;
        for j in 0..n_hidden {
            // positive-part subgradient is 0 at the kink
            if cache.pre[j] <= 0.0 || g_hidden[j] == 0.0 {
                continue;
            }
            let g = g_hidden[j];
            g_b1[j] += g;
            axpy(&mut g_w1[j * n_in..(j + 1) * n_in], g, x);
        }
        Ok(())
    }

    /// Exact reverse-mode gradients for upstream gradient `grad_raw`.
    pub fn backward(&self, grid: &SceneGrid, grad_raw: &[f64]) -> Result<ParamGrads> {
        let (_, cache) = self.forward_with_cache(grid)?;
        let mut grads = ParamGrads::zeros(&self.dims);
        self.backward_into(grid, &cache, grad_raw, &mut grads)?;
        Ok(grads)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let (n_in, n_hidden, n_out) = (dims.input_len(), dims.hidden, dims.output_len());
        let off = dims.offsets();
        fill_glorot(&mut p.values[..off.b1], n_in, n_hidden, rng);
        fill_glorot(&mut p.values[off.w2..off.b2], n_hidden, n_out, rng);
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })
    }

    /// Checkpoint encoding: magic, version, five `u32` dims, `u64` count,
    /// then little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [d.classes, d.grid_height, d.grid_width, d.hidden, d.queries] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dims = ModelDims {
            classes: u32_at(12) as usize,
            grid_height: u32_at(16) as usize,
            grid_width: u32_at(20) as usize,
            hidden: u32_at(24) as usize,
            queries: u32_at(28) as usize,
        };
        dims.validate().map_err(|e| e.to_string())?;
        let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        if count != dims.param_count() {
            return Err(format!("parameter count {count} does not match dims ({})", dims.param_count()));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() != 8 * count {
            return Err(format!("expected {} payload bytes, found {}", 8 * count, body.len()));
        }
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { dims, values })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDETRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 5 * 4 + 8;

fn fill_glorot<R: Rng + ?Sized>(w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
    for v in w {
        *v = dist.sample(rng);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Scene;
    use crate::matching::LabeledBox;

    fn tiny() -> ModelDims {
        ModelDims { classes: 2, grid_height: 4, grid_width: 4, hidden: 5, queries: 3 }
    }

    fn scene(objects: Vec<(f64, f64, f64, f64, usize)>) -> Scene {
        Scene {
            id: "s".into(),
            objects: objects
                .into_iter()
                .map(|(cx, cy, w, h, c)| LabeledBox::new(BBox::new(cx, cy, w, h).unwrap(), c))
                .collect(),
        }
    }

    #[test]
    fn empty_scene_without_noise_is_zero() {
        let cfg = RasterConfig { noise_sigma: 0.0, ..Default::default() };
        let g = rasterize_scene(&scene(vec![]), &ModelDims::default(), &cfg).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_object_peaks_in_the_middle() {
        let dims = ModelDims { grid_height: 15, grid_width: 15, ..ModelDims::default() };
        let cfg = RasterConfig { noise_sigma: 0.0, ..Default::default() };
        let g = rasterize_scene(&scene(vec![(0.5, 0.5, 0.3, 0.3, 1)]), &dims, &cfg).unwrap();
        let mut best = (0, 0, f64::MIN);
        for y in 0..15 {
            for x in 0..15 {
                if g.at(1, y, x) > best.2 {
                    best = (y, x, g.at(1, y, x));
                }
            }
        }
        assert_eq!((best.0, best.1), (7, 7));
        assert!((0..15 * 15).all(|i| g.values[i] == 0.0), "class 0 channel must stay empty");
    }

    #[test]
    fn rasterization_is_additive() {
        let dims = ModelDims::default();
        let cfg = RasterConfig { noise_sigma: 0.0, ..Default::default() };
        let a = (0.3, 0.4, 0.2, 0.1, 0);
        let b = (0.6, 0.7, 0.15, 0.3, 0);
        let ga = rasterize_scene(&scene(vec![a]), &dims, &cfg).unwrap();
        let gb = rasterize_scene(&scene(vec![b]), &dims, &cfg).unwrap();
        let gab = rasterize_scene(&scene(vec![a, b]), &dims, &cfg).unwrap();
        for i in 0..gab.values.len() {
            assert!((gab.values[i] - ga.values[i] - gb.values[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn noisy_rasterization_is_repeatable_and_nonnegative() {
        let dims = ModelDims::default();
        let cfg = RasterConfig::default();
        let s = scene(vec![(0.3, 0.4, 0.2, 0.1, 2)]);
        let g1 = rasterize_scene(&s, &dims, &cfg).unwrap();
        let g2 = rasterize_scene(&s, &dims, &cfg).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_model_predicts_half_everywhere() {
        let dims = tiny();
        let p = ModelParams::zeros(dims);
        let grid = SceneGrid { channels: 2, height: 4, width: 4, values: vec![0.3; 32] };
        let preds = p.forward(&grid).unwrap();
        assert!(preds.raw().iter().all(|&r| r == 0.0));
        for q in 0..3 {
            assert_eq!(preds.bbox(q).to_array(), [0.5; 4]);
            assert!(preds.probs(q).iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let dims = tiny();
        let p = ModelParams::init(dims, &mut crate::rng_for(3)).unwrap();
        let grid = SceneGrid { channels: 2, height: 4, width: 4, values: (0..32).map(|i| i as f64 / 32.0).collect() };
        let a = p.forward(&grid).unwrap();
        let b = p.forward(&grid).unwrap();
        assert_eq!(a, b);
        assert!(a.raw().iter().all(|r| r.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let p = ModelParams::zeros(tiny());
        let bad = SceneGrid::zeros(1, 4, 4);
        assert!(matches!(p.forward(&bad), Err(Error::ShapeMismatch { .. })));
        let grid = SceneGrid::zeros(2, 4, 4);
        assert!(matches!(p.backward(&grid, &[0.0; 3]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_is_linear_and_zero_for_zero_upstream() {
        let dims = tiny();
        let p = ModelParams::init(dims, &mut crate::rng_for(5)).unwrap();
        let grid =
            SceneGrid { channels: 2, height: 4, width: 4, values: (0..32).map(|i| (i % 7) as f64 / 7.0).collect() };
        let zero = p.backward(&grid, &vec![0.0; dims.output_len()]).unwrap();
        assert!(zero.values.iter().all(|&g| g == 0.0));
        let g: Vec<f64> = (0..dims.output_len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let a = p.backward(&grid, &g).unwrap();
        let b = p.backward(&grid, &g2).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let dims = ModelDims::default();
        let a = ModelParams::init(dims, &mut crate::rng_for(11)).unwrap();
        let b = ModelParams::init(dims, &mut crate::rng_for(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.layer1_bias().iter().all(|&v| v == 0.0));
        assert!(a.layer2_bias().iter().all(|&v| v == 0.0));

        let w1 = &a.values()[..dims.hidden * dims.input_len()];
        let mean = w1.iter().sum::<f64>() / w1.len() as f64;
        let var = w1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w1.len() as f64;
        let expected = 2.0 / (dims.input_len() + dims.hidden) as f64;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let p = ModelParams::init(tiny(), &mut crate::rng_for(1)).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::from_bytes(&bad).is_err());
        let mut wrong_version = bytes;
        wrong_version[8] = 9;
        assert!(ModelParams::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn top_class_prefers_lower_index_on_ties() {
        let preds = Predictions::from_raw(vec![0.0; 7], 1, 3).unwrap();
        assert_eq!(preds.top_class(0), (0, 0.5));
    }
}
