//! Detection transformers trained with auxiliary teacher boxes: every
//! teacher gets its own one-to-one matching against the student's queries,
//! and its losses are weighted by the teacher's confidence.

pub mod ablation;
pub mod data;
pub mod error;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{giou, iou, BBox};
pub use matching::{build_cost_matrix, hungarian, Assignment, CostMatrix, CostWeights, LabeledBox, NO_OBJECT};
pub use model::{ModelDims, ModelParams, Predictions, RasterConfig};
pub use supervision::{SupervisionConfig, SupervisionMode, TeacherBox, TeacherSet};

/// The RNG used everywhere a seed appears.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_for(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
