//! The synthetic RoI-feature universe: classes with shared variation modes,
//! proposal jitter, background clutter, episodes and batch recomposition.

mod batch;
mod episode;
mod world;

pub use batch::{compose_batch, Batch};
pub use episode::{build_episode, Episode, PoolSizes, SeedInstance};
pub use world::{generate_world, SyntheticWorld, WorldParams};

/// Class index or the background sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(usize),
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Real,
    Hallucinated,
}

/// One RoI feature with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub vector: Vec<f64>,
    pub label: Label,
    pub origin: Origin,
}

impl LabeledFeature {
    pub fn real(vector: Vec<f64>, label: Label) -> Self {
        Self {
            vector,
            label,
            origin: Origin::Real,
        }
    }
}
