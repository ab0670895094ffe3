//! Feature-space hallucination for few-shot detection heads.
//!
//! The crate simulates a detector's RoI-feature space with a synthetic world,
//! trains cosine or fully connected box classifiers on it, and improves the
//! few-shot regime with a hallucinator network trained in alternation with the
//! classifier. Proposals come either from a single objectness scorer or from a
//! cooperating ensemble.

pub mod corpns;
pub mod error;
pub mod hallucinator;
pub mod heads;
pub mod kv;
pub mod numerics;
pub mod pipeline;
pub mod synthworld;

pub use error::{Error, Result};
pub use kv::{KvCodec, KvDocument};
pub use numerics::{Matrix, Rng, SgdConfig};
pub use synthworld::{
    Batch, Episode, Label, LabeledFeature, Origin, PoolSizes, SyntheticWorld, WorldParams,
};
