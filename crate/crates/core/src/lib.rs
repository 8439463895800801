//! Backward-compatible embedding training and hot-refresh upgrade simulation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod backfill;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod extended;
pub mod features_io;
pub mod losses;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod scalar;

pub use backfill::{
    BackfillPlan, BaselineMode, MixedGallery, Provenance, TrajectoryPoint, UncertaintyStrategy, UpgradeScenario,
};
pub use data::{AllocationType, DataAllocation, Dataset, EvalSplit, SyntheticSpec};
pub use embedding::{ClassLabel, FeatureVector, Matrix, SampleId};
pub use encoder::{Activation, ClassifierParams, EncoderDescriptor, EncoderParams, ModelPair};
pub use error::{Error, Result};
pub use losses::{LossConfig, LossVariant, TripletSign};
pub use optim::TrainConfig;
pub use retrieval::{EvalReport, FlipAnalysis, Gallery, RankedList};
pub use scalar::Scalar;

/// Default working precision.
pub type Real = f64;

pub type FeatureVector32 = FeatureVector<f32>;
pub type FeatureVector64 = FeatureVector<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type EncoderParams32 = EncoderParams<f32>;
pub type EncoderParams64 = EncoderParams<f64>;
pub type ModelPair32 = ModelPair<f32>;
pub type ModelPair64 = ModelPair<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
