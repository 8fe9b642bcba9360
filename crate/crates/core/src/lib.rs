//! Multi-scale multiple-instance classification of whole-slide images with a
//! nucleus-graph geometry branch.
//!
//! The pipeline runs from per-nucleus features ([`nucfeat`]) to per-patch
//! cell graphs ([`cellgraph`]), through the scale-fusion and
//! geometry-guided attention models ([`model`]), to training, evaluation and
//! heatmap export ([`train`]). [`synth`] produces cohorts with planted class
//! signals, and all differentiation goes through the reverse-mode tape in
//! [`tensor`].

pub mod cellgraph;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nucfeat;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cellgraph::{CellGraph, GraphInputs};
pub use error::{Error, Result};
pub use model::{AblationFlags, ModelConfig, ParamStore, Prediction, SlideInput};
pub use nucfeat::{FeatureConfig, GrayTile, Nucleus, NucleusClass};
pub use synth::{Cohort, CohortManifest, CohortSpec, PatchRecord, SlideRecord};
pub use tensor::{Graph, Tensor, Var};
pub use train::{AdamWSettings, EvalReport, Metrics, PrepConfig, PreparedSlide, TrainConfig};
