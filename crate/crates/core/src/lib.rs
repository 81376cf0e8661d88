pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod feature_agg;
pub mod flow_field;
pub mod model;
pub mod renderer;
pub mod scalar;
pub mod scene_synth;
pub mod semantic_heads;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Array = diffcore::NdArray<f32>;
pub type Params = diffcore::ParamBlock<f32>;
pub type Model = model::SemanticFlowModel<f32>;
/// Double precision, used by gradient checks.
pub type Array64 = diffcore::NdArray<f64>;
pub type Params64 = diffcore::ParamBlock<f64>;
pub type Model64 = model::SemanticFlowModel<f64>;
