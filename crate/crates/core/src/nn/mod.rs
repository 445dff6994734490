pub mod model;
pub mod norm;

pub use model::{build_model, Bound, Mode, Model, ModelConfig, NormKind, Param, ParamId, ParamStore, StatUpdate};
