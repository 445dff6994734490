pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pretext;
pub mod task;
pub mod train;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use task::Task;
pub use tensor::{LabelTensor, Tensor};
