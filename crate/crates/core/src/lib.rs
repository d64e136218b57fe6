pub mod adapt;
pub mod datagen;
pub mod describe;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod track;

pub use error::{ForgeError, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
