pub mod aligner;
pub mod cli;
pub mod config;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scene::{SceneBundle, IGNORE};
pub use tensor::{Real, Tensor};
