//! EEG gaze prediction with a depthwise-separable vision transformer.

pub mod analysis;
pub mod dataio;
pub mod dataset;
pub mod error;
pub mod model;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use dataset::{Dataset, GazeLabel};
pub use error::{DataError, Error, Result};
pub use tensor::{Conv2dSpec, Graph, Tensor, Var};
