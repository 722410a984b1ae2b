//! Multimodal genre classification of movie trailers from precomputed
//! per-frame feature sequences.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod experiments;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Graph, Var};
pub use model::classifier::{GenreClassifier, Prediction};
pub use model::config::{Architecture, Modality, ModalitySpec, ModelConfig};
pub use model::genres::{GenreSet, GENRES, NUM_GENRES};
pub use rng::SeededRng;
pub use tensor::{Float, Tensor};
