//! Multimodal encoder–fusion–decoder networks that jointly predict steering
//! angle and speed, together with the data generation, preprocessing,
//! training, ensembling, path reconstruction and evaluation around them.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod model_zoo;
pub mod plot;
pub mod preprocess;
pub mod series;
pub mod tensor;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
