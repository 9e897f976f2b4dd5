pub mod backbone;
pub mod error;
pub mod evalmetrics;
pub mod gcp;
pub mod gradsuite;
pub mod loss;
pub mod milhead;
pub mod model;
pub mod phantom;
pub mod preprocess;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
