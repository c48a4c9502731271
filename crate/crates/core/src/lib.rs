pub mod checkpoint;
pub mod dataset;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod modality;
pub mod numerics;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use modality::Modality;
