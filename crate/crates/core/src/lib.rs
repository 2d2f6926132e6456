//! Dropout ensembles, uncertainty decomposition and uncertainty-aware adversarial training.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use autodiff::{Gradients, Graph, Var};
pub use data::{Dataset, Split};
pub use ensemble::{Ensemble, PredictMode, PredictiveSampleSet};
pub use error::{Error, Result};
pub use nn::{DropoutMask, LayerSpec, MaskMode, Member};
pub use tensor::{Real, Tensor};
pub use uncertainty::UncertaintyReport;
