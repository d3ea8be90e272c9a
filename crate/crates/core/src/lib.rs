pub mod align;
pub mod em;
pub mod error;
pub mod experiment;
pub mod factorization;
pub mod model;
pub mod regression;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Dataset, FeatureMap, MixParams, NoiseSpec};
pub use tensor::{CollapsedVec, CountProfile, SymTensor, Tensor, Unfolding};
