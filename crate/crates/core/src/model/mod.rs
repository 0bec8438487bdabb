//! Analysis/synthesis transforms and their parameters.

pub mod conv;
pub mod gdn;
pub mod params;
pub mod transforms;

pub use gdn::{gdn1_forward, igdn1_forward, Gdn1Params};
pub use params::{ModelConfig, ParamArray, ParamSet, ParameterStore};
pub use transforms::{analysis_forward, reconstruct, synthesis_forward};
