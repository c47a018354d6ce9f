//! Transformation-based recurrent video prediction GAN at desk scale.

pub mod bundle;
pub mod data;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod warp;
pub mod params;
pub mod rnn;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{derive_seed, Cx, Group, Init, Kind, Mode, ParamId, Params};
