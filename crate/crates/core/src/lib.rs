//! HiT-DVAE: a hierarchical transformer dynamical VAE for stochastic 3D human
//! motion generation, with the training objectives, autoregressive generator
//! and evaluation protocol needed to run it end to end on a synthetic corpus.

pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Fwd, Graph, ParamId, ParamStore, Tensor, Var};
pub use model::{DiagGaussian, HitDvae, LatentSequence, ModelConfig, PoseSequence};
