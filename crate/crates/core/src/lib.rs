//! Graph contrastive learning where the second view is produced by learnable
//! noise: a per-edge Bernoulli drop field sampled with a straight-through
//! Gumbel-Softmax, and additive Gaussian attribute noise drawn through the
//! reparameterisation trick.
//!
//! The crate is self-contained: a small reverse-mode [`autodiff`] tape, a
//! two-layer GCN [`encoder`], the two [`noise`] generators, contrastive and
//! entropy [`losses`], the joint [`training`] loop, and linear-probe
//! [`evaluation`].

pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod graph;
pub mod losses;
pub mod noise;
pub mod optim;
pub mod params;
pub mod training;

pub use autodiff::{Tape, Tensor, Var};
pub use encoder::{EncoderDims, EncoderParams};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, ProbeConfig};
pub use graph::{
    generate_sbm, load_graph, save_graph, Graph, NormalizedAdjacency, SbmParams, SplitMasks,
};
pub use losses::{LossConfig, NegativesMode};
pub use noise::{AttrGenParams, EdgeGenParams, NoiseSample};
pub use training::{AugMode, TrainConfig, TrainOutcome};
