//! Predictive multiscale spatio-temporal recurrent network (P-MSTRNN).
//!
//! Leaky-integrator feature maps and context maps stacked in layers with
//! growing time constants, trained end to end by backpropagation through
//! time to predict binary video frames two steps ahead.
//!
//! - [`tensor`]: map stacks, kernel banks, correlation and its adjoint
//! - [`config`]: topology and shape validation
//! - [`network`]: parameters, state, and the forward/backward step
//! - [`learner`]: loss, rollouts, BPTT, training epochs
//! - [`checkpoint`]: binary checkpoint files
//! - [`gradcheck`]: finite-difference verification of BPTT
//! - [`regression`]: error-regression and entrainment imitation
//! - [`analysis`]: PCA, attractor detection, attractor census
//! - [`sequence`]: frame sequences, PMV and PGM files
//! - [`movegen`]: synthetic stick-figure movement videos and PMV files

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod learner;
pub mod movegen;
pub mod network;
pub mod regression;
pub mod sequence;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{validate_config, LayerSpec, NetworkConfig, ShapePlan};
pub use error::{Error, Result};
pub use learner::{train, train_epoch, Optimizer, TrainSpec};
pub use network::{Network, NetworkState, ParamSet, Weights};
pub use sequence::FrameSequence;
pub use tensor::{Frame, KernelBank, MapStack, PadSpec, WeightBank};
