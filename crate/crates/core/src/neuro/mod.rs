//! Reverse-mode autodiff, parameters and the graph network.

pub mod checkpoint;
pub mod dynamics;
pub mod gradcheck;
pub mod net;
pub mod params;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use dynamics::OdeParams;
pub use net::{GraphBatch, LgtcNet, NetShape};
pub use params::{Activation, Bound, Mlp, ParamId, ParamSet};
pub use tape::{Gradients, Mat, Tape, Var};
