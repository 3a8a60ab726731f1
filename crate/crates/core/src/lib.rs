//! Risk-aware spatio-temporal interaction graphs for egocentric traffic
//! scenes: graph construction over road agents, a graph convolutional
//! Stop/Go classifier, and risk-object ranking by node masking.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod geometry;
pub mod graph;
pub mod par;
pub mod risk;
pub mod scenario;
pub mod stgcn;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PixelObservation, Point3};
pub use graph::{AdjacencyTensor, EdgeConfig, EdgeParams, NodeSet};
pub use scenario::{AgentId, Scenario};
pub use stgcn::{ModelConfig, ModelParams};
