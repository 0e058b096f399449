//! Prior-guided point cloud geometry codec.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod network;
pub mod prior;
pub mod scalar;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use sparse::{ConvKernel, Coord3, CoordSet, SparseTensor};
