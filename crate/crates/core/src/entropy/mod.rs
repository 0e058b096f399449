//! Quantization, the factorized density model, the range coder, and the
//! octree coordinate coder.

pub mod coder;
pub mod factorized;
pub mod octree;
pub mod quantize;
pub mod range;

pub use coder::{decode_features, encode_features, CdfTable};
pub use factorized::{FactorizedModel, LIKELIHOOD_FLOOR, MAX_RANGE_WIDTH, PARAMS_PER_CHANNEL};
pub use octree::{decode_coords, encode_coords};
pub use quantize::{quantize_features, QuantMode};
