//! Rate-distortion loss, optimizer and the toy-scale training loop.

mod adam;
pub mod dataset;
mod loss;
mod train;

pub use adam::Adam;
pub use dataset::{fit_to_cube, random_body, surface_voxels, toy_dataset, Sample};
pub use loss::{bce_multiscale, rate_term, LossBreakdown};
pub use train::{train, TrainConfig, TrainedModel, Trainer};

#[cfg(test)]
mod tests;
