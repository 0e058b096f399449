//! Parametric body prior: parameters, template model, blendshapes, linear
//! blend skinning, parameter coding and a fitter.

pub mod fit;
pub mod lbs;
pub mod quant;
pub mod rotation;
pub mod template;

pub use fit::{chamfer, fit_params, FitConfig};
pub use lbs::{apply_blendshapes, joint_positions, posed_mesh, skin};
pub use quant::{
    decode_params, dequantize_params, encode_params, parse_params_text, quantize_params, read_params_file,
    write_params_file, write_params_text, QuantizedParams, PARAM_BYTES,
};
pub use template::{select_template, TemplateModel};

use rotation::canonicalize;

pub const POSE_DIM: usize = 69;
pub const SHAPE_DIM: usize = 10;
/// Number of parameters coded at three decimals.
pub const CODED_PARAMS: usize = POSE_DIM + SHAPE_DIM + 3 + 3 + 1;

/// Pose, shape, root rotation, translation and gender, plus the scale from
/// model units to voxel units.
///
/// A model-space point `x` lands at `scale * x` in voxel space, with the
/// root rotation and `translation` already applied to `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorParams {
    /// Axis-angle rotations of joints 1..24, three values each.
    pub pose: [f64; POSE_DIM],
    pub shape: [f64; SHAPE_DIM],
    /// Axis-angle rotation of the whole body about the model origin.
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    pub gender: f64,
    pub scale: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            pose: [0.0; POSE_DIM],
            shape: [0.0; SHAPE_DIM],
            rotation: [0.0; 3],
            translation: [0.0; 3],
            gender: 0.0,
            scale: 1.0,
        }
    }
}

impl PriorParams {
    /// The 86 three-decimal values in stream order: pose, shape, rotation,
    /// translation, gender.
    pub fn coded_values(&self) -> [f64; CODED_PARAMS] {
        let mut out = [0.0; CODED_PARAMS];
        out[..69].copy_from_slice(&self.pose);
        out[69..79].copy_from_slice(&self.shape);
        out[79..82].copy_from_slice(&self.rotation);
        out[82..85].copy_from_slice(&self.translation);
        out[85] = self.gender;
        out
    }

    pub fn from_coded_values(values: &[f64; CODED_PARAMS], scale: f64) -> PriorParams {
        let mut p = PriorParams {
            scale,
            gender: values[85],
            ..PriorParams::default()
        };
        p.pose.copy_from_slice(&values[..69]);
        p.shape.copy_from_slice(&values[69..79]);
        p.rotation.copy_from_slice(&values[79..82]);
        p.translation.copy_from_slice(&values[82..85]);
        p
    }

    /// Name of coded value `i`, used in errors and parameter files.
    pub fn value_name(i: usize) -> String {
        match i {
            0..69 => format!("pose.{i}"),
            69..79 => format!("shape.{}", i - 69),
            79..82 => format!("rotation.{}", i - 79),
            82..85 => format!("translation.{}", i - 82),
            _ => "gender".to_string(),
        }
    }

    pub fn joint_rotation(&self, joint: usize) -> [f64; 3] {
        if joint == 0 {
            self.rotation
        } else {
            let k = 3 * (joint - 1);
            [self.pose[k], self.pose[k + 1], self.pose[k + 2]]
        }
    }

    /// Every axis-angle triple wrapped to magnitude at most `pi`.
    pub fn canonicalized(&self) -> PriorParams {
        let mut p = *self;
        p.rotation = canonicalize(p.rotation);
        for j in 0..POSE_DIM / 3 {
            let v = canonicalize([p.pose[3 * j], p.pose[3 * j + 1], p.pose[3 * j + 2]]);
            p.pose[3 * j..3 * j + 3].copy_from_slice(&v);
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.coded_values().iter().all(|v| v.is_finite()) && self.scale.is_finite()
    }
}
