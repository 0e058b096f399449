//! End-to-end encoder and decoder.

mod bitstream;

use std::sync::Arc;

use crate::entropy::quantize::to_symbols;
use crate::entropy::{decode_coords, decode_features, encode_coords, encode_features};
use crate::error::{Error, Result};
use crate::geometry::{lattice_points, sample_surface_poisson, PointCloud};
use crate::network::{extract_features, propagate, residual, warp_features, Model, ScaleStack};
use crate::prior::{
    decode_params, dequantize_params, encode_params, fit_params, posed_mesh, quantize_params, select_template,
    FitConfig, PriorParams, TemplateModel,
};
use crate::sparse::{Coord3, CoordSet, SparseTensor};

pub use bitstream::{bitstream_report, Bitstream, Composition, Header, MAGIC, VERSION};

/// Upper bound on prior surface samples a decoder will draw.
pub const MAX_ALIGNED_SAMPLES: u64 = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    /// Code with the body prior; when off the residual is the source latent.
    pub prior: bool,
    /// Parameters to use instead of running the fitter.
    pub params: Option<PriorParams>,
    /// Prior surface samples per source point.
    pub sampling_ratio: f64,
    pub fit: FitConfig,
    /// Seed of every stochastic step, stored in the header.
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            prior: true,
            params: None,
            sampling_ratio: 1.0,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

/// Result of [`encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// Quantized parameters as the decoder will see them.
    pub params: Option<PriorParams>,
    /// Prior-aligned voxel set shared by encoder and decoder.
    pub aligned: Vec<Coord3>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub coords: Vec<Coord3>,
    pub precision: u8,
    /// Set when a header count exceeded the available candidates.
    pub clamped: bool,
}

impl Decoded {
    pub fn cloud(&self) -> PointCloud {
        PointCloud::from_coords(&self.coords, self.precision)
    }
}

/// Voxelized Poisson-disk samples of the posed, scaled prior mesh.
pub fn aligned_voxels(
    template: &TemplateModel,
    params: &PriorParams,
    samples: usize,
    seed: u64,
    precision: u8,
) -> Result<Vec<Coord3>> {
    if samples == 0 {
        return Ok(Vec::new());
    }
    let mesh = posed_mesh(template, params)?.scaled(params.scale);
    let cloud = sample_surface_poisson(&mesh, samples, seed)?;
    let mut v = lattice_points(&cloud.points, 1 << precision);
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

fn check_voxels(voxels: &[Coord3], precision: u8, scales: usize) -> Result<()> {
    if !(1..=16).contains(&precision) {
        return Err(Error::Config(format!("precision {precision} not in 1..=16")));
    }
    if (precision as usize) < scales {
        return Err(Error::Config(format!(
            "precision {precision} is below the network's {scales} scales"
        )));
    }
    if voxels.is_empty() {
        return Err(Error::Degenerate("cannot encode an empty cloud".into()));
    }
    let bound = 1i32 << precision;
    if let Some(c) = voxels.iter().find(|c| !c.in_cube(bound)) {
        return Err(Error::Contract(format!("voxel {c:?} outside the {precision}-bit lattice")));
    }
    Ok(())
}

fn aligned_stack(model: &Model, aligned: &[Coord3]) -> Result<ScaleStack<f32>> {
    if aligned.is_empty() {
        Ok(ScaleStack::empty(model.config()))
    } else {
        extract_features(aligned, model.weights())
    }
}

fn aligned_sample_count(points: usize, ratio: f64) -> Result<u64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Config(format!("sampling ratio {ratio} must be positive")));
    }
    let n = (points as f64 * ratio).round().max(1.0);
    if n > MAX_ALIGNED_SAMPLES as f64 {
        return Err(Error::Config(format!("{n} prior samples exceeds {MAX_ALIGNED_SAMPLES}")));
    }
    Ok(n as u64)
}

/// Encodes a voxelized cloud.
pub fn encode(
    voxels: &[Coord3],
    precision: u8,
    templates: &[TemplateModel],
    model: &Model,
    config: &CodecConfig,
) -> Result<Encoded> {
    let net = model.config();
    check_voxels(voxels, precision, net.scales)?;
    let source = extract_features(voxels, model.weights())?;
    let latent = source.tensors.last().expect("at least one scale");
    let n0 = source.counts[0];

    let (params, aligned, param_bytes, samples) = if config.prior {
        let fallback = select_template(templates, 0.0)
            .ok_or_else(|| Error::Config("prior coding needs a template".into()))?;
        let raw = match &config.params {
            Some(p) => *p,
            None => {
                let target: Vec<[f64; 3]> = voxels.iter().map(|c| c.to_array().map(f64::from)).collect();
                let fit = FitConfig {
                    seed: config.seed,
                    ..config.fit.clone()
                };
                fit_params(&target, fallback, &fit)?
            }
        };
        let q = quantize_params(&raw)?;
        let decoded = dequantize_params(&q);
        let template = select_template(templates, decoded.gender).expect("non-empty");
        let samples = aligned_sample_count(n0, config.sampling_ratio)?;
        let aligned = aligned_voxels(template, &decoded, samples as usize, config.seed, precision)?;
        (Some(decoded), aligned, encode_params(&q), samples)
    } else {
        (None, Vec::new(), Vec::new(), 0)
    };

    let delta = if config.prior {
        let stack = aligned_stack(model, &aligned)?;
        let warped = warp_features(&stack, latent.coords(), model.weights())?;
        residual(latent, &warped)?
    } else {
        latent.clone()
    };
    let symbols = to_symbols(delta.feats());
    let features = encode_features(&symbols, model.entropy())?;
    let depth = precision - net.scales as u8;
    let coords = encode_coords(latent.coords(), depth)?;
    let bitstream = Bitstream {
        header: Header {
            precision,
            scales: net.scales as u8,
            model_id: model.id(),
            config_digest: model.config_digest(),
            seed: config.seed,
            prior: config.prior,
            aligned_samples: samples,
            counts: source.counts.iter().map(|&n| n as u64).collect(),
        },
        params: param_bytes,
        coords,
        features,
    };
    Ok(Encoded {
        bitstream,
        params,
        aligned,
    })
}

fn check_counts(h: &Header) -> Result<()> {
    let c = &h.counts;
    if c.contains(&0) {
        return Err(Error::Decode("zero point count in header".into()));
    }
    for l in 0..c.len() - 1 {
        if c[l] < c[l + 1] || c[l] > 8 * c[l + 1] {
            return Err(Error::Decode(format!(
                "point counts {} at scale {l} and {} at scale {} are inconsistent",
                c[l],
                c[l + 1],
                l + 1
            )));
        }
    }
    if h.prior {
        if h.aligned_samples == 0 || h.aligned_samples > MAX_ALIGNED_SAMPLES || h.aligned_samples > 64 * c[0] {
            return Err(Error::Decode(format!("{} prior samples is out of range", h.aligned_samples)));
        }
    } else if h.aligned_samples != 0 {
        return Err(Error::Decode("prior samples without a prior".into()));
    }
    Ok(())
}

/// Decodes a parsed bitstream.
pub fn decode(bs: &Bitstream, templates: &[TemplateModel], model: &Model) -> Result<Decoded> {
    let h = &bs.header;
    let net = model.config();
    if h.model_id != model.id() {
        return Err(Error::Decode(format!(
            "bitstream needs model {:08x}, loaded model is {:08x}",
            h.model_id,
            model.id()
        )));
    }
    if h.config_digest != model.config_digest() || h.scales as usize != net.scales {
        return Err(Error::Decode("network configuration differs from the bitstream".into()));
    }
    if (h.precision as usize) < net.scales {
        return Err(Error::Decode("precision below the scale count".into()));
    }
    check_counts(h)?;
    let (coords, depth) = decode_coords(&bs.coords)?;
    if depth as usize != h.precision as usize - net.scales {
        return Err(Error::Decode(format!("coordinate depth {depth} does not match the header")));
    }
    if coords.len() as u64 != h.counts[net.scales] {
        return Err(Error::Decode(format!(
            "{} coordinates decoded, header says {}",
            coords.len(),
            h.counts[net.scales]
        )));
    }
    let coord_set = Arc::new(CoordSet::from_sorted_unique(coords));
    let n = coord_set.len();
    let ch = net.latent_channels;
    let symbols = decode_features(&bs.features, model.entropy(), n, ch)?;

    let mut feats: Vec<f32> = symbols.iter().map(|&s| s as f32).collect();
    if h.prior {
        let q = decode_params(&bs.params)?;
        let params = dequantize_params(&q);
        let template = select_template(templates, params.gender)
            .ok_or_else(|| Error::Decode("bitstream uses a prior but no template is loaded".into()))?;
        let aligned = aligned_voxels(template, &params, h.aligned_samples as usize, h.seed, h.precision)?;
        let stack = aligned_stack(model, &aligned)?;
        let warped = warp_features(&stack, coord_set.as_slice(), model.weights())?;
        for (f, w) in feats.iter_mut().zip(warped.feats()) {
            *f += *w;
        }
    } else if !bs.params.is_empty() {
        return Err(Error::Decode("parameter substream present without a prior".into()));
    }
    let latent = SparseTensor::from_parts(coord_set, feats, ch, net.scales as u32)?;
    let counts: Vec<usize> = h.counts[..net.scales]
        .iter()
        .map(|&c| usize::try_from(c).unwrap_or(usize::MAX))
        .collect();
    let out = propagate(&latent, &counts, h.precision, model.weights())?;
    Ok(Decoded {
        coords: out.coords,
        precision: h.precision,
        clamped: out.clamped,
    })
}

/// Parses and decodes raw bytes.
pub fn decode_bytes(bytes: &[u8], templates: &[TemplateModel], model: &Model) -> Result<Decoded> {
    decode(&Bitstream::parse(bytes)?, templates, model)
}
