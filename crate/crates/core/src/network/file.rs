//! Model file: network weights plus the factorized entropy model.
//!
//! Layout (little endian): magic `PGW1`, config block (`u8` scales, `u8`
//! VRN flag, `u16` latent width, one `u16` width per scale), `u32` entry
//! count, then per entry a `u16` name length, the name and a `u32` value
//! count, and finally every entry's `f32` values in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::entropy::factorized::PARAMS_PER_CHANNEL;
use crate::entropy::FactorizedModel;
use crate::error::{Error, Result};

use super::{NetworkConfig, NetworkWeights};

pub const MODEL_MAGIC: &[u8; 4] = b"PGW1";

/// A trained codec model. Entropy parameters are held at `f32` precision so
/// that a model behaves identically before and after a save/load cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    weights: NetworkWeights<f32>,
    entropy: FactorizedModel,
}

fn config_block(config: &NetworkConfig) -> Vec<u8> {
    let mut out = vec![config.scales as u8, config.vrn as u8];
    out.extend_from_slice(&(config.latent_channels as u16).to_le_bytes());
    for &c in &config.channels {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::at_byte(self.bytes.len(), "model file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Model {
    pub fn new(weights: NetworkWeights<f32>, entropy: FactorizedModel) -> Result<Model> {
        weights.validate()?;
        if entropy.channels() != weights.config().latent_channels {
            return Err(Error::Config(format!(
                "entropy model has {} channels, latent width is {}",
                entropy.channels(),
                weights.config().latent_channels
            )));
        }
        let params = entropy.params().iter().map(|&v| v as f32 as f64).collect();
        let entropy = FactorizedModel::from_parts(entropy.channels(), params, entropy.ranges().to_vec())?;
        Ok(Model { weights, entropy })
    }

    pub fn weights(&self) -> &NetworkWeights<f32> {
        &self.weights
    }

    pub fn entropy(&self) -> &FactorizedModel {
        &self.entropy
    }

    pub fn config(&self) -> &NetworkConfig {
        self.weights.config()
    }

    /// CRC-32C of the serialized model.
    pub fn id(&self) -> u32 {
        crc32c::crc32c(&self.to_bytes())
    }

    /// CRC-32C of the config block.
    pub fn config_digest(&self) -> u32 {
        crc32c::crc32c(&config_block(self.config()))
    }

    fn entries(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (name, k) in self.weights.iter() {
            out.push((format!("{name}.w"), k.weights.clone()));
            if let Some(b) = &k.bias {
                out.push((format!("{name}.b"), b.clone()));
            }
        }
        out.push((
            "entropy.params".into(),
            self.entropy.params().iter().map(|&v| v as f32).collect(),
        ));
        out.push((
            "entropy.ranges".into(),
            self.entropy
                .ranges()
                .iter()
                .flat_map(|&(lo, hi)| [lo as f32, hi as f32])
                .collect(),
        ));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = MODEL_MAGIC.to_vec();
        out.extend_from_slice(&config_block(self.config()));
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, values) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        }
        for (_, values) in &entries {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::at_byte(0, "not a model file"));
        }
        let scales = r.u8()? as usize;
        let vrn = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(Error::at_byte(5, "bad VRN flag")),
        };
        let latent_channels = r.u16()? as usize;
        let channels = (0..scales).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        let config = NetworkConfig {
            scales,
            channels,
            latent_channels,
            vrn,
        };
        let mut weights = NetworkWeights::<f32>::zeros(&config)?;
        let n = r.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..n.min(1 << 16) {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::at_byte(at, "entry name is not UTF-8"))?
                .to_string();
            manifest.push((name, r.u32()? as usize));
        }
        if manifest.len() != n {
            return Err(Error::Config(format!("{n} entries is too many")));
        }
        let mut data = BTreeMap::new();
        for (name, count) in manifest {
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::at_byte(r.pos, "entry too large"))?)?;
            let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.insert(name.clone(), values).is_some() {
                return Err(Error::Config(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::at_byte(r.pos, "trailing bytes after model"));
        }
        let mut take = |name: String, len: usize| -> Result<Vec<f32>> {
            let v = data
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("missing entry `{name}`")))?;
            if v.len() != len {
                return Err(Error::Config(format!("entry `{name}` has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        for (name, k) in weights.iter_mut() {
            k.weights = take(format!("{name}.w"), k.weights.len())?;
            if let Some(b) = &mut k.bias {
                *b = take(format!("{name}.b"), b.len())?;
            }
        }
        let params = take("entropy.params".into(), latent_channels * PARAMS_PER_CHANNEL)?;
        let ranges = take("entropy.ranges".into(), 2 * latent_channels)?;
        if let Some(name) = data.keys().next() {
            return Err(Error::Config(format!("unknown entry `{name}`")));
        }
        let ranges = ranges
            .chunks_exact(2)
            .map(|p| {
                let ok = p.iter().all(|v| v.fract() == 0.0 && v.abs() < 1e6);
                ok.then(|| (p[0] as i32, p[1] as i32))
                    .ok_or_else(|| Error::Config("symbol range is not integral".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let entropy = FactorizedModel::from_parts(
            latent_channels,
            params.iter().map(|&v| v as f64).collect(),
            ranges,
        )?;
        Model::new(weights, entropy)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Model::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}
