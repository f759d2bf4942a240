//! Depth network (multi-stream encoder + attention decoder) and pose network.

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod pose;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{Encoder, EncoderConfig, FeatureStack};
pub use layers::{AttentionMode, ParamBuilder};
pub use pose::{PoseNet, PoseNetConfig};

use crate::error::{Error, Result};
use crate::tensor::{read_container, write_container, NamedTensor, Real, Tensor};

pub const MANIFEST_ENTRY: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.1, max: 100.0 }
    }
}

impl DepthRange {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min && self.max.is_finite()) {
            return Err(Error::Config(format!("invalid depth range {:?}", self)));
        }
        Ok(())
    }
}

/// `depth = 1 / (1/max + (1/min - 1/max) · disp)`.
pub fn disparity_to_depth<T: Real>(disp: &Tensor<T>, range: DepthRange) -> Tensor<T> {
    let lo = 1.0 / range.max;
    let span = 1.0 / range.min - lo;
    disp.mul_scalar(T::of(span)).add_scalar(T::of(lo)).recip()
}

/// Inverse of [`disparity_to_depth`].
pub fn depth_to_disparity(depth: f64, range: DepthRange) -> f64 {
    let lo = 1.0 / range.max;
    (1.0 / depth - lo) / (1.0 / range.min - lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub pose: PoseNetConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(width: usize, height: usize) -> Self {
        Self {
            encoder: EncoderConfig::toy(width, height),
            decoder: DecoderConfig::toy(),
            pose: PoseNetConfig::default(),
            seed: 0,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            encoder: EncoderConfig::full(width, height),
            decoder: DecoderConfig::full(),
            pose: PoseNetConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.pose.validate()
    }
}

#[derive(Debug, Clone)]
pub struct DepthNet<T: Real = f32> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> DepthNet<T> {
    pub fn features(&self, image: &Tensor<T>) -> Result<FeatureStack<T>> {
        self.encoder.forward(image, self.decoder.config.fusion)
    }

    /// Disparities in `(0, 1)`, index `s` at `1/2^s` resolution.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.decoder.forward(&self.features(image)?)
    }
}

/// Depth and pose networks trained together.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub depth: DepthNet<T>,
    pub pose: PoseNet<T>,
    depth_params: Vec<(String, Tensor<T>)>,
    pose_params: Vec<(String, Tensor<T>)>,
}

pub fn count_parameters<T: Real>(params: &[(String, Tensor<T>)]) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(config.seed);
        let depth = b.scoped("depth", |b| -> Result<_> {
            let encoder = b.scoped("encoder", |b| Encoder::new(b, &config.encoder))?;
            let decoder = b.scoped("decoder", |b| Decoder::new(b, &config.decoder, &config.encoder))?;
            Ok(DepthNet { encoder, decoder })
        })?;
        let pose = b.scoped("pose", |b| PoseNet::new(b, &config.pose))?;
        let (depth_params, pose_params) = b.finish().into_iter().partition(|(n, _)| n.starts_with("depth."));
        Ok(Self {
            config: config.clone(),
            depth,
            pose,
            depth_params,
            pose_params,
        })
    }

    pub fn depth_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.depth_params
    }

    pub fn pose_parameters(&self) -> &[(String, Tensor<T>)] {
        &self.pose_params
    }

    /// Depth parameters followed by pose parameters.
    pub fn parameters(&self) -> impl Iterator<Item = &(String, Tensor<T>)> {
        self.depth_params.iter().chain(&self.pose_params)
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Writes all parameters plus `extra` entries and a JSON manifest.
    pub fn save(&self, path: &Path, extra_json: serde_json::Value, extra: &[NamedTensor]) -> Result<()> {
        let manifest = serde_json::to_vec_pretty(&Manifest {
            model: self.config.clone(),
            extra: extra_json,
        })?;
        let mut entries = vec![NamedTensor::from_bytes(MANIFEST_ENTRY, &manifest)];
        for (name, t) in self.parameters() {
            let data = t.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
            entries.push(NamedTensor::new(name.clone(), t.shape().to_vec(), data)?);
        }
        entries.extend_from_slice(extra);
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::file(&tmp, e))?);
            write_container(&mut w, &entries).map_err(|e| Error::file(&tmp, e))?;
            w.flush().map_err(|e| Error::file(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }

    /// Restores a model; returns the manifest's `extra` value and every entry
    /// that is not a parameter.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value, Vec<NamedTensor>)> {
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::file(path, e))?);
        let entries = read_container(&mut r).map_err(|e| Error::file(path, e))?;
        let manifest = entries
            .iter()
            .find(|e| e.name == MANIFEST_ENTRY)
            .ok_or_else(|| Error::file(path, "checkpoint has no manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&manifest.to_bytes()?).map_err(|e| Error::file(path, e))?;
        let model = Self::new(&manifest.model)?;
        let mut by_name: std::collections::HashMap<&str, &NamedTensor> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        by_name.remove(MANIFEST_ENTRY);
        for (name, t) in model.parameters() {
            let e = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::file(path, format!("missing parameter {name}")))?;
            if e.shape != t.shape() {
                return Err(Error::file(
                    path,
                    format!("parameter {name} has shape {:?}, expected {:?}", e.shape, t.shape()),
                ));
            }
            t.update_data(|d| {
                for (dst, &src) in d.iter_mut().zip(&e.data) {
                    *dst = T::of(f64::from(src));
                }
            });
        }
        let rest = entries
            .iter()
            .filter(|e| by_name.contains_key(e.name.as_str()))
            .cloned()
            .collect();
        Ok((model, manifest.extra, rest))
    }
}
