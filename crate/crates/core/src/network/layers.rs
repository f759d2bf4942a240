use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Pool, Real, Reduce, Tensor};

/// Creates parameters with fan-in scaled uniform values and records them
/// under hierarchical names in creation order.
///
/// Each tensor draws from its own stream keyed by the seed and its full name,
/// so adding or removing a layer leaves every other initial value unchanged.
pub struct ParamBuilder<T: Real> {
    seed: u64,
    scope: Vec<String>,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scope: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    /// Values are drawn in 64-bit and then rounded, so every precision
    /// receives the same initialization.
    fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(full.as_bytes()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        let t = Tensor::parameter(shape, data).expect("parameter shape");
        self.params.push((full, t.clone()));
        t
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv2d<T> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        self.scoped(name, |b| Conv2d {
            weight: b.uniform("weight", &[cout, cin, k, k], bound),
            bias: b.uniform("bias", &[cout], bound),
            stride,
            padding: k / 2,
        })
    }

    pub fn finish(self) -> Vec<(String, Tensor<T>)> {
        self.params
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Two 3×3 convolutions with an identity skip: `elu(x + conv(elu(conv(x))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Real> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(b: &mut ParamBuilder<T>, channels: usize) -> Self {
        Self {
            conv1: b.conv("conv1", channels, channels, 3, 1),
            conv2: b.conv("conv2", channels, channels, 3, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.elu())?;
        Ok(x.add(&y)?.elu())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    None,
    Channel,
    Spatial,
    ChannelSpatial,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::Channel,
        AttentionMode::Spatial,
        AttentionMode::ChannelSpatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Channel => "channel",
            AttentionMode::Spatial => "spatial",
            AttentionMode::ChannelSpatial => "channel_spatial",
        }
    }

    fn uses_channel(self) -> bool {
        matches!(self, AttentionMode::Channel | AttentionMode::ChannelSpatial)
    }

    fn uses_spatial(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::ChannelSpatial)
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode {s:?}")))
    }
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const CHANNEL_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

/// Squeeze-excitation gate producing `[N, C, 1, 1]`.
#[derive(Debug, Clone)]
pub struct ChannelGate<T: Real> {
    pub squeeze: Conv2d<T>,
    pub excite: Conv2d<T>,
}

impl<T: Real> ChannelGate<T> {
    pub fn new(b: &mut ParamBuilder<T>, channels: usize) -> Self {
        let hidden = (channels / CHANNEL_REDUCTION).max(1);
        Self {
            squeeze: b.conv("squeeze", channels, hidden, 1, 1),
            excite: b.conv("excite", hidden, channels, 1, 1),
        }
    }

    pub fn map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = x.pool(Pool::MeanGlobal)?;
        Ok(self.excite.forward(&self.squeeze.forward(&pooled)?.relu())?.sigmoid())
    }
}

/// Gate from channel-wise mean and max maps producing `[N, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct SpatialGate<T: Real> {
    pub conv: Conv2d<T>,
}

impl<T: Real> SpatialGate<T> {
    pub fn new(b: &mut ParamBuilder<T>) -> Self {
        Self {
            conv: b.conv("conv", 2, 1, SPATIAL_KERNEL, 1),
        }
    }

    pub fn map(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = Tensor::concat(&[x.reduce_axis(1, Reduce::Mean)?, x.reduce_axis(1, Reduce::Max)?], 1)?;
        Ok(self.conv.forward(&pooled)?.sigmoid())
    }
}

#[derive(Debug, Clone)]
pub struct Attention<T: Real> {
    pub mode: AttentionMode,
    pub channel: Option<ChannelGate<T>>,
    pub spatial: Option<SpatialGate<T>>,
}

impl<T: Real> Attention<T> {
    pub fn new(b: &mut ParamBuilder<T>, mode: AttentionMode, channels: usize) -> Self {
        Self {
            mode,
            channel: mode.uses_channel().then(|| b.scoped("channel", |b| ChannelGate::new(b, channels))),
            spatial: mode.uses_spatial().then(|| b.scoped("spatial", |b| SpatialGate::new(b))),
        }
    }

    /// Channel gating first, then spatial gating of the channel-gated map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        if let Some(g) = &self.channel {
            y = g.map(&y)?.mul(&y)?;
        }
        if let Some(g) = &self.spatial {
            y = g.map(&y)?.mul(&y)?;
        }
        Ok(y)
    }
}
