//! Attention-gated decoder. Node `i` fuses the upsampled node `i+1` with the
//! encoder stack one level finer; disparity heads sit on the finest nodes.

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, FeatureStack};
use super::layers::{Attention, AttentionMode, Conv2d, ParamBuilder};
use super::DepthRange;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub attention: AttentionMode,
    /// Concatenate every stage's output per stream instead of using only the last.
    pub fusion: bool,
    /// Width of node `i`, for `i = 0..=streams`.
    pub channels: Vec<usize>,
    /// Number of disparity outputs, from full resolution downwards.
    pub scales: usize,
    pub depth_range: DepthRange,
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self {
            attention: AttentionMode::Channel,
            fusion: true,
            channels: vec![8, 8, 16, 16, 32],
            scales: 4,
            depth_range: DepthRange::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            channels: vec![16, 32, 64, 128, 256],
            ..Self::toy()
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.channels.len() != enc.streams + 1 || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder needs {} positive node widths, got {:?}",
                enc.streams + 1,
                self.channels
            )));
        }
        if self.scales == 0 || self.scales > enc.streams {
            return Err(Error::Config(format!(
                "scales must lie in 1..={}, got {}",
                enc.streams, self.scales
            )));
        }
        self.depth_range.validate()
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    attention: Attention<T>,
    conv: Conv2d<T>,
}

impl<T: Real> Node<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.conv.forward(&self.attention.forward(x)?)?.elu())
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<T: Real> {
    pub config: DecoderConfig,
    /// Indexed by node number.
    nodes: Vec<Node<T>>,
    /// `heads[s]` reads node `s` and yields the scale-`s` disparity.
    heads: Vec<Conv2d<T>>,
}

impl<T: Real> Decoder<T> {
    pub fn new(b: &mut ParamBuilder<T>, cfg: &DecoderConfig, enc: &EncoderConfig) -> Result<Self> {
        cfg.validate(enc)?;
        let r = enc.streams;
        let stack = |i: usize| {
            if i == 0 {
                enc.stem_channels
            } else {
                enc.stack_channels(i, cfg.fusion)
            }
        };
        let nodes = (0..=r)
            .map(|i| {
                let cin = match i {
                    0 => cfg.channels[1],
                    i if i == r => stack(r) + stack(r - 1),
                    i => cfg.channels[i + 1] + stack(i - 1),
                };
                b.scoped(format!("node{i}"), |b| Node {
                    attention: b.scoped("attention", |b| Attention::new(b, cfg.attention, cin)),
                    conv: b.conv("conv", cin, cfg.channels[i], 3, 1),
                })
            })
            .collect();
        let heads = (0..cfg.scales)
            .map(|s| b.conv(&format!("disp{s}"), cfg.channels[s], 1, 3, 1))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            nodes,
            heads,
        })
    }

    /// Disparities in `(0, 1)`, index `s` at `1/2^s` of the input resolution.
    pub fn forward(&self, f: &FeatureStack<T>) -> Result<Vec<Tensor<T>>> {
        let r = self.nodes.len() - 1;
        if f.streams.len() != r {
            return Err(Error::shape(format!(
                "decoder expects {r} encoder stacks, got {}",
                f.streams.len()
            )));
        }
        let skip = |i: usize| if i == 0 { &f.stem } else { &f.streams[i - 1] };
        let mut outs: Vec<Option<Tensor<T>>> = vec![None; r + 1];
        let mut x = self.nodes[r].forward(&Tensor::concat(
            &[f.streams[r - 1].upsample_bilinear(2)?, skip(r - 1).clone()],
            1,
        )?)?;
        outs[r] = Some(x.clone());
        for i in (0..r).rev() {
            let up = x.upsample_bilinear(2)?;
            let input = if i == 0 { up } else { Tensor::concat(&[up, skip(i - 1).clone()], 1)? };
            x = self.nodes[i].forward(&input)?;
            outs[i] = Some(x.clone());
        }
        // The sigmoid rounds to exactly 0 or 1 for large logits; keep the
        // interval open so depth stays finite and ordered.
        let (lo, hi) = (T::epsilon(), T::one() - T::epsilon());
        self.heads
            .iter()
            .enumerate()
            .map(|(s, h)| Ok(h.forward(outs[s].as_ref().expect("node computed"))?.sigmoid().clamp(lo, hi)))
            .collect()
    }

    /// Channel gate of node `i`, if the mode has one.
    pub fn channel_gate_mut(&mut self, i: usize) -> Option<&mut super::layers::ChannelGate<T>> {
        self.nodes.get_mut(i)?.attention.channel.as_mut()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}
