use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ParamBuilder};
use crate::error::{Error, Result};
use crate::geometry::invert_pose;
use crate::tensor::{Pool, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Widths of the stride-2 convolutions.
    pub channels: Vec<usize>,
    /// Multiplier applied to the raw 6-vector.
    pub output_scale: f64,
}

impl Default for PoseNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            output_scale: 0.01,
        }
    }
}

impl PoseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("pose widths must be positive, got {:?}", self.channels)));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config("pose output scale must be positive".into()));
        }
        Ok(())
    }
}

/// Relative motion regressor on a concatenated frame pair.
#[derive(Debug, Clone)]
pub struct PoseNet<T: Real> {
    pub config: PoseNetConfig,
    convs: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
}

impl<T: Real> PoseNet<T> {
    pub fn new(b: &mut ParamBuilder<T>, cfg: &PoseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 6;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = b.conv(&format!("conv{i}"), cin, c, 3, 2);
                cin = c;
                conv
            })
            .collect();
        let head = b.conv("head", cin, 6, 1, 1);
        Ok(Self {
            config: cfg.clone(),
            convs,
            head,
        })
    }

    /// `[N, 6]` motion from `target` to `source` (axis-angle, translation).
    pub fn forward(&self, target: &Tensor<T>, source: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, _, _) = target.dims4()?;
        let mut x = Tensor::concat(&[target.clone(), source.clone()], 1)?;
        if x.shape()[1] != 6 {
            return Err(Error::shape(format!("pose network expects two RGB frames, got {:?}", x.shape())));
        }
        for c in &self.convs {
            x = c.forward(&x)?.elu();
        }
        self.head
            .forward(&x.pool(Pool::MeanGlobal)?)?
            .mul_scalar(T::of(self.config.output_scale))
            .reshape(&[n, 6])
    }

    /// Motions from `target` to its temporal neighbours `[prev, next]`.
    ///
    /// Both pairs are fed forward in time, so the network always regresses
    /// the same direction of motion; the backward motion is inverted.
    pub fn neighbour_motions(&self, prev: &Tensor<T>, target: &Tensor<T>, next: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
        Ok([invert_pose(&self.forward(prev, target)?)?, self.forward(target, next)?])
    }
}
