//! Multi-stream encoder: a stride-4 stem followed by stages that each add a
//! lower-resolution stream and end with a cross-resolution exchange.

use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, ParamBuilder, ResidualBlock};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub streams: usize,
    pub stages: usize,
    /// Channels of stream 1; stream r carries `base_channels · 2^(r-1)`.
    pub base_channels: usize,
    pub stem_channels: usize,
    /// Exchange modules per stage.
    pub modules_per_stage: Vec<usize>,
    /// Residual blocks per stream inside each module.
    pub blocks: usize,
    pub width: usize,
    pub height: usize,
}

impl EncoderConfig {
    pub fn toy(width: usize, height: usize) -> Self {
        Self {
            streams: 4,
            stages: 4,
            base_channels: 4,
            stem_channels: 8,
            modules_per_stage: vec![1, 1, 1, 1],
            blocks: 1,
            width,
            height,
        }
    }

    /// Widths and depths of the 18-channel high-resolution backbone.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            streams: 4,
            stages: 4,
            base_channels: 18,
            stem_channels: 64,
            modules_per_stage: vec![1, 1, 4, 3],
            blocks: 4,
            width,
            height,
        }
    }

    /// Total downsampling of the lowest-resolution stream.
    pub fn divisor(&self) -> usize {
        1 << (self.streams + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams < 2 || self.streams > self.stages {
            return Err(Error::Config(format!(
                "need 2 <= streams <= stages, got {} streams and {} stages",
                self.streams, self.stages
            )));
        }
        if self.modules_per_stage.len() != self.stages {
            return Err(Error::Config(format!(
                "modules_per_stage lists {} stages, expected {}",
                self.modules_per_stage.len(),
                self.stages
            )));
        }
        if self.base_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let d = self.divisor();
        if self.width == 0 || self.height == 0 || self.width % d != 0 || self.height % d != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {d} in both extents",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn channels(&self, stream: usize) -> usize {
        self.base_channels << (stream - 1)
    }

    /// Channel count of the stream-`r` stack (fused or final-stage only).
    pub fn stack_channels(&self, stream: usize, fusion: bool) -> usize {
        if fusion {
            self.channels(stream) * (self.stages - stream + 1)
        } else {
            self.channels(stream)
        }
    }

    /// `(width, height)` of stream `r`.
    pub fn stream_size(&self, stream: usize) -> (usize, usize) {
        (self.width >> (stream + 1), self.height >> (stream + 1))
    }
}

/// Encoder output: the half-resolution stem feature and one stack per stream.
#[derive(Debug, Clone)]
pub struct FeatureStack<T: Real> {
    pub stem: Tensor<T>,
    pub streams: Vec<Tensor<T>>,
}

/// Maps one stream onto the resolution and width of another inside an exchange.
#[derive(Debug, Clone)]
enum Path<T: Real> {
    Identity,
    Up { conv: Conv2d<T>, factor: usize },
    Down(Vec<Conv2d<T>>),
}

impl<T: Real> Path<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Path::Identity => Ok(x.clone()),
            Path::Up { conv, factor } => conv.forward(x)?.upsample_bilinear(*factor),
            Path::Down(convs) => {
                let mut y = x.clone();
                for (i, c) in convs.iter().enumerate() {
                    y = c.forward(&y)?;
                    if i + 1 < convs.len() {
                        y = y.elu();
                    }
                }
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Module<T: Real> {
    blocks: Vec<Vec<ResidualBlock<T>>>,
    /// `exchange[i][j]` maps stream j into stream i.
    exchange: Vec<Vec<Path<T>>>,
}

impl<T: Real> Module<T> {
    fn new(b: &mut ParamBuilder<T>, cfg: &EncoderConfig, streams: usize) -> Self {
        let blocks = (0..streams)
            .map(|i| {
                b.scoped(format!("stream{}", i + 1), |b| {
                    (0..cfg.blocks)
                        .map(|k| b.scoped(format!("block{k}"), |b| ResidualBlock::new(b, cfg.channels(i + 1))))
                        .collect()
                })
            })
            .collect();
        let exchange = if streams == 1 {
            Vec::new()
        } else {
            (0..streams)
                .map(|i| {
                    (0..streams)
                        .map(|j| {
                            let (ci, cj) = (cfg.channels(i + 1), cfg.channels(j + 1));
                            b.scoped(format!("fuse{}_{}", j + 1, i + 1), |b| match j.cmp(&i) {
                                std::cmp::Ordering::Equal => Path::Identity,
                                std::cmp::Ordering::Greater => Path::Up {
                                    conv: b.conv("up", cj, ci, 1, 1),
                                    factor: 1 << (j - i),
                                },
                                std::cmp::Ordering::Less => Path::Down(
                                    (0..i - j)
                                        .map(|k| {
                                            let out = if k + 1 == i - j { ci } else { cj };
                                            b.conv(&format!("down{k}"), cj, out, 3, 2)
                                        })
                                        .collect(),
                                ),
                            })
                        })
                        .collect()
                })
                .collect()
        };
        Self { blocks, exchange }
    }

    fn forward(&self, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let ys = xs
            .iter()
            .zip(&self.blocks)
            .map(|(x, blocks)| blocks.iter().try_fold(x.clone(), |y, blk| blk.forward(&y)))
            .collect::<Result<Vec<_>>>()?;
        if self.exchange.is_empty() {
            return Ok(ys);
        }
        self.exchange
            .iter()
            .map(|paths| {
                let mut acc: Option<Tensor<T>> = None;
                for (path, y) in paths.iter().zip(&ys) {
                    let v = path.forward(y)?;
                    acc = Some(match acc {
                        None => v,
                        Some(a) => a.add(&v)?,
                    });
                }
                Ok(acc.expect("at least one stream").elu())
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Stage<T: Real> {
    /// Creates the newest stream of this stage from the previous stage's
    /// lowest-resolution output (from the stem for stage 1). Stages after
    /// the last stream has appeared have none.
    transition: Option<Conv2d<T>>,
    modules: Vec<Module<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T: Real> {
    pub config: EncoderConfig,
    stem1: Conv2d<T>,
    stem2: Conv2d<T>,
    stages: Vec<Stage<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(b: &mut ParamBuilder<T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem1 = b.conv("stem1", 3, cfg.stem_channels, 3, 2);
        let stem2 = b.conv("stem2", cfg.stem_channels, cfg.stem_channels, 3, 2);
        let stages = (1..=cfg.stages)
            .map(|s| {
                b.scoped(format!("stage{s}"), |b| {
                    let streams = s.min(cfg.streams);
                    let transition = match s {
                        1 => Some(b.conv("transition", cfg.stem_channels, cfg.channels(1), 3, 1)),
                        s if s <= cfg.streams => {
                            Some(b.conv("transition", cfg.channels(s - 1), cfg.channels(s), 3, 2))
                        }
                        _ => None,
                    };
                    let modules = (0..cfg.modules_per_stage[s - 1])
                        .map(|m| b.scoped(format!("module{m}"), |b| Module::new(b, cfg, streams)))
                        .collect();
                    Stage { transition, modules }
                })
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            stem1,
            stem2,
            stages,
        })
    }

    pub fn forward(&self, image: &Tensor<T>, fusion: bool) -> Result<FeatureStack<T>> {
        let (_, c, h, w) = image.dims4()?;
        let cfg = &self.config;
        if c != 3 || (w, h) != (cfg.width, cfg.height) {
            return Err(Error::shape(format!(
                "encoder expects [N, 3, {}, {}], got {:?}",
                cfg.height,
                cfg.width,
                image.shape()
            )));
        }
        let stem = self.stem1.forward(image)?.elu();
        let mut xs: Vec<Tensor<T>> = Vec::new();
        let mut history: Vec<Vec<Tensor<T>>> = vec![Vec::new(); cfg.streams];
        let mut last = self.stem2.forward(&stem)?.elu();
        for stage in &self.stages {
            if let Some(t) = &stage.transition {
                xs.push(t.forward(&last)?.elu());
            }
            for m in &stage.modules {
                xs = m.forward(&xs)?;
            }
            for (r, x) in xs.iter().enumerate() {
                history[r].push(x.clone());
            }
            last = xs.last().expect("streams exist").clone();
        }
        let streams = history
            .into_iter()
            .map(|h| {
                if fusion {
                    Tensor::concat(&h, 1)
                } else {
                    Ok(h.last().expect("stage output").clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureStack { stem, streams })
    }
}
