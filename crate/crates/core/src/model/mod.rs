//! Trainable two-branch backbone: masked spatial graph convolution blocks
//! with temporal convolutions, global pooling, and a linear classifier.

mod checkpoint;
mod net;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use net::{
    backward_sample, cross_entropy, forward_batch, forward_sample, sample_grads, SampleCache,
};
pub use optim::sgd_step;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub temporal_stride: usize,
}

/// Shape and capacity of one classifier branch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub in_frames: usize,
    pub joints: usize,
    pub persons: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockConfig>,
    /// Temporal kernel width; odd.
    pub temporal_kernel: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl NetworkConfig {
    /// Reduced default backbone: 4 blocks, channels 16-32-32-64, temporal
    /// strides 1-1-2-2, kernel width 5.
    pub fn reduced(
        in_channels: usize,
        in_frames: usize,
        joints: usize,
        persons: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        NetworkConfig {
            in_channels,
            in_frames,
            joints,
            persons,
            num_classes,
            blocks: vec![
                BlockConfig { channels: 16, temporal_stride: 1 },
                BlockConfig { channels: 32, temporal_stride: 1 },
                BlockConfig { channels: 32, temporal_stride: 2 },
                BlockConfig { channels: 64, temporal_stride: 2 },
            ],
            temporal_kernel: 5,
            dropout: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Schema("network needs at least one block".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Schema("num_classes must be >= 2".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Schema("temporal kernel width must be odd".into()));
        }
        if self.in_channels == 0 || self.in_frames == 0 || self.joints == 0 || self.persons == 0 {
            return Err(Error::Schema("network input extents must be positive".into()));
        }
        for b in &self.blocks {
            if b.channels == 0 || b.temporal_stride == 0 {
                return Err(Error::Schema("block channels and stride must be positive".into()));
            }
        }
        Ok(())
    }

    /// Temporal extent after each block (same padding, stride division).
    pub fn frame_counts(&self) -> Vec<usize> {
        let mut t = self.in_frames;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            t = (t - 1) / b.temporal_stride + 1;
            out.push(t);
        }
        out
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map(|b| b.channels).unwrap_or(0)
    }
}

/// Parameters of one spatial-graph + temporal-conv block.
#[derive(Debug, Clone)]
pub struct GcnBlockParams<T> {
    /// 1x1 feature transform, [d_out, d_in].
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Trainable elementwise re-weighting of the normalized adjacency, [K, K].
    pub mask: Tensor<T>,
    /// Temporal kernel, [d_out, d_out, kt].
    pub temporal: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub blocks: Vec<GcnBlockParams<T>>,
    pub cls_weight: Tensor<T>,
    pub cls_bias: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Kaiming-uniform weights, zero biases, all-ones masks (so the initial
    /// graph equals the prior topology).
    pub fn init(config: &NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let kt = config.temporal_kernel;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut d_in = config.in_channels;
        for b in &config.blocks {
            let d_out = b.channels;
            let weight = uniform_init(&[d_out, d_in], d_in, rng);
            let temporal = uniform_init(&[d_out, d_out, kt], d_out * kt, rng);
            blocks.push(GcnBlockParams {
                weight,
                bias: Tensor::zeros(&[d_out]),
                mask: Tensor::full(&[config.joints, config.joints], T::one()),
                temporal,
            });
            d_in = d_out;
        }
        let cls_weight = uniform_init(&[config.num_classes, d_in], d_in, rng);
        Ok(ModelParams {
            blocks,
            cls_weight,
            cls_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// All-zero parameters with the shapes the config implies.
    pub fn zeros_from_config(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let kt = config.temporal_kernel;
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut d_in = config.in_channels;
        for b in &config.blocks {
            let d_out = b.channels;
            blocks.push(GcnBlockParams {
                weight: Tensor::zeros(&[d_out, d_in]),
                bias: Tensor::zeros(&[d_out]),
                mask: Tensor::zeros(&[config.joints, config.joints]),
                temporal: Tensor::zeros(&[d_out, d_out, kt]),
            });
            d_in = d_out;
        }
        Ok(ModelParams {
            blocks,
            cls_weight: Tensor::zeros(&[config.num_classes, d_in]),
            cls_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| GcnBlockParams {
                    weight: Tensor::zeros(b.weight.shape()),
                    bias: Tensor::zeros(b.bias.shape()),
                    mask: Tensor::zeros(b.mask.shape()),
                    temporal: Tensor::zeros(b.temporal.shape()),
                })
                .collect(),
            cls_weight: Tensor::zeros(self.cls_weight.shape()),
            cls_bias: Tensor::zeros(self.cls_bias.shape()),
        }
    }

    /// Named views over every trainable tensor, in a fixed order.
    pub fn visit(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), &b.weight));
            out.push((format!("block{i}.bias"), &b.bias));
            out.push((format!("block{i}.mask"), &b.mask));
            out.push((format!("block{i}.temporal"), &b.temporal));
        }
        out.push(("cls.weight".into(), &self.cls_weight));
        out.push(("cls.bias".into(), &self.cls_bias));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.weight"), &mut b.weight));
            out.push((format!("block{i}.bias"), &mut b.bias));
            out.push((format!("block{i}.mask"), &mut b.mask));
            out.push((format!("block{i}.temporal"), &mut b.temporal));
        }
        out.push(("cls.weight".into(), &mut self.cls_weight));
        out.push(("cls.bias".into(), &mut self.cls_bias));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            blocks: self
                .blocks
                .iter()
                .map(|b| GcnBlockParams {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    mask: b.mask.cast(),
                    temporal: b.temporal.cast(),
                })
                .collect(),
            cls_weight: self.cls_weight.cast(),
            cls_bias: self.cls_bias.cast(),
        }
    }

    /// In-place `self += a * other` over every parameter tensor.
    pub fn axpy(&mut self, a: T, other: &ModelParams<T>) -> Result<()> {
        for ((_, dst), (_, src)) in self.visit_mut().into_iter().zip(other.visit()) {
            dst.axpy(a, src)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.visit().iter().all(|(_, t)| t.all_finite())
    }
}

fn uniform_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.uniform_range(-bound, bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}

/// Full training state: parameters, momentum buffers, and step counter.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub config: NetworkConfig,
    pub params: ModelParams<T>,
    pub velocity: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(config: NetworkConfig) -> Result<Self> {
        let mut rng = Rng::new(config.seed).split(0x6d6f64); // model init stream
        let params = ModelParams::init(&config, &mut rng)?;
        let velocity = params.zeros_like();
        Ok(ModelState {
            config,
            params,
            velocity,
            step: 0,
        })
    }
}
