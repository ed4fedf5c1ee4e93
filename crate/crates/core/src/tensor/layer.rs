//! Parameterized layers: structure, named weights, and the forward/backward
//! dispatch onto the kernels in [`super::ops`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ops::{self, BatchStats};
use super::{Scalar, Shape, Tensor};

/// Exponential-average factor for batch norm moving statistics.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    DepthwiseConv3x3,
    PointwiseConv,
    BatchNorm,
    #[serde(rename = "relu")]
    ReLU,
    GlobalAvgPool,
    Dense,
    Add,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DepthwiseConv3x3 | LayerKind::PointwiseConv
        )
    }

    pub fn kernel_size(self) -> usize {
        match self {
            LayerKind::Conv3x3 | LayerKind::DepthwiseConv3x3 => 3,
            _ => 1,
        }
    }

    /// Names of the weights updated by the optimizer, in gradient order.
    pub fn trainable_names(self) -> &'static [&'static str] {
        match self {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::DepthwiseConv3x3 | LayerKind::PointwiseConv => {
                &["weight"]
            }
            LayerKind::BatchNorm => &["gamma", "beta"],
            LayerKind::Dense => &["weight", "bias"],
            LayerKind::ReLU | LayerKind::GlobalAvgPool | LayerKind::Add => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::DepthwiseConv3x3 => "depthwise_conv3x3",
            LayerKind::PointwiseConv => "pointwise_conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::ReLU => "relu",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::Add => "add",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum LayerCache<T: Scalar> {
    Input(Tensor<T>),
    BatchNormTrain(BatchStats<T>),
    Pool(Shape),
    None,
}

/// One layer: its kind, geometry, and named weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub kind: LayerKind,
    pub weights: BTreeMap<String, Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.len())
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

impl<T: Scalar> LayerParams<T> {
    fn bare(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind,
            weights: BTreeMap::new(),
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
        }
    }

    /// Dense convolution (`Conv3x3` or `Conv1x1`) with fan-in scaled normal
    /// weights and no bias.
    pub fn conv<R: Rng + ?Sized>(
        kind: LayerKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !matches!(kind, LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::PointwiseConv) {
            return Err(Error::invalid(format!("{} is not a dense convolution", kind.name())));
        }
        check_geometry(in_channels, out_channels, stride)?;
        let k = kind.kernel_size();
        let mut layer = Self::bare(kind, in_channels, out_channels);
        layer.stride = stride;
        layer.padding = padding;
        layer.weights.insert(
            "weight".into(),
            he_normal(Shape::new(out_channels, in_channels, k, k), in_channels * k * k, rng),
        );
        Ok(layer)
    }

    pub fn pointwise<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        Self::conv(LayerKind::PointwiseConv, in_channels, out_channels, 1, 0, rng)
    }

    pub fn depthwise<R: Rng + ?Sized>(channels: usize, stride: usize, padding: usize, rng: &mut R) -> Result<Self> {
        check_geometry(channels, channels, stride)?;
        let mut layer = Self::bare(LayerKind::DepthwiseConv3x3, channels, channels);
        layer.stride = stride;
        layer.padding = padding;
        layer
            .weights
            .insert("weight".into(), he_normal(Shape::new(channels, 1, 3, 3), 9, rng));
        Ok(layer)
    }

    pub fn batch_norm(channels: usize) -> Self {
        let mut layer = Self::bare(LayerKind::BatchNorm, channels, channels);
        for (name, v) in [("gamma", 1.0), ("beta", 0.0), ("moving_mean", 0.0), ("moving_var", 1.0)] {
            layer
                .weights
                .insert(name.into(), Tensor::channel_vector(vec![T::from_f64_lossy(v); channels]));
        }
        layer
    }

    pub fn relu(channels: usize) -> Self {
        Self::bare(LayerKind::ReLU, channels, channels)
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        Self::bare(LayerKind::GlobalAvgPool, channels, channels)
    }

    pub fn dense<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        check_geometry(in_features, out_features, 1)?;
        let mut layer = Self::bare(LayerKind::Dense, in_features, out_features);
        layer.weights.insert(
            "weight".into(),
            he_normal(Shape::new(out_features, in_features, 1, 1), in_features, rng),
        );
        layer
            .weights
            .insert("bias".into(), Tensor::channel_vector(vec![T::zero(); out_features]));
        Ok(layer)
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::invalid(format!("{} layer has no `{name}` weight", self.kind.name())))
    }

    /// Output shape for a given input shape, validating channel counts.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.kind != LayerKind::Dense && input.c != self.in_channels {
            return Err(Error::shape(format!(
                "{} expects {} input channels, got {}",
                self.kind.name(),
                self.in_channels,
                input.c
            )));
        }
        match self.kind {
            k if k.is_conv() => {
                let ks = k.kernel_size();
                Ok(Shape::new(
                    input.n,
                    self.out_channels,
                    ops::conv_output_dim(input.h, ks, self.stride, self.padding)?,
                    ops::conv_output_dim(input.w, ks, self.stride, self.padding)?,
                ))
            }
            LayerKind::GlobalAvgPool => Ok(Shape::new(input.n, input.c, 1, 1)),
            LayerKind::Dense => {
                if input.sample_len() != self.in_channels {
                    return Err(Error::shape(format!(
                        "dense expects {} features, got {}",
                        self.in_channels,
                        input.sample_len()
                    )));
                }
                Ok(Shape::new(input.n, self.out_channels, 1, 1))
            }
            _ => Ok(input),
        }
    }

    /// Forward pass. Training-mode batch norm uses batch statistics; call
    /// [`LayerParams::update_moving_stats`] with the cache to fold them in.
    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, LayerCache<T>)> {
        self.output_shape(input.shape())?;
        match self.kind {
            LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::PointwiseConv => {
                let out = ops::conv2d(input, self.weight("weight")?, self.stride, self.padding)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            LayerKind::DepthwiseConv3x3 => {
                let out = ops::depthwise_conv2d(input, self.weight("weight")?, self.stride, self.padding)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            LayerKind::BatchNorm => {
                let (gamma, beta) = (self.weight("gamma")?, self.weight("beta")?);
                match mode {
                    Mode::Train => {
                        let (out, stats) = ops::batch_norm_train(input, gamma, beta)?;
                        Ok((out, LayerCache::BatchNormTrain(stats)))
                    }
                    Mode::Infer => {
                        let out = ops::batch_norm_infer(
                            input,
                            gamma,
                            beta,
                            self.weight("moving_mean")?,
                            self.weight("moving_var")?,
                        )?;
                        Ok((out, LayerCache::Input(input.clone())))
                    }
                }
            }
            LayerKind::ReLU => Ok((ops::relu(input), LayerCache::Input(input.clone()))),
            LayerKind::GlobalAvgPool => Ok((ops::global_avg_pool(input), LayerCache::Pool(input.shape()))),
            LayerKind::Dense => {
                let out = ops::dense(input, self.weight("weight")?, self.weight("bias")?)?;
                Ok((out, LayerCache::Input(input.clone())))
            }
            LayerKind::Add => Err(Error::invalid("add is binary; use ops::add")),
        }
    }

    /// Forward pass without keeping a cache.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Infer)?.0)
    }

    /// Backward pass: input gradient plus one gradient per entry of
    /// [`LayerKind::trainable_names`].
    pub fn backward(&self, cache: &LayerCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match (self.kind, cache) {
            (LayerKind::Conv3x3 | LayerKind::Conv1x1 | LayerKind::PointwiseConv, LayerCache::Input(x)) => {
                let (dx, dw) = ops::conv2d_backward(x, self.weight("weight")?, grad_out, self.stride, self.padding)?;
                Ok((dx, vec![dw]))
            }
            (LayerKind::DepthwiseConv3x3, LayerCache::Input(x)) => {
                let (dx, dw) =
                    ops::depthwise_conv2d_backward(x, self.weight("weight")?, grad_out, self.stride, self.padding)?;
                Ok((dx, vec![dw]))
            }
            (LayerKind::BatchNorm, LayerCache::BatchNormTrain(stats)) => {
                let (dx, dg, db) = ops::batch_norm_train_backward(stats, self.weight("gamma")?, grad_out)?;
                Ok((dx, vec![dg, db]))
            }
            (LayerKind::BatchNorm, LayerCache::Input(x)) => {
                let (dx, dg, db) = ops::batch_norm_infer_backward(
                    x,
                    self.weight("gamma")?,
                    self.weight("moving_mean")?,
                    self.weight("moving_var")?,
                    grad_out,
                )?;
                Ok((dx, vec![dg, db]))
            }
            (LayerKind::ReLU, LayerCache::Input(x)) => Ok((ops::relu_backward(x, grad_out)?, vec![])),
            (LayerKind::GlobalAvgPool, LayerCache::Pool(shape)) => {
                Ok((ops::global_avg_pool_backward(*shape, grad_out)?, vec![]))
            }
            (LayerKind::Dense, LayerCache::Input(x)) => {
                let (dx, dw, db) = ops::dense_backward(x, self.weight("weight")?, grad_out)?;
                Ok((dx, vec![dw, db]))
            }
            (kind, _) => Err(Error::invalid(format!("cache does not belong to a {} layer", kind.name()))),
        }
    }

    /// Fold training-mode batch statistics into the moving averages.
    pub fn update_moving_stats(&mut self, cache: &LayerCache<T>) {
        if let (LayerKind::BatchNorm, LayerCache::BatchNormTrain(stats)) = (self.kind, cache) {
            let m = T::from_f64_lossy(BN_MOMENTUM);
            let one_minus = T::one() - m;
            if let Some(mean) = self.weights.get_mut("moving_mean") {
                for (mv, &b) in mean.data_mut().iter_mut().zip(&stats.mean) {
                    *mv = m * *mv + one_minus * b;
                }
            }
            if let Some(var) = self.weights.get_mut("moving_var") {
                for (mv, &b) in var.data_mut().iter_mut().zip(&stats.var) {
                    *mv = m * *mv + one_minus * b;
                }
            }
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.kind.trainable_names().iter().filter_map(|n| self.weights.get(*n))
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let names = self.kind.trainable_names();
        let mut found: Vec<(usize, &mut Tensor<T>)> = self
            .weights
            .iter_mut()
            .filter_map(|(k, v)| names.iter().position(|n| n == k).map(|i| (i, v)))
            .collect();
        found.sort_by_key(|(i, _)| *i);
        found.into_iter().map(|(_, v)| v).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            kind: self.kind,
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stride: self.stride,
            padding: self.padding,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }
}

fn check_geometry(in_channels: usize, out_channels: usize, stride: usize) -> Result<()> {
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::invalid("channel counts must be positive"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    Ok(())
}
