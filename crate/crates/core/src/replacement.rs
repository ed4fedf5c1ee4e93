//! Depthwise-separable replacement blocks.
//!
//! A replacement "unit" is depthwise 3×3 → pointwise 1×1 → batch norm →
//! ReLU. Candidates stack two or three units, optionally with a residual
//! connection added before the final ReLU.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{random_tensor, Case, DifferentiableOp};
use crate::tensor::{ops, LayerCache, LayerKind, LayerParams, Mode, Scalar, Shape, Tensor};

/// The four candidate replacement architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    TwoLayer,
    ThreeLayer,
    TwoLayerSkip,
    ThreeLayerSkip,
}

impl CandidateKind {
    pub const ALL: [CandidateKind; 4] = [
        CandidateKind::TwoLayer,
        CandidateKind::ThreeLayer,
        CandidateKind::TwoLayerSkip,
        CandidateKind::ThreeLayerSkip,
    ];

    pub fn units(self) -> usize {
        match self {
            CandidateKind::TwoLayer | CandidateKind::TwoLayerSkip => 2,
            CandidateKind::ThreeLayer | CandidateKind::ThreeLayerSkip => 3,
        }
    }

    pub fn has_skip(self) -> bool {
        matches!(self, CandidateKind::TwoLayerSkip | CandidateKind::ThreeLayerSkip)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CandidateKind::TwoLayer => "two_layer",
            CandidateKind::ThreeLayer => "three_layer",
            CandidateKind::TwoLayerSkip => "two_layer_skip",
            CandidateKind::ThreeLayerSkip => "three_layer_skip",
        }
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CandidateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CandidateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown candidate architecture `{s}`")))
    }
}

/// Geometry of the convolution being replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplacedConv {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ReplacedConv {
    /// A 3×3 convolution with "same" padding.
    pub fn new(c_in: usize, c_out: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            stride,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Skip<T: Scalar = f32> {
    Identity,
    /// Strided 1×1 convolution used when the shapes differ.
    Projection(LayerParams<T>),
}

/// A student block standing in for one teacher convolution block.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplacementBlock<T: Scalar = f32> {
    pub kind: CandidateKind,
    /// Units flattened in order: depthwise, pointwise, batch norm, ReLU.
    pub layers: Vec<LayerParams<T>>,
    pub skip: Option<Skip<T>>,
    pub target_block: usize,
    pub geometry: ReplacedConv,
}

/// Everything a [`ReplacementBlock`] forward pass saves for backward.
#[derive(Clone, Debug)]
pub struct ReplacementCache<T: Scalar> {
    layers: Vec<LayerCache<T>>,
    skip: Option<LayerCache<T>>,
    pre_activation: Tensor<T>,
}

/// Layers per unit: depthwise, pointwise, batch norm, ReLU.
const UNIT_LEN: usize = 4;

/// Build one of the four candidates, seeded deterministically.
pub fn build_candidate<T: Scalar>(
    kind: CandidateKind,
    geometry: ReplacedConv,
    target_block: usize,
    seed: u64,
) -> Result<ReplacementBlock<T>> {
    let ReplacedConv {
        c_in,
        c_out,
        stride,
        padding,
    } = geometry;
    if c_in == 0 || c_out == 0 {
        return Err(Error::invalid("replacement channels must be positive"));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!("replacement stride must be 1 or 2, got {stride}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(kind.units() * UNIT_LEN);
    for unit in 0..kind.units() {
        let (cin, s, p) = if unit == 0 {
            (c_in, stride, padding)
        } else {
            (c_out, 1, 1)
        };
        layers.push(LayerParams::depthwise(cin, s, p, &mut rng)?);
        layers.push(LayerParams::pointwise(cin, c_out, &mut rng)?);
        layers.push(LayerParams::batch_norm(c_out));
        layers.push(LayerParams::relu(c_out));
    }
    let skip = if kind.has_skip() {
        if c_in == c_out && stride == 1 {
            Some(Skip::Identity)
        } else {
            Some(Skip::Projection(LayerParams::conv(
                crate::tensor::LayerKind::Conv1x1,
                c_in,
                c_out,
                stride,
                0,
                &mut rng,
            )?))
        }
    } else {
        None
    };
    Ok(ReplacementBlock {
        kind,
        layers,
        skip,
        target_block,
        geometry,
    })
}

/// The selected architecture: two depthwise-separable units, no skip.
pub fn default_replacement<T: Scalar>(
    geometry: ReplacedConv,
    target_block: usize,
    seed: u64,
) -> Result<ReplacementBlock<T>> {
    build_candidate(CandidateKind::TwoLayer, geometry, target_block, seed)
}

impl<T: Scalar> ReplacementBlock<T> {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut s = input;
        for l in &self.layers {
            s = l.output_shape(s)?;
        }
        Ok(s)
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ReplacementCache<T>)> {
        let (last, body) = self.layers.split_last().expect("at least one unit");
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for l in body {
            let (y, c) = l.forward(&h, mode)?;
            caches.push(c);
            h = y;
        }
        let mut skip_cache = None;
        match &self.skip {
            Some(Skip::Identity) => h = ops::add(&h, input)?,
            Some(Skip::Projection(p)) => {
                let (y, c) = p.forward(input, mode)?;
                skip_cache = Some(c);
                h = ops::add(&h, &y)?;
            }
            None => {}
        }
        let (out, c) = last.forward(&h, mode)?;
        caches.push(c);
        Ok((
            out,
            ReplacementCache {
                layers: caches,
                skip: skip_cache,
                pre_activation: h,
            },
        ))
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Infer)?.0)
    }

    /// Input gradient plus gradients in [`ReplacementBlock::trainable_mut`] order.
    pub fn backward(&self, cache: &ReplacementCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let last = self.layers.len() - 1;
        let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let (junction, dp) = self.layers[last].backward(&cache.layers[last], grad_out)?;
        per_layer[last] = dp;
        let mut g = junction.clone();
        for idx in (0..last).rev() {
            let (dx, dp) = self.layers[idx].backward(&cache.layers[idx], &g)?;
            per_layer[idx] = dp;
            g = dx;
        }
        let mut grads: Vec<Tensor<T>> = per_layer.into_iter().flatten().collect();
        match (&self.skip, &cache.skip) {
            (None, _) => {}
            (Some(Skip::Identity), _) => g = ops::add(&g, &junction)?,
            (Some(Skip::Projection(p)), Some(c)) => {
                let (dx, dp) = p.backward(c, &junction)?;
                g = ops::add(&g, &dx)?;
                grads.extend(dp);
            }
            (Some(Skip::Projection(_)), None) => {
                return Err(Error::invalid("projection skip without cache"));
            }
        }
        Ok((g, grads))
    }

    pub fn update_moving_stats(&mut self, cache: &ReplacementCache<T>) {
        for (l, c) in self.layers.iter_mut().zip(&cache.layers) {
            l.update_moving_stats(c);
        }
        if let (Some(Skip::Projection(p)), Some(c)) = (self.skip.as_mut(), cache.skip.as_ref()) {
            p.update_moving_stats(c);
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.layers.iter_mut().flat_map(|l| l.trainable_mut()).collect();
        if let Some(Skip::Projection(p)) = self.skip.as_mut() {
            out.extend(p.trainable_mut());
        }
        out
    }

    /// Every layer including a skip projection, for cost accounting.
    pub fn all_layers(&self) -> Vec<&LayerParams<T>> {
        let mut v: Vec<&LayerParams<T>> = self.layers.iter().collect();
        if let Some(Skip::Projection(p)) = &self.skip {
            v.push(p);
        }
        v
    }

    pub fn pre_activation<'a>(&self, cache: &'a ReplacementCache<T>) -> &'a Tensor<T> {
        &cache.pre_activation
    }

    /// Named weight arrays under `prefix`, e.g. `block2.rep.two_layer.l0.weight`.
    pub fn named_weights(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (j, l) in self.layers.iter().enumerate() {
            for (name, t) in &l.weights {
                out.push((format!("{prefix}.l{j}.{name}"), t));
            }
        }
        if let Some(Skip::Projection(p)) = &self.skip {
            for (name, t) in &p.weights {
                out.push((format!("{prefix}.skip.{name}"), t));
            }
        }
        out
    }

    pub fn named_weights_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (j, l) in self.layers.iter_mut().enumerate() {
            for (name, t) in l.weights.iter_mut() {
                out.push((format!("{prefix}.l{j}.{name}"), t));
            }
        }
        if let Some(Skip::Projection(p)) = self.skip.as_mut() {
            for (name, t) in p.weights.iter_mut() {
                out.push((format!("{prefix}.skip.{name}"), t));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ReplacementBlock<U> {
        ReplacementBlock {
            kind: self.kind,
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            skip: self.skip.as_ref().map(|s| match s {
                Skip::Identity => Skip::Identity,
                Skip::Projection(p) => Skip::Projection(p.cast()),
            }),
            target_block: self.target_block,
            geometry: self.geometry,
        }
    }
}

/// A replacement block as a gradient-checkable op. Inputs are the block
/// input followed by every trainable weight.
#[derive(Clone, Debug)]
pub struct ReplacementOp(pub ReplacementBlock<f64>);

impl ReplacementOp {
    pub fn point(&self, input: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut b = self.0.clone();
        let mut v = vec![input];
        v.extend(b.trainable_mut().into_iter().map(|t| t.clone()));
        v
    }

    fn with_params(&self, inputs: &[Tensor<f64>]) -> ReplacementBlock<f64> {
        let mut b = self.0.clone();
        for (p, v) in b.trainable_mut().into_iter().zip(&inputs[1..]) {
            *p = v.clone();
        }
        b
    }
}

impl DifferentiableOp for ReplacementOp {
    fn name(&self) -> String {
        format!("replacement_{}", self.0.kind)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        let b = self.with_params(inputs);
        let (y, c) = b.forward(&inputs[0], Mode::Train)?;
        let mut pattern: Vec<bool> = b
            .layers
            .iter()
            .zip(&c.layers)
            .filter_map(|(l, c)| match c {
                LayerCache::Input(x) if l.kind == LayerKind::ReLU => Some(x),
                _ => None,
            })
            .flat_map(|x| x.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect();
        pattern.extend(c.pre_activation.data().iter().map(|&v| v > 0.0));
        Ok((y, pattern))
    }

    fn vjp(&self, inputs: &[Tensor<f64>], g: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let b = self.with_params(inputs);
        let (_, c) = b.forward(&inputs[0], Mode::Train)?;
        let (dx, dp) = b.backward(&c, g)?;
        let mut out = vec![dx];
        out.extend(dp);
        Ok(out)
    }
}

/// Every candidate at a fresh random point, as gradient-check cases.
pub fn candidate_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CandidateKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let geo = if i % 2 == 0 {
                ReplacedConv::new(2, 3, 2)
            } else {
                ReplacedConv::new(3, 3, 1)
            };
            let op = ReplacementOp(build_candidate(kind, geo, 0, seed.wrapping_add(i as u64))?);
            let point = op.point(random_tensor(Shape::new(3, geo.c_in, 5, 5), &mut rng));
            Ok(Case::new(op, point))
        })
        .collect()
}
