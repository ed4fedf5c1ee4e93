//! Networks as a sequence of blocks followed by a classifier.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::replacement::{ReplacedConv, ReplacementBlock, ReplacementCache};
use crate::tensor::{LayerCache, LayerParams, Mode, Scalar, Shape, Tensor};

use super::spec::{ClassifierLayer, ModelSpec};

/// Forward through a plain layer stack, keeping caches.
pub fn seq_forward<T: Scalar>(
    layers: &[LayerParams<T>],
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = input.clone();
    for l in layers {
        let (y, c) = l.forward(&x, mode)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

/// Backward through a plain layer stack; parameter gradients come back in
/// layer order.
pub fn seq_backward<T: Scalar>(
    layers: &[LayerParams<T>],
    caches: &[LayerCache<T>],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); layers.len()];
    let mut g = grad_out.clone();
    for (idx, (l, c)) in layers.iter().zip(caches).enumerate().rev() {
        let (dx, dp) = l.backward(c, &g)?;
        per_layer[idx] = dp;
        g = dx;
    }
    Ok((g, per_layer.into_iter().flatten().collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<T: Scalar = f32> {
    /// Conv, optional batch norm, optional ReLU.
    Teacher(Vec<LayerParams<T>>),
    Replacement(ReplacementBlock<T>),
}

#[derive(Clone, Debug)]
pub enum BlockCache<T: Scalar> {
    Teacher(Vec<LayerCache<T>>),
    Replacement(ReplacementCache<T>),
}

impl<T: Scalar> Block<T> {
    pub fn is_replacement(&self) -> bool {
        matches!(self, Block::Replacement(_))
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockCache<T>)> {
        match self {
            Block::Teacher(layers) => {
                let (y, c) = seq_forward(layers, input, mode)?;
                Ok((y, BlockCache::Teacher(c)))
            }
            Block::Replacement(r) => {
                let (y, c) = r.forward(input, mode)?;
                Ok((y, BlockCache::Replacement(c)))
            }
        }
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Infer)?.0)
    }

    pub fn backward(&self, cache: &BlockCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match (self, cache) {
            (Block::Teacher(layers), BlockCache::Teacher(c)) => seq_backward(layers, c, grad_out),
            (Block::Replacement(r), BlockCache::Replacement(c)) => r.backward(c, grad_out),
            _ => Err(Error::invalid("block cache does not match block type")),
        }
    }

    pub fn update_moving_stats(&mut self, cache: &BlockCache<T>) {
        match (self, cache) {
            (Block::Teacher(layers), BlockCache::Teacher(c)) => {
                for (l, c) in layers.iter_mut().zip(c) {
                    l.update_moving_stats(c);
                }
            }
            (Block::Replacement(r), BlockCache::Replacement(c)) => r.update_moving_stats(c),
            _ => {}
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Block::Teacher(layers) => layers.iter_mut().flat_map(|l| l.trainable_mut()).collect(),
            Block::Replacement(r) => r.trainable_mut(),
        }
    }

    /// Every layer, including a skip projection.
    pub fn layers(&self) -> Vec<&LayerParams<T>> {
        match self {
            Block::Teacher(layers) => layers.iter().collect(),
            Block::Replacement(r) => r.all_layers(),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Block::Teacher(layers) => layers.iter().try_fold(input, |s, l| l.output_shape(s)),
            Block::Replacement(r) => r.output_shape(input),
        }
    }

    fn named_weights(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        match self {
            Block::Teacher(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(j, l)| l.weights.iter().map(move |(n, t)| (format!("{prefix}.l{j}.{n}"), t)))
                .collect(),
            Block::Replacement(r) => r.named_weights(&format!("{prefix}.rep.{}", r.kind)),
        }
    }

    fn named_weights_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Block::Teacher(layers) => layers
                .iter_mut()
                .enumerate()
                .flat_map(|(j, l)| {
                    l.weights
                        .iter_mut()
                        .map(move |(n, t)| (format!("{prefix}.l{j}.{n}"), t))
                })
                .collect(),
            Block::Replacement(r) => {
                let p = format!("{prefix}.rep.{}", r.kind);
                r.named_weights_mut(&p)
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        match self {
            Block::Teacher(layers) => Block::Teacher(layers.iter().map(|l| l.cast()).collect()),
            Block::Replacement(r) => Block::Replacement(r.cast()),
        }
    }
}

/// Saved state of a full training-mode forward pass.
#[derive(Clone, Debug)]
pub struct NetworkCache<T: Scalar> {
    pub blocks: Vec<BlockCache<T>>,
    pub classifier: Vec<LayerCache<T>>,
}

/// Gradients of a full backward pass. `None` marks a frozen part.
#[derive(Clone, Debug)]
pub struct NetworkGrads<T: Scalar> {
    pub blocks: Vec<Option<Vec<Tensor<T>>>>,
    pub classifier: Option<Vec<Tensor<T>>>,
}

/// Which parts of a network receive gradient updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub blocks: Vec<bool>,
    pub classifier: bool,
}

impl Trainable {
    pub fn all(blocks: usize) -> Self {
        Self {
            blocks: vec![true; blocks],
            classifier: true,
        }
    }

    pub fn any(&self) -> bool {
        self.classifier || self.blocks.iter().any(|&b| b)
    }
}

/// A network: feature blocks `f_1..f_k` and a classifier `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub classifier: Vec<LayerParams<T>>,
}

impl<T: Scalar> Network<T> {
    /// Instantiate a spec with seeded initial weights.
    pub fn from_spec(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let mut layers = vec![LayerParams::conv(
                b.kind,
                b.in_channels,
                b.out_channels,
                b.stride,
                b.padding,
                &mut rng,
            )?];
            if b.batch_norm {
                layers.push(LayerParams::batch_norm(b.out_channels));
            }
            if b.relu {
                layers.push(LayerParams::relu(b.out_channels));
            }
            blocks.push(Block::Teacher(layers));
        }
        let last_channels = spec.blocks.last().map_or(spec.input_shape[0], |b| b.out_channels);
        let mut classifier = Vec::new();
        for c in &spec.classifier {
            classifier.push(match *c {
                ClassifierLayer::GlobalAvgPool => LayerParams::global_avg_pool(last_channels),
                ClassifierLayer::Dense {
                    in_features,
                    out_features,
                } => LayerParams::dense(in_features, out_features, &mut rng)?,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
            classifier,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn block_name(&self, k: usize) -> &str {
        &self.spec.blocks[k].name
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        let [c, h, w] = self.spec.input_shape;
        Shape::new(batch, c, h, w)
    }

    /// Input shape of every block followed by the output of the last one.
    pub fn block_shapes(&self, batch: usize) -> Result<Vec<Shape>> {
        let mut shapes = vec![self.input_shape(batch)];
        for b in &self.blocks {
            let s = b.output_shape(*shapes.last().expect("non-empty"))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn identify_replaceable(&self) -> Vec<usize> {
        self.spec.identify_replaceable()
    }

    pub fn replaced_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&k| self.blocks[k].is_replacement()).collect()
    }

    fn check_block(&self, k: usize) -> Result<()> {
        if k >= self.blocks.len() {
            return Err(Error::invalid(format!(
                "block index {k} out of range for {} blocks",
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Geometry of the convolution a replacement for block `k` must match.
    pub fn replaced_conv(&self, k: usize) -> Result<ReplacedConv> {
        self.check_block(k)?;
        if !self.identify_replaceable().contains(&k) {
            return Err(Error::invalid(format!("block {k} (`{}`) is not replaceable", self.block_name(k))));
        }
        let b = &self.spec.blocks[k];
        Ok(ReplacedConv {
            c_in: b.in_channels,
            c_out: b.out_channels,
            stride: b.stride,
            padding: b.padding,
        })
    }

    /// Feature blocks `0..=k` (inclusive) or `0..k` (exclusive), without a
    /// classifier. Block indices are 0-based.
    pub fn subnetwork_prefix(&self, k: usize, inclusive: bool) -> Result<Network<T>> {
        self.check_block(k)?;
        let end = if inclusive { k + 1 } else { k };
        let mut spec = self.spec.clone();
        spec.blocks.truncate(end);
        spec.classifier.clear();
        Ok(Network {
            spec,
            blocks: self.blocks[..end].to_vec(),
            classifier: Vec::new(),
        })
    }

    /// Swap block `k` for a replacement with matching shapes.
    pub fn with_replacement(&self, k: usize, block: ReplacementBlock<T>) -> Result<Network<T>> {
        let geometry = self.replaced_conv(k)?;
        if block.geometry.c_in != geometry.c_in
            || block.geometry.c_out != geometry.c_out
            || block.geometry.stride != geometry.stride
        {
            return Err(Error::shape(format!(
                "replacement {:?} does not fit block {k} {:?}",
                block.geometry, geometry
            )));
        }
        let mut net = self.clone();
        net.blocks[k] = Block::Replacement(block);
        Ok(net)
    }

    /// Run blocks in `range` in inference mode.
    pub fn forward_blocks(&self, input: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        if range.end > self.blocks.len() {
            return Err(Error::invalid(format!(
                "block range {range:?} exceeds {} blocks",
                self.blocks.len()
            )));
        }
        let mut x = input.clone();
        for b in &self.blocks[range] {
            x = b.infer(&x)?;
        }
        Ok(x)
    }

    pub fn features(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_blocks(input, 0..self.blocks.len())
    }

    pub fn classify(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if self.classifier.is_empty() {
            return Err(Error::invalid("network has no classifier"));
        }
        let mut x = features.clone();
        for l in &self.classifier {
            x = l.infer(&x)?;
        }
        Ok(x)
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.classify(&self.features(input)?)
    }

    /// Training-mode forward for trainable parts; frozen parts run in
    /// inference mode so their batch-norm statistics stay fixed.
    pub fn forward_train(&self, input: &Tensor<T>, trainable: &Trainable) -> Result<(Tensor<T>, NetworkCache<T>)> {
        let mode = |t: bool| if t { Mode::Train } else { Mode::Infer };
        let mut x = input.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, &t) in self.blocks.iter().zip(&trainable.blocks) {
            let (y, c) = b.forward(&x, mode(t))?;
            blocks.push(c);
            x = y;
        }
        let (logits, classifier) = seq_forward(&self.classifier, &x, mode(trainable.classifier))?;
        Ok((logits, NetworkCache { blocks, classifier }))
    }

    /// Backpropagate from the logits, stopping below the earliest trainable
    /// block.
    pub fn backward(
        &self,
        cache: &NetworkCache<T>,
        grad_logits: &Tensor<T>,
        trainable: &Trainable,
    ) -> Result<NetworkGrads<T>> {
        let (mut g, cls) = seq_backward(&self.classifier, &cache.classifier, grad_logits)?;
        let mut grads = NetworkGrads {
            blocks: vec![None; self.blocks.len()],
            classifier: trainable.classifier.then_some(cls),
        };
        let Some(first) = trainable.blocks.iter().position(|&t| t) else {
            return Ok(grads);
        };
        for k in (first..self.blocks.len()).rev() {
            let (dx, dp) = self.blocks[k].backward(&cache.blocks[k], &g)?;
            if trainable.blocks[k] {
                grads.blocks[k] = Some(dp);
            }
            g = dx;
        }
        Ok(grads)
    }

    pub fn update_moving_stats(&mut self, cache: &NetworkCache<T>, trainable: &Trainable) {
        for ((b, c), &t) in self.blocks.iter_mut().zip(&cache.blocks).zip(&trainable.blocks) {
            if t {
                b.update_moving_stats(c);
            }
        }
        if trainable.classifier {
            for (l, c) in self.classifier.iter_mut().zip(&cache.classifier) {
                l.update_moving_stats(c);
            }
        }
    }

    /// Trainable tensors in the order [`Network::backward`] reports them.
    pub fn trainable_mut(&mut self, trainable: &Trainable) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (b, &t) in self.blocks.iter_mut().zip(&trainable.blocks) {
            if t {
                out.extend(b.trainable_mut());
            }
        }
        if trainable.classifier {
            out.extend(self.classifier.iter_mut().flat_map(|l| l.trainable_mut()));
        }
        out
    }

    /// Every stored array with a stable, self-describing name.
    pub fn named_weights(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_weights(&self.spec.blocks[k].name));
        }
        for (j, l) in self.classifier.iter().enumerate() {
            out.extend(l.weights.iter().map(|(n, t)| (format!("classifier.l{j}.{n}"), t)));
        }
        out
    }

    pub fn named_weights_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (b, spec) in self.blocks.iter_mut().zip(&self.spec.blocks) {
            out.extend(b.named_weights_mut(&spec.name));
        }
        for (j, l) in self.classifier.iter_mut().enumerate() {
            out.extend(l.weights.iter_mut().map(|(n, t)| (format!("classifier.l{j}.{n}"), t)));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            classifier: self.classifier.iter().map(|l| l.cast()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replacement::default_replacement;

    fn toy() -> Network {
        Network::from_spec(&ModelSpec::bundled("toy_teacher").unwrap(), 3).unwrap()
    }

    #[test]
    fn prefix_shapes() {
        let net = toy();
        let empty = net.subnetwork_prefix(0, false).unwrap();
        assert!(empty.blocks.is_empty());
        let x = Tensor::filled(net.input_shape(2), 0.5);
        assert_eq!(empty.features(&x).unwrap(), x);

        let all = net.subnetwork_prefix(2, true).unwrap();
        assert_eq!(all.blocks.len(), 3);
        assert!(all.classifier.is_empty());
        assert!(all.logits(&x).is_err());

        let two = net.subnetwork_prefix(1, true).unwrap();
        let shapes = net.block_shapes(2).unwrap();
        assert_eq!(two.features(&x).unwrap().shape(), shapes[2]);
        assert_eq!(shapes[2], Shape::new(2, 32, 8, 8));
        assert!(net.subnetwork_prefix(3, true).is_err());
    }

    #[test]
    fn logits_shape_and_determinism() {
        let net = toy();
        assert_eq!(net, toy());
        let x = Tensor::filled(net.input_shape(4), 0.1);
        assert_eq!(net.logits(&x).unwrap().shape(), Shape::new(4, 10, 1, 1));
    }

    #[test]
    fn replacement_swaps_one_block() {
        let net = toy();
        let geo = net.replaced_conv(1).unwrap();
        let rep = default_replacement(geo, 1, 9).unwrap();
        let student = net.with_replacement(1, rep).unwrap();
        assert_eq!(student.replaced_blocks(), vec![1]);
        assert_eq!(student.blocks[0], net.blocks[0]);
        assert_eq!(student.block_shapes(1).unwrap(), net.block_shapes(1).unwrap());
        let wrong = default_replacement(net.replaced_conv(0).unwrap(), 0, 9).unwrap();
        assert!(net.with_replacement(1, wrong).is_err());
        assert!(student
            .named_weights()
            .iter()
            .any(|(n, _)| n.starts_with("conv2.rep.two_layer.l0.")));
    }

    #[test]
    fn frozen_backward_reports_only_trainable_parts() {
        let net = toy();
        let trainable = Trainable {
            blocks: vec![false, true, false],
            classifier: false,
        };
        let x = Tensor::filled(net.input_shape(2), 0.3);
        let (logits, cache) = net.forward_train(&x, &trainable).unwrap();
        let g = Tensor::filled(logits.shape(), 1.0);
        let grads = net.backward(&cache, &g, &trainable).unwrap();
        assert!(grads.blocks[0].is_none() && grads.blocks[2].is_none());
        assert!(grads.classifier.is_none());
        assert_eq!(grads.blocks[1].as_ref().unwrap().len(), 3);
        let mut net = net;
        assert_eq!(net.trainable_mut(&trainable).len(), 3);
    }
}
