//! Central finite-difference verification of analytic gradients.
//!
//! An operation is reduced to the scalar `⟨op(inputs), P⟩` for a fixed random
//! projection `P`; the analytic vector-Jacobian product is then compared
//! against central differences coordinate by coordinate, in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::layer::{LayerCache, LayerKind, LayerParams, Mode};
use super::{ops, Shape, Tensor};

/// Something whose gradient can be checked numerically.
pub trait DifferentiableOp {
    fn name(&self) -> String;

    /// Output, plus the on/off pattern of every piecewise-linear unit. Two
    /// points with different patterns straddle a kink.
    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)>;

    /// Gradient of `⟨output, grad_out⟩` with respect to each input.
    fn vjp(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, flat coordinate)` pairs skipped because the
    /// perturbation crossed a ReLU kink.
    pub skipped_kinks: Vec<(usize, usize)>,
}

/// Compare analytic and central-difference gradients on up to
/// `coords_per_input` randomly chosen coordinates of every input.
pub fn gradient_check(
    op: &dyn DifferentiableOp,
    point: &[Tensor<f64>],
    epsilon: f64,
    coords_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-6, 1e-2]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, base_pattern) = op.forward(point)?;
    let proj_data: Vec<f64> = (0..out.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let proj = Tensor::from_vec(out.shape(), proj_data)?;
    let analytic = op.vjp(point, &proj)?;
    if analytic.len() != point.len() {
        return Err(Error::shape(format!(
            "{}: {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            point.len()
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: Vec::new(),
    };
    let mut probe = point.to_vec();
    for (i, input) in point.iter().enumerate() {
        analytic[i].expect_shape(input.shape(), "analytic gradient")?;
        let coords: Vec<usize> = if coords_per_input == 0 || coords_per_input >= input.len() {
            (0..input.len()).collect()
        } else {
            sample(&mut rng, input.len(), coords_per_input).into_vec()
        };
        for j in coords {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + epsilon;
            let (plus, pat_plus) = op.forward(&probe)?;
            probe[i].data_mut()[j] = orig - epsilon;
            let (minus, pat_minus) = op.forward(&probe)?;
            probe[i].data_mut()[j] = orig;
            if pat_plus != base_pattern || pat_minus != base_pattern {
                report.skipped_kinks.push((i, j));
                continue;
            }
            let numeric = (plus.dot(&proj)? - minus.dot(&proj)?) / (2.0 * epsilon);
            let err = (analytic[i].data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn relu_pattern(layer: &LayerParams<f64>, cache: &LayerCache<f64>, pattern: &mut Vec<bool>) {
    if let (LayerKind::ReLU, LayerCache::Input(x)) = (layer.kind, cache) {
        pattern.extend(x.data().iter().map(|&v| v > 0.0));
    }
}

/// A stack of layers checked with respect to its input and every trainable
/// weight. Inputs are `[x, w_1, w_2, ...]` in layer order.
#[derive(Clone, Debug)]
pub struct SequentialOp {
    pub layers: Vec<LayerParams<f64>>,
    pub mode: Mode,
}

impl SequentialOp {
    pub fn new(layers: Vec<LayerParams<f64>>, mode: Mode) -> Self {
        Self { layers, mode }
    }

    /// The input tensor followed by every trainable weight.
    pub fn point(&self, input: Tensor<f64>) -> Vec<Tensor<f64>> {
        let mut v = vec![input];
        for l in &self.layers {
            v.extend(l.trainable().cloned());
        }
        v
    }

    fn with_params(&self, inputs: &[Tensor<f64>]) -> Result<Vec<LayerParams<f64>>> {
        let mut layers = self.layers.clone();
        let mut it = inputs.iter().skip(1);
        for l in &mut layers {
            for p in l.trainable_mut() {
                *p = it
                    .next()
                    .ok_or_else(|| Error::invalid("too few inputs for the layer stack"))?
                    .clone();
            }
        }
        Ok(layers)
    }
}

impl DifferentiableOp for SequentialOp {
    fn name(&self) -> String {
        let names: Vec<_> = self.layers.iter().map(|l| l.kind.name()).collect();
        format!("{}[{:?}]", names.join("+"), self.mode)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        let layers = self.with_params(inputs)?;
        let mut x = inputs[0].clone();
        let mut pattern = Vec::new();
        for l in &layers {
            let (y, cache) = l.forward(&x, self.mode)?;
            relu_pattern(l, &cache, &mut pattern);
            x = y;
        }
        Ok((x, pattern))
    }

    fn vjp(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let layers = self.with_params(inputs)?;
        let mut x = inputs[0].clone();
        let mut caches = Vec::with_capacity(layers.len());
        for l in &layers {
            let (y, cache) = l.forward(&x, self.mode)?;
            caches.push(cache);
            x = y;
        }
        let mut g = grad_out.clone();
        let mut param_grads: Vec<Vec<Tensor<f64>>> = vec![Vec::new(); layers.len()];
        for (idx, (l, cache)) in layers.iter().zip(&caches).enumerate().rev() {
            let (dx, dp) = l.backward(cache, &g)?;
            param_grads[idx] = dp;
            g = dx;
        }
        let mut out = vec![g];
        out.extend(param_grads.into_iter().flatten());
        Ok(out)
    }
}

/// Elementwise sum of two tensors.
pub struct AddOp;

impl DifferentiableOp for AddOp {
    fn name(&self) -> String {
        "add".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        Ok((ops::add(&inputs[0], &inputs[1])?, Vec::new()))
    }

    fn vjp(&self, _inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![grad_out.clone(), grad_out.clone()])
    }
}

/// Mean-squared local loss with respect to the student activations.
pub struct MseOp {
    pub target: Tensor<f64>,
}

impl DifferentiableOp for MseOp {
    fn name(&self) -> String {
        "mse_local_loss".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        let (l, _) = ops::mse_local_loss(&inputs[0], &self.target)?;
        Ok((Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![l])?, Vec::new()))
    }

    fn vjp(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, g) = ops::mse_local_loss(&inputs[0], &self.target)?;
        Ok(vec![g.scale(grad_out.data()[0])])
    }
}

/// Softmax cross-entropy with respect to the logits.
pub struct CrossEntropyOp {
    pub labels: Vec<usize>,
}

impl DifferentiableOp for CrossEntropyOp {
    fn name(&self) -> String {
        "softmax_cross_entropy".into()
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        let (l, _) = ops::softmax_cross_entropy(&inputs[0], &self.labels)?;
        Ok((Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![l])?, Vec::new()))
    }

    fn vjp(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, g) = ops::softmax_cross_entropy(&inputs[0], &self.labels)?;
        Ok(vec![g.scale(grad_out.data()[0])])
    }
}

/// Wraps another op and multiplies its analytic gradient by a constant.
/// Used as a negative control for the checker.
pub struct ScaledGradient<O> {
    pub inner: O,
    pub factor: f64,
}

impl<O: DifferentiableOp> DifferentiableOp for ScaledGradient<O> {
    fn name(&self) -> String {
        format!("{}×{}", self.inner.name(), self.factor)
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Vec<bool>)> {
        self.inner.forward(inputs)
    }

    fn vjp(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(self
            .inner
            .vjp(inputs, grad_out)?
            .into_iter()
            .map(|g| g.scale(self.factor))
            .collect())
    }
}

/// A random `N(0, 1)` tensor, handy for building check points.
pub fn random_tensor(shape: Shape, rng: &mut impl rand::Rng) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// One op at one random point.
pub struct Case {
    pub label: String,
    pub op: Box<dyn DifferentiableOp>,
    pub point: Vec<Tensor<f64>>,
}

impl Case {
    pub fn new(op: impl DifferentiableOp + 'static, point: Vec<Tensor<f64>>) -> Self {
        Self {
            label: op.name(),
            op: Box::new(op),
            point,
        }
    }
}

fn layer_case(layer: LayerParams<f64>, mode: Mode, input: Shape, rng: &mut ChaCha8Rng) -> Case {
    let label = format!("{}/s{}/{mode:?}", layer.kind.name(), layer.stride);
    let op = SequentialOp::new(vec![layer], mode);
    let point = op.point(random_tensor(input, rng));
    Case { label, ..Case::new(op, point) }
}

/// Every layer kind and loss at a fresh random point drawn from `seed`.
pub fn layer_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let conv = |kind, cin, cout, stride, pad, r: &mut ChaCha8Rng| -> Result<LayerParams<f64>> {
        Ok(LayerParams::<f32>::conv(kind, cin, cout, stride, pad, r)?.cast())
    };
    let img = |c| Shape::new(2, c, 5, 5);
    let mut cases = vec![
        layer_case(conv(LayerKind::Conv3x3, 2, 3, 1, 1, r)?, Mode::Train, img(2), r),
        layer_case(conv(LayerKind::Conv3x3, 2, 3, 2, 1, r)?, Mode::Train, img(2), r),
        layer_case(conv(LayerKind::Conv1x1, 3, 2, 2, 0, r)?, Mode::Train, img(3), r),
        layer_case(LayerParams::<f32>::depthwise(3, 1, 1, r)?.cast(), Mode::Train, img(3), r),
        layer_case(LayerParams::<f32>::depthwise(3, 2, 1, r)?.cast(), Mode::Train, img(3), r),
        layer_case(LayerParams::<f32>::pointwise(3, 4, r)?.cast(), Mode::Train, img(3), r),
        layer_case(LayerParams::batch_norm(3), Mode::Train, Shape::new(4, 3, 3, 3), r),
        layer_case(LayerParams::batch_norm(3), Mode::Infer, img(3), r),
        layer_case(LayerParams::relu(3), Mode::Train, img(3), r),
        layer_case(LayerParams::global_avg_pool(3), Mode::Train, img(3), r),
        layer_case(LayerParams::<f32>::dense(6, 4, r)?.cast(), Mode::Train, Shape::new(3, 6, 1, 1), r),
    ];
    let shape = img(3);
    cases.push(Case::new(AddOp, vec![random_tensor(shape, r), random_tensor(shape, r)]));
    cases.push(Case::new(
        MseOp {
            target: random_tensor(shape, r),
        },
        vec![random_tensor(shape, r)],
    ));
    let labels = (0..4).map(|_| r.random_range(0..5)).collect();
    cases.push(Case::new(CrossEntropyOp { labels }, vec![random_tensor(Shape::new(4, 5, 1, 1), r)]));
    Ok(cases)
}

/// Worst result of one op over many random points.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// Check the cases produced by `cases` for seeds `seed..seed + points`,
/// grouping by op name in first-seen order.
pub fn check_many(
    cases: impl Fn(u64) -> Result<Vec<Case>>,
    points: usize,
    seed: u64,
    epsilon: f64,
    coords_per_input: usize,
) -> Result<Vec<OpCheck>> {
    let mut out: Vec<OpCheck> = Vec::new();
    for p in 0..points as u64 {
        for case in cases(seed + p)? {
            let rep = gradient_check(case.op.as_ref(), &case.point, epsilon, coords_per_input, seed ^ p)?;
            let name = case.label;
            let slot = match out.iter().position(|c| c.op == name) {
                Some(i) => &mut out[i],
                None => {
                    out.push(OpCheck {
                        op: name,
                        points: 0,
                        checked: 0,
                        skipped_kinks: 0,
                        max_rel_error: 0.0,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            slot.points += 1;
            slot.checked += rep.checked;
            slot.skipped_kinks += rep.skipped_kinks.len();
            slot.max_rel_error = slot.max_rel_error.max(rep.max_rel_error);
        }
    }
    Ok(out)
}
