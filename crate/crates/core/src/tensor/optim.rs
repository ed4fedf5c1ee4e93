use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// One momentum SGD update: `v ← momentum·v + g`, `w ← w − lr·v`.
pub fn sgd_step<T: Scalar>(
    weight: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_hyper(lr, momentum)?;
    grad.expect_shape(weight.shape(), "sgd gradient")?;
    velocity.expect_shape(weight.shape(), "sgd velocity")?;
    let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
    for ((w, v), &g) in weight
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut().iter_mut())
        .zip(grad.data())
    {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

fn check_hyper(lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum must be in [0, 1), got {momentum}")));
    }
    Ok(())
}

/// Momentum SGD over a fixed, ordered parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        check_hyper(lr, momentum)?;
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Apply one step. `params` and `grads` must keep the same order and
    /// shapes across calls.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::shape("parameter list changed between steps"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_step(p, g, v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn plain_step() {
        let (mut w, mut v) = (scalar(1.0), scalar(0.0));
        sgd_step(&mut w, &scalar(2.0), &mut v, 0.1, 0.0).unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let (mut w, mut v) = (scalar(0.37), scalar(0.0));
        sgd_step(&mut w, &scalar(0.0), &mut v, 0.05, 0.9).unwrap();
        assert_eq!(w.data()[0], 0.37);
    }

    #[test]
    fn two_momentum_steps() {
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        let mut w = scalar(0.0);
        for _ in 0..2 {
            opt.step(vec![&mut w], &[scalar(1.0)]).unwrap();
        }
        assert!((w.data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(Sgd::<f32>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f32>::new(0.1, 1.0).is_err());
        let (mut w, mut v) = (scalar(1.0), scalar(0.0));
        let g = Tensor::zeros(Shape::new(1, 2, 1, 1));
        assert!(sgd_step(&mut w, &g, &mut v, 0.1, 0.0).is_err());
    }
}
