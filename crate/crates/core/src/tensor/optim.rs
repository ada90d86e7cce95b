use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// RMSProp: `v ← αv + (1−α)g²`, `θ ← θ − ηg/(√v + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct RmsProp<T> {
    pub alpha: T,
    pub lr: T,
    pub eps: T,
    /// One running average per parameter tensor, in parameter order.
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(lr: T) -> Self {
        RmsProp {
            alpha: T::of(0.99),
            lr,
            eps: T::of(1e-8),
            v: Vec::new(),
        }
    }

    pub fn with_hyper(lr: T, alpha: T, eps: T) -> Self {
        RmsProp {
            alpha,
            lr,
            eps,
            v: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients, then zero them.
    /// Parameters are left untouched if any update would be non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if !(self.lr > T::zero()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.v.is_empty() {
            self.v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.v.len() != params.len() || self.v.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len()) {
            return Err(Error::config("optimizer state does not match parameter layout"));
        }
        let one = T::one();
        let mut new_v = self.v.clone();
        let mut new_theta: Vec<Vec<T>> = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(new_v.iter_mut()) {
            let mut theta = p.data().to_vec();
            if let Some(g) = p.grad() {
                for ((t, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = self.alpha * *vi + (one - self.alpha) * gi * gi;
                    *t -= self.lr * gi / (vi.sqrt() + self.eps);
                }
            }
            if !theta.iter().all(|x| x.is_finite()) {
                return Err(Error::divergence("", "non-finite parameter update"));
            }
            new_theta.push(theta);
        }
        for (p, theta) in params.iter_mut().zip(new_theta) {
            p.data_mut().copy_from_slice(&theta);
            p.zero_grad();
        }
        self.v = new_v;
        Ok(())
    }
}

pub fn grad_norm<T: Scalar>(params: &[&mut Tensor<T>]) -> T {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum::<T>()
        .sqrt()
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Tensor<T>], max_norm: T) -> T {
    let norm = grad_norm(params);
    if norm > max_norm && norm > T::zero() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::from_vec(&[values.len()], values.to_vec()).unwrap().trainable();
        t.grad_mut().unwrap().copy_from_slice(grad);
        t
    }

    #[test]
    fn zero_gradient_is_exact_noop() {
        let mut p = param(&[0.3, -1.7, 2.5], &[0.0; 3]);
        let before = p.clone();
        let mut opt = RmsProp::new(0.001);
        for _ in 0..5 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data(), before.data());
    }

    #[test]
    fn hand_evaluated_update() {
        let mut p = param(&[1.0], &[1.0]);
        let mut opt = RmsProp::with_hyper(0.001, 0.99, 1e-8);
        opt.step(&mut [&mut p]).unwrap();
        assert_relative_eq!(opt.v[0][0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(p.data()[0], 1.0 - 0.001 / (0.1 + 1e-8), epsilon = 1e-15);
        assert_relative_eq!(p.data()[0], 0.99, epsilon = 1e-6);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn repeated_gradient_shrinks_step() {
        let mut p = param(&[0.0], &[1.0]);
        let mut opt = RmsProp::new(0.001);
        opt.step(&mut [&mut p]).unwrap();
        let first = -p.data()[0];
        p.grad_mut().unwrap()[0] = 1.0;
        let v1 = opt.v[0][0];
        opt.step(&mut [&mut p]).unwrap();
        let second = -p.data()[0] - first;
        assert!(opt.v[0][0] > v1);
        assert!(second < first);
    }

    #[test]
    fn non_finite_update_is_divergence_and_leaves_params() {
        let mut p = param(&[1.0], &[f64::INFINITY]);
        let mut opt = RmsProp::new(0.001);
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::Divergence { .. })));
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = param(&[0.0, 0.0], &[3.0, 4.0]);
        let mut b = param(&[0.0], &[12.0]);
        let mut ps = [&mut a, &mut b];
        let before = clip_grad_norm(&mut ps, 0.5);
        assert_relative_eq!(before, 13.0);
        assert!(grad_norm(&ps) <= 0.5 + 1e-12);
    }
}
