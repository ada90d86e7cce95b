use super::Parameterized;
use crate::scalar::Scalar;

/// Compare the analytic gradients already stored in `model` with central
/// differences of `f`. Returns the largest
/// `|analytic − numeric| / max(1e-6, |analytic| + |numeric|)` over all
/// trainable entries. The floor keeps round-off in near-zero gradients from
/// dominating. Parameter values are restored afterwards.
pub fn finite_diff_check<T, P, F>(model: &mut P, step: T, mut f: F) -> T
where
    T: Scalar,
    P: Parameterized<T>,
    F: FnMut(&P) -> T,
{
    assert!(step > T::zero(), "finite-difference step must be positive");
    let analytic: Vec<Vec<T>> = model
        .params()
        .iter()
        .map(|p| p.grad().map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    let floor = T::of(1e-6);
    let two = T::of(2.0);
    let mut worst = T::zero();
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = model.params()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + step;
            let up = f(model);
            model.params_mut()[pi].data_mut()[k] = orig - step;
            let down = f(model);
            model.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (two * step);
            let denom = (a.abs() + numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                log::debug!("param {pi} entry {k}: analytic {a} numeric {numeric}");
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    struct One(Tensor<f64>);

    impl Parameterized<f64> for One {
        fn params(&self) -> Vec<&Tensor<f64>> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn square_at_three() {
        let mut m = One(Tensor::from_vec(&[1], vec![3.0]).unwrap().trainable());
        m.0.grad_mut().unwrap()[0] = 6.0;
        let err = finite_diff_check(&mut m, 1e-5, |m| m.0.data()[0].powi(2));
        assert!(err < 1e-9);
        let numeric = ((3.0f64 + 1e-5).powi(2) - (3.0f64 - 1e-5).powi(2)) / 2e-5;
        assert_abs_diff_eq!(numeric, 6.0, epsilon = 1e-6);
        assert_eq!(m.0.data()[0], 3.0);
    }

    #[test]
    fn constant_function() {
        let mut m = One(Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap().trainable());
        assert_eq!(finite_diff_check(&mut m, 1e-5, |_| 4.2), 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut m = One(Tensor::from_vec(&[1], vec![3.0]).unwrap().trainable());
        m.0.grad_mut().unwrap()[0] = 5.0;
        assert!(finite_diff_check(&mut m, 1e-5, |m| m.0.data()[0].powi(2)) > 0.05);
    }
}
