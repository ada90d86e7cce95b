//! Small dense tensors with hand-written reverse-mode gradients.
//!
//! Only what the recurrent communication policy needs: affine maps, an
//! LSTM cell, softmax helpers, Gumbel-softmax sampling, RMSProp and a
//! central-difference gradient checker.

mod gradcheck;
mod lstm;
mod optim;

pub use gradcheck::finite_diff_check;
pub use lstm::{Lstm, LstmCache};
pub use optim::{clip_grad_norm, grad_norm, RmsProp};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Dense row-major tensor. `grad` is allocated only for trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(skip)]
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Trainable tensor filled from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
        .trainable()
    }

    pub fn trainable(mut self) -> Self {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn is_trainable(&self) -> bool {
        self.grad.is_some()
    }

    /// Split borrow used by optimizers: values and gradient together.
    pub fn data_and_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Add `other`'s gradient into ours; shapes must match.
    pub fn accumulate_grad_from(&mut self, other: &Tensor<T>) {
        if let (Some(g), Some(o)) = (&mut self.grad, &other.grad) {
            for (a, b) in g.iter_mut().zip(o) {
                *a += *b;
            }
        }
    }

    /// Round-trip through another scalar type; gradients are dropped and
    /// re-allocated when the source was trainable.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        };
        if self.is_trainable() {
            t.trainable()
        } else {
            t
        }
    }
}

/// Anything that owns trainable tensors in a fixed, documented order.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Sum another instance's gradients into ours (same architecture).
    fn accumulate_grads(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.accumulate_grad_from(b);
        }
    }
}

/// Affine map `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::uniform_init(&[output, input], input, rng),
            bias: Tensor::uniform_init(&[output], input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]).trainable(),
            bias: Tensor::zeros(&[output]).trainable(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        affine(x, &self.weight, &self.bias)
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy`; adds `Wᵀ dy` into `dx` when given.
    pub fn backward(&mut self, x: &[T], dy: &[T], dx: Option<&mut [T]>) {
        affine_backward(x, dy, &mut self.weight, &mut self.bias, dx)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Tensor<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// `W x + b`.
pub fn affine<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
    let (rows, cols) = (w.rows(), w.cols());
    if w.shape().len() != 2 || cols != x.len() || b.len() != rows {
        return Err(Error::config(format!(
            "affine dimension mismatch: W {:?}, x {}, b {}",
            w.shape(),
            x.len(),
            b.len()
        )));
    }
    let mut out = b.data().to_vec();
    matvec_add(w.data(), rows, cols, x, &mut out);
    Ok(out)
}

/// Backward of [`affine`]; gradients are accumulated, never overwritten.
pub fn affine_backward<T: Scalar>(x: &[T], dy: &[T], w: &mut Tensor<T>, b: &mut Tensor<T>, dx: Option<&mut [T]>) {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(x.len(), cols);
    if let Some(dx) = dx {
        matvec_t_add(w.data(), rows, cols, dy, dx);
    }
    if let Some(gw) = w.grad_mut() {
        outer_add(gw, dy, x);
    }
    if let Some(gb) = b.grad_mut() {
        for (g, d) in gb.iter_mut().zip(dy) {
            *g += *d;
        }
    }
}

/// `out += W x` for row-major `W[rows, cols]`.
#[inline]
pub(crate) fn matvec_add<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += dot(row, x);
    }
}

/// `out += Wᵀ y`.
#[inline]
pub(crate) fn matvec_t_add<T: Scalar>(w: &[T], rows: usize, cols: usize, y: &[T], out: &mut [T]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, wv) in out.iter_mut().zip(row) {
            *o += *wv * yr;
        }
    }
}

/// `G += a bᵀ` for `G[len(a), len(b)]`.
#[inline]
pub(crate) fn outer_add<T: Scalar>(g: &mut [T], a: &[T], b: &[T]) {
    let cols = b.len();
    for (r, av) in a.iter().enumerate() {
        if *av == T::zero() {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (gv, bv) in row.iter_mut().zip(b) {
            *gv += *av * *bv;
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four accumulators let the optimizer vectorize the reduction.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `p ⊙ (dp − ⟨dp, p⟩)`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot(p, dp);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sample an index from a probability vector.
pub fn sample_categorical<T: Scalar>(probs: &[T], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.as_f64();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One Gumbel-softmax draw with the noise kept so the soft path can be
/// recomputed exactly under new parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample<T> {
    pub index: usize,
    pub one_hot: Vec<T>,
    pub soft: Vec<T>,
    pub noise: Vec<T>,
}

pub fn gumbel_noise<T: Scalar>(n: usize, rng: &mut Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            // u in (0, 1): avoid ln(0)
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            T::of(-(-u.ln()).ln())
        })
        .collect()
}

/// Straight-through Gumbel-softmax. The forward value is `one_hot`; the
/// backward pass goes through `soft` only (see [`gumbel_soft_backward`]).
pub fn gumbel_softmax_st<T: Scalar>(logits: &[T], temperature: T, rng: &mut Rng) -> Result<GumbelSample<T>> {
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax_with_noise(logits, temperature, noise)
}

pub fn gumbel_softmax_with_noise<T: Scalar>(logits: &[T], temperature: T, noise: Vec<T>) -> Result<GumbelSample<T>> {
    if !(temperature > T::zero()) {
        return Err(Error::config(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let perturbed: Vec<T> = logits
        .iter()
        .zip(&noise)
        .map(|(&l, &g)| (l + g) / temperature)
        .collect();
    let soft = softmax(&perturbed);
    let index = argmax(&perturbed);
    let mut one_hot = vec![T::zero(); logits.len()];
    one_hot[index] = T::one();
    Ok(GumbelSample {
        index,
        one_hot,
        soft,
        noise,
    })
}

/// Gradient w.r.t. the logits given a gradient w.r.t. the sample value:
/// the straight-through estimator routes it through the soft relaxation.
pub fn gumbel_soft_backward<T: Scalar>(soft: &[T], d_sample: &[T], temperature: T) -> Vec<T> {
    softmax_backward(soft, d_sample)
        .into_iter()
        .map(|v| v / temperature)
        .collect()
}

pub(crate) fn check_finite<T: Scalar>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::divergence("", format!("non-finite {what}")))
    }
}
