use serde::{Deserialize, Serialize};

use super::{check_finite, matvec_add, matvec_t_add, outer_add, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// LSTM cell. Pre-activation rows are stacked in gate order
/// input, forget, cell, output; each block has `hidden` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct Lstm<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub bias: Tensor<T>,
    hidden: usize,
}

/// Activations saved by [`Lstm::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LstmCache<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub c_prev: Vec<T>,
    /// Post-nonlinearity gates `[i | f | g | o]`.
    pub gates: Vec<T>,
    pub c: Vec<T>,
    pub tanh_c: Vec<T>,
}

impl<T: Scalar> Lstm<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = input + hidden;
        let mut lstm = Lstm {
            w_ih: Tensor::uniform_init(&[4 * hidden, input], fan_in, rng),
            w_hh: Tensor::uniform_init(&[4 * hidden, hidden], fan_in, rng),
            bias: Tensor::uniform_init(&[4 * hidden], fan_in, rng),
            hidden,
        };
        lstm.bias.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = T::one());
        lstm
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Lstm {
            w_ih: Tensor::zeros(&[4 * hidden, input]).trainable(),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]).trainable(),
            bias: Tensor::zeros(&[4 * hidden]).trainable(),
            hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn forward(&self, x: &[T], h: &[T], c: &[T]) -> Result<(Vec<T>, Vec<T>, LstmCache<T>)> {
        let n = self.hidden;
        if x.len() != self.input() || h.len() != n || c.len() != n {
            return Err(Error::config(format!(
                "lstm expects x:{} h:{n} c:{n}, got x:{} h:{} c:{}",
                self.input(),
                x.len(),
                h.len(),
                c.len()
            )));
        }
        let mut z = self.bias.data().to_vec();
        matvec_add(self.w_ih.data(), 4 * n, x.len(), x, &mut z);
        matvec_add(self.w_hh.data(), 4 * n, n, h, &mut z);
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * n..3 * n).contains(&k) {
                v.tanh()
            } else {
                v.sigmoid()
            };
        }
        let mut c_new = vec![T::zero(); n];
        let mut tanh_c = vec![T::zero(); n];
        let mut h_new = vec![T::zero(); n];
        for j in 0..n {
            let (i, f, g, o) = (z[j], z[n + j], z[2 * n + j], z[3 * n + j]);
            c_new[j] = f * c[j] + i * g;
            tanh_c[j] = c_new[j].tanh();
            h_new[j] = o * tanh_c[j];
        }
        check_finite(&h_new, "lstm hidden state")?;
        check_finite(&c_new, "lstm cell state")?;
        let cache = LstmCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates: z,
            c: c_new.clone(),
            tanh_c,
        };
        Ok((h_new, c_new, cache))
    }

    /// Accumulates parameter gradients and returns `(dx, dh_prev, dc_prev)`.
    pub fn backward(&mut self, cache: &LstmCache<T>, dh: &[T], dc: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let n = self.hidden;
        let z = &cache.gates;
        let mut dz = vec![T::zero(); 4 * n];
        let mut dc_prev = vec![T::zero(); n];
        let one = T::one();
        for j in 0..n {
            let (i, f, g, o) = (z[j], z[n + j], z[2 * n + j], z[3 * n + j]);
            let tc = cache.tanh_c[j];
            let dct = dc[j] + dh[j] * o * (one - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dct * g;
            let d_g = dct * i;
            let d_f = dct * cache.c_prev[j];
            dc_prev[j] = dct * f;
            dz[j] = d_i * i * (one - i);
            dz[n + j] = d_f * f * (one - f);
            dz[2 * n + j] = d_g * (one - g * g);
            dz[3 * n + j] = d_o * o * (one - o);
        }
        let mut dx = vec![T::zero(); cache.x.len()];
        let mut dh_prev = vec![T::zero(); n];
        matvec_t_add(self.w_ih.data(), 4 * n, cache.x.len(), &dz, &mut dx);
        matvec_t_add(self.w_hh.data(), 4 * n, n, &dz, &mut dh_prev);
        if let Some(g) = self.w_ih.grad_mut() {
            outer_add(g, &dz, &cache.x);
        }
        if let Some(g) = self.w_hh.grad_mut() {
            outer_add(g, &dz, &cache.h_prev);
        }
        if let Some(g) = self.bias.grad_mut() {
            for (a, b) in g.iter_mut().zip(&dz) {
                *a += *b;
            }
        }
        (dx, dh_prev, dc_prev)
    }

    pub fn params(&self) -> [&Tensor<T>; 3] {
        [&self.w_ih, &self.w_hh, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w_ih, &mut self.w_hh, &mut self.bias]
    }
}
