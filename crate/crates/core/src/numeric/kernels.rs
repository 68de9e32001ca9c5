//! Flat-buffer kernels shared by the plain forward pass and the gradient tape.
//! Both paths must call exactly these functions so that their results agree
//! bit for bit.

use serde::{Deserialize, Serialize};

/// `x (n×k) · wᵀ` where `w` is `m×k`; returns `n×m`.
pub(crate) fn matmul_t(x: &[f64], n: usize, k: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    // SAFETY: slices are sized n*k, m*k and n*m; strides describe those layouts.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
    out
}

/// `dy (n×m) · w (m×k)`; returns `n×k`.
pub(crate) fn matmul(dy: &[f64], n: usize, m: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    if n == 0 || m == 0 || k == 0 {
        return out;
    }
    // SAFETY: see `matmul_t`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            dy.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    out
}

/// `dyᵀ (m×n) · x (n×k)`, accumulated into `acc` (`m×k`).
pub(crate) fn matmul_tn_acc(dy: &[f64], n: usize, m: usize, x: &[f64], k: usize, acc: &mut [f64]) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: see `matmul_t`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            dy.as_ptr(),
            1,
            m as isize,
            x.as_ptr(),
            k as isize,
            1,
            1.0,
            acc.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

pub(crate) fn add_bias(y: &mut [f64], bias: &[f64]) {
    let m = bias.len();
    if m == 0 {
        return;
    }
    for row in y.chunks_exact_mut(m) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth hidden-layer nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x · sigmoid(x)`
    Silu,
    Tanh,
    /// Pass-through, used for linear test networks.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Mean over consecutive blocks of `block` entries.
pub(crate) fn block_mean(x: &[f64], block: usize) -> Vec<f64> {
    x.chunks_exact(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect()
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}
