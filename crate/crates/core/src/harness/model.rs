use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::HeadOutput;

/// Fixed random features `φ(x) = tanh(W x / √d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatures {
    weights: Vec<Vec<f64>>,
}

impl RandomFeatures {
    pub fn new(dim: usize, input_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights = (0..dim)
            .map(|_| (0..input_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Self { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// The first `dim` features.
    pub fn truncated(&self, dim: usize) -> Self {
        Self {
            weights: self.weights[..dim.min(self.dim())].to_vec(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input_dim = self.weights.first().map_or(0, Vec::len);
        if x.len() != input_dim {
            return Err(Error::LengthMismatch {
                expected: input_dim,
                got: x.len(),
            });
        }
        let norm = (input_dim as f64).sqrt();
        Ok(self
            .weights
            .iter()
            .map(|w| (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / norm).tanh())
            .collect())
    }
}

/// `h = P φ`, `logits = A h + b`. The first `classes` outputs are class
/// logits, the rest are box logits edge by edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLocalizer {
    pub projection: Vec<Vec<f64>>,
    pub head: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub classes: usize,
    /// Whether gradient descent updates `projection`.
    pub trainable: bool,
}

impl LinearLocalizer {
    pub fn new(
        feature_dim: usize,
        hidden: usize,
        bins: usize,
        classes: usize,
        head_init: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p_scale = 1.0 / (feature_dim as f64).sqrt();
        let projection = (0..hidden)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| p_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let outputs = classes + 4 * bins;
        let head = (0..outputs)
            .map(|_| (0..hidden).map(|_| head_init * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self {
            projection,
            head,
            bias: vec![0.0; outputs],
            classes,
            trainable,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.first().map_or(0, Vec::len)
    }

    pub fn hidden_dim(&self) -> usize {
        self.projection.len()
    }

    pub fn output_len(&self) -> usize {
        self.head.len()
    }

    pub fn hidden(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.feature_dim() {
            return Err(Error::LengthMismatch {
                expected: self.feature_dim(),
                got: phi.len(),
            });
        }
        Ok(self.projection.iter().map(|row| dot(row, phi)).collect())
    }

    pub fn head_output(&self, h: &[f64]) -> HeadOutput {
        let mut out: Vec<f64> = self.head.iter().zip(&self.bias).map(|(row, b)| dot(row, h) + b).collect();
        let box_logits = out.split_off(self.classes);
        HeadOutput {
            cls_logits: out,
            box_logits,
        }
    }

    pub fn forward(&self, phi: &[f64]) -> Result<(Vec<f64>, HeadOutput)> {
        let h = self.hidden(phi)?;
        let out = self.head_output(&h);
        Ok((h, out))
    }

    /// Accumulates parameter gradients for one sample into `grad`, given the
    /// loss gradient with respect to the head outputs and, optionally, an
    /// extra gradient on the hidden representation.
    pub(crate) fn backward(&self, phi: &[f64], h: &[f64], d_out: &HeadOutput, d_hidden: Option<&[f64]>, grad: &mut Self) {
        let d_logits: Vec<f64> = d_out.flat().collect();
        for ((row, g), d) in grad.head.iter_mut().zip(&mut grad.bias).zip(&d_logits) {
            if *d != 0.0 {
                axpy(row, *d, h);
                *g += d;
            }
        }
        if !self.trainable {
            return;
        }
        let mut dh = d_hidden.map_or_else(|| vec![0.0; h.len()], <[f64]>::to_vec);
        for (row, d) in self.head.iter().zip(&d_logits) {
            if *d != 0.0 {
                axpy(&mut dh, *d, row);
            }
        }
        for (row, d) in grad.projection.iter_mut().zip(&dh) {
            axpy(row, *d, phi);
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            projection: vec![vec![0.0; self.feature_dim()]; self.hidden_dim()],
            head: vec![vec![0.0; self.hidden_dim()]; self.output_len()],
            bias: vec![0.0; self.output_len()],
            classes: self.classes,
            trainable: self.trainable,
        }
    }

    /// `self -= lr · grad`.
    pub(crate) fn step(&mut self, grad: &Self, lr: f64) {
        for (row, g) in self.head.iter_mut().zip(&grad.head) {
            axpy(row, -lr, g);
        }
        axpy(&mut self.bias, -lr, &grad.bias);
        if self.trainable {
            for (row, g) in self.projection.iter_mut().zip(&grad.projection) {
                axpy(row, -lr, g);
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results stay reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}
