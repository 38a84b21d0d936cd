//! A small fully connected network with hand-written backpropagation.
//!
//! Parameters live in one flat buffer so the optimizer and the
//! finite-difference checks can treat them uniformly. Layer `l` stores its
//! `out x in` weight matrix row-major, followed by its `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Loss, PredictionVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// He-uniform weights, zero biases. `sizes` lists the width of every
    /// layer including input and output.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..mlp.num_layers() {
            let fan_in = mlp.sizes[l];
            let bound = (6.0 / fan_in as f64).sqrt();
            let (w, _) = mlp.layer_offsets(l);
            let n = mlp.sizes[l] * mlp.sizes[l + 1];
            for v in &mut mlp.params[w..w + n] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Dimension {
                expected: mlp.params.len(),
                actual: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Start of layer `l`'s weights and of its biases in the flat buffer.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (start, start + self.sizes[l] * self.sizes[l + 1])
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    /// Hidden layers are rectified, the output layer is affine.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let weights = &self.params[w..w + n_in * n_out];
            let biases = &self.params[b..b + n_out];
            let input = &acts[l];
            let last = l + 1 == self.num_layers();
            let out: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(biases)
                .map(|(row, bias)| {
                    let z = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias;
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<PredictionVector> {
        self.check_input(x)?;
        let mut acts = self.activations(x);
        Ok(PredictionVector::from_logits(acts.pop().expect("logits")))
    }

    /// Adds `dL/dtheta` into `grads` given `dL/dlogits`.
    fn accumulate(&self, acts: &[Vec<f64>], grad_logits: &[f64], grads: &mut [f64]) {
        let mut delta = grad_logits.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_offsets(l);
            let input = &acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[b + o] += d;
                let row = &mut grads[w + o * n_in..w + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let weights = &self.params[w..w + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *p += d * wv;
                }
            }
            // ReLU derivative, taken as 0 at the kink.
            for (p, a) in prev.iter_mut().zip(&acts[l]) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Mean loss and mean parameter gradient over a batch. Records are
    /// processed in order, so the result is bit-reproducible.
    pub fn backward(
        &self,
        inputs: &[&[f64]],
        targets: &[usize],
        loss: &Loss,
    ) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != targets.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        if inputs.is_empty() {
            return Ok((0.0, grads));
        }
        let n = inputs.len() as f64;
        let mut total = 0.0;
        for (x, &t) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            if t >= self.output_dim() {
                return Err(Error::Dimension {
                    expected: self.output_dim(),
                    actual: t + 1,
                });
            }
            let mut acts = self.activations(x);
            let pred = PredictionVector::from_logits(acts.pop().expect("logits"));
            let out = loss.evaluate(&pred, t);
            total += out.value;
            let scaled: Vec<f64> = out.grad_logits.iter().map(|g| g / n).collect();
            self.accumulate(&acts, &scaled, &mut grads);
        }
        Ok((total / n, grads))
    }

    /// Mean loss over a batch without gradients.
    pub fn batch_loss(&self, inputs: &[&[f64]], targets: &[usize], loss: &Loss) -> Result<f64> {
        let mut total = 0.0;
        for (x, &t) in inputs.iter().zip(targets) {
            total += loss.evaluate(&self.forward(x)?, t).value;
        }
        Ok(total / inputs.len().max(1) as f64)
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}
