//! Small fully-connected network with hand-written reverse mode.
//!
//! Parameters live in one flat vector (per layer: row-major weights, then
//! biases) so optimizers and gradient checks work on plain slices.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[default]
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Pre-activations of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("at least one layer")
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, all parameters zero.
    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut n = 0;
        for w in sizes.windows(2) {
            offsets.push(n);
            n += w[0] * w[1] + w[1];
        }
        offsets.push(n);
        Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; n],
            offsets,
        }
    }

    /// Scaled-normal init (`1/√fan_in`) with zero biases.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, activation);
        for l in 0..net.n_layers() {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            let start = net.offsets[l];
            for p in &mut net.params[start..start + fan_in * fan_out] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        net
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_output_layer(&mut self) {
        let l = self.n_layers() - 1;
        let (a, b) = (self.offsets[l], self.offsets[l + 1]);
        self.params[a..b].iter_mut().for_each(|p| *p = 0.0);
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.offsets[l];
        let w = &self.params[start..start + fan_in * fan_out];
        let b = &self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
        (w, b)
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).post.pop().unwrap()
    }

    pub fn forward_cached(&self, input: &[f64]) -> MlpCache {
        debug_assert_eq!(input.len(), self.input_dim());
        let n = self.n_layers();
        let mut pre = Vec::with_capacity(n);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n);
        for l in 0..n {
            let x = if l == 0 { input } else { &post[l - 1] };
            let (w, b) = self.layer(l);
            let fan_in = self.sizes[l];
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| bias + w[o * fan_in..(o + 1) * fan_in].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let a = if l + 1 == n {
                z.clone()
            } else {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        MlpCache {
            input: input.to_vec(),
            pre,
            post,
        }
    }

    /// Accumulates `∂(grad_outᵀ f)/∂params` into `grad_params` and, when
    /// requested, writes `∂(grad_outᵀ f)/∂input` into `grad_input`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &[f64],
        grad_params: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        let n = self.n_layers();
        let mut delta: Vec<f64> = grad_out.to_vec();
        let mut grad_input = grad_input;
        for l in (0..n).rev() {
            if l + 1 != n {
                for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            let x = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let start = self.offsets[l];
            {
                let (gw, gb) = grad_params[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if l == 0 && grad_input.is_none() {
                break;
            }
            let (w, _) = self.layer(l);
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (nx, wi) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *nx += d * wi;
                }
            }
            if l == 0 {
                if let Some(gi) = grad_input.as_deref_mut() {
                    gi.copy_from_slice(&next);
                }
            }
            delta = next;
        }
    }

    /// Jacobian of the outputs with respect to the first `n_inputs` inputs,
    /// `out × n_inputs`, row-major.
    pub fn input_jacobian(&self, cache: &MlpCache, n_inputs: usize) -> Vec<f64> {
        let out = self.output_dim();
        let mut jac = vec![0.0; out * n_inputs];
        let mut scratch = vec![0.0; self.n_params()];
        let mut gi = vec![0.0; self.input_dim()];
        let mut e = vec![0.0; out];
        for r in 0..out {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[r] = 1.0;
            self.backward(cache, &e, &mut scratch, Some(&mut gi));
            jac[r * n_inputs..(r + 1) * n_inputs].copy_from_slice(&gi[..n_inputs]);
        }
        jac
    }
}
