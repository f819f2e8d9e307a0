//! Small dense ReLU networks with hand-written reverse-mode gradients and
//! the Adam optimizer.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix
//! stored input-major (`W[i][j]` at `i * fan_out + j`) followed by the bias.
//! Gradients share that layout, which keeps Adam and snapshots trivial.

use rand::Rng;
use thiserror::Error;

use crate::mdp::{parse_field, MdpError};
use crate::scalar::{Scalar, Strided, StridedMut};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input has {got} entries, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("upstream gradient has {got} entries, network outputs {expected}")]
    OutputDim { expected: usize, got: usize },
    #[error("parameter vector has {got} entries, network has {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("network needs at least an input and an output layer")]
    Shape,
    #[error("snapshot: {0}")]
    Snapshot(String),
}

impl From<MdpError> for NnError {
    fn from(err: MdpError) -> Self {
        NnError::Snapshot(err.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layer_sizes: Vec<usize>,
    params: Vec<T>,
    /// Start of each layer's weights; the bias follows the weights.
    offsets: Vec<usize>,
}

/// Gradient of a scalar objective with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<T>);

impl<T: Scalar> Gradients<T> {
    pub fn zeros(len: usize) -> Self {
        Gradients(vec![T::zero(); len])
    }

    pub fn scale(&mut self, factor: T) {
        self.0.iter_mut().for_each(|g| *g = *g * factor);
    }
}

fn layer_offsets(layer_sizes: &[usize]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(layer_sizes.len() - 1);
    let mut total = 0;
    for w in layer_sizes.windows(2) {
        offsets.push(total);
        total += w[0] * w[1] + w[1];
    }
    (offsets, total)
}

impl<T: Scalar> Mlp<T> {
    /// All-zero network.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(NnError::Shape);
        }
        let (offsets, total) = layer_offsets(layer_sizes);
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params: vec![T::zero(); total], offsets })
    }

    /// He-style uniform initialization scaled by fan-in; zero biases.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(layer_sizes)?;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let start = net.offsets[l];
            for w in &mut net.params[start..start + fan_in * fan_out] {
                *w = T::from_f64_lossy(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ParamCount { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Weight `W[i][j]` of layer `l` (input `i`, output `j`).
    pub fn weight(&self, l: usize, i: usize, j: usize) -> T {
        self.params[self.offsets[l] + i * self.layer_sizes[l + 1] + j]
    }

    pub fn set_weight(&mut self, l: usize, i: usize, j: usize, value: T) {
        let idx = self.offsets[l] + i * self.layer_sizes[l + 1] + j;
        self.params[idx] = value;
    }

    pub fn set_bias(&mut self, l: usize, j: usize, value: T) {
        let idx = self.offsets[l] + self.layer_sizes[l] * self.layer_sizes[l + 1] + j;
        self.params[idx] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn weights(&self, l: usize) -> (&[T], &[T]) {
        let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let start = self.offsets[l];
        self.params[start..start + fan_in * fan_out + fan_out].split_at(fan_in * fan_out)
    }

    /// Forward pass keeping every layer's activations for a later backward
    /// pass over the same batch.
    pub fn forward_cached(&self, inputs: &[T], batch: usize) -> Result<ForwardCache<T>, NnError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(NnError::InputDim { expected: batch * self.input_dim(), got: inputs.len() });
        }
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.layer_sizes.len());
        acts.push(inputs.to_vec());
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w, bias) = self.weights(l);
            let prev = &acts[l];
            let mut out = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            if batch < SMALL_BATCH || is_sparse(prev) {
                for b in 0..batch {
                    let row = &mut out[b * fan_out..(b + 1) * fan_out];
                    for (i, &x) in prev[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
                        if x != T::zero() {
                            axpy(row, x, &w[i * fan_out..(i + 1) * fan_out]);
                        }
                    }
                }
            } else {
                T::gemm(
                    batch,
                    fan_in,
                    fan_out,
                    T::one(),
                    Strided { data: prev, row_stride: fan_in, col_stride: 1 },
                    Strided { data: w, row_stride: fan_out, col_stride: 1 },
                    T::one(),
                    StridedMut { data: &mut out, row_stride: fan_out, col_stride: 1 },
                );
            }
            if l + 1 < self.num_layers() {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(out);
        }
        Ok(ForwardCache { acts, batch })
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        self.forward_batch(input, 1)
    }

    /// Outputs for `batch` row-major inputs, row-major.
    pub fn forward_batch(&self, inputs: &[T], batch: usize) -> Result<Vec<T>, NnError> {
        Ok(self.forward_cached(inputs, batch)?.acts.pop().unwrap())
    }

    /// Gradient of `output · upstream` with respect to the parameters.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<Gradients<T>, NnError> {
        let mut grads = Gradients::zeros(self.num_params());
        self.accumulate_gradients(input, upstream, 1, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradient of `Σ_b output_b · upstream_b` into `grads`.
    pub fn accumulate_gradients(
        &self,
        inputs: &[T],
        upstream: &[T],
        batch: usize,
        grads: &mut Gradients<T>,
    ) -> Result<(), NnError> {
        let cache = self.forward_cached(inputs, batch)?;
        self.accumulate_cached(&cache, upstream, grads)
    }

    /// Backward pass over a batch whose activations are already cached.
    pub fn accumulate_cached(&self, cache: &ForwardCache<T>, upstream: &[T], grads: &mut Gradients<T>) -> Result<(), NnError> {
        let batch = cache.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(NnError::OutputDim { expected: batch * self.output_dim(), got: upstream.len() });
        }
        if grads.0.len() != self.num_params() {
            return Err(NnError::ParamCount { expected: self.num_params(), got: grads.0.len() });
        }
        let acts = &cache.acts;
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w_start = self.offsets[l];
            let prev = &acts[l];
            {
                let (gw, gb) = grads.0[w_start..w_start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for d in delta.chunks_exact(fan_out) {
                    axpy(gb, T::one(), d);
                }
                if batch < SMALL_BATCH || is_sparse(prev) {
                    for b in 0..batch {
                        let d = &delta[b * fan_out..(b + 1) * fan_out];
                        for (i, &x) in prev[b * fan_in..(b + 1) * fan_in].iter().enumerate() {
                            if x != T::zero() {
                                axpy(&mut gw[i * fan_out..(i + 1) * fan_out], x, d);
                            }
                        }
                    }
                } else {
                    T::gemm(
                        fan_in,
                        batch,
                        fan_out,
                        T::one(),
                        Strided { data: prev, row_stride: 1, col_stride: fan_in },
                        Strided { data: &delta, row_stride: fan_out, col_stride: 1 },
                        T::one(),
                        StridedMut { data: gw, row_stride: fan_out, col_stride: 1 },
                    );
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = self.weights(l);
            let mut next = vec![T::zero(); batch * fan_in];
            T::gemm(
                batch,
                fan_out,
                fan_in,
                T::one(),
                Strided { data: &delta, row_stride: fan_out, col_stride: 1 },
                Strided { data: w, row_stride: 1, col_stride: fan_out },
                T::zero(),
                StridedMut { data: &mut next, row_stride: fan_in, col_stride: 1 },
            );
            // ReLU derivative: zero wherever the hidden activation is zero.
            for (g, &a) in next.iter_mut().zip(prev) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Snapshot text: `mlp <sizes…>` header, then one parameter per line.
    pub fn to_text(&self) -> String {
        let mut out = String::from("mlp");
        for s in &self.layer_sizes {
            out.push(' ');
            out.push_str(&s.to_string());
        }
        out.push('\n');
        for p in &self.params {
            out.push_str(&p.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, NnError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| NnError::Snapshot("empty snapshot".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("mlp") {
            return Err(NnError::Snapshot("missing `mlp` header".into()));
        }
        let sizes: Vec<usize> = fields.map(|f| parse_field(f, 1)).collect::<Result<_, _>>()?;
        let mut net = Self::zeros(&sizes)?;
        let params: Vec<T> = lines
            .enumerate()
            .map(|(i, l)| parse_field(l.trim(), i + 2))
            .collect::<Result<_, _>>()?;
        net.set_params(&params)?;
        Ok(net)
    }
}

/// Activations of every layer for one batch (input first, output last).
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    acts: Vec<Vec<T>>,
    batch: usize,
}

impl<T> ForwardCache<T> {
    pub fn outputs(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Below this many rows the packing cost of a blocked product dominates.
const SMALL_BATCH: usize = 4;

/// Mostly-zero inputs (one-hot encodings) are cheaper to handle row by row.
fn is_sparse<T: Scalar>(values: &[T]) -> bool {
    let nonzero = values.iter().filter(|&&v| v != T::zero()).count();
    nonzero * 4 <= values.len()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::from_f64_lossy(1e-3),
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig<T>,
    first: Vec<T>,
    second: Vec<T>,
    steps: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, config: AdamConfig<T>) -> Self {
        Self { config, first: vec![T::zero(); num_params], second: vec![T::zero(); num_params], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.first.len(), "Adam state does not match parameters");
        assert_eq!(grads.len(), params.len(), "gradient does not match parameters");
        self.steps += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let t = self.steps as i32;
        let c1 = T::one() - beta1.powi(t);
        let c2 = T::one() - beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            *m = beta1 * *m + (T::one() - beta1) * g;
            *v = beta2 * *v + (T::one() - beta2) * g * g;
            // Moments of long-idle parameters decay into the subnormal range,
            // where arithmetic is orders of magnitude slower.
            if m.is_subnormal() {
                *m = T::zero();
            }
            if v.is_subnormal() {
                *v = T::zero();
            }
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.first.iter().chain(&self.second).all(|x| x.is_finite())
    }
}
