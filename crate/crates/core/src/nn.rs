//! Minimal dense-network engine: forward/backward passes for fixed MLP
//! stacks, uniform fan-in initialization, Adam, and a finite-difference
//! gradient-check harness. Everything runs in 64-bit and every operation is
//! a deterministic function of its arguments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    // ReLU subgradient at 0 is taken as 0.
    fn derivative(&self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of a fully-connected stack, e.g. `[6, 60, 60, 60, 60, 3]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec("need at least two layers".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidSpec("layer sizes must be >= 1".into()));
        }
        Ok(Self {
            layer_sizes,
            hidden_activation,
            output_activation,
        })
    }

    /// Number of linear maps in the stack.
    pub fn n_linear(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Length of the flattened parameter vector.
    pub fn param_len(&self) -> usize {
        (0..self.n_linear())
            .map(|l| self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1])
            .sum()
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_linear() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// One linear layer: row-major `out x in` weight matrix plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters (or, with the same shape, gradients) of an MLP stack.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (0..spec.n_linear())
            .map(|l| Linear {
                weight: vec![0.0; spec.layer_sizes[l] * spec.layer_sizes[l + 1]],
                bias: vec![0.0; spec.layer_sizes[l + 1]],
            })
            .collect();
        Self { layers }
    }

    /// Flattened layout: all weight matrices in layer order, then all bias
    /// vectors in layer order. Decoders and checkpoints rely on this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
        }
        for l in &self.layers {
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(spec: &MlpSpec, flat: &[f64]) -> Result<Self, NnError> {
        if flat.len() != spec.param_len() {
            return Err(NnError::ShapeMismatch(format!(
                "flat length {} != param length {}",
                flat.len(),
                spec.param_len()
            )));
        }
        let mut params = Self::zeros(spec);
        let mut off = 0;
        for l in &mut params.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        for l in &mut params.layers {
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(params)
    }

    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::ShapeMismatch(format!(
                "batch data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Per-layer state needed by the backward pass.
pub struct ForwardCache {
    /// Input to each linear layer (post-activation of the previous one).
    inputs: Vec<Batch>,
    /// Pre-activation output of each linear layer.
    pre_acts: Vec<Batch>,
}

/// Draws weights from uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) with zero
/// biases; deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::zeros(spec);
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let bound = (6.0 / spec.layer_sizes[l] as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// Affine + activation per layer; the cache carries what backward needs.
pub fn mlp_forward(
    spec: &MlpSpec,
    params: &MlpParams,
    inputs: &Batch,
) -> Result<(Batch, ForwardCache), NnError> {
    if inputs.cols != spec.input_dim() {
        return Err(NnError::ShapeMismatch(format!(
            "input width {} != first layer size {}",
            inputs.cols,
            spec.input_dim()
        )));
    }
    let n = inputs.rows;
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(spec.n_linear()),
        pre_acts: Vec::with_capacity(spec.n_linear()),
    };
    let mut current = inputs.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let mut pre = Batch::zeros(n, out_dim);
        for r in 0..n {
            let x = current.row(r);
            let out = &mut pre.data[r * out_dim..(r + 1) * out_dim];
            for o in 0..out_dim {
                let wrow = &layer.weight[o * in_dim..(o + 1) * in_dim];
                let mut acc = layer.bias[o];
                for i in 0..in_dim {
                    acc += wrow[i] * x[i];
                }
                out[o] = acc;
            }
        }
        let act = spec.activation_for(l);
        let mut post = pre.clone();
        for v in &mut post.data {
            *v = act.apply(*v);
        }
        cache.inputs.push(current);
        cache.pre_acts.push(pre);
        current = post;
    }
    Ok((current, cache))
}

/// Exact analytic gradients of the forward map.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &MlpParams,
    cache: &ForwardCache,
    grad_outputs: &Batch,
) -> Result<(MlpParams, Batch), NnError> {
    if grad_outputs.cols != spec.output_dim() || grad_outputs.rows != cache.inputs[0].rows {
        return Err(NnError::ShapeMismatch(
            "grad_outputs does not match forward cache".into(),
        ));
    }
    let n = grad_outputs.rows;
    let mut grads = MlpParams::zeros(spec);
    let mut grad_post = grad_outputs.clone();
    for l in (0..spec.n_linear()).rev() {
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        let act = spec.activation_for(l);
        let pre = &cache.pre_acts[l];
        let input = &cache.inputs[l];
        let layer = &params.layers[l];
        let glayer = &mut grads.layers[l];
        let mut grad_in = Batch::zeros(n, in_dim);
        for r in 0..n {
            let gp = &grad_post.data[r * out_dim..(r + 1) * out_dim];
            let pr = pre.row(r);
            let x = input.row(r);
            let gi = &mut grad_in.data[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let g = gp[o] * act.derivative(pr[o]);
                if g == 0.0 {
                    continue;
                }
                glayer.bias[o] += g;
                let wrow = &layer.weight[o * in_dim..(o + 1) * in_dim];
                let gwrow = &mut glayer.weight[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    gwrow[i] += g * x[i];
                    gi[i] += g * wrow[i];
                }
            }
        }
        grad_post = grad_in;
    }
    Ok((grads, grad_post))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate: 1e-4,
        }
    }
}

/// Optimizer accumulators, shaped like the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }
}

/// One bias-corrected Adam step over flattened parameters; pure.
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Vec<f64>, AdamState), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch(
            "params, grads and optimizer state disagree".into(),
        ));
    }
    let mut next = state.clone();
    next.t = state.t + 1;
    let bc1 = 1.0 - cfg.beta1.powi(next.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(next.t as i32);
    let mut out = params.to_vec();
    for i in 0..params.len() {
        next.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        next.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = next.m[i] / bc1;
        let v_hat = next.v[i] / bc2;
        out[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok((out, next))
}

/// Compares analytic gradients of the scalar loss `sum(outputs)` against
/// central finite differences; returns the max error relative to
/// `max(|analytic|, |numeric|, 1)`.
pub fn finite_diff_check(
    spec: &MlpSpec,
    params: &MlpParams,
    batch: &Batch,
    h: f64,
) -> Result<f64, NnError> {
    let (out, cache) = mlp_forward(spec, params, batch)?;
    let ones = Batch::zeros(out.rows, out.cols);
    let ones = Batch::new(ones.rows, ones.cols, vec![1.0; ones.data.len()])?;
    let (analytic, _) = mlp_backward(spec, params, &cache, &ones)?;
    let analytic_flat = analytic.flatten();

    let base_flat = params.flatten();
    let mut max_rel: f64 = 0.0;
    for i in 0..base_flat.len() {
        let mut plus = base_flat.clone();
        plus[i] += h;
        let mut minus = base_flat.clone();
        minus[i] -= h;
        let f_plus: f64 = mlp_forward(spec, &MlpParams::from_flat(spec, &plus)?, batch)?
            .0
            .data
            .iter()
            .sum();
        let f_minus: f64 = mlp_forward(spec, &MlpParams::from_flat(spec, &minus)?, batch)?
            .0
            .data
            .iter()
            .sum();
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic_flat[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_spec(sizes: Vec<usize>) -> MlpSpec {
        MlpSpec::new(sizes, Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![6], Activation::Relu, Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![6, 0], Activation::Relu, Activation::Relu).is_err());
        let spec = relu_spec(vec![6, 60, 60, 60, 60, 3]);
        assert_eq!(spec.param_len(), 11_583);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = relu_spec(vec![9, 16, 4]);
        let a = init_params(&spec, 42);
        let b = init_params(&spec, 42);
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.0)));
        assert_ne!(a, init_params(&spec, 43));
    }

    #[test]
    fn init_variance_matches_uniform_law() {
        // Var(U(-a, a)) = a^2/3 = 2/fan_in for a = sqrt(6/fan_in).
        let fan_in = 50;
        let spec = relu_spec(vec![fan_in, 2000]);
        let params = init_params(&spec, 1);
        let w = &params.layers[0].weight;
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / fan_in as f64;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn forward_hand_cases() {
        // Zero params -> zero outputs.
        let spec = relu_spec(vec![3, 4, 2]);
        let params = MlpParams::zeros(&spec);
        let batch = Batch::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let (out, _) = mlp_forward(&spec, &params, &batch).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));

        // Single identity layer reproduces the input.
        let ident = MlpSpec::new(vec![2, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut p = MlpParams::zeros(&ident);
        p.layers[0].weight = vec![1.0, 0.0, 0.0, 1.0];
        let batch = Batch::new(1, 2, vec![-3.0, 7.0]).unwrap();
        let (out, _) = mlp_forward(&ident, &p, &batch).unwrap();
        assert_eq!(out.data, vec![-3.0, 7.0]);

        // [1,1] spec, w = 2, b = 1, relu output.
        let scalar = MlpSpec::new(vec![1, 1], Activation::Relu, Activation::Relu).unwrap();
        let mut p = MlpParams::zeros(&scalar);
        p.layers[0].weight = vec![2.0];
        p.layers[0].bias = vec![1.0];
        let (out, _) =
            mlp_forward(&scalar, &p, &Batch::new(2, 1, vec![-1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(out.data, vec![0.0, 7.0]);
    }

    #[test]
    fn forward_rejects_bad_width() {
        let spec = relu_spec(vec![3, 2]);
        let params = MlpParams::zeros(&spec);
        let batch = Batch::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(
            mlp_forward(&spec, &params, &batch),
            Err(NnError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_hand_cases() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.layers[0].weight = vec![1.0, 2.0, 3.0, 4.0];
        let batch = Batch::new(1, 2, vec![0.5, -0.5]).unwrap();
        let (_, cache) = mlp_forward(&spec, &p, &batch).unwrap();

        // Zero upstream gradient -> all grads zero.
        let zero = Batch::zeros(1, 2);
        let (g, gi) = mlp_backward(&spec, &p, &cache, &zero).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gi.data.iter().all(|&v| v == 0.0));

        // Identity net: input grad = W^T . grad_out.
        let go = Batch::new(1, 2, vec![1.0, -1.0]).unwrap();
        let (_, gi) = mlp_backward(&spec, &p, &cache, &go).unwrap();
        assert_eq!(gi.data, vec![1.0 - 3.0, 2.0 - 4.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = relu_spec(vec![4, 8, 8, 2]);
        let params = init_params(&spec, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Batch::new(6, 4, data).unwrap();
        let err = finite_diff_check(&spec, &params, &batch, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn finite_diff_is_exact_for_affine_nets() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Identity, Activation::Identity).unwrap();
        let params = init_params(&spec, 2);
        let batch = Batch::new(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let err = finite_diff_check(&spec, &params, &batch, 1e-5).unwrap();
        assert!(err < 1e-10, "max rel error {err}");
    }

    #[test]
    fn harness_detects_corrupted_gradients() {
        // Corrupt the backward pass indirectly: compare against a wrong
        // analytic gradient by shifting one weight between the two passes.
        let spec = relu_spec(vec![3, 5, 2]);
        let mut params = init_params(&spec, 9);
        let batch = Batch::new(4, 3, vec![0.3; 12]).unwrap();
        let honest = finite_diff_check(&spec, &params, &batch, 1e-5).unwrap();
        assert!(honest < 1e-6);

        // Recompute analytic grads at perturbed params but numeric at the
        // original ones; the harness must flag the discrepancy.
        let (out, cache) = mlp_forward(&spec, &params, &batch).unwrap();
        let ones = Batch::new(out.rows, out.cols, vec![1.0; out.data.len()]).unwrap();
        let (analytic, _) = mlp_backward(&spec, &params, &cache, &ones).unwrap();
        let mut corrupted = analytic.flatten();
        corrupted[0] += 1.0;
        params.layers[0].weight[0] += 0.0; // params unchanged
        let base = params.flatten();
        let mut plus = base.clone();
        plus[0] += 1e-5;
        let mut minus = base.clone();
        minus[0] -= 1e-5;
        let f = |flat: &[f64]| -> f64 {
            mlp_forward(&spec, &MlpParams::from_flat(&spec, flat).unwrap(), &batch)
                .unwrap()
                .0
                .data
                .iter()
                .sum()
        };
        let numeric = (f(&plus) - f(&minus)) / 2e-5;
        let rel = (corrupted[0] - numeric).abs() / corrupted[0].abs().max(numeric.abs()).max(1.0);
        assert!(rel > 1e-2);
    }

    #[test]
    fn relu_net_is_positively_homogeneous() {
        let spec = MlpSpec::new(vec![3, 8, 8, 2], Activation::Relu, Activation::Relu).unwrap();
        let params = init_params(&spec, 21); // biases are zero by construction
        let x = Batch::new(1, 3, vec![0.4, -0.7, 0.2]).unwrap();
        let alpha = 2.5;
        let xs = Batch::new(1, 3, x.data.iter().map(|v| alpha * v).collect()).unwrap();
        let (f1, _) = mlp_forward(&spec, &params, &x).unwrap();
        let (f2, _) = mlp_forward(&spec, &params, &xs).unwrap();
        for (a, b) in f1.data.iter().zip(&f2.data) {
            assert!((alpha * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adam_hand_cases() {
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let state = AdamState::new(1);

        // Zero gradient leaves parameters unchanged.
        let (p, s) = adam_step(&[0.7], &[0.0], &state, &cfg).unwrap();
        assert_eq!(p, vec![0.7]);
        assert_eq!(s.t, 1);

        // First step with unit gradient moves by ~lr.
        let (p, _) = adam_step(&[0.0], &[1.0], &state, &cfg).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-8, "update {}", p[0]);

        // Purity: identical calls give identical results.
        let (p1, s1) = adam_step(&[0.3], &[0.2], &state, &cfg).unwrap();
        let (p2, s2) = adam_step(&[0.3], &[0.2], &state, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn flatten_round_trip() {
        let spec = relu_spec(vec![4, 3, 2]);
        let params = init_params(&spec, 77);
        let flat = params.flatten();
        assert_eq!(flat.len(), spec.param_len());
        let back = MlpParams::from_flat(&spec, &flat).unwrap();
        assert_eq!(back, params);
    }
}
