//! Feedforward feature extractor with rectifier hidden layers and a linear
//! output layer, exact reverse-mode gradients, and greedy layerwise
//! pretraining through linear auxiliary decoders.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_step_uniform, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// One affine map followed by an activation. `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Self {
        Layer {
            weights,
            bias,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub(crate) fn glorot(out: usize, inp: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let weights = Array2::from_shape_fn((out, inp), |_| rng.random_range(-limit..limit));
        Layer::new(weights, Array1::zeros(out), activation)
    }

    /// Pre-activation and activation for a batch.
    fn forward_parts(&self, input: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut pre = input.dot(&self.weights.t());
        pre += &self.bias;
        let act = self.activation;
        let out = pre.mapv(|v| act.apply(v));
        (pre, out)
    }
}

/// The feature map M: X → H.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

/// Per-layer parameter gradients, shaped like the net.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl NetGradients {
    pub fn zeros_like(net: &FeedForwardNet) -> Self {
        NetGradients {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.len())).collect(),
        }
    }

    /// Flattened in the same order as [`FeedForwardNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

/// Activations cached by a forward pass: `inputs[l]` feeds layer `l`.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl FeedForwardNet {
    pub fn new(layers: Vec<Layer>, rng_seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("net needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::config(format!(
                    "layer {i}: bias length {} but {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
            if l.input_dim() == 0 || l.output_dim() == 0 {
                return Err(Error::config(format!("layer {i}: empty dimension")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::config(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        Ok(FeedForwardNet { layers, rng_seed })
    }

    /// Seeded network for `sizes = [D, h_1, …, Q]`: uniform Glorot weights,
    /// zero biases, rectifier hidden layers and a linear last layer.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Linear } else { Activation::Relu };
                Layer::glorot(w[1], w[0], act, &mut rng)
            })
            .collect();
        FeedForwardNet::new(layers, seed)
    }

    /// A single linear layer with identity weights and zero bias.
    pub fn identity(dim: usize) -> Self {
        FeedForwardNet {
            layers: vec![Layer::new(Array2::eye(dim), Array1::zeros(dim), Activation::Linear)],
            rng_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.len() == 1 && {
            let l = &self.layers[0];
            l.activation == Activation::Linear
                && l.weights.nrows() == l.weights.ncols()
                && l.weights == Array2::<f64>::eye(l.weights.nrows())
                && l.bias.iter().all(|&b| b == 0.0)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::output_dim).unwrap_or(0)
    }

    /// `[D, h_1, …, Q]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::output_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All weights (row-major) and biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "net has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut() {
                *w = flat[off];
                off += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "net expects {} input columns, got {}",
                self.input_dim(),
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Row i of the result is M(x_i).
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut h = batch.to_owned();
        for l in &self.layers {
            h = l.forward_parts(h.view()).1;
        }
        Ok(h)
    }

    fn trace(&self, batch: ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = batch.to_owned();
        for l in &self.layers {
            let (p, out) = l.forward_parts(h.view());
            inputs.push(h);
            pre.push(p);
            h = out;
        }
        Trace {
            inputs,
            pre,
            output: h,
        }
    }

    fn backward_trace(&self, trace: &Trace, upstream: ArrayView2<f64>) -> (NetGradients, Array2<f64>) {
        let mut grads = NetGradients::zeros_like(self);
        let mut delta = upstream.to_owned();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let act = l.activation;
            if act != Activation::Linear {
                ndarray::Zip::from(&mut delta)
                    .and(&trace.pre[li])
                    .for_each(|d, &p| *d *= act.derivative(p));
            }
            grads.weights[li] = delta.t().dot(&trace.inputs[li]);
            grads.biases[li] = delta.sum_axis(Axis(0));
            delta = delta.dot(&l.weights);
        }
        (grads, delta)
    }

    /// Gradients of Σ_ij upstream_ij · forward(batch)_ij with respect to the
    /// parameters and to the batch.
    pub fn backward(
        &self,
        batch: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<(NetGradients, Array2<f64>)> {
        self.check_batch(batch)?;
        if upstream.nrows() != batch.nrows() || upstream.ncols() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                batch.nrows(),
                self.output_dim()
            )));
        }
        let trace = self.trace(batch);
        Ok(self.backward_trace(&trace, upstream))
    }
}

/// Reconstruction error of one layer before and after pretraining.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    pub layer: usize,
    pub initial_mse: f64,
    pub final_mse: f64,
}

fn reconstruction_mse(pair: &FeedForwardNet, input: ArrayView2<f64>) -> (f64, Trace) {
    let tr = pair.trace(input);
    let diff = &tr.output - &input;
    let mse = diff.mapv(|v| v * v).sum() / diff.len() as f64;
    (mse, tr)
}

/// Greedy layerwise pretraining. Each layer gets a temporary linear decoder
/// back to its own input; the pair is trained by full-batch Adam on mean
/// squared reconstruction error, the decoder is dropped and the layer's
/// outputs become the next layer's training data. The best parameters seen
/// (including the starting point) are kept, so no layer gets worse.
pub fn pretrain_layerwise(
    net: &FeedForwardNet,
    data: ArrayView2<f64>,
    epochs: usize,
    step_size: f64,
    seed: u64,
) -> Result<(FeedForwardNet, Vec<ReconstructionReport>)> {
    net.check_batch(data)?;
    if data.nrows() < 2 {
        return Err(Error::input("pretraining needs at least two rows"));
    }
    if epochs == 0 {
        return Err(Error::config("pretraining epochs must be at least 1"));
    }
    let mut out = net.clone();
    let mut reports = Vec::with_capacity(net.layers.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = data.to_owned();
    let adam = AdamConfig::default();
    for li in 0..out.layers.len() {
        let layer = out.layers[li].clone();
        let decoder = Layer::glorot(layer.input_dim(), layer.output_dim(), Activation::Linear, &mut rng);
        let mut pair = FeedForwardNet::new(vec![layer, decoder], seed)?;
        let (initial, _) = reconstruction_mse(&pair, h.view());
        if !initial.is_finite() {
            return Err(Error::numerical(format!("layer {li}: non-finite reconstruction loss")));
        }
        let mut best = (initial, pair.params());
        let mut params = pair.params();
        let mut state = AdamState::new(params.len());
        let scale = 2.0 / h.len() as f64;
        for epoch in 0..epochs {
            let (mse, tr) = reconstruction_mse(&pair, h.view());
            if !mse.is_finite() {
                return Err(Error::numerical(format!(
                    "layer {li}, epoch {epoch}: non-finite reconstruction loss"
                )));
            }
            if mse < best.0 {
                best = (mse, params.clone());
            }
            let upstream = (&tr.output - &h) * scale;
            let (g, _) = pair.backward_trace(&tr, upstream.view());
            adam_step_uniform(&mut params, &g.flatten(), step_size, &mut state, &adam)?;
            pair.set_params(&params)?;
        }
        let (last, _) = reconstruction_mse(&pair, h.view());
        if !last.is_finite() {
            return Err(Error::numerical(format!("layer {li}: non-finite reconstruction loss")));
        }
        if last < best.0 {
            best = (last, params.clone());
        }
        pair.set_params(&best.1)?;
        reports.push(ReconstructionReport {
            layer: li,
            initial_mse: initial,
            final_mse: best.0,
        });
        let trained = pair.layers.swap_remove(0);
        h = trained.forward_parts(h.view()).1;
        out.layers[li] = trained;
    }
    Ok((out, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn small_net(seed: u64) -> FeedForwardNet {
        let mut net = FeedForwardNet::init(&[3, 5, 4, 2], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in &mut net.layers {
            l.bias = Array1::from_shape_fn(l.bias.len(), |_| rng.random_range(-0.3..0.3));
        }
        net
    }

    #[test]
    fn identity_forward() {
        let net = FeedForwardNet::identity(3);
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn dead_hidden_layer_outputs_bias_only() {
        let net = FeedForwardNet::new(
            vec![
                Layer::new(array![[1.0, 1.0], [2.0, 0.5]], array![-10.0, -10.0], Activation::Relu),
                Layer::new(array![[3.0, -1.0]], array![0.25], Activation::Linear),
            ],
            0,
        )
        .unwrap();
        let out = net.forward(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(out, array![[0.25]]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = small_net(1);
        let x = random_matrix(&mut rng, 4, 3);
        let out = net.forward(x.view()).unwrap();
        for r in 0..4 {
            let mut h: Vec<f64> = x.row(r).to_vec();
            for l in &net.layers {
                let mut next = vec![0.0; l.output_dim()];
                for o in 0..l.output_dim() {
                    let mut s = l.bias[o];
                    for i in 0..l.input_dim() {
                        s += l.weights[[o, i]] * h[i];
                    }
                    next[o] = if l.activation == Activation::Relu { s.max(0.0) } else { s };
                }
                h = next;
            }
            for (q, v) in h.iter().enumerate() {
                assert!((out[[r, q]] - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn forward_shape_error() {
        let net = small_net(0);
        assert!(matches!(net.forward(Array2::zeros((2, 4)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_upstream() {
        let net = small_net(2);
        let x = Array2::from_elem((3, 3), 0.4);
        let (g, gx) = net.backward(x.view(), Array2::zeros((3, 2)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_scalar_linear() {
        let net = FeedForwardNet::new(
            vec![Layer::new(array![[2.0]], array![0.5], Activation::Linear)],
            0,
        )
        .unwrap();
        let (g, gx) = net.backward(array![[3.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(g.weights[0][[0, 0]], 3.0);
        assert_eq!(g.biases[0][0], 1.0);
        assert_eq!(gx[[0, 0]], 2.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = small_net(4);
        let x = random_matrix(&mut rng, 5, 3);
        let up = random_matrix(&mut rng, 5, 2);
        let objective = |n: &FeedForwardNet, x: &Array2<f64>| (n.forward(x.view()).unwrap() * &up).sum();
        let (g, gx) = net.backward(x.view(), up.view()).unwrap();
        let analytic = g.flatten();
        let base = net.params();
        let h = 1e-5;
        for (i, a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] += h;
            let mut np = net.clone();
            np.set_params(&p).unwrap();
            p[i] -= 2.0 * h;
            let mut nm = net.clone();
            nm.set_params(&p).unwrap();
            let fd = (objective(&np, &x) - objective(&nm, &x)) / (2.0 * h);
            let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-5 || (fd - a).abs() < 1e-10, "param {i}: {a} vs {fd}");
        }
        for r in 0..5 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (objective(&net, &xp) - objective(&net, &xm)) / (2.0 * h);
                let a = gx[[r, c]];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-5 || (fd - a).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn backward_upstream_shape_error() {
        let net = small_net(0);
        let x = Array2::zeros((2, 3));
        assert!(net.backward(x.view(), Array2::zeros((2, 3)).view()).is_err());
    }

    #[test]
    fn last_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = small_net(5);
        let x = random_matrix(&mut rng, 3, 3);
        let last = net.layers.len() - 1;
        let w0 = net.layers[last].weights.clone();
        let dw = random_matrix(&mut rng, w0.nrows(), w0.ncols());
        let outs: Vec<Array2<f64>> = [0.0, 1.0, 2.0]
            .iter()
            .map(|t| {
                let mut n = net.clone();
                n.layers[last].weights = &w0 + &(&dw * *t);
                n.forward(x.view()).unwrap()
            })
            .collect();
        let second_diff = &outs[2] - &(&outs[1] * 2.0) + &outs[0];
        assert!(second_diff.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pretrain_zero_step_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = small_net(6);
        let x = random_matrix(&mut rng, 10, 3);
        let (out, reports) = pretrain_layerwise(&net, x.view(), 1, 0.0, 1).unwrap();
        assert_eq!(out, net);
        for r in reports {
            assert_eq!(r.initial_mse, r.final_mse);
        }
    }

    #[test]
    fn pretrain_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let net = small_net(7);
        let x = random_matrix(&mut rng, 20, 3);
        let (a, ra) = pretrain_layerwise(&net, x.view(), 40, 1e-2, 5).unwrap();
        let (b, _) = pretrain_layerwise(&net, x.view(), 40, 1e-2, 5).unwrap();
        assert_eq!(a.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        for r in &ra {
            assert!(r.final_mse <= r.initial_mse);
        }
        assert!(ra.iter().any(|r| r.final_mse < r.initial_mse));
    }

    #[test]
    fn pretrain_square_linear_layer_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_matrix(&mut rng, 50, 4);
        let net = FeedForwardNet::new(
            vec![Layer::glorot(4, 4, Activation::Linear, &mut rng)],
            0,
        )
        .unwrap();
        let (_, reports) = pretrain_layerwise(&net, x.view(), 3000, 1e-2, 3).unwrap();
        let mean = x.mean().unwrap();
        let var = x.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let r = reports[0];
        assert!(r.final_mse < r.initial_mse);
        assert!(r.final_mse <= 1e-3 * var, "final {} var {}", r.final_mse, var);
    }

    #[test]
    fn pretrain_rejects_bad_input() {
        let net = small_net(0);
        assert!(pretrain_layerwise(&net, Array2::zeros((1, 3)).view(), 1, 1e-3, 0).is_err());
        assert!(pretrain_layerwise(&net, Array2::zeros((4, 3)).view(), 0, 1e-3, 0).is_err());
    }

    proptest! {
        #[test]
        fn hidden_outputs_nonnegative(seed in 0u64..500, vals in prop::collection::vec(-5.0f64..5.0, 6)) {
            let net = small_net(seed);
            let x = Array2::from_shape_vec((2, 3), vals).unwrap();
            let mut h = x.clone();
            for l in &net.layers[..net.layers.len() - 1] {
                h = l.forward_parts(h.view()).1;
                prop_assert!(h.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
