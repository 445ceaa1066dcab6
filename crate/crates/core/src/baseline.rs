//! Point-estimate comparator: the same feature net with a linear output
//! layer, trained on mean squared error with early stopping.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deepnet::{pretrain_layerwise, Activation, FeedForwardNet, Layer};
use crate::error::{Error, Result};
use crate::optim::{adam_step_uniform, AdamState};
use crate::svgp::Normalizer;
use crate::trainer::TrainConfig;

/// Fraction of rows held out for early stopping.
pub const VALIDATION_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DnnRegressor {
    /// Feature layers followed by the linear output layer.
    pub net: FeedForwardNet,
    pub input_normalizer: Normalizer,
    pub output_centers: ndarray::Array1<f64>,
}

impl DnnRegressor {
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let xn = self.input_normalizer.apply(x)?;
        Ok(self.net.forward(xn.view())? + &self.output_centers)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineReport {
    /// Validation RMSE of the returned (best) parameters.
    pub validation_rmse: f64,
    /// Validation RMSE before the first update.
    pub initial_rmse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<f64>,
}

/// Seeded 80/20 split of `0..n` into (train, validation) row indices.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::input("need at least two rows to hold out a validation set"));
    }
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

pub fn rmse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let d = &pred - &target;
    (d.mapv(|v| v * v).sum() / d.len().max(1) as f64).sqrt()
}

fn build_net(d: usize, p: usize, xn: ArrayView2<f64>, cfg: &TrainConfig) -> Result<FeedForwardNet> {
    let mut layers = if cfg.layer_sizes.is_empty() {
        Vec::new()
    } else {
        let mut sizes = vec![d];
        sizes.extend(&cfg.layer_sizes);
        let mut net = FeedForwardNet::init(&sizes, cfg.seed)?;
        if cfg.pretrain_epochs > 0 && xn.nrows() >= 2 {
            net = pretrain_layerwise(&net, xn, cfg.pretrain_epochs, cfg.pretrain_step_size, cfg.seed)?.0;
        }
        net.layers
    };
    let q = layers.last().map_or(d, Layer::output_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    layers.push(Layer::glorot(p, q, Activation::Linear, &mut rng));
    FeedForwardNet::new(layers, cfg.seed)
}

/// Trains the baseline on a seeded 80/20 split of `(x, y)` for at most
/// `cfg.epochs` epochs. Training stops once the validation RMSE has failed
/// to improve for more than `patience` consecutive epochs; the best
/// parameters seen are returned.
pub fn run_baseline_dnn(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
    patience: usize,
) -> Result<(DnnRegressor, BaselineReport)> {
    cfg.validate()?;
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::shape(format!("{n} input rows but {} target rows", y.nrows())));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::input("training data has no columns"));
    }
    let (tr, va) = split_indices(n, cfg.seed)?;
    let xt = x.select(Axis(0), &tr);
    let yt = y.select(Axis(0), &tr);
    let xv = x.select(Axis(0), &va);
    let yv = y.select(Axis(0), &va);

    let normalizer = Normalizer::fit(xt.view())?;
    let xtn = normalizer.apply(xt.view())?;
    let xvn = normalizer.apply(xv.view())?;
    let centers = yt.mean_axis(Axis(0)).expect("nonempty");
    let ytc = &yt - &centers;
    let yvc = &yv - &centers;

    let mut net = build_net(x.ncols(), y.ncols(), xtn.view(), cfg)?;
    let adam = cfg.adam();
    let mut params = net.params();
    let mut state = AdamState::new(params.len());
    let nt = tr.len();
    let bs = cfg.batch_size.min(nt);
    let mut order: Vec<usize> = (0..nt).collect();

    let initial_rmse = rmse(net.forward(xvn.view())?.view(), yvc.view());
    let mut best = (initial_rmse, params.clone(), 0usize);
    let mut history = Vec::new();
    let mut stale = 0usize;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let xb = xtn.select(Axis(0), chunk);
            let yb = ytc.select(Axis(0), chunk);
            let pred = net.forward(xb.view())?;
            let upstream = (&pred - &yb) * (2.0 / pred.len() as f64);
            let (g, _) = net.backward(xb.view(), upstream.view())?;
            adam_step_uniform(&mut params, &g.flatten(), cfg.net_step_size, &mut state, &adam)?;
            net.set_params(&params)?;
        }
        epochs_run = epoch + 1;
        let v = rmse(net.forward(xvn.view())?.view(), yvc.view());
        if !v.is_finite() {
            return Err(Error::numerical(format!("baseline validation error diverged at epoch {epoch}")));
        }
        history.push(v);
        if v < best.0 {
            best = (v, params.clone(), epochs_run);
            stale = 0;
        } else {
            stale += 1;
            if stale > patience {
                break;
            }
        }
    }
    net.set_params(&best.1)?;
    Ok((
        DnnRegressor {
            net,
            input_normalizer: normalizer,
            output_centers: centers,
        },
        BaselineReport {
            validation_rmse: best.0,
            initial_rmse,
            best_epoch: best.2,
            epochs_run,
            history,
        },
    ))
}
