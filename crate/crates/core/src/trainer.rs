//! Joint maximization of the minibatch ELBO over every parameter group with
//! Adam, plus a finite-difference gradient harness.

use std::fmt;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deepnet::{pretrain_layerwise, FeedForwardNet};
use crate::error::{Error, Result};
use crate::kernels::{ArdKernelParams, DEFAULT_JITTER};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::svgp::{elbo_with_gradients, init_inducing, Normalizer, SvdklModel, SvgpHead};
use crate::vc::{build_training_set, f0_stats, AlignedCorpus, UtterancePair, DEFAULT_ALPHA};

/// Training hyperparameters. `layer_sizes` lists hidden sizes and the
/// feature size Q but not the input size; an empty list trains a plain SVGP
/// on the (normalized) raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for kernel, variational and noise parameters.
    pub step_size: f64,
    /// Step size for net weights and biases.
    pub net_step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub inducing_count: usize,
    pub layer_sizes: Vec<usize>,
    pub pretrain_epochs: usize,
    pub pretrain_step_size: f64,
    pub jitter_base: f64,
    pub seed: u64,
    pub shared_inducing: bool,
    /// Evaluate the full-data ELBO after every epoch.
    pub log_full_elbo: bool,
    pub warping_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 256,
            step_size: 1e-2,
            net_step_size: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            inducing_count: 200,
            layer_sizes: vec![1000, 500, 50, 20],
            pretrain_epochs: 50,
            pretrain_step_size: 1e-3,
            jitter_base: DEFAULT_JITTER,
            seed: 0,
            shared_inducing: false,
            log_full_elbo: true,
            warping_alpha: DEFAULT_ALPHA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.step_size > 0.0) || !(self.net_step_size >= 0.0) {
            return Err(Error::config("step sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        if self.inducing_count == 0 {
            return Err(Error::config("inducing count must be at least 1"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer sizes must be at least 1"));
        }
        if !(self.jitter_base > 0.0) {
            return Err(Error::config("jitter base must be positive"));
        }
        if !(self.warping_alpha.abs() < 1.0) {
            return Err(Error::config("warping alpha must satisfy |alpha| < 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Parameter groups, in packing order within each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Net,
    Ard,
    InducingInputs,
    Mean,
    CholS,
    Noise,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Net,
        Group::Ard,
        Group::Mean,
        Group::CholS,
        Group::InducingInputs,
        Group::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Net => "net",
            Group::Ard => "ard",
            Group::InducingInputs => "Z",
            Group::Mean => "m",
            Group::CholS => "chol_S",
            Group::Noise => "noise",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A contiguous slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub group: Group,
    pub head: Option<usize>,
    pub range: Range<usize>,
}

/// Maps model parameters onto one flat vector: net, ARD, then for each head
/// Z, m, the lower triangle of chol_S (log diagonal) and log noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub segments: Vec<Segment>,
    pub len: usize,
}

impl ParamLayout {
    pub fn of(model: &SvdklModel) -> Self {
        let mut segments = Vec::new();
        let mut off = 0;
        let mut push = |group, head, n: usize| {
            segments.push(Segment {
                group,
                head,
                range: off..off + n,
            });
            off += n;
        };
        push(Group::Net, None, model.net.num_params());
        push(Group::Ard, None, 1 + model.kernel.dim());
        for (d, h) in model.heads.iter().enumerate() {
            let m = h.state.num_inducing();
            push(Group::InducingInputs, Some(d), h.state.inducing_inputs.len());
            push(Group::Mean, Some(d), m);
            push(Group::CholS, Some(d), m * (m + 1) / 2);
            push(Group::Noise, Some(d), 1);
        }
        ParamLayout { segments, len: off }
    }

    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| s.group == group)
            .flat_map(|s| s.range.clone())
            .collect()
    }

    pub fn group_of(&self, index: usize) -> Group {
        self.segments
            .iter()
            .find(|s| s.range.contains(&index))
            .map(|s| s.group)
            .expect("index inside layout")
    }
}

/// Current parameter values, flattened per [`ParamLayout`].
pub fn pack(model: &SvdklModel) -> Vec<f64> {
    let mut out = model.net.params();
    out.push(model.kernel.log_signal_variance);
    out.extend(model.kernel.log_length_scales.iter().copied());
    for h in &model.heads {
        out.extend(h.state.inducing_inputs.iter().copied());
        out.extend(h.state.mean.iter().copied());
        let m = h.state.num_inducing();
        for i in 0..m {
            for j in 0..=i {
                out.push(h.state.chol_s_raw[[i, j]]);
            }
        }
        out.push(h.log_noise_variance);
    }
    out
}

/// Writes a flat vector produced by [`pack`] back into the model.
pub fn unpack(model: &mut SvdklModel, flat: &[f64]) -> Result<()> {
    let layout = ParamLayout::of(model);
    if flat.len() != layout.len {
        return Err(Error::shape(format!("expected {} parameters, got {}", layout.len, flat.len())));
    }
    let mut it = flat.iter().copied();
    let net: Vec<f64> = it.by_ref().take(model.net.num_params()).collect();
    model.net.set_params(&net)?;
    model.kernel.log_signal_variance = it.next().unwrap();
    for v in model.kernel.log_length_scales.iter_mut() {
        *v = it.next().unwrap();
    }
    for h in &mut model.heads {
        for v in h.state.inducing_inputs.iter_mut() {
            *v = it.next().unwrap();
        }
        for v in h.state.mean.iter_mut() {
            *v = it.next().unwrap();
        }
        let m = h.state.num_inducing();
        for i in 0..m {
            for j in 0..=i {
                h.state.chol_s_raw[[i, j]] = it.next().unwrap();
            }
        }
        h.log_noise_variance = it.next().unwrap();
    }
    Ok(())
}

/// Gradient of the negative minibatch ELBO, flattened per [`ParamLayout`].
#[derive(Debug, Clone)]
pub struct GradientRecord {
    /// Negative minibatch ELBO at the evaluation point.
    pub objective: f64,
    pub values: Vec<f64>,
    pub layout: ParamLayout,
    /// K_ZZ factorizations performed while computing this record.
    pub factorizations: usize,
    pub jitter_escalations: u32,
}

impl GradientRecord {
    pub fn group(&self, group: Group) -> Vec<f64> {
        self.layout.group_indices(group).into_iter().map(|i| self.values[i]).collect()
    }
}

/// Gradients of −ELBO_B (minibatch estimate) for every parameter group.
pub fn compute_gradients(
    model: &SvdklModel,
    xb: ArrayView2<f64>,
    yb: ArrayView2<f64>,
    total_n: usize,
) -> Result<GradientRecord> {
    if xb.nrows() == 0 {
        return Err(Error::input("gradient batch is empty"));
    }
    let obj = elbo_with_gradients(model, xb, yb, total_n)?;
    let layout = ParamLayout::of(model);
    let mut values = Vec::with_capacity(layout.len);
    values.extend(obj.net.flatten().iter().map(|v| -v));
    values.push(-obj.log_signal_variance);
    values.extend(obj.log_length_scales.iter().map(|v| -v));
    for g in &obj.heads {
        values.extend(g.inducing_inputs.iter().map(|v| -v));
        values.extend(g.mean.iter().map(|v| -v));
        let m = g.mean.len();
        for i in 0..m {
            for j in 0..=i {
                values.push(-g.chol_s_raw[[i, j]]);
            }
        }
        values.push(-g.log_noise_variance);
    }
    debug_assert_eq!(values.len(), layout.len);
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite gradient in group '{}'",
            layout.group_of(i)
        )));
    }
    Ok(GradientRecord {
        objective: -obj.elbo,
        values,
        layout,
        factorizations: obj.factorizations,
        jitter_escalations: obj.jitter_escalations,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean negative minibatch ELBO over the epoch's steps.
    pub mean_objective: f64,
    pub full_elbo: Option<f64>,
    pub jitter_escalations: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainingLog {
    pub const TSV_HEADER: &'static str = "epoch\tmean_objective\tfull_elbo\tjitter_escalations";

    pub fn tsv_row(r: &EpochRecord) -> String {
        let elbo = r.full_elbo.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        format!("{}\t{}\t{}\t{}", r.epoch, r.mean_objective, elbo, r.jitter_escalations)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::TSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::tsv_row(r));
            s.push('\n');
        }
        s
    }
}

fn column_variance(y: ArrayView2<f64>) -> Array1<f64> {
    y.var_axis(Axis(0), 0.0)
}

/// Builds an untrained model: normalizer, centers, (pretrained) net, kernel
/// heuristics and heads initialized from a seeded subset of features.
pub fn initialize_model(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
    log: &mut TrainingLog,
) -> Result<SvdklModel> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::input("training data is empty"));
    }
    if y.nrows() != n {
        return Err(Error::shape(format!("{n} input rows but {} target rows", y.nrows())));
    }
    if y.ncols() == 0 || x.ncols() == 0 {
        return Err(Error::input("training data has no columns"));
    }
    let normalizer = Normalizer::fit(x)?;
    let xn = normalizer.apply(x)?;
    let centers = y.mean_axis(Axis(0)).expect("nonempty");
    let yc = &y - &centers;

    let net = if cfg.layer_sizes.is_empty() {
        FeedForwardNet::identity(x.ncols())
    } else {
        let mut sizes = vec![x.ncols()];
        sizes.extend(&cfg.layer_sizes);
        let net = FeedForwardNet::init(&sizes, cfg.seed)?;
        if cfg.pretrain_epochs > 0 && n >= 2 {
            pretrain_layerwise(&net, xn.view(), cfg.pretrain_epochs, cfg.pretrain_step_size, cfg.seed)?.0
        } else {
            net
        }
    };
    let h = net.forward(xn.view())?;
    let q = h.ncols();

    let var_y = column_variance(yc.view());
    let mean_var = var_y.mean().unwrap_or(1.0);
    let sf2 = if mean_var > 1e-12 { mean_var } else { 1.0 };
    let h_std = column_variance(h.view()).mapv(f64::sqrt);
    let ls: Vec<f64> = h_std
        .iter()
        .map(|s| if *s > 1e-12 { s * (q as f64).sqrt() } else { 1.0 })
        .collect();
    let kernel = ArdKernelParams::new(sf2, &ls)?;

    let m = if cfg.inducing_count > n {
        log.warnings.push(format!(
            "requested {} inducing inputs but only {n} training rows; using {n}",
            cfg.inducing_count
        ));
        n
    } else {
        cfg.inducing_count
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let shared = if cfg.shared_inducing {
        Some(init_inducing(h.view(), m, 1e-3, &mut rng)?)
    } else {
        None
    };
    let mut heads = Vec::with_capacity(y.ncols());
    for d in 0..y.ncols() {
        let z = match &shared {
            Some(z) => z.clone(),
            None => init_inducing(h.view(), m, 1e-3, &mut rng)?,
        };
        let noise = (0.1 * var_y[d]).max(1e-6);
        heads.push(SvgpHead::from_inducing(z, &kernel, 0.1, noise, cfg.jitter_base)?);
    }
    let mut model = SvdklModel::new(net, kernel, heads, cfg.jitter_base)?;
    model.input_normalizer = normalizer;
    model.output_centers = centers;
    model.warping_alpha = cfg.warping_alpha;
    Ok(model)
}

fn step_sizes(layout: &ParamLayout, cfg: &TrainConfig, frozen: &[Group]) -> Vec<f64> {
    let mut lrs = vec![0.0; layout.len];
    for s in &layout.segments {
        let lr = if frozen.contains(&s.group) {
            0.0
        } else if s.group == Group::Net {
            cfg.net_step_size
        } else {
            cfg.step_size
        };
        for i in s.range.clone() {
            lrs[i] = lr;
        }
    }
    lrs
}

/// Sums inducing-input gradients over heads when Z is shared.
fn tie_inducing(grad: &mut [f64], layout: &ParamLayout) {
    let segs: Vec<&Segment> = layout
        .segments
        .iter()
        .filter(|s| s.group == Group::InducingInputs)
        .collect();
    if segs.len() < 2 {
        return;
    }
    let len = segs[0].range.len();
    let mut total = vec![0.0; len];
    for s in &segs {
        for (t, i) in total.iter_mut().zip(s.range.clone()) {
            *t += grad[i];
        }
    }
    for s in &segs {
        for (t, i) in total.iter().zip(s.range.clone()) {
            grad[i] = *t;
        }
    }
}

/// Adam over `(x, y)` starting from `model`, leaving `frozen` groups fixed.
/// Minibatches come from a per-epoch seeded shuffle; the final short batch is kept.
pub fn optimize(
    model: &mut SvdklModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
    frozen: &[Group],
    log: &mut TrainingLog,
) -> Result<()> {
    cfg.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::input("training data is empty"));
    }
    let layout = ParamLayout::of(model);
    let lrs = step_sizes(&layout, cfg, frozen);
    let adam = cfg.adam();
    let mut params = pack(model);
    let mut state = AdamState::new(layout.len);
    let mut order: Vec<usize> = (0..n).collect();
    let bs = cfg.batch_size.min(n);
    let tied = cfg.shared_inducing && model.heads.len() > 1;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + epoch as u64);
        if bs < n {
            order.sort_unstable();
            order.shuffle(&mut rng);
        }
        let mut obj_sum = 0.0;
        let mut steps = 0usize;
        let mut escalations = 0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let mut g = compute_gradients(model, xb.view(), yb.view(), n).map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            if tied {
                tie_inducing(&mut g.values, &layout);
            }
            obj_sum += g.objective;
            escalations += g.jitter_escalations;
            steps += 1;
            adam_step(&mut params, &g.values, &lrs, &mut state, &adam)?;
            unpack(model, &params)?;
        }
        let full_elbo = if cfg.log_full_elbo {
            Some(model.elbo_full(x, y).map_err(|e| match e {
                Error::Numerical(msg) => Error::numerical(format!("epoch {epoch}: {msg}")),
                other => other,
            })?)
        } else {
            None
        };
        log.records.push(EpochRecord {
            epoch,
            mean_objective: obj_sum / steps as f64,
            full_elbo,
            jitter_escalations: escalations,
        });
    }
    Ok(())
}

/// Full training run on raw `(x, y)`: normalize, center, pretrain,
/// initialize heads, then Adam on the negative minibatch ELBO.
pub fn train_regressor(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(SvdklModel, TrainingLog)> {
    let mut log = TrainingLog::default();
    let mut model = initialize_model(x, y, cfg, &mut log)?;
    let frozen: &[Group] = if cfg.layer_sizes.is_empty() { &[Group::Net] } else { &[] };
    optimize(&mut model, x, y, cfg, frozen, &mut log)?;
    Ok((model, log))
}

/// Trains on an aligned corpus.
pub fn train(corpus: &AlignedCorpus, cfg: &TrainConfig) -> Result<(SvdklModel, TrainingLog)> {
    corpus.validate()?;
    if corpus.is_empty() {
        return Err(Error::input("aligned corpus is empty"));
    }
    train_regressor(corpus.x.view(), corpus.y.view(), cfg)
}

/// Aligns the pairs, trains, and attaches source/target F0 statistics.
pub fn train_pairs(pairs: &[UtterancePair], cfg: &TrainConfig) -> Result<(SvdklModel, TrainingLog)> {
    let corpus = build_training_set(pairs)?;
    let fs = f0_stats(pairs.iter().map(|p| &p.source))?;
    let ft = f0_stats(pairs.iter().map(|p| &p.target))?;
    let (mut model, log) = train(&corpus, cfg)?;
    model.f0_source = Some(fs);
    model.f0_target = Some(ft);
    Ok((model, log))
}

/// Worst relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: Group,
    pub max_relative_error: f64,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_relative_error <= self.tolerance)
    }

    pub fn failing(&self) -> Vec<Group> {
        self.groups
            .iter()
            .filter(|g| !(g.max_relative_error <= self.tolerance))
            .map(|g| g.group)
            .collect()
    }

    pub fn error(&self, group: Group) -> Option<f64> {
        self.groups.iter().find(|g| g.group == group).map(|g| g.max_relative_error)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "group\tentries\tmax_rel_err\tstatus")?;
        for g in &self.groups {
            let ok = if g.max_relative_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{}\t{}\t{:.3e}\t{}", g.group, g.entries, g.max_relative_error, ok)?;
        }
        Ok(())
    }
}

/// Central-difference step used by the harness.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors of near-zero entries.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Relative error with a small absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_REL_FLOOR)
}

/// Compares `compute_gradients` on the full data against central differences.
pub fn grad_check(model: &SvdklModel, x: ArrayView2<f64>, y: ArrayView2<f64>, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(model, x, y, tolerance, |m| {
        compute_gradients(m, x, y, x.nrows()).map(|g| g.values)
    })
}

/// [`grad_check`] against an arbitrary analytic gradient provider.
pub fn grad_check_with<F>(
    model: &SvdklModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    tolerance: f64,
    analytic: F,
) -> Result<GradCheckReport>
where
    F: Fn(&SvdklModel) -> Result<Vec<f64>>,
{
    let n = x.nrows();
    let layout = ParamLayout::of(model);
    let grads = analytic(model)?;
    if grads.len() != layout.len {
        return Err(Error::shape("analytic gradient length does not match the layout"));
    }
    let base = pack(model);
    let objective = |p: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        unpack(&mut m, p)?;
        Ok(-m.elbo_minibatch(x, y, n)?)
    };
    let mut worst: Vec<GroupError> = Group::ALL
        .iter()
        .map(|&g| GroupError {
            group: g,
            max_relative_error: 0.0,
            entries: 0,
        })
        .collect();
    let mut p = base.clone();
    for i in 0..layout.len {
        p[i] = base[i] + FD_STEP;
        let fp = objective(&p)?;
        p[i] = base[i] - FD_STEP;
        let fm = objective(&p)?;
        p[i] = base[i];
        let fd = (fp - fm) / (2.0 * FD_STEP);
        let err = relative_error(grads[i], fd);
        let slot = worst.iter_mut().find(|w| w.group == layout.group_of(i)).unwrap();
        slot.entries += 1;
        if !(err <= slot.max_relative_error) {
            slot.max_relative_error = err;
        }
    }
    worst.retain(|w| w.entries > 0);
    Ok(GradCheckReport {
        groups: worst,
        tolerance,
    })
}

/// Small random problem for exercising the gradient harness: `heads` outputs
/// over `input_dim` inputs, with non-trivial variational parameters.
pub fn toy_problem(
    cfg: &TrainConfig,
    input_dim: usize,
    heads: usize,
    points: usize,
) -> Result<(SvdklModel, Array2<f64>, Array2<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Array2::from_shape_fn((points, input_dim), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((points, heads), |(i, d)| {
        (x[[i, 0]] * (d + 1) as f64).sin() + 0.1 * rng.random_range(-1.0..1.0)
    });
    let mut cfg = cfg.clone();
    cfg.pretrain_epochs = cfg.pretrain_epochs.min(5);
    let mut log = TrainingLog::default();
    let mut model = initialize_model(x.view(), y.view(), &cfg, &mut log)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for l in &mut model.net.layers {
        l.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    for h in &mut model.heads {
        h.state.mean.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let m = h.state.num_inducing();
        for i in 0..m {
            for j in 0..i {
                h.state.chol_s_raw[[i, j]] += rng.random_range(-0.05..0.05);
            }
            h.state.chol_s_raw[[i, i]] += rng.random_range(-0.2..0.2);
        }
    }
    Ok((model, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            inducing_count: 5,
            layer_sizes: vec![6, 3],
            pretrain_epochs: 5,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let (model, _, _) = toy_problem(&toy_cfg(), 3, 2, 12).unwrap();
        let p = pack(&model);
        assert_eq!(p.len(), ParamLayout::of(&model).len);
        let mut m2 = model.clone();
        unpack(&mut m2, &p).unwrap();
        assert_eq!(m2, model);
        assert!(unpack(&mut m2, &p[1..]).is_err());
    }

    #[test]
    fn one_factorization_per_head() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 2, 12).unwrap();
        let g = compute_gradients(&model, x.view(), y.view(), 12).unwrap();
        assert_eq!(g.factorizations, 2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 2, 12).unwrap();
        let report = grad_check(&model, x.view(), y.view(), 1e-4).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.groups.len(), 6);
    }

    #[test]
    fn grad_check_infinite_tolerance_passes() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 1, 8).unwrap();
        let report = grad_check_with(&model, x.view(), y.view(), f64::INFINITY, |m| {
            Ok(vec![1e6; ParamLayout::of(m).len])
        })
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn grad_check_flags_corrupted_group() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 2, 10).unwrap();
        let report = grad_check_with(&model, x.view(), y.view(), 1e-4, |m| {
            let mut g = compute_gradients(m, x.view(), y.view(), x.nrows())?;
            for i in g.layout.group_indices(Group::Noise) {
                g.values[i] *= 1.5;
            }
            Ok(g.values)
        })
        .unwrap();
        assert_eq!(report.failing(), vec![Group::Noise]);
    }

    #[test]
    fn mean_gradient_vanishes_at_prior() {
        let cfg = TrainConfig {
            layer_sizes: vec![],
            inducing_count: 4,
            ..toy_cfg()
        };
        let (mut model, x, _) = toy_problem(&cfg, 2, 1, 10).unwrap();
        model.kernel.log_length_scales.fill(20.0);
        let z = model.heads[0].state.inducing_inputs.clone();
        model.heads[0] = SvgpHead::from_inducing(z, &model.kernel, 1.0, 0.1, model.jitter_base).unwrap();
        let y = Array2::from_elem((10, 1), model.output_centers[0]);
        let g = compute_gradients(&model, x.view(), y.view(), 10).unwrap();
        for v in g.group(Group::Mean) {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn duplicated_batch_keeps_data_gradient() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 1, 6).unwrap();
        let g1 = compute_gradients(&model, x.view(), y.view(), 6).unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let y2 = ndarray::concatenate(Axis(0), &[y.view(), y.view()]).unwrap();
        let g2 = compute_gradients(&model, x2.view(), y2.view(), 6).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn full_batch_steps_use_identical_gradients() {
        let (model, x, y) = toy_problem(&toy_cfg(), 3, 1, 8).unwrap();
        let mut perm: Vec<usize> = (0..8).collect();
        perm.reverse();
        let xs = x.select(Axis(0), &perm);
        let ys = y.select(Axis(0), &perm);
        let a = compute_gradients(&model, x.view(), y.view(), 8).unwrap();
        let b = compute_gradients(&model, xs.view(), ys.view(), 8).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig { epochs: 0, ..toy_cfg() };
        let x = Array2::zeros((4, 2));
        assert!(matches!(train_regressor(x.view(), x.view(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = AlignedCorpus {
            x: Array2::zeros((0, 24)),
            y: Array2::zeros((0, 24)),
            provenance: vec![],
        };
        assert!(matches!(train(&c, &toy_cfg()), Err(Error::Input(_))));
    }

    #[test]
    fn inducing_count_clamped_with_warning() {
        let cfg = TrainConfig { inducing_count: 50, epochs: 1, ..toy_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let y = x.column(0).to_owned().insert_axis(Axis(1));
        let (model, log) = train_regressor(x.view(), y.view(), &cfg).unwrap();
        assert_eq!(model.heads[0].state.num_inducing(), 10);
        assert_eq!(log.warnings.len(), 1);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((30, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((30, 2), |(i, d)| f64::sin(x[[i, d]]));
        let (a, la) = train_regressor(x.view(), y.view(), &toy_cfg()).unwrap();
        let (b, lb) = train_regressor(x.view(), y.view(), &toy_cfg()).unwrap();
        let pa: Vec<u64> = pack(&a).iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = pack(&b).iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb);
        assert_eq!(la, lb);
    }

    #[test]
    fn shared_inducing_stays_tied() {
        let cfg = TrainConfig { shared_inducing: true, ..toy_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((20, 3), |(i, d)| f64::cos(x[[i, d]]));
        let (m, _) = train_regressor(x.view(), y.view(), &cfg).unwrap();
        assert_eq!(m.heads[0].state.inducing_inputs, m.heads[1].state.inducing_inputs);
        assert_eq!(m.heads[0].state.inducing_inputs, m.heads[2].state.inducing_inputs);
    }

    #[test]
    fn small_steps_reduce_objective() {
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 64,
            step_size: 1e-3,
            net_step_size: 1e-4,
            ..toy_cfg()
        };
        let (mut model, x, y) = toy_problem(&cfg, 3, 2, 16).unwrap();
        let before = model.elbo_full(x.view(), y.view()).unwrap();
        let mut log = TrainingLog::default();
        optimize(&mut model, x.view(), y.view(), &cfg, &[], &mut log).unwrap();
        let after = model.elbo_full(x.view(), y.view()).unwrap();
        assert!(-after <= -before);
        assert_eq!(log.records.len(), 100);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..toy_cfg() }.validate().is_err());
        assert!(TrainConfig { adam_beta1: 1.0, ..toy_cfg() }.validate().is_err());
        assert!(TrainConfig { step_size: 0.0, ..toy_cfg() }.validate().is_err());
        assert!(toy_cfg().validate().is_ok());
    }
}
