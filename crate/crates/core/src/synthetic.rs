//! Seeded synthetic data: a nonsmooth regression task for model comparison
//! and a parallel corpus whose target is a known function of the source.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::vc::{Utterance, UtterancePair, MCC_COUNT};

/// Input and output widths of [`piecewise_regression`].
pub const PIECEWISE_INPUT_DIM: usize = 4;
pub const PIECEWISE_OUTPUT_DIM: usize = 2;

/// Noise-free targets of the piecewise task: jumps across an oblique plane
/// and a threshold, kinks along |x0 − x2|, smooth parts elsewhere.
pub fn piecewise_target(x: ArrayView1<f64>) -> [f64; PIECEWISE_OUTPUT_DIM] {
    let (a, b, c, d) = (x[0], x[1], x[2], x[3]);
    let f1 = if a + b > 0.0 { 1.0 + 0.5 * c } else { -1.0 + 0.5 * d };
    let f2 = (a - c).abs() + if d > 0.3 { 0.8 } else { 0.0 } - 0.5 * b * b;
    [f1, f2]
}

/// `n` rows with inputs uniform on [−1, 1]⁴ and Gaussian noise of standard
/// deviation `noise_std` added to each target.
pub fn piecewise_regression(n: usize, noise_std: f64, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(noise_std >= 0.0) {
        return Err(Error::config("noise standard deviation must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, PIECEWISE_INPUT_DIM), |_| rng.random_range(-1.0..1.0));
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut y = Array2::zeros((n, PIECEWISE_OUTPUT_DIM));
    for (i, row) in x.rows().into_iter().enumerate() {
        let f = piecewise_target(row);
        for (d, v) in f.iter().enumerate() {
            y[[i, d]] = v + if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub pairs: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Target length / source length is drawn from this range.
    pub stretch: (f64, f64),
    /// Standard deviation of noise added to target MCC(1..24).
    pub mcc_noise: f64,
    /// Target log F0 = `f0_scale` · source log F0 + `f0_shift`.
    pub f0_scale: f64,
    pub f0_shift: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            pairs: 6,
            min_frames: 60,
            max_frames: 90,
            stretch: (0.85, 1.2),
            mcc_noise: 0.005,
            f0_scale: 0.9,
            f0_shift: 200f64.ln() - 0.9 * 110f64.ln(),
            seed: 0,
        }
    }
}

/// Smooth nonlinear source → target map on MCC(1..24); C(0) passes through.
pub fn target_mcc(src: ArrayView1<f64>) -> Array1<f64> {
    let mut out = src.to_owned();
    for k in 1..MCC_COUNT {
        let prev = src[if k == 1 { MCC_COUNT - 1 } else { k - 1 }];
        out[k] = 0.7 * src[k] + 0.4 * (2.0 * prev).tanh() + 0.15 / k as f64;
    }
    out
}

fn source_utterance(n: usize, rng: &mut ChaCha8Rng) -> Utterance {
    let params: Vec<(f64, f64, f64, f64)> = (0..MCC_COUNT)
        .map(|k| {
            let amp = if k == 0 { 0.5 } else { 0.6 / (1.0 + 0.3 * k as f64) };
            (
                amp,
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-0.2..0.2),
            )
        })
        .collect();
    let mcc = Array2::from_shape_fn((n, MCC_COUNT), |(t, k)| {
        let (amp, freq, phase, offset) = params[k];
        let base = if k == 0 { 2.0 } else { offset };
        base + amp * (freq * t as f64 + phase).sin() + 0.5 * amp * (2.3 * freq * t as f64 - phase).cos()
    });
    let on = rng.random_range(3..8).min(n / 4);
    let off = n - rng.random_range(3..8).min(n / 4);
    let gap = rng.random_range(on + 1..off.max(on + 2));
    let mut f0 = Array1::zeros(n);
    let base = 110f64.ln() + rng.random_range(-0.05..0.05);
    let rate = rng.random_range(0.05..0.15);
    for t in on..off {
        if t == gap || t == gap + 1 {
            continue;
        }
        f0[t] = (base + 0.12 * (rate * t as f64).sin()).exp();
    }
    Utterance::new(16000, 5.0, f0, mcc).expect("generated utterance is valid")
}

/// Parallel pairs `utt000`, `utt001`, … where the target is a time-stretched copy of
/// the source passed through [`target_mcc`], with log F0 mapped affinely.
pub fn parallel_corpus(spec: &CorpusSpec) -> Result<Vec<UtterancePair>> {
    if spec.pairs == 0 || spec.min_frames < 16 || spec.max_frames < spec.min_frames {
        return Err(Error::config("corpus needs at least one pair of at least 16 frames"));
    }
    if !(spec.stretch.0 > 0.0 && spec.stretch.1 >= spec.stretch.0) {
        return Err(Error::config("invalid stretch range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.mcc_noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    let mut out = Vec::with_capacity(spec.pairs);
    for p in 0..spec.pairs {
        let n = rng.random_range(spec.min_frames..=spec.max_frames);
        let src = source_utterance(n, &mut rng);
        let r = if spec.stretch.1 > spec.stretch.0 {
            rng.random_range(spec.stretch.0..spec.stretch.1)
        } else {
            spec.stretch.0
        };
        let m = ((n as f64 * r).round() as usize).max(2);
        let mut mcc = Array2::zeros((m, MCC_COUNT));
        let mut f0 = Array1::zeros(m);
        for j in 0..m {
            let i = ((j as f64 / r) as usize).min(n - 1);
            let mut row = target_mcc(src.mcc.row(i));
            if spec.mcc_noise > 0.0 {
                for k in 1..MCC_COUNT {
                    row[k] += noise.sample(&mut rng);
                }
            }
            mcc.row_mut(j).assign(&row);
            let s = src.f0_hz[i];
            if s > 0.0 {
                f0[j] = (spec.f0_scale * s.ln() + spec.f0_shift).exp();
            }
        }
        let tgt = Utterance::new(16000, 5.0, f0, mcc)?;
        out.push(UtterancePair {
            id: format!("utt{p:03}"),
            source: src,
            target: tgt,
        });
    }
    Ok(out)
}
