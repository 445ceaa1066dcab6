//! Feature plumbing around the regressor: DTW alignment of parallel
//! utterances, F0 statistics and linear log-F0 conversion, utterance
//! conversion, mel-cepstral distortion and MCC → log-spectrum rendering.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svgp::SvdklModel;

/// Coefficients per frame, C(0)…C(24).
pub const MCC_COUNT: usize = 25;
/// Coefficients used for training and distortion, C(1)…C(24).
pub const MCC_ORDER: usize = 24;
/// All-pass constant approximating the mel scale at 16 kHz.
pub const DEFAULT_ALPHA: f64 = 0.41;

/// Analysis features of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub sample_rate_hz: u32,
    pub frame_period_ms: f64,
    /// 0 marks an unvoiced frame.
    pub f0_hz: Array1<f64>,
    /// N × 25.
    pub mcc: Array2<f64>,
    /// Carried through untouched.
    pub aperiodicity: Option<serde_json::Value>,
}

impl Utterance {
    pub fn new(sample_rate_hz: u32, frame_period_ms: f64, f0_hz: Array1<f64>, mcc: Array2<f64>) -> Result<Self> {
        let u = Utterance {
            sample_rate_hz,
            frame_period_ms,
            f0_hz,
            mcc,
            aperiodicity: None,
        };
        u.validate()?;
        Ok(u)
    }

    pub fn num_frames(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mcc.ncols() != MCC_COUNT {
            return Err(Error::data(format!(
                "mcc rows must have {MCC_COUNT} coefficients, got {}",
                self.mcc.ncols()
            )));
        }
        if self.mcc.nrows() != self.f0_hz.len() {
            return Err(Error::data(format!(
                "f0 has {} frames but mcc has {} rows",
                self.f0_hz.len(),
                self.mcc.nrows()
            )));
        }
        if let Some(i) = self.f0_hz.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::data(format!("f0 frame {i} is negative or not finite")));
        }
        if let Some(i) = self.mcc.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("mcc row {} has a non-finite value", i / MCC_COUNT)));
        }
        Ok(())
    }

    /// C(1)…C(24) of every frame.
    pub fn spectral_features(&self) -> ArrayView2<'_, f64> {
        self.mcc.slice(s![.., 1..])
    }
}

/// One parallel source/target pair.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub id: String,
    pub source: Utterance,
    pub target: Utterance,
}

/// Where an aligned row came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowProvenance {
    pub utterance: String,
    pub source_frame: usize,
    pub target_frame: usize,
}

/// DTW-aligned training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCorpus {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub provenance: Vec<RowProvenance>,
}

impl AlignedCorpus {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.nrows() || self.x.nrows() != self.provenance.len() {
            return Err(Error::data(format!(
                "aligned corpus row counts differ: x {}, y {}, provenance {}",
                self.x.nrows(),
                self.y.nrows(),
                self.provenance.len()
            )));
        }
        if self.x.ncols() != self.y.ncols() {
            return Err(Error::data("aligned corpus x and y widths differ"));
        }
        Ok(())
    }
}

/// Log-domain F0 statistics over voiced frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Stats {
    pub mean_log_f0: f64,
    pub std_log_f0: f64,
    pub voiced_frame_count: usize,
}

/// All-pass warping and spectrum sampling settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpingConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub num_bins: usize,
}

impl WarpingConfig {
    pub fn new(alpha: f64, num_bins: usize) -> Result<Self> {
        let c = WarpingConfig {
            alpha,
            gamma: 0.0,
            num_bins,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.abs() < 1.0) {
            return Err(Error::config(format!("warping alpha {} must satisfy |alpha| < 1", self.alpha)));
        }
        if self.gamma != 0.0 {
            return Err(Error::config("only the cepstral case gamma = 0 is supported"));
        }
        if self.num_bins == 0 {
            return Err(Error::config("spectrum needs at least one bin"));
        }
        Ok(())
    }
}

/// Result of [`dtw_align`]: the warping path and its accumulated cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost monotone alignment under squared Euclidean frame distance
/// with steps (1,0), (0,1), (1,1) and no slope weights. Ties prefer the
/// diagonal step.
pub fn dtw_align(src: ArrayView2<f64>, tgt: ArrayView2<f64>) -> Result<Alignment> {
    let (ns, nt) = (src.nrows(), tgt.nrows());
    if ns == 0 || nt == 0 {
        return Err(Error::input("DTW needs two nonempty sequences"));
    }
    if src.ncols() != tgt.ncols() {
        return Err(Error::shape(format!(
            "DTW frame widths differ: {} vs {}",
            src.ncols(),
            tgt.ncols()
        )));
    }
    let mut acc = Array2::<f64>::from_elem((ns, nt), f64::INFINITY);
    for i in 0..ns {
        for j in 0..nt {
            let d = sq_dist(src.row(i), tgt.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = prev + d;
        }
    }
    let mut path = vec![(ns - 1, nt - 1)];
    let (mut i, mut j) = (ns - 1, nt - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
        let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
        let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[[ns - 1, nt - 1]],
    })
}

/// Drops C(0), aligns every pair and stacks the aligned frames in input order.
pub fn build_training_set(pairs: &[UtterancePair]) -> Result<AlignedCorpus> {
    if pairs.is_empty() {
        return Err(Error::input("no utterance pairs given"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut provenance = Vec::new();
    for p in pairs {
        for (role, u) in [("source", &p.source), ("target", &p.target)] {
            u.validate()?;
            if u.num_frames() < 2 {
                return Err(Error::input(format!(
                    "{} utterance of pair '{}' has fewer than 2 frames",
                    role, p.id
                )));
            }
        }
        let sf = p.source.mcc.slice(s![.., 1..]);
        let tf = p.target.mcc.slice(s![.., 1..]);
        let a = dtw_align(sf, tf)?;
        for &(i, j) in &a.path {
            xs.push(p.source.mcc.slice(s![i, 1..]));
            ys.push(p.target.mcc.slice(s![j, 1..]));
            provenance.push(RowProvenance {
                utterance: p.id.clone(),
                source_frame: i,
                target_frame: j,
            });
        }
    }
    let x = ndarray::stack(Axis(0), &xs).map_err(|e| Error::shape(e.to_string()))?;
    let y = ndarray::stack(Axis(0), &ys).map_err(|e| Error::shape(e.to_string()))?;
    Ok(AlignedCorpus { x, y, provenance })
}

/// Natural-log mean and population standard deviation over voiced frames.
pub fn f0_stats<'a, I>(utterances: I) -> Result<F0Stats>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let logs: Vec<f64> = utterances
        .into_iter()
        .flat_map(|u| u.f0_hz.iter().copied())
        .filter(|&f| f > 0.0)
        .map(f64::ln)
        .collect();
    if logs.len() < 2 {
        return Err(Error::input(format!(
            "F0 statistics need at least 2 voiced frames, found {}",
            logs.len()
        )));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(F0Stats {
        mean_log_f0: mean,
        std_log_f0: var.sqrt(),
        voiced_frame_count: logs.len(),
    })
}

/// log F̂0 = (σ_y/σ_x)(log F0 − μ_x) + μ_y on voiced frames; zeros pass through.
pub fn convert_f0(track: ArrayView1<f64>, src: &F0Stats, tgt: &F0Stats) -> Result<Array1<f64>> {
    if !(src.std_log_f0 > 0.0) {
        return Err(Error::numerical("source log-F0 standard deviation is zero"));
    }
    let ratio = tgt.std_log_f0 / src.std_log_f0;
    Ok(track.mapv(|f| {
        if f > 0.0 {
            (ratio * (f.ln() - src.mean_log_f0) + tgt.mean_log_f0).exp()
        } else {
            0.0
        }
    }))
}

/// Replaces C(1)…C(24) with predictive means and converts F0; C(0),
/// aperiodicity and metadata are copied from the source.
pub fn convert_utterance(model: &SvdklModel, src: &Utterance) -> Result<Utterance> {
    src.validate()?;
    let feats = src.spectral_features();
    if model.input_dim() != feats.ncols() || model.output_dim() != feats.ncols() {
        return Err(Error::config(format!(
            "model maps {} → {} dimensions but utterances carry {}",
            model.input_dim(),
            model.output_dim(),
            feats.ncols()
        )));
    }
    let (fs, ft) = match (&model.f0_source, &model.f0_target) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::config("model has no F0 statistics")),
    };
    let mut out = src.clone();
    if src.num_frames() > 0 {
        let means = model.predict_means(feats)?;
        out.mcc.slice_mut(s![.., 1..]).assign(&means);
    }
    out.f0_hz = convert_f0(src.f0_hz.view(), fs, ft)?;
    Ok(out)
}

/// (10 / ln 10) · √(2 Σ_d (a_d − b_d)²) for one pair of frames.
pub fn frame_distortion_db(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    10.0 / std::f64::consts::LN_10 * (2.0 * sq_dist(a, b)).sqrt()
}

/// Mean mel-cepstral distortion in dB over the DTW path on C(1)…C(24).
pub fn mcd(a: &Utterance, b: &Utterance) -> Result<f64> {
    if a.num_frames() == 0 || b.num_frames() == 0 {
        return Err(Error::input("MCD needs two nonempty utterances"));
    }
    mcd_features(a.spectral_features(), b.spectral_features())
}

/// [`mcd`] on bare feature matrices.
pub fn mcd_features(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let al = dtw_align(a, b)?;
    let total: f64 = al
        .path
        .iter()
        .map(|&(i, j)| frame_distortion_db(a.row(i), b.row(j)))
        .sum();
    Ok(total / al.path.len() as f64)
}

/// Warped frequency of the first-order all-pass filter.
pub fn warp_phase(omega: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    ((1.0 - a2) * omega.sin()).atan2((1.0 + a2) * omega.cos() - 2.0 * alpha)
}

/// Natural-log magnitude Σ_m c_m cos(m β_α(ω_k)) at ω_k = πk/(bins − 1).
pub fn mcc_to_log_spectrum(coeffs: ArrayView1<f64>, cfg: &WarpingConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    let denom = (cfg.num_bins.max(2) - 1) as f64;
    Ok(Array1::from_shape_fn(cfg.num_bins, |k| {
        let beta = warp_phase(std::f64::consts::PI * k as f64 / denom, cfg.alpha);
        coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * (m as f64 * beta).cos())
            .sum()
    }))
}

/// Angular frequencies matching [`mcc_to_log_spectrum`] bins.
pub fn bin_frequencies(num_bins: usize) -> Array1<f64> {
    let denom = (num_bins.max(2) - 1) as f64;
    Array1::from_shape_fn(num_bins, |k| std::f64::consts::PI * k as f64 / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn utt(mcc: Array2<f64>, f0: Array1<f64>) -> Utterance {
        Utterance::new(16000, 5.0, f0, mcc).unwrap()
    }

    /// Minimum over every monotone path, summing costs in path order.
    fn brute_force(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
        fn go(a: ArrayView2<f64>, b: ArrayView2<f64>, i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + sq_dist(a.row(i), b.row(j));
            if i + 1 == a.nrows() && j + 1 == b.nrows() {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            if i + 1 < a.nrows() && j + 1 < b.nrows() {
                go(a, b, i + 1, j + 1, acc, best);
            }
            if i + 1 < a.nrows() {
                go(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.nrows() {
                go(a, b, i, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        go(a, b, 0, 0, 0.0, &mut best);
        best
    }

    fn check_path(path: &[(usize, usize)], ns: usize, nt: usize) {
        assert_eq!(path[0], (0, 0));
        assert_eq!(*path.last().unwrap(), (ns - 1, nt - 1));
        for w in path.windows(2) {
            let di = w[1].0 - w[0].0;
            let dj = w[1].1 - w[0].1;
            assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)));
        }
    }

    #[test]
    fn dtw_identical_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((6, 24), |_| rng.random_range(-1.0..1.0));
        let al = dtw_align(a.view(), a.view()).unwrap();
        assert_eq!(al.cost, 0.0);
        assert_eq!(al.path, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn dtw_single_source_frame() {
        let a = Array2::from_elem((1, 3), 0.5);
        let b = Array2::from_shape_fn((4, 3), |(i, _)| i as f64);
        let al = dtw_align(a.view(), b.view()).unwrap();
        assert_eq!(al.path, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn dtw_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let ns = rng.random_range(1..=7);
            let nt = rng.random_range(1..=7);
            let a = Array2::from_shape_fn((ns, 24), |_| rng.random_range(-1.0..1.0));
            let b = Array2::from_shape_fn((nt, 24), |_| rng.random_range(-1.0..1.0));
            let al = dtw_align(a.view(), b.view()).unwrap();
            assert_eq!(al.cost, brute_force(a.view(), b.view()));
            check_path(&al.path, ns, nt);
            let along: f64 = al.path.iter().fold(0.0, |s, &(i, j)| s + sq_dist(a.row(i), b.row(j)));
            assert_eq!(along, al.cost);
        }
    }

    #[test]
    fn dtw_rejects_empty() {
        let a = Array2::<f64>::zeros((0, 24));
        let b = Array2::<f64>::zeros((3, 24));
        assert!(matches!(dtw_align(a.view(), b.view()), Err(Error::Input(_))));
    }

    #[test]
    fn training_set_identical_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mcc = Array2::from_shape_fn((7, 25), |_| rng.random_range(-1.0..1.0));
        let u = utt(mcc.clone(), Array1::from_elem(7, 120.0));
        let c = build_training_set(&[UtterancePair {
            id: "a".into(),
            source: u.clone(),
            target: u,
        }])
        .unwrap();
        assert_eq!(c.len(), 7);
        assert_eq!(c.x, c.y);
        assert_eq!(c.x, mcc.slice(s![.., 1..]));
    }

    #[test]
    fn training_set_concatenates_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mk = |n: usize| {
            utt(
                Array2::from_shape_fn((n, 25), |_| rng.random_range(-1.0..1.0)),
                Array1::from_elem(n, 100.0),
            )
        };
        let p1 = UtterancePair { id: "p1".into(), source: mk(5), target: mk(7) };
        let p2 = UtterancePair { id: "p2".into(), source: mk(6), target: mk(4) };
        let both = build_training_set(&[p1.clone(), p2.clone()]).unwrap();
        let c1 = build_training_set(&[p1]).unwrap();
        let c2 = build_training_set(&[p2]).unwrap();
        assert!(c1.len() >= 7 && c2.len() >= 6);
        assert_eq!(both.len(), c1.len() + c2.len());
        assert_eq!(both.x, ndarray::concatenate(Axis(0), &[c1.x.view(), c2.x.view()]).unwrap());
        assert_eq!(both.y, ndarray::concatenate(Axis(0), &[c1.y.view(), c2.y.view()]).unwrap());
        assert_eq!(both.provenance[c1.len()].utterance, "p2");
    }

    #[test]
    fn training_set_rejects_short_utterance() {
        let u1 = utt(Array2::zeros((1, 25)), array![100.0]);
        let u2 = utt(Array2::zeros((3, 25)), Array1::from_elem(3, 100.0));
        let r = build_training_set(&[UtterancePair { id: "x".into(), source: u1, target: u2 }]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn f0_stats_fixtures() {
        let e = std::f64::consts::E;
        let u = utt(Array2::zeros((2, 25)), array![e, e.powi(3)]);
        let s = f0_stats([&u]).unwrap();
        assert!((s.mean_log_f0 - 2.0).abs() < 1e-14);
        assert!((s.std_log_f0 - 1.0).abs() < 1e-14);

        let flat = utt(Array2::zeros((4, 25)), Array1::from_elem(4, 100.0));
        let s = f0_stats([&flat]).unwrap();
        assert!((s.mean_log_f0 - 100f64.ln()).abs() < 1e-14);
        assert_eq!(s.std_log_f0, 0.0);
        assert!(matches!(convert_f0(flat.f0_hz.view(), &s, &s), Err(Error::Numerical(_))));
    }

    #[test]
    fn f0_stats_ignore_unvoiced() {
        let mixed = utt(Array2::zeros((6, 25)), array![0.0, 110.0, 0.0, 130.0, 95.0, 0.0]);
        let voiced = utt(Array2::zeros((3, 25)), array![110.0, 130.0, 95.0]);
        assert_eq!(f0_stats([&mixed]).unwrap(), f0_stats([&voiced]).unwrap());
        let single = utt(Array2::zeros((3, 25)), array![0.0, 120.0, 0.0]);
        assert!(matches!(f0_stats([&single]), Err(Error::Input(_))));
    }

    #[test]
    fn convert_f0_fixtures() {
        let s = F0Stats { mean_log_f0: 4.8, std_log_f0: 0.2, voiced_frame_count: 10 };
        let t = F0Stats { mean_log_f0: 5.3, std_log_f0: 0.15, voiced_frame_count: 10 };
        let track = array![0.0, 121.0, 4.8f64.exp()];
        let same = convert_f0(track.view(), &s, &s).unwrap();
        assert_eq!(same[0], 0.0);
        assert!((same[1] - 121.0).abs() < 1e-10);
        let out = convert_f0(track.view(), &s, &t).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[2].ln() - 5.3).abs() < 1e-12);

        let a = F0Stats { mean_log_f0: 0.0, std_log_f0: 1.0, voiced_frame_count: 2 };
        let b = F0Stats { mean_log_f0: 0.0, std_log_f0: 2.0, voiced_frame_count: 2 };
        let e = convert_f0(array![std::f64::consts::E].view(), &a, &b).unwrap();
        assert!((e[0] - std::f64::consts::E.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn mcd_fixtures() {
        let a = Array2::from_elem((5, 25), 0.3);
        let ua = utt(a.clone(), Array1::from_elem(5, 100.0));
        assert_eq!(mcd(&ua, &ua).unwrap(), 0.0);

        let mut b = a.clone();
        b.column_mut(7).mapv_inplace(|v| v + 1.0);
        let ub = utt(b, Array1::from_elem(5, 100.0));
        let expected = 10.0 / 10f64.ln() * 2f64.sqrt();
        assert!((mcd(&ua, &ub).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 6.1419).abs() < 1e-4);

        let mut c = a.clone();
        c.slice_mut(s![.., 1..]).mapv_inplace(|v| v + 1.0);
        let uc = utt(c, Array1::from_elem(5, 100.0));
        let expected = 10.0 / 10f64.ln() * 48f64.sqrt();
        assert!((mcd(&ua, &uc).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 30.0888).abs() < 1e-4);
    }

    #[test]
    fn mcd_ignores_energy_coefficient() {
        let a = Array2::from_elem((3, 25), 0.0);
        let mut b = a.clone();
        b.column_mut(0).fill(5.0);
        let ua = utt(a, Array1::zeros(3));
        let ub = utt(b, Array1::zeros(3));
        assert_eq!(mcd(&ua, &ub).unwrap(), 0.0);
    }

    #[test]
    fn warp_phase_fixtures() {
        for k in 0..=100 {
            let w = PI * k as f64 / 100.0;
            assert!((warp_phase(w, 0.0) - w).abs() < 1e-12);
        }
        assert_eq!(warp_phase(0.0, 0.41), 0.0);
        assert!((warp_phase(PI, 0.41) - PI).abs() < 1e-12);
        let expected = (1.0 - 0.41f64 * 0.41).atan2(-2.0 * 0.41);
        assert!((warp_phase(PI / 2.0, 0.41) - expected).abs() < 1e-15);
        assert!((expected - 2.3490).abs() < 1e-4);
    }

    #[test]
    fn warp_phase_monotone_grid() {
        for &alpha in &[-0.5, 0.0, 0.41, 0.8] {
            let mut prev = warp_phase(0.0, alpha);
            assert!(prev.abs() < 1e-12);
            for k in 1..1024 {
                let b = warp_phase(PI * k as f64 / 1023.0, alpha);
                assert!(b > prev, "alpha {alpha} at {k}");
                prev = b;
            }
            assert!((prev - PI).abs() < 1e-12);
        }
    }

    #[test]
    fn log_spectrum_fixtures() {
        let cfg = WarpingConfig::new(0.41, 33).unwrap();
        let zero = Array1::zeros(25);
        assert!(mcc_to_log_spectrum(zero.view(), &cfg).unwrap().iter().all(|&v| v == 0.0));
        let mut dc = Array1::zeros(25);
        dc[0] = 1.5;
        assert!(mcc_to_log_spectrum(dc.view(), &cfg).unwrap().iter().all(|&v| v == 1.5));
        let flat = WarpingConfig::new(0.0, 17).unwrap();
        let mut c1 = Array1::zeros(25);
        c1[1] = 1.0;
        let spec = mcc_to_log_spectrum(c1.view(), &flat).unwrap();
        for (k, w) in bin_frequencies(17).iter().enumerate() {
            assert!((spec[k] - w.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn warping_config_validation() {
        assert!(WarpingConfig::new(1.0, 10).is_err());
        let mut c = WarpingConfig::new(0.3, 10).unwrap();
        c.gamma = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn utterance_validation() {
        assert!(Utterance::new(16000, 5.0, Array1::zeros(2), Array2::zeros((2, 24))).is_err());
        assert!(Utterance::new(16000, 5.0, Array1::zeros(3), Array2::zeros((2, 25))).is_err());
        assert!(Utterance::new(16000, 5.0, array![-1.0, 0.0], Array2::zeros((2, 25))).is_err());
    }

    proptest! {
        #[test]
        fn f0_round_trip(
            track in prop::collection::vec(prop_oneof![Just(0.0f64), 50.0f64..400.0], 1..20),
            mx in 4.0f64..6.0, sx in 0.05f64..0.5, my in 4.0f64..6.0, sy in 0.05f64..0.5,
        ) {
            let s = F0Stats { mean_log_f0: mx, std_log_f0: sx, voiced_frame_count: 2 };
            let t = F0Stats { mean_log_f0: my, std_log_f0: sy, voiced_frame_count: 2 };
            let tr = Array1::from(track);
            let there = convert_f0(tr.view(), &s, &t).unwrap();
            let back = convert_f0(there.view(), &t, &s).unwrap();
            for (a, b) in tr.iter().zip(back.iter()) {
                if *a == 0.0 {
                    prop_assert_eq!(*b, 0.0);
                } else {
                    prop_assert!((a.ln() - b.ln()).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn converted_track_carries_target_stats(
            vals in prop::collection::vec(50.0f64..400.0, 3..30),
            my in 4.0f64..6.0, sy in 0.05f64..0.5,
        ) {
            let u = Utterance::new(16000, 5.0, Array1::from(vals.clone()), Array2::zeros((vals.len(), 25))).unwrap();
            let s = f0_stats([&u]).unwrap();
            prop_assume!(s.std_log_f0 > 1e-6);
            let t = F0Stats { mean_log_f0: my, std_log_f0: sy, voiced_frame_count: 2 };
            let mut out = u.clone();
            out.f0_hz = convert_f0(u.f0_hz.view(), &s, &t).unwrap();
            let c = f0_stats([&out]).unwrap();
            prop_assert!((c.mean_log_f0 - my).abs() < 1e-9);
            prop_assert!((c.std_log_f0 - sy).abs() < 1e-9);
        }

        #[test]
        fn mcd_nonnegative_and_symmetric(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((n, 24), |_| rng.random_range(-1.0..1.0));
            let b = Array2::from_shape_fn((n, 24), |_| rng.random_range(-1.0..1.0));
            let ab = mcd_features(a.view(), b.view()).unwrap();
            prop_assert!(ab >= 0.0);
            let diag_ab: f64 = (0..n).map(|i| frame_distortion_db(a.row(i), b.row(i))).sum::<f64>() / n as f64;
            let diag_ba: f64 = (0..n).map(|i| frame_distortion_db(b.row(i), a.row(i))).sum::<f64>() / n as f64;
            prop_assert_eq!(diag_ab, diag_ba);
        }
    }
}
