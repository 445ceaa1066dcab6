//! On-disk formats: utterance features, aligned corpora, training
//! configuration and model checkpoints. All are JSON documents with numbers
//! written in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::deepnet::{Activation, FeedForwardNet, Layer};
use crate::error::{Error, Result};
use crate::kernels::ArdKernelParams;
use crate::svgp::{Normalizer, SvdklModel, SvgpHead, VariationalState};
use crate::trainer::TrainConfig;
use crate::vc::{AlignedCorpus, F0Stats, RowProvenance, Utterance, MCC_COUNT};

pub const UTTERANCE_FORMAT: &str = "vcfeat";
pub const UTTERANCE_VERSION: u32 = 1;
pub const ALIGNED_FORMAT: &str = "vcaligned";
pub const ALIGNED_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "svdkl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `bytes` next to `path` under a temporary name, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        Error::data(format!(
            "{what}: line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::numerical(format!("cannot serialize: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], width: usize, what: &str) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::data(format!(
                "{what} row {i} has {} values, expected {width}",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| Error::data(e.to_string()))
}

fn matrix_from_flat(flat: &[f64], rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    if flat.len() != rows * cols {
        return Err(Error::data(format!(
            "{what} has {} values, expected {rows}x{cols}",
            flat.len()
        )));
    }
    Array2::from_shape_vec((rows, cols), flat.to_vec()).map_err(|e| Error::data(e.to_string()))
}

// ---- utterances ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceFile {
    pub format: String,
    pub version: u32,
    pub sample_rate_hz: u32,
    pub frame_period_ms: f64,
    pub f0_hz: Vec<f64>,
    pub mcc: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aperiodicity: Option<serde_json::Value>,
}

impl UtteranceFile {
    pub fn from_utterance(u: &Utterance) -> Self {
        UtteranceFile {
            format: UTTERANCE_FORMAT.into(),
            version: UTTERANCE_VERSION,
            sample_rate_hz: u.sample_rate_hz,
            frame_period_ms: u.frame_period_ms,
            f0_hz: u.f0_hz.to_vec(),
            mcc: rows_of(&u.mcc),
            aperiodicity: u.aperiodicity.clone(),
        }
    }

    pub fn into_utterance(self) -> Result<Utterance> {
        if self.format != UTTERANCE_FORMAT {
            return Err(Error::data(format!(
                "format is '{}', expected '{UTTERANCE_FORMAT}'",
                self.format
            )));
        }
        if self.version != UTTERANCE_VERSION {
            return Err(Error::data(format!(
                "unsupported vcfeat version {} (expected {UTTERANCE_VERSION})",
                self.version
            )));
        }
        if !(self.frame_period_ms > 0.0) {
            return Err(Error::data("frame_period_ms must be positive"));
        }
        if let Some(i) = self.mcc.iter().position(|r| r.len() != MCC_COUNT) {
            return Err(Error::data(format!(
                "mcc row {i} has {} coefficients, expected {MCC_COUNT}",
                self.mcc[i].len()
            )));
        }
        if self.f0_hz.len() != self.mcc.len() {
            return Err(Error::data(format!(
                "f0_hz has {} frames but mcc has {} rows",
                self.f0_hz.len(),
                self.mcc.len()
            )));
        }
        let mcc = matrix_from_rows(&self.mcc, MCC_COUNT, "mcc")?;
        let u = Utterance {
            sample_rate_hz: self.sample_rate_hz,
            frame_period_ms: self.frame_period_ms,
            f0_hz: Array1::from(self.f0_hz),
            mcc,
            aperiodicity: self.aperiodicity,
        };
        u.validate().map_err(|e| match e {
            Error::Data(_) => e,
            other => Error::data(other.to_string()),
        })?;
        Ok(u)
    }
}

pub fn parse_utterance(text: &str) -> Result<Utterance> {
    parse_json::<UtteranceFile>(text, "vcfeat")?.into_utterance()
}

pub fn utterance_to_string(u: &Utterance) -> Result<String> {
    to_json(&UtteranceFile::from_utterance(u))
}

pub fn load_utterance(path: &Path) -> Result<Utterance> {
    parse_utterance(&read_text(path)?).map_err(|e| with_path(path, e))
}

pub fn save_utterance(u: &Utterance, path: &Path) -> Result<()> {
    u.validate()?;
    write_atomic(path, utterance_to_string(u)?.as_bytes())
}

// ---- aligned corpora ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignedFile {
    pub format: String,
    pub version: u32,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub provenance: Vec<RowProvenance>,
}

pub fn save_aligned(c: &AlignedCorpus, path: &Path) -> Result<()> {
    c.validate()?;
    let f = AlignedFile {
        format: ALIGNED_FORMAT.into(),
        version: ALIGNED_VERSION,
        x: rows_of(&c.x),
        y: rows_of(&c.y),
        provenance: c.provenance.clone(),
    };
    write_atomic(path, to_json(&f)?.as_bytes())
}

pub fn parse_aligned(text: &str) -> Result<AlignedCorpus> {
    let f: AlignedFile = parse_json(text, "aligned corpus")?;
    if f.format != ALIGNED_FORMAT || f.version != ALIGNED_VERSION {
        return Err(Error::data(format!(
            "expected {ALIGNED_FORMAT} version {ALIGNED_VERSION}, found {} version {}",
            f.format, f.version
        )));
    }
    let wx = f.x.first().map_or(0, Vec::len);
    let wy = f.y.first().map_or(0, Vec::len);
    let c = AlignedCorpus {
        x: matrix_from_rows(&f.x, wx, "x")?,
        y: matrix_from_rows(&f.y, wy, "y")?,
        provenance: f.provenance,
    };
    c.validate()?;
    Ok(c)
}

pub fn load_aligned(path: &Path) -> Result<AlignedCorpus> {
    parse_aligned(&read_text(path)?).map_err(|e| with_path(path, e))
}

// ---- configuration ----

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = parse_json(text, "config")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&read_text(path)?).map_err(|e| with_path(path, e))
}

pub fn save_config(cfg: &TrainConfig, path: &Path) -> Result<()> {
    write_atomic(path, to_json(cfg)?.as_bytes())
}

// ---- checkpoints ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub activation: Activation,
    /// `out × in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRecord {
    /// M × Q, row-major.
    pub inducing_inputs: Vec<f64>,
    pub mean: Vec<f64>,
    /// Strict lower triangle of chol(S), row by row.
    pub chol_offdiag: Vec<f64>,
    /// log of the diagonal of chol(S).
    pub chol_log_diag: Vec<f64>,
    pub log_noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizerRecord {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format: String,
    pub format_version: u32,
    pub warping_alpha: f64,
    pub jitter_base: f64,
    pub seed: u64,
    /// `[D, h_1, …, Q]`.
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub log_signal_variance: f64,
    pub log_length_scales: Vec<f64>,
    pub heads: Vec<HeadRecord>,
    pub input_normalizer: NormalizerRecord,
    pub output_centers: Vec<f64>,
    pub f0_source: Option<F0Stats>,
    pub f0_target: Option<F0Stats>,
    pub config: Option<TrainConfig>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &SvdklModel, config: Option<&TrainConfig>) -> Self {
        let heads = model
            .heads
            .iter()
            .map(|h| {
                let raw = &h.state.chol_s_raw;
                let m = raw.nrows();
                let mut off = Vec::with_capacity(m * (m.saturating_sub(1)) / 2);
                for i in 0..m {
                    for j in 0..i {
                        off.push(raw[[i, j]]);
                    }
                }
                HeadRecord {
                    inducing_inputs: h.state.inducing_inputs.iter().copied().collect(),
                    mean: h.state.mean.to_vec(),
                    chol_offdiag: off,
                    chol_log_diag: raw.diag().to_vec(),
                    log_noise_variance: h.log_noise_variance,
                }
            })
            .collect();
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            warping_alpha: model.warping_alpha,
            jitter_base: model.jitter_base,
            seed: model.net.rng_seed,
            layer_sizes: model.net.layer_sizes(),
            layers: model
                .net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            log_signal_variance: model.kernel.log_signal_variance,
            log_length_scales: model.kernel.log_length_scales.to_vec(),
            heads,
            input_normalizer: NormalizerRecord {
                mean: model.input_normalizer.mean.to_vec(),
                scale: model.input_normalizer.scale.to_vec(),
            },
            output_centers: model.output_centers.to_vec(),
            f0_source: model.f0_source,
            f0_target: model.f0_target,
            config: config.cloned(),
        }
    }

    pub fn into_model(self) -> Result<SvdklModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "format is '{}', expected '{CHECKPOINT_FORMAT}'",
                self.format
            )));
        }
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes.len() - 1 != self.layers.len() {
            return Err(Error::data(format!(
                "layer_sizes {:?} do not match {} stored layers",
                sizes,
                self.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, rec) in self.layers.into_iter().enumerate() {
            let (inp, out) = (sizes[i], sizes[i + 1]);
            let w = matrix_from_flat(&rec.weights, out, inp, &format!("layer {i} weights"))?;
            if rec.bias.len() != out {
                return Err(Error::data(format!(
                    "layer {i} bias has {} values, expected {out}",
                    rec.bias.len()
                )));
            }
            layers.push(Layer::new(w, Array1::from(rec.bias), rec.activation));
        }
        let net = FeedForwardNet::new(layers, self.seed).map_err(|e| Error::data(e.to_string()))?;
        let q = net.output_dim();
        if self.log_length_scales.len() != q {
            return Err(Error::data(format!(
                "{} length scales for a {q}-dimensional feature space",
                self.log_length_scales.len()
            )));
        }
        let kernel = ArdKernelParams {
            log_signal_variance: self.log_signal_variance,
            log_length_scales: Array1::from(self.log_length_scales),
        };
        if self.heads.is_empty() {
            return Err(Error::data("checkpoint has no heads"));
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for (d, h) in self.heads.into_iter().enumerate() {
            let m = h.mean.len();
            let z = matrix_from_flat(&h.inducing_inputs, m, q, &format!("head {d} inducing inputs"))?;
            if h.chol_log_diag.len() != m || h.chol_offdiag.len() != m * m.saturating_sub(1) / 2 {
                return Err(Error::data(format!(
                    "head {d}: chol_S arrays do not match {m} inducing points"
                )));
            }
            let mut raw = Array2::<f64>::zeros((m, m));
            let mut k = 0;
            for i in 0..m {
                for j in 0..i {
                    raw[[i, j]] = h.chol_offdiag[k];
                    k += 1;
                }
                raw[[i, i]] = h.chol_log_diag[i];
            }
            let state = VariationalState {
                inducing_inputs: z,
                mean: Array1::from(h.mean),
                chol_s_raw: raw,
            };
            state.validate().map_err(|e| Error::data(format!("head {d}: {e}")))?;
            heads.push(SvgpHead {
                state,
                log_noise_variance: h.log_noise_variance,
            });
        }
        let model = SvdklModel {
            net,
            kernel,
            heads,
            input_normalizer: Normalizer {
                mean: Array1::from(self.input_normalizer.mean),
                scale: Array1::from(self.input_normalizer.scale),
            },
            output_centers: Array1::from(self.output_centers),
            f0_source: self.f0_source,
            f0_target: self.f0_target,
            jitter_base: self.jitter_base,
            warping_alpha: self.warping_alpha,
        };
        model.validate().map_err(|e| match e {
            Error::Data(_) => e,
            other => Error::data(other.to_string()),
        })?;
        Ok(model)
    }
}

pub fn checkpoint_to_string(model: &SvdklModel, config: Option<&TrainConfig>) -> Result<String> {
    to_json(&ModelCheckpoint::from_model(model, config))
}

pub fn parse_checkpoint(text: &str) -> Result<SvdklModel> {
    parse_json::<ModelCheckpoint>(text, "checkpoint")?.into_model()
}

pub fn save_checkpoint(model: &SvdklModel, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    model.validate()?;
    write_atomic(path, checkpoint_to_string(model, config)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<SvdklModel> {
    parse_checkpoint(&read_text(path)?).map_err(|e| with_path(path, e))
}
