//! `svdkl` command-line driver: alignment, training, conversion, evaluation,
//! spectrum rendering and gradient checks over `.vcfeat` feature files.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use svdkl::baseline::run_baseline_dnn;
use svdkl::io::{
    load_checkpoint, load_config, load_utterance, save_aligned, save_checkpoint, save_utterance, write_atomic,
};
use svdkl::trainer::{grad_check, toy_problem, train_pairs};
use svdkl::vc::{bin_frequencies, build_training_set, convert_utterance, mcc_to_log_spectrum, mcd};
use svdkl::{Error, TrainConfig, UtterancePair, WarpingConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Relative-error threshold used by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const SRC_SUFFIX: &str = ".src.vcfeat";
const TGT_SUFFIX: &str = ".tgt.vcfeat";

#[derive(Debug, Parser)]
#[command(name = "svdkl", version, about = "Stochastic variational deep kernel learning for voice conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// DTW-align two utterances into an aligned-corpus file
    Align {
        source: PathBuf,
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of <id>.src.vcfeat / <id>.tgt.vcfeat pairs
    Train {
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Echo the training log to stdout
        #[arg(long)]
        verbose: bool,
    },
    /// Convert a source utterance with a trained checkpoint
    Convert {
        checkpoint: PathBuf,
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the mel-cepstral distortion (dB) between two utterances
    Evaluate { a: PathBuf, b: PathBuf },
    /// Print the warped log-magnitude spectrum of one frame
    Spectrum {
        utterance: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, default_value_t = 257)]
        bins: usize,
        #[arg(long, default_value_t = svdkl::vc::DEFAULT_ALPHA, allow_negative_numbers = true)]
        alpha: f64,
    },
    /// Compare analytic gradients with finite differences on a toy model
    Gradcheck {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the MSE feedforward baseline and print its validation RMSE
    Baseline {
        dir: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Epochs without validation improvement before stopping
        #[arg(long, default_value_t = 10)]
        patience: usize,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    inducing: Option<usize>,
    /// Comma-separated hidden and feature sizes, or "none" for a plain SVGP
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.inducing {
            cfg.inducing_count = v;
        }
        if let Some(v) = &self.layers {
            cfg.layer_sizes = parse_layers(v)?;
        }
        if let Some(v) = self.alpha {
            cfg.warping_alpha = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_layers(s: &str) -> Result<Vec<usize>, Failure> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Failure::usage(format!("invalid layer size '{t}' in --layers")))
        })
        .collect()
}

/// A failed command: exit code plus diagnostic.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

/// Runs one command with `argv[0]` as the program name, writing metrics to
/// `out` and diagnostics to `err`. Returns the process exit code.
pub fn run_command_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "svdkl: {}", f.message);
            f.code
        }
    }
}

/// [`run_command_with`] on the process's standard streams.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_command_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::Align { source, target, out: path } => {
            let pair = UtterancePair {
                id: pair_id(&source),
                source: load_utterance(&source)?,
                target: load_utterance(&target)?,
            };
            let corpus = build_training_set(std::slice::from_ref(&pair))?;
            save_aligned(&corpus, &path)?;
            writeln!(out, "{}", corpus.len())?;
        }
        Command::Train {
            dir,
            out: path,
            train,
            verbose,
        } => {
            let cfg = train.resolve()?;
            let pairs = load_pair_dir(&dir)?;
            let (model, log) = train_pairs(&pairs, &cfg)?;
            for w in &log.warnings {
                writeln!(err, "svdkl: warning: {w}")?;
            }
            save_checkpoint(&model, Some(&cfg), &path)?;
            let tsv = log.to_tsv();
            write_atomic(&log_path(&path), tsv.as_bytes())?;
            if verbose {
                write!(out, "{tsv}")?;
            }
        }
        Command::Convert {
            checkpoint,
            source,
            out: path,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let src = load_utterance(&source)?;
            let converted = convert_utterance(&model, &src)?;
            save_utterance(&converted, &path)?;
        }
        Command::Evaluate { a, b } => {
            let d = mcd(&load_utterance(&a)?, &load_utterance(&b)?)?;
            writeln!(out, "{d}")?;
        }
        Command::Spectrum {
            utterance,
            frame,
            bins,
            alpha,
        } => {
            let u = load_utterance(&utterance)?;
            if frame >= u.num_frames() {
                return Err(Failure::data(format!(
                    "frame {frame} out of range ({} frames)",
                    u.num_frames()
                )));
            }
            let cfg = WarpingConfig::new(alpha, bins).map_err(|e| Failure::usage(e.to_string()))?;
            let spec = mcc_to_log_spectrum(u.mcc.row(frame), &cfg)?;
            for (w, h) in bin_frequencies(bins).iter().zip(spec.iter()) {
                writeln!(out, "{w}\t{h}")?;
            }
        }
        Command::Gradcheck { train } => {
            let mut cfg = train.resolve()?;
            if train.layers.is_none() {
                cfg.layer_sizes = vec![6, 3];
            }
            if train.inducing.is_none() {
                cfg.inducing_count = 5;
            }
            let (model, x, y) = toy_problem(&cfg, 3, 2, 12)?;
            let report = grad_check(&model, x.view(), y.view(), GRADCHECK_TOLERANCE)?;
            write!(out, "{report}")?;
            if !report.passed() {
                let names: Vec<&str> = report.failing().iter().map(|g| g.name()).collect();
                return Err(Failure {
                    code: EXIT_NUMERICAL,
                    message: format!("gradient check failed for {}", names.join(", ")),
                });
            }
        }
        Command::Baseline { dir, train, patience } => {
            let cfg = train.resolve()?;
            let pairs = load_pair_dir(&dir)?;
            let corpus = build_training_set(&pairs)?;
            let (_, report) = run_baseline_dnn(corpus.x.view(), corpus.y.view(), &cfg, patience)?;
            writeln!(out, "{}", report.validation_rmse)?;
        }
    }
    Ok(())
}

fn pair_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(SRC_SUFFIX)
        .or_else(|| name.strip_suffix(".vcfeat"))
        .unwrap_or(&name)
        .to_string()
}

/// `<checkpoint>.log.tsv`
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.tsv");
    PathBuf::from(s)
}

/// Loads every `<id>.src.vcfeat` with its `<id>.tgt.vcfeat`, sorted by id.
pub fn load_pair_dir(dir: &Path) -> Result<Vec<UtterancePair>, Error> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(SRC_SUFFIX) {
            ids.push(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(Error::data(format!("no *{SRC_SUFFIX} files in {}", dir.display())));
    }
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let src = dir.join(format!("{id}{SRC_SUFFIX}"));
            let tgt = dir.join(format!("{id}{TGT_SUFFIX}"));
            if !tgt.exists() {
                return Err(Error::data(format!("{} has no matching {}", src.display(), tgt.display())));
            }
            Ok(UtterancePair {
                id,
                source: load_utterance(&src)?,
                target: load_utterance(&tgt)?,
            })
        })
        .collect()
}
