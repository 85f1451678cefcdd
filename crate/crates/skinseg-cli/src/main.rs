//! `skinseg` — one binary for the whole pipeline: synthetic data, Bayesian
//! color classifier, network training, ensembles, and evaluation.

mod actions;
mod reproduce;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "skinseg", version, about = "Skin segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Architecture string, e.g. levels=3,base=16,inception=false,dense=false
    #[arg(long, default_value = "levels=3,base=16")]
    arch: String,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1.0)]
    w_bce: f64,
    #[arg(long, default_value_t = 1.0)]
    w_dice: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Validation cadence in epochs
    #[arg(long, default_value_t = 1)]
    checkpoint_every: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with ground-truth masks
    GenData {
        #[arg(long, default_value_t = 24)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset manifest into train/validation/test id lists
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated train,validation,test fractions
        #[arg(long, default_value = "0.4375,0.0625,0.5")]
        fractions: String,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Bayesian color histogram pair
    TrainBc {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict fitting to the train subset of this split file
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-pixel skin posterior map from a trained histogram
    BcInfer {
        #[arg(long)]
        hist: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Add-alpha smoothing of the counts
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
        /// Skin prior (non-skin prior is its complement)
        #[arg(long, default_value_t = 0.5)]
        prior_skin: f64,
    },
    /// Train one segmentation network
    TrainSkinny {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Input modality: rgb, gs, or stack (stack requires --spec)
        #[arg(long, default_value = "rgb")]
        channels: String,
        /// Loss stratification: none, skin, or nonskin
        #[arg(long, default_value = "none")]
        branch: String,
        /// BC histogram file (required for skin/nonskin branches)
        #[arg(long)]
        bc: Option<PathBuf>,
        /// Ensemble spec supplying the stacked sources (channels=stack)
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        out: PathBuf,
        /// Write the training record as JSON
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a trained network on one image
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the second-level network of a stack ensemble
    TrainEnsemble {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Output path; defaults to the spec's second_level reference
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a full ensemble on one image
    EnsembleInfer {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted maps against truth masks
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit just the precision-recall curve
    PrCurve {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-tailed Wilcoxon signed-rank test between two evaluation reports
    Wilcoxon {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an error overlay (false positives red, false negatives blue)
    Overlay {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole desk-scale experiment end to end
    ReproduceDesk {
        #[arg(long, default_value_t = 17)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 24)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 80)]
        epochs: usize,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value_t = 8)]
        base: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
    },
}

/// Failure classes behind the exit codes: 1 for user errors (bad input,
/// missing files, contract violations), 2 for internal invariant breaks.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<skinseg::imgio::ImgError> for CliError {
    fn from(e: skinseg::imgio::ImgError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<skinseg::bayes::BayesError> for CliError {
    fn from(e: skinseg::bayes::BayesError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<skinseg::nncore::NnError> for CliError {
    fn from(e: skinseg::nncore::NnError) -> Self {
        use skinseg::nncore::NnError::*;
        match e {
            GraphState(_) | DuplicateSlot(_) | UnknownSlot(_) => CliError::Internal(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<skinseg::skinny::SkinnyError> for CliError {
    fn from(e: skinseg::skinny::SkinnyError) -> Self {
        match e {
            skinseg::skinny::SkinnyError::Nn(inner) => inner.into(),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<skinseg::train::TrainError> for CliError {
    fn from(e: skinseg::train::TrainError) -> Self {
        match e {
            skinseg::train::TrainError::Nn(inner) => inner.into(),
            skinseg::train::TrainError::Skinny(inner) => inner.into(),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<skinseg::ensemble::EnsembleError> for CliError {
    fn from(e: skinseg::ensemble::EnsembleError) -> Self {
        match e {
            skinseg::ensemble::EnsembleError::Skinny(inner) => inner.into(),
            skinseg::ensemble::EnsembleError::Train(inner) => inner.into(),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<skinseg::eval::EvalError> for CliError {
    fn from(e: skinseg::eval::EvalError) -> Self {
        CliError::User(e.to_string())
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { n, size, seed, out } => actions::gen_data(n, size, seed, &out),
        Cmd::Split { manifest, fractions, seed, out } => {
            actions::split(&manifest, &fractions, seed, &out)
        }
        Cmd::TrainBc { manifest, split, bins, out } => {
            actions::train_bc(&manifest, split.as_deref(), bins, &out)
        }
        Cmd::BcInfer { hist, input, out, alpha, prior_skin } => {
            actions::bc_infer(&hist, &input, &out, alpha, prior_skin)
        }
        Cmd::TrainSkinny { manifest, split, channels, branch, bc, spec, train, out, log } => {
            actions::train_skinny(
                &manifest,
                &split,
                &channels,
                &branch,
                bc.as_deref(),
                spec.as_deref(),
                &train,
                &out,
                log.as_deref(),
            )
        }
        Cmd::Infer { model, input, out } => actions::infer(&model, &input, &out),
        Cmd::TrainEnsemble { spec, manifest, split, train, out, log } => actions::train_ensemble(
            &spec,
            &manifest,
            &split,
            &train,
            out.as_deref(),
            log.as_deref(),
        ),
        Cmd::EnsembleInfer { spec, input, out } => actions::ensemble_infer(&spec, &input, &out),
        Cmd::Evaluate { pred_dir, truth_dir, threshold, steps, out } => {
            actions::evaluate(&pred_dir, &truth_dir, threshold, steps, &out)
        }
        Cmd::PrCurve { pred_dir, truth_dir, steps, out } => {
            actions::pr_curve(&pred_dir, &truth_dir, steps, &out)
        }
        Cmd::Wilcoxon { a, b, out } => actions::wilcoxon(&a, &b, out.as_deref()),
        Cmd::Overlay { input, pred, truth, out } => actions::overlay(&input, &pred, &truth, &out),
        Cmd::ReproduceDesk { seed, out, n, size, epochs, levels, base, batch, lr } => {
            reproduce::reproduce_desk(&reproduce::DeskParams {
                seed,
                out,
                n,
                size,
                epochs,
                levels,
                base,
                batch,
                lr,
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with success; everything else is
            // a usage error on stderr
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}
