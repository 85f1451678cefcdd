//! One function per subcommand.

use std::fs;
use std::path::Path;

use skinseg::bayes::{
    bc_prob_map, binarize, fit_histograms, load_histograms, save_histograms, ProbMap,
};
use skinseg::ensemble::{self, EnsembleSpec, Scheme};
use skinseg::eval::{self, EvalReport};
use skinseg::imgio::{
    self, codec, synth, to_grayscale, BinaryMask, DatasetSplit, Image, SamplePair,
};
use skinseg::skinny::{self, NetworkConfig};
use skinseg::train::{self, Branch, TrainConfig, TrainRecord, TrainSample};

use crate::{CliError, TrainFlags};

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    Ok(codec::decode_image(&fs::read(path)?)?)
}

fn read_mask(path: &Path) -> Result<BinaryMask, CliError> {
    Ok(codec::decode_mask(&fs::read(path)?)?)
}

pub fn gen_data(n: usize, size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n < 1 || size < 32 {
        return Err(CliError::User("gen-data needs n >= 1 and size >= 32".into()));
    }
    let samples = synth::generate_synthetic_dataset(n, size, seed)?;
    fs::create_dir_all(out)?;
    let manifest = imgio::save_dataset(&samples, out)?;
    println!("wrote {n} samples to {}", manifest.display());
    Ok(())
}

fn parse_fractions(text: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::User(format!("fractions `{text}`: {e}")))?;
    if parts.len() != 3 {
        return Err(CliError::User(format!("fractions `{text}` must have 3 components")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

pub fn split(manifest: &Path, fractions: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let samples = imgio::load_dataset(manifest)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = imgio::split_dataset(&ids, parse_fractions(fractions)?, seed)?;
    split.save(out)?;
    println!(
        "split {} samples into {}/{}/{}",
        ids.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    Ok(())
}

fn subset<'a>(
    samples: &'a [SamplePair],
    ids: &[String],
) -> Result<Vec<&'a SamplePair>, CliError> {
    Ok(imgio::select_samples(samples, ids)?)
}

pub fn train_bc(
    manifest: &Path,
    split: Option<&Path>,
    bins: usize,
    out: &Path,
) -> Result<(), CliError> {
    let samples = imgio::load_dataset(manifest)?;
    let refs: Vec<&SamplePair> = match split {
        Some(path) => subset(&samples, &DatasetSplit::load(path)?.train)?,
        None => samples.iter().collect(),
    };
    let hist = fit_histograms(&refs, bins)?;
    if hist.n_skin() == 0 || hist.n_nonskin() == 0 {
        return Err(CliError::User(
            "training set lacks one of the classes; the posterior would be undefined".into(),
        ));
    }
    save_histograms(&hist, out)?;
    println!(
        "fitted {}-bin histograms over {} skin / {} non-skin pixels",
        bins,
        hist.n_skin(),
        hist.n_nonskin()
    );
    Ok(())
}

pub fn bc_infer(
    hist_path: &Path,
    input: &Path,
    out: &Path,
    alpha: f64,
    prior_skin: f64,
) -> Result<(), CliError> {
    let mut hist = load_histograms(hist_path)?;
    hist.alpha = alpha;
    let img = read_image(input)?;
    let map = bc_prob_map(&hist, &img, (prior_skin, 1.0 - prior_skin))?;
    fs::write(out, codec::encode_prob_map(&map))?;
    Ok(())
}

fn load_train_val(
    manifest: &Path,
    split: &Path,
) -> Result<(Vec<SamplePair>, Vec<String>, Vec<String>), CliError> {
    let samples = imgio::load_dataset(manifest)?;
    let split = DatasetSplit::load(split)?;
    Ok((samples, split.train, split.validation))
}

/// Prepares (train, val) sample lists for one base-model flavor.
fn prepare_samples(
    samples: &[SamplePair],
    train_ids: &[String],
    val_ids: &[String],
    channels: &str,
    branch: Branch,
    bc: Option<&Path>,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>, usize), CliError> {
    let to_input = |s: &SamplePair| -> Result<Image, CliError> {
        match channels {
            "rgb" => Ok(s.image.clone()),
            "gs" => Ok(to_grayscale(&s.image)?),
            other => Err(CliError::User(format!("unknown channels mode `{other}`"))),
        }
    };
    let in_channels = if channels == "gs" { 1 } else { 3 };

    let hist = match (branch, bc) {
        (Branch::None, _) => None,
        (_, Some(path)) => Some(load_histograms(path)?),
        (_, None) => {
            return Err(CliError::User("skin/nonskin branches need --bc <hist.bch>".into()))
        }
    };

    let build = |ids: &[String], stratify: bool| -> Result<Vec<TrainSample>, CliError> {
        subset(samples, ids)?
            .into_iter()
            .map(|s| {
                let input = to_input(s)?;
                let sample = if stratify {
                    let hist = hist.as_ref().expect("checked above");
                    let bc_map = bc_prob_map(hist, &s.image, skinseg::bayes::DEFAULT_PRIORS)?;
                    let gate = binarize(&bc_map, 0.5)?;
                    let strat = train::stratify_sample(s, &gate, branch)?;
                    TrainSample::with_mask(input, strat.truth, strat.loss_mask)?
                } else {
                    TrainSample::new(input, s.truth.clone())?
                };
                Ok(sample)
            })
            .collect()
    };
    let stratify = branch != Branch::None;
    let train = build(train_ids, stratify)?;
    // validation monitors whole-image F regardless of stratification
    let val = build(val_ids, false)?;
    Ok((train, val, in_channels))
}

fn train_config(flags: &TrainFlags) -> TrainConfig {
    TrainConfig {
        epochs: flags.epochs,
        lr: flags.lr,
        batch_size: flags.batch,
        w_bce: flags.w_bce,
        w_dice: flags.w_dice,
        seed: flags.seed,
        checkpoint_every: flags.checkpoint_every,
        val_threshold: 0.5,
    }
}

fn parse_branch(text: &str) -> Result<Branch, CliError> {
    match text {
        "none" => Ok(Branch::None),
        "skin" => Ok(Branch::Skin),
        "nonskin" => Ok(Branch::NonSkin),
        other => Err(CliError::User(format!(
            "unknown branch `{other}` (expected none, skin, or nonskin)"
        ))),
    }
}

fn report_training(record: &TrainRecord, log: Option<&Path>) -> Result<(), CliError> {
    if let Some(path) = log {
        write_json(record, path)?;
    }
    let last_loss = record.epoch_loss.last().copied().unwrap_or(f64::NAN);
    match record.best_epoch {
        Some(e) => println!(
            "trained {} epochs, final loss {last_loss:.4}, best validation epoch {e}",
            record.epoch_loss.len()
        ),
        None => println!("trained {} epochs, final loss {last_loss:.4}", record.epoch_loss.len()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_skinny(
    manifest: &Path,
    split: &Path,
    channels: &str,
    branch: &str,
    bc: Option<&Path>,
    spec: Option<&Path>,
    flags: &TrainFlags,
    out: &Path,
    log: Option<&Path>,
) -> Result<(), CliError> {
    if channels == "stack" {
        let spec = spec.ok_or_else(|| {
            CliError::User("channels=stack needs --spec <ensemble.json>".into())
        })?;
        return train_ensemble(spec, manifest, split, flags, Some(out), log);
    }
    let (samples, train_ids, val_ids) = load_train_val(manifest, split)?;
    let branch = parse_branch(branch)?;
    let (train_samples, val_samples, in_channels) =
        prepare_samples(&samples, &train_ids, &val_ids, channels, branch, bc)?;
    let arch = skinny::parse_arch(&flags.arch)?;
    let cfg = NetworkConfig { in_channels, seed: flags.seed, ..arch };
    let (weights, record) = train::train_model(&cfg, &train_config(flags), &train_samples, &val_samples)?;
    skinny::save_weights(&weights, out)?;
    report_training(&record, log)
}

pub fn infer(model: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let ws = skinny::load_weights(model)?;
    let img = read_image(input)?;
    let img = match (ws.config.in_channels, img.channels()) {
        (1, 3) => to_grayscale(&img)?,
        (want, got) if want == got => img,
        (want, _) if want > 3 => {
            return Err(CliError::User(format!(
                "model takes {want} stacked channels; use ensemble-infer with its spec"
            )))
        }
        (want, got) => {
            return Err(CliError::User(format!(
                "model takes {want} channels but the image has {got}"
            )))
        }
    };
    let map = skinny::forward(&ws, &img)?;
    fs::write(out, codec::encode_prob_map(&map))?;
    Ok(())
}

pub fn train_ensemble(
    spec_path: &Path,
    manifest: &Path,
    split: &Path,
    flags: &TrainFlags,
    out: Option<&Path>,
    log: Option<&Path>,
) -> Result<(), CliError> {
    let spec = EnsembleSpec::load_file(spec_path)?;
    if spec.scheme != Scheme::Stack {
        return Err(CliError::User("train-ensemble needs a stack-scheme spec".into()));
    }
    let base = spec_path.parent().unwrap_or_else(|| Path::new("."));
    // the second-level model is what training produces; load the sources only
    let mut sources = Vec::new();
    for s in &spec.sources {
        sources.push(match s.kind {
            ensemble::SourceKind::RawGrayscale => ensemble::LoadedSource::RawGrayscale,
            ensemble::SourceKind::Model => {
                let path = s
                    .model
                    .as_deref()
                    .ok_or_else(|| CliError::User("model source without a reference".into()))?;
                ensemble::LoadedSource::Model(Box::new(skinny::load_weights(&base.join(path))?))
            }
        });
    }

    let (samples, train_ids, val_ids) = load_train_val(manifest, split)?;
    let train_pairs: Vec<SamplePair> = subset(&samples, &train_ids)?.into_iter().cloned().collect();
    let val_pairs: Vec<SamplePair> = subset(&samples, &val_ids)?.into_iter().cloned().collect();
    let arch = skinny::parse_arch(&flags.arch)?;
    let cfg = NetworkConfig { seed: flags.seed, ..arch };
    let (weights, record) =
        ensemble::train_second_level(&sources, &cfg, &train_config(flags), &train_pairs, &val_pairs)?;

    let out_path = match (out, &spec.second_level) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(rel)) => base.join(rel),
        (None, None) => return Err(CliError::User("no output path for the second-level model".into())),
    };
    skinny::save_weights(&weights, &out_path)?;
    report_training(&record, log)
}

pub fn ensemble_infer(spec: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let parsed = EnsembleSpec::load_file(spec)?;
    let base = spec.parent().unwrap_or_else(|| Path::new("."));
    let loaded = parsed.load(base)?;
    let img = read_image(input)?;
    let map = ensemble::infer(&loaded, &img)?;
    fs::write(out, codec::encode_prob_map(&map))?;
    Ok(())
}

/// Pairs prediction maps with truth masks by file stem.
fn paired_maps(
    pred_dir: &Path,
    truth_dir: &Path,
) -> Result<(Vec<String>, Vec<ProbMap>, Vec<BinaryMask>), CliError> {
    let mut names: Vec<String> = fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::User(format!("no .pgm maps in {}", pred_dir.display())));
    }
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for name in names {
        let truth_path = truth_dir.join(&name);
        if !truth_path.exists() {
            return Err(CliError::User(format!("no truth mask for {name} in {}", truth_dir.display())));
        }
        preds.push(codec::decode_prob_map(&fs::read(pred_dir.join(&name))?)?);
        truths.push(read_mask(&truth_path)?);
        ids.push(name.trim_end_matches(".pgm").to_string());
    }
    Ok((ids, preds, truths))
}

pub fn evaluate(
    pred_dir: &Path,
    truth_dir: &Path,
    threshold: f64,
    steps: usize,
    out: &Path,
) -> Result<(), CliError> {
    let (ids, preds, truths) = paired_maps(pred_dir, truth_dir)?;
    let pred_refs: Vec<&ProbMap> = preds.iter().collect();
    let truth_refs: Vec<&BinaryMask> = truths.iter().collect();
    let report = eval::evaluate(&ids, &pred_refs, &truth_refs, threshold, steps)?;
    write_json(&report, out)?;
    println!(
        "evaluated {} images: F {:.4}, precision {:.4}, recall {:.4}",
        ids.len(),
        report.f_score,
        report.precision,
        report.recall
    );
    Ok(())
}

pub fn pr_curve(pred_dir: &Path, truth_dir: &Path, steps: usize, out: &Path) -> Result<(), CliError> {
    let (_, preds, truths) = paired_maps(pred_dir, truth_dir)?;
    let pred_refs: Vec<&ProbMap> = preds.iter().collect();
    let truth_refs: Vec<&BinaryMask> = truths.iter().collect();
    let curve = eval::pr_curve(&pred_refs, &truth_refs, steps)?;
    write_json(&curve, out)?;
    Ok(())
}

pub fn wilcoxon(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let parse = |path: &Path| -> Result<EvalReport, CliError> {
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::User(format!("{}: {e}", path.display())))
    };
    let ra = parse(a)?;
    let rb = parse(b)?;
    let mut ids: Vec<&String> = ra.per_image.iter().map(|p| &p.id).collect();
    ids.sort();
    let score = |r: &EvalReport, id: &str| r.per_image.iter().find(|p| p.id == id).map(|p| p.f);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for id in ids {
        if let (Some(x), Some(y)) = (score(&ra, id), score(&rb, id)) {
            xs.push(x);
            ys.push(y);
        }
    }
    let result = eval::wilcoxon_signed_rank(&xs, &ys)?;
    let text = serde_json::to_string_pretty(&result)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    println!("{text}");
    if let Some(path) = out {
        fs::write(path, format!("{text}\n"))?;
    }
    Ok(())
}

pub fn overlay(input: &Path, pred: &Path, truth: &Path, out: &Path) -> Result<(), CliError> {
    let img = read_image(input)?;
    let pred = read_mask(pred)?;
    let truth = read_mask(truth)?;
    let viz = eval::render_overlay(&img, &pred, &truth)?;
    fs::write(out, codec::encode_image(&viz)?)?;
    Ok(())
}
