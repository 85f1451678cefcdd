//! The full desk-scale experiment, end to end and deterministic: synthetic
//! data, split, BC fit, three stratified/grayscale base networks, the
//! stacked second-level network, then evaluation of every base model and
//! ensemble into a results table and PR-curve bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use skinseg::bayes::{bc_prob_map, binarize, fit_histograms, save_histograms, ProbMap, DEFAULT_PRIORS};
use skinseg::ensemble::{self, ChannelSource, EnsembleSpec};
use skinseg::eval;
use skinseg::imgio::{self, to_grayscale, BinaryMask, SamplePair};
use skinseg::rng::derive_seed;
use skinseg::skinny::{self, NetworkConfig};
use skinseg::train::{self, Branch, TrainConfig, TrainSample};

use crate::CliError;

pub struct DeskParams {
    pub seed: u64,
    pub out: PathBuf,
    pub n: usize,
    pub size: usize,
    pub epochs: usize,
    pub levels: usize,
    pub base: usize,
    pub batch: usize,
    pub lr: f64,
}

const SPLIT_FRACTIONS: (f64, f64, f64) = (0.5, 0.125, 0.375);
const BC_BINS: usize = 16;

struct Roster<'a> {
    ids: Vec<String>,
    preds: BTreeMap<&'static str, Vec<ProbMap>>,
    truths: Vec<&'a BinaryMask>,
}

pub fn reproduce_desk(p: &DeskParams) -> Result<(), CliError> {
    if p.n < 8 {
        return Err(CliError::User("reproduce-desk needs at least 8 samples".into()));
    }
    let out = &p.out;
    fs::create_dir_all(out.join("data"))?;
    fs::create_dir_all(out.join("models"))?;
    fs::create_dir_all(out.join("reports"))?;

    // data + split
    let samples = imgio::synth::generate_synthetic_dataset(p.n, p.size, p.seed)?;
    imgio::save_dataset(&samples, &out.join("data"))?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = imgio::split_dataset(&ids, SPLIT_FRACTIONS, p.seed)?;
    split.save(&out.join("split.json"))?;
    let train_set = imgio::select_samples(&samples, &split.train)?;
    let val_set = imgio::select_samples(&samples, &split.validation)?;
    let test_set = imgio::select_samples(&samples, &split.test)?;
    println!(
        "data: {} train / {} validation / {} test at {}x{}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        p.size,
        p.size
    );

    // Bayesian classifier
    let hist = fit_histograms(&train_set, BC_BINS)?;
    save_histograms(&hist, &out.join("models/bc.bch"))?;
    println!("bc: fitted {BC_BINS}-bin histograms");

    let tcfg = |name: &str| TrainConfig {
        epochs: p.epochs,
        lr: p.lr,
        batch_size: p.batch,
        seed: derive_seed(p.seed, name),
        ..Default::default()
    };
    let arch = |name: &str, in_channels: usize| NetworkConfig {
        in_channels,
        levels: p.levels,
        base_channels: p.base,
        inception: false,
        dense: false,
        seed: derive_seed(p.seed, name),
    };

    // base models
    let gray_samples = |set: &[&SamplePair]| -> Result<Vec<TrainSample>, CliError> {
        set.iter()
            .map(|s| Ok(TrainSample::new(to_grayscale(&s.image)?, s.truth.clone())?))
            .collect()
    };
    let stratified = |set: &[&SamplePair], branch: Branch| -> Result<Vec<TrainSample>, CliError> {
        set.iter()
            .map(|s| {
                let gate = binarize(&bc_prob_map(&hist, &s.image, DEFAULT_PRIORS)?, 0.5)?;
                Ok(train::stratify_sample(s, &gate, branch)?)
            })
            .collect()
    };
    let plain = |set: &[&SamplePair]| -> Result<Vec<TrainSample>, CliError> {
        set.iter().map(|s| Ok(TrainSample::new(s.image.clone(), s.truth.clone())?)).collect()
    };

    let jobs: [(&str, &str, Branch); 3] = [
        ("skinny_gs", "gs", Branch::None),
        ("skinny_pbs", "rgb", Branch::Skin),
        ("skinny_pbns", "rgb", Branch::NonSkin),
    ];
    for (name, channels, branch) in jobs {
        let (train_samples, val_samples, in_channels) = match (channels, branch) {
            ("gs", _) => (gray_samples(&train_set)?, gray_samples(&val_set)?, 1),
            (_, b) => (stratified(&train_set, b)?, plain(&val_set)?, 3),
        };
        let cfg = arch(name, in_channels);
        let (weights, record) =
            train::train_model(&cfg, &tcfg(name), &train_samples, &val_samples)?;
        skinny::save_weights(&weights, &out.join(format!("models/{name}.sknw")))?;
        let best = record.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
        println!("{name}: {} epochs, best validation epoch {best}", record.epoch_loss.len());
    }

    // ensemble specs; model references resolve against the output root
    let gs = || ChannelSource::model("models/skinny_gs.sknw");
    let pbs = || ChannelSource::model("models/skinny_pbs.sknw");
    let pbns = || ChannelSource::model("models/skinny_pbns.sknw");
    let spec_s = EnsembleSpec::stack(vec![gs(), pbs(), pbns()], "models/ensemble_s_second.sknw");
    let spec_v = EnsembleSpec::vote(vec![gs(), pbs(), pbns()]);
    let spec_bc = EnsembleSpec::bc_select(
        "models/skinny_pbs.sknw",
        "models/skinny_pbns.sknw",
        "models/bc.bch",
    );
    fs::write(out.join("ensemble_s.json"), spec_s.to_json())?;
    fs::write(out.join("ensemble_v.json"), spec_v.to_json())?;
    fs::write(out.join("ensemble_bc_s.json"), spec_bc.to_json())?;

    // second-level network over the stacked first-level responses
    {
        let sources = [gs(), pbs(), pbns()]
            .iter()
            .map(|s| -> Result<ensemble::LoadedSource, CliError> {
                Ok(ensemble::LoadedSource::Model(Box::new(skinny::load_weights(
                    &out.join(s.model.as_deref().expect("model source")),
                )?)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let train_pairs: Vec<SamplePair> = train_set.iter().map(|s| (*s).clone()).collect();
        let val_pairs: Vec<SamplePair> = val_set.iter().map(|s| (*s).clone()).collect();
        let cfg = arch("ensemble_s", 3);
        let (weights, record) = ensemble::train_second_level(
            &sources,
            &cfg,
            &tcfg("ensemble_s"),
            &train_pairs,
            &val_pairs,
        )?;
        skinny::save_weights(&weights, &out.join("models/ensemble_s_second.sknw"))?;
        let best = record.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
        println!("ensemble_s: {} epochs, best validation epoch {best}", record.epoch_loss.len());
    }

    // evaluation roster over the test set
    let mut roster = Roster {
        ids: test_set.iter().map(|s| s.id.clone()).collect(),
        preds: BTreeMap::new(),
        truths: test_set.iter().map(|s| &s.truth).collect(),
    };

    let bc_maps: Vec<ProbMap> = test_set
        .iter()
        .map(|s| bc_prob_map(&hist, &s.image, DEFAULT_PRIORS))
        .collect::<Result<_, _>>()?;
    roster.preds.insert("BC", bc_maps);

    for (label, name) in
        [("Skinny-GS", "skinny_gs"), ("Skinny-PB-S", "skinny_pbs"), ("Skinny-PB-NS", "skinny_pbns")]
    {
        let ws = skinny::load_weights(&out.join(format!("models/{name}.sknw")))?;
        let maps: Vec<ProbMap> = test_set
            .iter()
            .map(|s| -> Result<ProbMap, CliError> {
                let input =
                    if ws.config.in_channels == 1 { to_grayscale(&s.image)? } else { s.image.clone() };
                Ok(skinny::forward(&ws, &input)?)
            })
            .collect::<Result<_, _>>()?;
        roster.preds.insert(label, maps);
    }

    for (label, spec) in
        [("Ensemble-S", &spec_s), ("Ensemble-V", &spec_v), ("Ensemble-BC+S", &spec_bc)]
    {
        let loaded = spec.load(out)?;
        let maps: Vec<ProbMap> = test_set
            .iter()
            .map(|s| ensemble::infer(&loaded, &s.image))
            .collect::<Result<_, _>>()?;
        roster.preds.insert(label, maps);
    }

    write_results(out, &roster)?;
    println!("wrote {} and {}", out.join("results.csv").display(), out.join("pr_curves.json").display());
    Ok(())
}

/// Fixed table order mirroring the base-models-then-ensembles layout.
const TABLE_ORDER: [&str; 7] = [
    "BC",
    "Skinny-GS",
    "Skinny-PB-S",
    "Skinny-PB-NS",
    "Ensemble-S",
    "Ensemble-V",
    "Ensemble-BC+S",
];

fn report_file_name(label: &str) -> String {
    let name: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("reports/{name}.json")
}

fn write_results(out: &Path, roster: &Roster<'_>) -> Result<(), CliError> {
    let mut csv = String::from(eval::CSV_HEADER);
    csv.push('\n');
    let mut curves: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for label in TABLE_ORDER {
        let maps = roster.preds.get(label).expect("roster is complete");
        let pred_refs: Vec<&ProbMap> = maps.iter().collect();
        let report = eval::evaluate(
            &roster.ids,
            &pred_refs,
            &roster.truths,
            0.5,
            eval::DEFAULT_CURVE_STEPS,
        )?;
        let mut text = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        fs::write(out.join(report_file_name(label)), text)?;
        csv.push_str(&eval::csv_row(label, &report));
        csv.push('\n');
        curves.insert(label.to_string(), report.pr_curve.clone());
        println!(
            "{label}: F {:.4}, precision {:.4}, recall {:.4}",
            report.f_score, report.precision, report.recall
        );
    }
    fs::write(out.join("results.csv"), csv)?;
    let mut curves_json = serde_json::to_string_pretty(&curves)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    curves_json.push('\n');
    fs::write(out.join("pr_curves.json"), curves_json)?;
    Ok(())
}
