//! Ensemble combination schemes.
//!
//! Three ways to merge first-level skin-probability maps:
//!
//! - **Stack**: maps (and optionally the raw grayscale plane) become the
//!   channels of a new image consumed by a learned second-level network.
//! - **Vote**: per-pixel hard majority over binarized maps.
//! - **BC select**: the BC's decision gates, per pixel, between a model
//!   trained on its skin regions and one trained on its non-skin regions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bayes::{bc_prob_map, binarize, load_histograms, BayesError, ColorHistogramPair, ProbMap};
use crate::imgio::{to_grayscale, ImgError, Image, SamplePair};
use crate::skinny::{self, NetworkConfig, SkinnyError, WeightStore};
use crate::train::{train_model, TrainConfig, TrainError, TrainRecord, TrainSample};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble spec: {0}")]
    Spec(String),
    #[error("source model must take 1 or 3 channels, this one takes {0}")]
    UnsupportedSourceArity(usize),
    #[error("second-level model takes {model} channels but the spec stacks {sources}")]
    SecondLevelArity { model: usize, sources: usize },
    #[error(transparent)]
    Skinny(#[from] SkinnyError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ensemble spec json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Pass the grayscale plane of the input straight through.
    RawGrayscale,
    /// Run a first-level model and take its probability map.
    Model,
}

/// One input channel of a stacked or voting ensemble.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSource {
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl ChannelSource {
    pub fn raw_grayscale() -> Self {
        Self { kind: SourceKind::RawGrayscale, model: None }
    }

    pub fn model(path: impl Into<String>) -> Self {
        Self { kind: SourceKind::Model, model: Some(path.into()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Stack,
    Vote,
    BcSelect,
}

fn default_threshold() -> f64 {
    0.5
}

/// Declarative description of one ensemble, the JSON interchange format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub scheme: Scheme,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<ChannelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_level: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skin_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonskin_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bc_hist: Option<String>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl EnsembleSpec {
    pub fn stack(sources: Vec<ChannelSource>, second_level: impl Into<String>) -> Self {
        Self {
            scheme: Scheme::Stack,
            sources,
            second_level: Some(second_level.into()),
            skin_model: None,
            nonskin_model: None,
            bc_hist: None,
            threshold: 0.5,
        }
    }

    pub fn vote(sources: Vec<ChannelSource>) -> Self {
        Self {
            scheme: Scheme::Vote,
            sources,
            second_level: None,
            skin_model: None,
            nonskin_model: None,
            bc_hist: None,
            threshold: 0.5,
        }
    }

    pub fn bc_select(
        skin_model: impl Into<String>,
        nonskin_model: impl Into<String>,
        bc_hist: impl Into<String>,
    ) -> Self {
        Self {
            scheme: Scheme::BcSelect,
            sources: Vec::new(),
            second_level: None,
            skin_model: Some(skin_model.into()),
            nonskin_model: Some(nonskin_model.into()),
            bc_hist: Some(bc_hist.into()),
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(EnsembleError::Spec(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        for (i, s) in self.sources.iter().enumerate() {
            match s.kind {
                SourceKind::Model if s.model.is_none() => {
                    return Err(EnsembleError::Spec(format!("source {i} is a model without a reference")));
                }
                SourceKind::RawGrayscale if s.model.is_some() => {
                    return Err(EnsembleError::Spec(format!(
                        "source {i} is raw grayscale but names a model"
                    )));
                }
                _ => {}
            }
        }
        match self.scheme {
            Scheme::Stack => {
                if self.sources.len() < 2 {
                    return Err(EnsembleError::Spec("stack needs at least 2 sources".into()));
                }
                if self.second_level.is_none() {
                    return Err(EnsembleError::Spec("stack needs a second-level model".into()));
                }
            }
            Scheme::Vote => {
                if self.sources.len() < 3 || self.sources.len() % 2 == 0 {
                    return Err(EnsembleError::Spec(format!(
                        "vote needs an odd source count >= 3, got {}",
                        self.sources.len()
                    )));
                }
                if self.sources.iter().any(|s| s.kind != SourceKind::Model) {
                    return Err(EnsembleError::Spec("vote sources must all be models".into()));
                }
            }
            Scheme::BcSelect => {
                if self.skin_model.is_none() || self.nonskin_model.is_none() || self.bc_hist.is_none()
                {
                    return Err(EnsembleError::Spec(
                        "bc_select needs skin_model, nonskin_model, and bc_hist".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, EnsembleError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| EnsembleError::Json(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        text
    }

    pub fn load_file(path: &Path) -> Result<Self, EnsembleError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads every referenced artifact, resolving paths against `base`.
    pub fn load(&self, base: &Path) -> Result<LoadedEnsemble, EnsembleError> {
        self.validate()?;
        let model = |p: &str| skinny::load_weights(&base.join(p));
        let sources = self
            .sources
            .iter()
            .map(|s| -> Result<LoadedSource, EnsembleError> {
                Ok(match s.kind {
                    SourceKind::RawGrayscale => LoadedSource::RawGrayscale,
                    SourceKind::Model => {
                        let ws = model(s.model.as_deref().expect("validated"))?;
                        if ws.config.in_channels != 1 && ws.config.in_channels != 3 {
                            return Err(EnsembleError::UnsupportedSourceArity(ws.config.in_channels));
                        }
                        LoadedSource::Model(Box::new(ws))
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let second_level = match (&self.scheme, &self.second_level) {
            (Scheme::Stack, Some(p)) => {
                let ws = model(p)?;
                if ws.config.in_channels != sources.len() {
                    return Err(EnsembleError::SecondLevelArity {
                        model: ws.config.in_channels,
                        sources: sources.len(),
                    });
                }
                Some(Box::new(ws))
            }
            _ => None,
        };
        let (skin_model, nonskin_model, hist) = if self.scheme == Scheme::BcSelect {
            (
                Some(Box::new(model(self.skin_model.as_deref().expect("validated"))?)),
                Some(Box::new(model(self.nonskin_model.as_deref().expect("validated"))?)),
                Some(load_histograms(&base.join(self.bc_hist.as_deref().expect("validated")))?),
            )
        } else {
            (None, None, None)
        };
        Ok(LoadedEnsemble {
            scheme: self.scheme,
            sources,
            second_level,
            skin_model,
            nonskin_model,
            hist,
            threshold: self.threshold,
        })
    }
}

/// A resolved channel source.
pub enum LoadedSource {
    RawGrayscale,
    Model(Box<WeightStore>),
}

impl LoadedSource {
    /// The source's map for one color image. Grayscale models receive the
    /// grayscale conversion automatically; RGB models the image itself.
    pub fn probe(&self, img: &Image) -> Result<ProbMap, EnsembleError> {
        match self {
            LoadedSource::RawGrayscale => {
                let gray = to_grayscale(img)?;
                ProbMap::new(gray.height(), gray.width(), gray.data().to_vec())
                    .map_err(EnsembleError::Spec)
            }
            LoadedSource::Model(ws) => {
                let map = match ws.config.in_channels {
                    3 => skinny::forward(ws, img)?,
                    1 => skinny::forward(ws, &to_grayscale(img)?)?,
                    c => return Err(EnsembleError::UnsupportedSourceArity(c)),
                };
                Ok(map)
            }
        }
    }
}

/// An ensemble with every referenced model and histogram in memory.
pub struct LoadedEnsemble {
    pub scheme: Scheme,
    pub sources: Vec<LoadedSource>,
    pub second_level: Option<Box<WeightStore>>,
    pub skin_model: Option<Box<WeightStore>>,
    pub nonskin_model: Option<Box<WeightStore>>,
    pub hist: Option<ColorHistogramPair>,
    pub threshold: f64,
}

/// Stacks per-source maps into one multi-channel image, source order
/// preserved, values passed through bitwise.
pub fn stack_channels(img: &Image, sources: &[LoadedSource]) -> Result<Image, EnsembleError> {
    if sources.is_empty() {
        return Err(EnsembleError::Spec("no sources to stack".into()));
    }
    let maps = sources.iter().map(|s| s.probe(img)).collect::<Result<Vec<_>, _>>()?;
    let (h, w) = (img.height(), img.width());
    let c = maps.len();
    let mut data = vec![0.0f32; h * w * c];
    for (ci, map) in maps.iter().enumerate() {
        for (i, &v) in map.values().iter().enumerate() {
            data[i * c + ci] = v;
        }
    }
    Image::new(h, w, c, data).map_err(EnsembleError::Img)
}

/// Stack scheme inference: second-level forward over the stacked channels.
pub fn infer_stack(ensemble: &LoadedEnsemble, img: &Image) -> Result<ProbMap, EnsembleError> {
    let second = ensemble
        .second_level
        .as_ref()
        .ok_or_else(|| EnsembleError::Spec("stack ensemble missing second-level model".into()))?;
    let stacked = stack_channels(img, &ensemble.sources)?;
    Ok(skinny::forward(second, &stacked)?)
}

/// Per-pixel hard majority over already-computed maps: a pixel is skin when
/// a strict majority of maps reach the threshold. The output is a degenerate
/// probability map holding only 0 and 1.
pub fn vote_maps(maps: &[&ProbMap], threshold: f64) -> Result<ProbMap, EnsembleError> {
    let n = maps.len();
    if n < 3 || n % 2 == 0 {
        return Err(EnsembleError::Spec(format!("vote needs an odd source count >= 3, got {n}")));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    if maps.iter().any(|m| m.height() != h || m.width() != w) {
        return Err(EnsembleError::Spec("vote maps must share dimensions".into()));
    }
    let values = (0..h * w)
        .map(|i| {
            let votes = maps.iter().filter(|m| f64::from(m.values()[i]) >= threshold).count();
            if votes * 2 > n {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    ProbMap::new(h, w, values).map_err(EnsembleError::Spec)
}

/// Vote scheme inference over the ensemble's sources.
pub fn infer_vote(ensemble: &LoadedEnsemble, img: &Image) -> Result<ProbMap, EnsembleError> {
    let maps = ensemble.sources.iter().map(|s| s.probe(img)).collect::<Result<Vec<_>, _>>()?;
    vote_maps(&maps.iter().collect::<Vec<_>>(), ensemble.threshold)
}

/// Per-pixel projection: take `skin_map` where the gate is true, otherwise
/// `nonskin_map`.
pub fn select_maps(
    gate: &crate::imgio::BinaryMask,
    skin_map: &ProbMap,
    nonskin_map: &ProbMap,
) -> Result<ProbMap, EnsembleError> {
    if gate.height() != skin_map.height()
        || gate.width() != skin_map.width()
        || !skin_map.same_dims(nonskin_map)
    {
        return Err(EnsembleError::Spec("selection inputs must share dimensions".into()));
    }
    let values = gate
        .bits()
        .iter()
        .zip(skin_map.values())
        .zip(nonskin_map.values())
        .map(|((&g, &s), &ns)| if g { s } else { ns })
        .collect();
    ProbMap::new(gate.height(), gate.width(), values).map_err(EnsembleError::Spec)
}

/// Two-branch selection: the BC's binary decision picks, per pixel, between
/// the skin-branch and non-skin-branch model outputs.
pub fn infer_bc_select(ensemble: &LoadedEnsemble, img: &Image) -> Result<ProbMap, EnsembleError> {
    let (skin, nonskin, hist) = match (&ensemble.skin_model, &ensemble.nonskin_model, &ensemble.hist) {
        (Some(s), Some(ns), Some(h)) => (s, ns, h),
        _ => return Err(EnsembleError::Spec("bc_select ensemble missing references".into())),
    };
    let bc = bc_prob_map(hist, img, crate::bayes::DEFAULT_PRIORS)?;
    let gate = binarize(&bc, ensemble.threshold)?;
    let skin_map = skinny::forward(skin, img)?;
    let nonskin_map = skinny::forward(nonskin, img)?;
    select_maps(&gate, &skin_map, &nonskin_map)
}

/// Scheme dispatch.
pub fn infer(ensemble: &LoadedEnsemble, img: &Image) -> Result<ProbMap, EnsembleError> {
    match ensemble.scheme {
        Scheme::Stack => infer_stack(ensemble, img),
        Scheme::Vote => infer_vote(ensemble, img),
        Scheme::BcSelect => infer_bc_select(ensemble, img),
    }
}

/// Trains a fresh second-level network over stacked first-level responses.
/// Base models stay frozen; every stacked sample uses an all-true loss mask.
/// The architecture's `in_channels` is forced to the source count.
pub fn train_second_level(
    sources: &[LoadedSource],
    arch: &NetworkConfig,
    tcfg: &TrainConfig,
    train: &[SamplePair],
    val: &[SamplePair],
) -> Result<(WeightStore, TrainRecord), EnsembleError> {
    if sources.len() < 2 {
        return Err(EnsembleError::Spec("stack training needs at least 2 sources".into()));
    }
    let cfg = NetworkConfig { in_channels: sources.len(), ..arch.clone() };
    let build = |pairs: &[SamplePair]| -> Result<Vec<TrainSample>, EnsembleError> {
        pairs
            .iter()
            .map(|p| {
                let stacked = stack_channels(&p.image, sources)?;
                TrainSample::new(stacked, p.truth.clone()).map_err(EnsembleError::Train)
            })
            .collect()
    };
    let train_samples = build(train)?;
    let val_samples = build(val)?;
    Ok(train_model(&cfg, tcfg, &train_samples, &val_samples)?)
}
