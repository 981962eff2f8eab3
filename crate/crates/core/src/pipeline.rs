//! End-to-end runs: architecture search, network training, evaluation,
//! inspection and feature extraction over a benchmark manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archsearch::{
    common_dims, cross_val_scores, extract_features, generate_random_filters, prepared_dims, random_search, ColorMode,
    SearchOptions, SearchOutcome, SearchSpace, DEFAULT_BUDGET,
};
use crate::backprop::{self, BatchSplit, EpochLog, FitOptions, NetConfig, TrainingSchedule, DEFAULT_MINIBATCH};
use crate::datapipe::{BenchmarkManifest, Dataset, Split};
use crate::error::{Error, Result};
use crate::imagecore::MultibandImage;
use crate::label::Label;
use crate::maxmargin::{self, TrainOptions, DEFAULT_C};
use crate::model::{fit_to_net, FrozenThreshold, ModelContainer, Scorer, FORMAT_VERSION};
use crate::protocol::{
    compute_metrics, eer_threshold, fuse_max, EvalReport, ScoreEntry, ScoreSet, ThresholdRule, DEFAULT_FOLDS,
    FIXED_THRESHOLD,
};
use crate::{pnm, seed};

fn load_split(manifest: &BenchmarkManifest, split: Split) -> Result<Dataset> {
    let data = Dataset::load(manifest, split)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("manifest has no {split} samples")));
    }
    Ok(data)
}

fn score_set(data: &Dataset, scores: Vec<f64>) -> Result<ScoreSet> {
    ScoreSet::new(
        data.records
            .iter()
            .zip(scores)
            .map(|(r, score)| ScoreEntry {
                sample_id: r.path.clone(),
                group_id: r.group_id.clone(),
                label: r.label,
                score,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub budget: usize,
    pub seed: u64,
    pub folds: usize,
    pub c: f64,
    /// Manual color choice instead of searching over it.
    pub color: Option<ColorMode>,
    pub standardize_features: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            seed: 0,
            folds: DEFAULT_FOLDS,
            c: DEFAULT_C,
            color: None,
            standardize_features: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchRun {
    pub model: ModelContainer,
    pub outcome: SearchOutcome,
    /// Held-out scores of the final classifier's configuration on the
    /// training split, one per training sample.
    pub cv_scores: ScoreSet,
}

/// Searches on the training split, retrains the best architecture's
/// classifier on all training samples and freezes the cross-validated EER
/// threshold into the model.
pub fn run_search(manifest: &BenchmarkManifest, cfg: &SearchConfig) -> Result<SearchRun> {
    let train = load_split(manifest, Split::Train)?;
    let mut space = SearchSpace::default();
    if let Some(color) = cfg.color {
        space = space.with_color(color);
    }
    let svm = TrainOptions {
        c: cfg.c,
        standardize: cfg.standardize_features,
        ..TrainOptions::default()
    };
    let opts = SearchOptions {
        budget: cfg.budget,
        seed: cfg.seed,
        folds: cfg.folds,
        svm: svm.clone(),
    };
    let outcome = random_search(&space, &train, &opts)?;
    let best = outcome.best().spec.clone();
    log::info!(
        "best candidate {} with objective {:.4}",
        outcome.best().index,
        outcome.best().objective
    );

    let dims = common_dims(&train.images)?;
    let input_bands = prepared_dims(&best, dims).2;
    let filters = generate_random_filters(&best, input_bands)?;
    let features = extract_features(&best, &filters, &train.images)?;
    let labels = train.labels();
    let classifier = maxmargin::train_with(&features, &labels, &svm)?;
    let cv_scores = score_set(&train, cross_val_scores(&features, &labels, &outcome.folds, &svm)?)?;
    let tau = eer_threshold(&fuse_max(&cv_scores)?)?;
    let model = ModelContainer::ao(
        best,
        &filters,
        input_bands,
        classifier,
        cfg.seed,
        Some(FrozenThreshold {
            rule: ThresholdRule::CvEer,
            tau,
        }),
    );
    Ok(SearchRun {
        model,
        outcome,
        cv_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetTrainingConfig {
    /// 64×64 inputs with 56×56 crops instead of 128/112.
    pub reduced: bool,
    pub schedule: TrainingSchedule,
    pub seed: u64,
    pub minibatch: usize,
}

impl Default for NetTrainingConfig {
    fn default() -> Self {
        Self {
            reduced: false,
            schedule: TrainingSchedule::spoofnet(),
            seed: 0,
            minibatch: DEFAULT_MINIBATCH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetRun {
    pub model: ModelContainer,
    pub log: Vec<EpochLog>,
}

// Independent random streams of a training run.
const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 3;

pub fn run_train_net(manifest: &BenchmarkManifest, cfg: &NetTrainingConfig) -> Result<NetRun> {
    let train = load_split(manifest, Split::Train)?;
    let bands = common_dims(&train.images)?.2;
    let config = if cfg.reduced {
        NetConfig::reduced_spoofnet(bands)
    } else {
        NetConfig::spoofnet(bands)
    };
    let images = train
        .images
        .iter()
        .map(|img| fit_to_net(img, &config))
        .collect::<Result<Vec<_>>>()?;
    let labels = train.labels();
    let split = BatchSplit::stratified(&labels, seed::derive(cfg.seed, SPLIT_STREAM))?;
    let mut net = backprop::build_spoofnet(&config, seed::derive(cfg.seed, INIT_STREAM))?;
    let log = backprop::train(
        &mut net,
        &images,
        &labels,
        &split,
        &cfg.schedule,
        &FitOptions {
            minibatch: cfg.minibatch,
            seed: seed::derive(cfg.seed, ORDER_STREAM),
        },
    )?;
    let threshold = FrozenThreshold {
        rule: ThresholdRule::Fixed,
        tau: FIXED_THRESHOLD,
    };
    Ok(NetRun {
        model: ModelContainer::fo(&net, cfg.seed, Some(threshold)),
        log,
    })
}

pub fn score_split(scorer: &Scorer, manifest: &BenchmarkManifest, split: Split) -> Result<ScoreSet> {
    let data = load_split(manifest, split)?;
    score_set(&data, scorer.score_all(&data.images)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub seed: u64,
    pub model_kind: String,
    pub threshold_rule: ThresholdRule,
    pub n_samples: usize,
    pub n_groups: usize,
    #[serde(flatten)]
    pub metrics: EvalReport,
}

/// Test-split metrics after max-rule fusion, at the threshold `rule` picks.
pub fn evaluate(model: &ModelContainer, manifest: &BenchmarkManifest, rule: ThresholdRule) -> Result<EvaluationReport> {
    let scorer = model.scorer()?;
    let tau = match rule {
        ThresholdRule::Fixed => FIXED_THRESHOLD,
        ThresholdRule::CvEer => match model.threshold {
            Some(t) if t.rule == ThresholdRule::CvEer => t.tau,
            _ => {
                return Err(Error::Config(
                    "model carries no cross-validated threshold; use dev-eer or fixed-0.5".into(),
                ))
            }
        },
        ThresholdRule::DevEer => {
            if manifest.tally().dev == 0 {
                return Err(Error::Config("dev-eer needs a dev split in the manifest".into()));
            }
            eer_threshold(&fuse_max(&score_split(&scorer, manifest, Split::Dev)?)?)?
        }
    };
    let test = score_split(&scorer, manifest, Split::Test)?;
    let fused = fuse_max(&test)?;
    Ok(EvaluationReport {
        format_version: FORMAT_VERSION,
        seed: model.seed,
        model_kind: model.kind().into(),
        threshold_rule: rule,
        n_samples: test.len(),
        n_groups: fused.len(),
        metrics: compute_metrics(&fused, tau),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectSummary {
    pub filters: usize,
    pub mean_images: usize,
    pub activation_maps: usize,
    pub files: Vec<PathBuf>,
}

fn mean_image(images: &[MultibandImage]) -> Result<MultibandImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to average".into()))?;
    let mut acc = vec![0.0; first.len()];
    for img in images {
        if img.dims() != first.dims() {
            return Err(Error::Shape("images to average differ in size".into()));
        }
        acc.iter_mut().zip(img.data()).for_each(|(a, v)| *a += v);
    }
    let n = images.len() as f64;
    let (w, h, b) = first.dims();
    MultibandImage::new(w, h, b, acc.into_iter().map(|v| v / n).collect())
}

fn displayable(img: &MultibandImage) -> Result<MultibandImage> {
    let img = match img.bands() {
        1 | 3 => img.clone(),
        _ => img.band(0)?,
    };
    Ok(pnm::normalize_for_display(&img))
}

/// Writes the first-layer filters, the mean network input of each class and
/// the mean first-layer response of each class and filter, every image
/// scaled to the full 8-bit range on its own.
pub fn inspect(model: &ModelContainer, manifest: &BenchmarkManifest, out_dir: &Path) -> Result<InspectSummary> {
    let scorer = model.scorer()?;
    let split = if manifest.tally().train > 0 {
        Split::Train
    } else {
        Split::Test
    };
    let data = load_split(manifest, split)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut files = Vec::new();
    let mut save = |img: &MultibandImage, name: String| -> Result<()> {
        let path = out_dir.join(name);
        pnm::save(&displayable(img)?, &path)?;
        files.push(path);
        Ok(())
    };

    let bank = scorer.first_bank();
    for i in 0..bank.n() {
        save(&bank.filter_image(i), format!("filter_{i:03}.{}", ext(bank.in_bands())))?;
    }
    let mut maps = 0;
    for label in [Label::Real, Label::Fake] {
        let members: Vec<&MultibandImage> = data
            .records
            .iter()
            .zip(&data.images)
            .filter(|(r, _)| r.label == label)
            .map(|(_, img)| img)
            .collect();
        let inputs = members
            .iter()
            .map(|img| scorer.network_input(img))
            .collect::<Result<Vec<_>>>()?;
        let mean = mean_image(&inputs)?;
        save(&mean, format!("mean_{label}.{}", ext(mean.bands())))?;
        let responses = members
            .iter()
            .map(|img| scorer.first_layer(img))
            .collect::<Result<Vec<_>>>()?;
        let mean_response = mean_image(&responses)?;
        for i in 0..mean_response.bands() {
            save(&mean_response.band(i)?, format!("activation_{label}_{i:03}.pgm"))?;
            maps += 1;
        }
    }
    Ok(InspectSummary {
        filters: bank.n(),
        mean_images: 2,
        activation_maps: maps,
        files,
    })
}

fn ext(bands: usize) -> &'static str {
    if bands == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub group_id: String,
    pub features: Vec<f64>,
}

/// Classifier-input features of every manifest sample, in manifest order.
pub fn extract(model: &ModelContainer, manifest: &BenchmarkManifest) -> Result<Vec<FeatureRecord>> {
    use rayon::prelude::*;
    let scorer = model.scorer()?;
    manifest
        .records
        .par_iter()
        .map(|r| {
            let img = pnm::load(manifest.resolve(r))?;
            Ok(FeatureRecord {
                path: r.path.clone(),
                label: r.label,
                split: r.split,
                group_id: r.group_id.clone(),
                features: scorer.features(&img)?,
            })
        })
        .collect()
}

/// Search trace as JSON Lines, one candidate per line in index order.
/// Wall times are left out unless `with_timing` is set, so traces of
/// identical runs are byte-identical.
pub fn trace_jsonl(outcome: &SearchOutcome, with_timing: bool) -> Result<String> {
    let mut out = String::new();
    for r in &outcome.trace {
        let mut r = r.clone();
        if !with_timing {
            r.wall_time = None;
        }
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn epoch_log_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}
