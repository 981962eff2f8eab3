//! Random search over convolutional architectures with random filters,
//! scored by a linear max-margin classifier under a 1-vs-9 fold protocol.

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convops::{self, conv_dims, norm_dims, pool_dims, FilterBank, FilterSet, LayerSpec};
use crate::datapipe::Dataset;
use crate::error::{Error, Result};
use crate::imagecore::{keep_aspect_dims, resize_keep_aspect, to_grayscale, FeatureVector, MultibandImage};
use crate::label::Label;
use crate::maxmargin::{self, TrainOptions};
use crate::protocol::{make_folds, FoldAssignment, DEFAULT_FOLDS};
use crate::seed;

pub const MAX_INTERMEDIATE: usize = 600_000;
pub const MAX_OUTPUT: usize = 30_000;
pub const DEFAULT_BUDGET: usize = 2000;

/// Stream reserved for fold assignment, disjoint from candidate indices.
const FOLD_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSize {
    MaxAxis(usize),
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    Gray,
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prenorm {
    None,
    Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_filters: Vec<usize>,
    pub filter_sizes: Vec<usize>,
    pub pool_sizes: Vec<usize>,
    pub pool_strides: Vec<usize>,
    pub pool_exponents: Vec<f64>,
    pub norm_sizes: Vec<Option<usize>>,
    pub num_layers: Vec<usize>,
    pub input_sizes: Vec<InputSize>,
    pub colors: Vec<ColorMode>,
    pub prenorms: Vec<Prenorm>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            n_filters: vec![32, 64, 128, 256],
            filter_sizes: vec![3, 5, 7, 9],
            pool_sizes: vec![3, 5, 7, 9],
            pool_strides: vec![1, 2, 4, 8],
            pool_exponents: vec![1.0, 2.0, 10.0],
            norm_sizes: vec![None, Some(3), Some(5), Some(7), Some(9)],
            num_layers: vec![1, 2, 3],
            input_sizes: vec![
                InputSize::MaxAxis(64),
                InputSize::MaxAxis(128),
                InputSize::MaxAxis(256),
                InputSize::Original,
            ],
            colors: vec![ColorMode::Gray, ColorMode::Color],
            prenorms: vec![Prenorm::None, Prenorm::Standardize],
        }
    }
}

impl SearchSpace {
    /// Restricts the color dimension to a single manual choice.
    pub fn with_color(mut self, color: ColorMode) -> Self {
        self.colors = vec![color];
        self
    }

    /// Every per-layer configuration in the grid.
    pub fn layer_configurations(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for &n_filters in &self.n_filters {
            for &filter_size in &self.filter_sizes {
                for &pool_size in &self.pool_sizes {
                    for &pool_stride in &self.pool_strides {
                        for &pool_exponent in &self.pool_exponents {
                            for &norm_size in &self.norm_sizes {
                                out.push(LayerSpec {
                                    n_filters,
                                    filter_size,
                                    pool_size,
                                    pool_stride,
                                    pool_exponent,
                                    norm_size,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn contains_layer(&self, l: &LayerSpec) -> bool {
        self.n_filters.contains(&l.n_filters)
            && self.filter_sizes.contains(&l.filter_size)
            && self.pool_sizes.contains(&l.pool_size)
            && self.pool_strides.contains(&l.pool_stride)
            && self.pool_exponents.contains(&l.pool_exponent)
            && self.norm_sizes.contains(&l.norm_size)
    }

    pub fn contains(&self, spec: &ArchitectureSpec) -> bool {
        self.num_layers.contains(&spec.layers.len())
            && self.input_sizes.contains(&spec.input)
            && self.colors.contains(&spec.color)
            && self.prenorms.contains(&spec.prenorm)
            && spec.layers.iter().all(|l| self.contains_layer(l))
    }

    fn check(&self) -> Result<()> {
        let empty = self.n_filters.is_empty()
            || self.filter_sizes.is_empty()
            || self.pool_sizes.is_empty()
            || self.pool_strides.is_empty()
            || self.pool_exponents.is_empty()
            || self.norm_sizes.is_empty()
            || self.num_layers.is_empty()
            || self.input_sizes.is_empty()
            || self.colors.is_empty()
            || self.prenorms.is_empty();
        if empty {
            return Err(Error::Config("search space has an empty grid".into()));
        }
        if self.num_layers.iter().any(|n| !(1..=3).contains(n)) {
            return Err(Error::Config("layer counts must lie in 1..=3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerSpec>,
    pub input: InputSize,
    pub color: ColorMode,
    pub prenorm: Prenorm,
    /// Seed the filters are generated from.
    pub seed: u64,
}

fn pick<T: Copy>(rng: &mut impl Rng, grid: &[T]) -> T {
    *grid.choose(rng).expect("grids are non-empty")
}

/// Draws every hyperparameter uniformly from its grid. All three layers are
/// always drawn so that the random stream does not depend on the layer count.
pub fn sample_architecture(space: &SearchSpace, rng_seed: u64) -> ArchitectureSpec {
    let mut rng = seed::rng(rng_seed);
    let num_layers = pick(&mut rng, &space.num_layers);
    let input = pick(&mut rng, &space.input_sizes);
    let color = pick(&mut rng, &space.colors);
    let prenorm = pick(&mut rng, &space.prenorms);
    let mut layers: Vec<LayerSpec> = (0..3)
        .map(|_| LayerSpec {
            n_filters: pick(&mut rng, &space.n_filters),
            filter_size: pick(&mut rng, &space.filter_sizes),
            pool_size: pick(&mut rng, &space.pool_sizes),
            pool_stride: pick(&mut rng, &space.pool_strides),
            pool_exponent: pick(&mut rng, &space.pool_exponents),
            norm_size: pick(&mut rng, &space.norm_sizes),
        })
        .collect();
    layers.truncate(num_layers);
    ArchitectureSpec {
        layers,
        input,
        color,
        prenorm,
        seed: rng_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    ShapeCollapse,
    IntermediateTooLarge,
    OutputTooLarge,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::ShapeCollapse => "shape-collapse",
            Rejection::IntermediateTooLarge => "intermediate-too-large",
            Rejection::OutputTooLarge => "output-too-large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub reason: Option<Rejection>,
    /// Output `[width, height, bands]` of each layer reached before any rejection.
    pub layer_dims: Vec<[usize; 3]>,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        self.reason.is_none()
    }

    pub fn output_dims(&self) -> Option<[usize; 3]> {
        self.layer_dims.last().copied()
    }
}

/// Dimensions of the network input after resizing and color handling.
pub fn prepared_dims(spec: &ArchitectureSpec, input_dims: (usize, usize, usize)) -> (usize, usize, usize) {
    let (w, h, b) = input_dims;
    let (w, h) = match spec.input {
        InputSize::MaxAxis(t) => keep_aspect_dims(w, h, t),
        InputSize::Original => (w, h),
    };
    let b = match spec.color {
        ColorMode::Gray => 1,
        ColorMode::Color => b,
    };
    (w, h, b)
}

/// Checks the shape chain of `spec` on inputs of `input_dims` (before
/// preparation). Every stage output must be non-empty and hold at most
/// [`MAX_INTERMEDIATE`] values; the final output at most [`MAX_OUTPUT`].
pub fn validate_architecture(spec: &ArchitectureSpec, input_dims: (usize, usize, usize)) -> Validation {
    let (mut w, mut h, _) = prepared_dims(spec, input_dims);
    let mut layer_dims = Vec::with_capacity(spec.layers.len());
    let reject = |reason, layer_dims| Validation {
        reason: Some(reason),
        layer_dims,
    };
    if w == 0 || h == 0 || spec.layers.is_empty() {
        return reject(Rejection::ShapeCollapse, layer_dims);
    }
    for layer in &spec.layers {
        let n = layer.n_filters;
        let Some((cw, ch)) = conv_dims(w, h, layer.filter_size) else {
            return reject(Rejection::ShapeCollapse, layer_dims);
        };
        if cw * ch * n > MAX_INTERMEDIATE {
            return reject(Rejection::IntermediateTooLarge, layer_dims);
        }
        let Some((pw, ph)) = pool_dims(cw, ch, layer.pool_size, layer.pool_stride) else {
            return reject(Rejection::ShapeCollapse, layer_dims);
        };
        if pw * ph * n > MAX_INTERMEDIATE {
            return reject(Rejection::IntermediateTooLarge, layer_dims);
        }
        (w, h) = (pw, ph);
        if let Some(size) = layer.norm_size {
            let Some((nw, nh)) = norm_dims(w, h, size) else {
                return reject(Rejection::ShapeCollapse, layer_dims);
            };
            (w, h) = (nw, nh);
        }
        layer_dims.push([w, h, n]);
    }
    if w * h * spec.layers.last().map_or(0, |l| l.n_filters) > MAX_OUTPUT {
        return reject(Rejection::OutputTooLarge, layer_dims);
    }
    Validation {
        reason: None,
        layer_dims,
    }
}

/// Draws a filter from U(0,1), centers it and scales it to unit norm.
/// Draws that are constant after centering are redrawn.
pub fn random_unit_filter(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    loop {
        let mut w: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
        let mean = w.iter().sum::<f64>() / len as f64;
        w.iter_mut().for_each(|v| *v -= mean);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            w.iter_mut().for_each(|v| *v /= norm);
            return w;
        }
    }
}

/// One zero-mean, unit-norm bank per layer, derived from `spec.seed`.
pub fn generate_random_filters(spec: &ArchitectureSpec, input_bands: usize) -> Result<FilterSet> {
    let mut in_bands = input_bands;
    let mut banks = Vec::with_capacity(spec.layers.len());
    for (l, layer) in spec.layers.iter().enumerate() {
        layer.check()?;
        let mut rng = seed::rng_for(spec.seed, 1 + l as u64);
        let len = layer.filter_size * layer.filter_size * in_bands;
        let weights: Vec<f64> = (0..layer.n_filters)
            .flat_map(|_| random_unit_filter(&mut rng, len))
            .collect();
        banks.push(FilterBank::new(layer.n_filters, layer.filter_size, in_bands, weights)?);
        in_bands = layer.n_filters;
    }
    Ok(FilterSet { banks })
}

/// Resizes, converts and normalizes an image into the network input.
pub fn prepare_input(img: &MultibandImage, spec: &ArchitectureSpec) -> Result<MultibandImage> {
    let colored = match (spec.color, img.bands()) {
        (ColorMode::Gray, 3) => to_grayscale(img)?,
        _ => img.clone(),
    };
    let sized = match spec.input {
        InputSize::MaxAxis(t) => resize_keep_aspect(&colored, t)?,
        InputSize::Original => colored,
    };
    Ok(match spec.prenorm {
        Prenorm::None => sized,
        Prenorm::Standardize => sized.standardize(),
    })
}

pub fn extract_features(
    spec: &ArchitectureSpec,
    filters: &FilterSet,
    images: &[MultibandImage],
) -> Result<Vec<FeatureVector>> {
    images
        .par_iter()
        .map(|img| convops::forward(&prepare_input(img, spec)?, &spec.layers, filters))
        .collect()
}

/// Input dimensions shared by every image, or an error.
pub fn common_dims(images: &[MultibandImage]) -> Result<(usize, usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset has no images".into()))?
        .dims();
    if let Some(other) = images.iter().find(|im| im.dims() != first) {
        return Err(Error::Shape(format!(
            "images differ in size: {:?} and {:?}",
            first,
            other.dims()
        )));
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub fold_accuracies: Vec<f64>,
    /// Rounds whose training fold held a single class.
    pub degenerate_folds: Vec<usize>,
}

impl CvOutcome {
    pub fn objective(&self) -> f64 {
        self.fold_accuracies.iter().sum::<f64>() / self.fold_accuracies.len() as f64
    }
}

fn subset<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Trains on each fold alone and measures accuracy on the remaining folds.
/// A training fold with one class falls back to predicting that class.
pub fn run_cv(
    features: &[FeatureVector],
    labels: &[Label],
    folds: &FoldAssignment,
    svm: &TrainOptions,
) -> Result<CvOutcome> {
    let mut fold_accuracies = Vec::with_capacity(folds.k);
    let mut degenerate_folds = Vec::new();
    for fold in 0..folds.k {
        let train_idx = folds.members(fold);
        let val_idx: Vec<usize> = (0..labels.len()).filter(|&i| folds.fold_of[i] != fold).collect();
        if val_idx.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "fold {fold} leaves nothing to validate"
            )));
        }
        let train_labels = subset(labels, &train_idx);
        let has = |l: Label| train_labels.contains(&l);
        let correct = if has(Label::Real) && has(Label::Fake) {
            let model = maxmargin::train_with(&subset(features, &train_idx), &train_labels, svm)?;
            let mut correct = 0usize;
            for &i in &val_idx {
                let predicted_fake = model.score(&features[i])? > 0.0;
                correct += usize::from(predicted_fake == (labels[i] == Label::Fake));
            }
            correct
        } else {
            degenerate_folds.push(fold);
            let constant = train_labels.first().copied();
            log::warn!("fold {fold} trains on a single class; using a constant classifier");
            val_idx.iter().filter(|&&i| Some(labels[i]) == constant).count()
        };
        fold_accuracies.push(correct as f64 / val_idx.len() as f64);
    }
    Ok(CvOutcome {
        fold_accuracies,
        degenerate_folds,
    })
}

/// Held-out score of every sample from a classifier trained on the other
/// folds.
pub fn cross_val_scores(
    features: &[FeatureVector],
    labels: &[Label],
    folds: &FoldAssignment,
    svm: &TrainOptions,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; labels.len()];
    for fold in 0..folds.k {
        let test_idx = folds.members(fold);
        if test_idx.is_empty() {
            continue;
        }
        let train_idx: Vec<usize> = (0..labels.len()).filter(|&i| folds.fold_of[i] != fold).collect();
        let model = maxmargin::train_with(&subset(features, &train_idx), &subset(labels, &train_idx), svm)?;
        for &i in &test_idx {
            scores[i] = model.score(&features[i])?;
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub index: usize,
    pub spec: ArchitectureSpec,
    pub objective: f64,
    pub fold_accuracies: Vec<f64>,
    pub degenerate_folds: Vec<usize>,
    pub feature_dims: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

pub fn evaluate_candidate(
    spec: &ArchitectureSpec,
    dataset: &Dataset,
    folds: &FoldAssignment,
    svm: &TrainOptions,
) -> Result<CandidateResult> {
    let start = Instant::now();
    let dims = common_dims(&dataset.images)?;
    let validation = validate_architecture(spec, dims);
    if let Some(reason) = validation.reason {
        return Err(Error::InvalidArgument(format!(
            "architecture rejected: {}",
            reason.as_str()
        )));
    }
    let filters = generate_random_filters(spec, prepared_dims(spec, dims).2)?;
    let features = extract_features(spec, &filters, &dataset.images)?;
    let cv = run_cv(&features, &dataset.labels(), folds, svm)?;
    Ok(CandidateResult {
        index: 0,
        spec: spec.clone(),
        objective: cv.objective(),
        fold_accuracies: cv.fold_accuracies,
        degenerate_folds: cv.degenerate_folds,
        feature_dims: validation.layer_dims,
        wall_time: Some(start.elapsed().as_secs_f64()),
    })
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    pub budget: usize,
    pub seed: u64,
    pub folds: usize,
    pub svm: TrainOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            seed: 0,
            folds: DEFAULT_FOLDS,
            svm: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub index: usize,
    pub reason: Rejection,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Valid candidates in index order.
    pub trace: Vec<CandidateResult>,
    pub rejected: Vec<RejectedCandidate>,
    /// Position of the best candidate in `trace`.
    pub best: usize,
    pub folds: FoldAssignment,
}

impl SearchOutcome {
    pub fn best(&self) -> &CandidateResult {
        &self.trace[self.best]
    }
}

pub fn fold_seed(search_seed: u64) -> u64 {
    seed::derive(search_seed, FOLD_STREAM)
}

/// Samples candidates until `budget` valid ones are found, evaluates them
/// in parallel and returns the first one with the highest objective.
/// Candidate `i` is sampled from `derive(seed, i)`.
pub fn random_search(space: &SearchSpace, dataset: &Dataset, opts: &SearchOptions) -> Result<SearchOutcome> {
    if opts.budget == 0 {
        return Err(Error::InvalidArgument("search budget must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("search dataset is empty".into()));
    }
    space.check()?;
    let dims = common_dims(&dataset.images)?;
    let folds = make_folds(&dataset.records, opts.folds, fold_seed(opts.seed))?;

    let max_attempts = opts.budget.saturating_mul(1000).max(100_000);
    let mut valid = Vec::with_capacity(opts.budget);
    let mut rejected = Vec::new();
    let mut index = 0usize;
    while valid.len() < opts.budget {
        if index >= max_attempts {
            return Err(Error::InvalidArgument(format!(
                "only {} valid architectures in {index} samples for {dims:?} inputs",
                valid.len()
            )));
        }
        let spec = sample_architecture(space, seed::derive(opts.seed, index as u64));
        match validate_architecture(&spec, dims).reason {
            None => valid.push((index, spec)),
            Some(reason) => rejected.push(RejectedCandidate { index, reason }),
        }
        index += 1;
    }
    log::info!(
        "evaluating {} candidates ({} rejected while sampling)",
        valid.len(),
        rejected.len()
    );

    let trace: Vec<CandidateResult> = valid
        .par_iter()
        .map(|(index, spec)| {
            let mut result = evaluate_candidate(spec, dataset, &folds, &opts.svm)?;
            result.index = *index;
            log::info!("candidate {index}: objective {:.4}", result.objective);
            Ok(result)
        })
        .collect::<Result<_>>()?;

    let mut best = 0;
    for (i, r) in trace.iter().enumerate() {
        if r.objective > trace[best].objective {
            best = i;
        }
    }
    Ok(SearchOutcome {
        trace,
        rejected,
        best,
        folds,
    })
}
