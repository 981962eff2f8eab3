//! Back-propagation training of a fixed two-layer network with a softmax
//! head over {real, fake}.

mod layers;
mod train;

use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archsearch::Prenorm;
use crate::convops::{self, conv_dims, correlate, correlate_backward, norm_dims, pool_dims, FilterBank, LayerSpec};
use crate::error::{Error, Result};
use crate::imagecore::MultibandImage;
use crate::label::Label;
use crate::seed;

pub use train::{
    augment, augment_offsets, center_crop, predict_prob, train, BatchSplit, BatchSubset, EpochLog, FitOptions, Phase,
    TrainingSchedule, AUGMENTED_SAMPLES, DEFAULT_MINIBATCH, NUM_BATCHES,
};

pub const INIT_STD: f64 = 0.01;
pub const NUM_CLASSES: usize = 2;

/// Topology of a trainable network. Inputs are `input_size` squares that
/// are cropped to `crop_size` before entering the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_size: usize,
    pub crop_size: usize,
    pub in_bands: usize,
    /// Applied to whole images before cropping.
    pub prenorm: Prenorm,
    pub layers: Vec<LayerSpec>,
}

impl NetConfig {
    /// 16 then 32 filters of 5×5, L2 pooling 3/2, normalization after layer 2.
    pub fn spoofnet(in_bands: usize) -> Self {
        Self::spoofnet_sized(128, 112, in_bands)
    }

    /// The same topology on 64×64 inputs with 56×56 crops.
    pub fn reduced_spoofnet(in_bands: usize) -> Self {
        Self::spoofnet_sized(64, 56, in_bands)
    }

    fn spoofnet_sized(input_size: usize, crop_size: usize, in_bands: usize) -> Self {
        let layer = |n_filters, norm_size| LayerSpec {
            n_filters,
            filter_size: 5,
            pool_size: 3,
            pool_stride: 2,
            pool_exponent: 2.0,
            norm_size,
        };
        Self {
            input_size,
            crop_size,
            in_bands,
            prenorm: Prenorm::Standardize,
            layers: vec![layer(16, None), layer(32, Some(5))],
        }
    }

    /// Output `[width, height, bands]` of every layer on a crop.
    pub fn layer_dims(&self) -> Result<Vec<[usize; 3]>> {
        if self.crop_size == 0 || self.crop_size > self.input_size || self.in_bands == 0 {
            return Err(Error::Config(format!(
                "crop {} must be positive and fit input {} (bands {})",
                self.crop_size, self.input_size, self.in_bands
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let (mut w, mut h) = (self.crop_size, self.crop_size);
        let mut dims = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            l.check()?;
            let (iw, ih) = (w, h);
            let collapse = || Error::Shape(format!("layer {}: {iw}x{ih} input collapses", i + 1));
            let (cw, ch) = conv_dims(w, h, l.filter_size).ok_or_else(collapse)?;
            (w, h) = pool_dims(cw, ch, l.pool_size, l.pool_stride).ok_or_else(collapse)?;
            if let Some(size) = l.norm_size {
                (w, h) = norm_dims(w, h, size).ok_or_else(collapse)?;
            }
            dims.push([w, h, l.n_filters]);
        }
        Ok(dims)
    }

    pub fn feature_len(&self) -> Result<usize> {
        let [w, h, n] = *self.layer_dims()?.last().expect("non-empty");
        Ok(w * h * n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableNet {
    pub config: NetConfig,
    pub banks: Vec<FilterBank>,
    pub conv_bias: Vec<Vec<f64>>,
    /// Class-major `NUM_CLASSES x feature_len` matrix; class 0 is real.
    pub fc_weights: Vec<f64>,
    pub fc_bias: [f64; NUM_CLASSES],
}

/// Builds a net with Gaussian weights (std [`INIT_STD`]) and zero biases.
pub fn build_spoofnet(config: &NetConfig, rng_seed: u64) -> Result<TrainableNet> {
    build_with_std(config, rng_seed, INIT_STD)
}

pub fn build_with_std(config: &NetConfig, rng_seed: u64, std: f64) -> Result<TrainableNet> {
    let d = config.feature_len()?;
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = seed::rng(rng_seed);
    let mut in_bands = config.in_bands;
    let mut banks = Vec::with_capacity(config.layers.len());
    for l in &config.layers {
        let len = l.n_filters * l.filter_size * l.filter_size * in_bands;
        let weights = (0..len).map(|_| rng.sample(normal)).collect();
        banks.push(FilterBank::new(l.n_filters, l.filter_size, in_bands, weights)?);
        in_bands = l.n_filters;
    }
    let fc_weights = (0..NUM_CLASSES * d).map(|_| rng.sample(normal)).collect();
    Ok(TrainableNet {
        conv_bias: config.layers.iter().map(|l| vec![0.0; l.n_filters]).collect(),
        config: config.clone(),
        banks,
        fc_weights,
        fc_bias: [0.0; NUM_CLASSES],
    })
}

/// Gradients laid out like the parameters of a [`TrainableNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Filter-major, like [`FilterBank::weights`].
    pub filters: Vec<Vec<f64>>,
    pub conv_bias: Vec<Vec<f64>>,
    pub fc_weights: Vec<f64>,
    pub fc_bias: [f64; NUM_CLASSES],
}

impl Gradients {
    pub fn zeros_like(net: &TrainableNet) -> Self {
        Self {
            filters: net.banks.iter().map(|b| vec![0.0; b.weights().len()]).collect(),
            conv_bias: net.conv_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            fc_weights: vec![0.0; net.fc_weights.len()],
            fc_bias: [0.0; NUM_CLASSES],
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        let pairs = self
            .filters
            .iter_mut()
            .chain(self.conv_bias.iter_mut())
            .zip(other.filters.iter().chain(other.conv_bias.iter()));
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.fc_weights
            .iter_mut()
            .zip(&other.fc_weights)
            .for_each(|(x, y)| *x += y);
        self.fc_bias.iter_mut().zip(&other.fc_bias).for_each(|(x, y)| *x += y);
    }

    /// Concatenation in the order of [`TrainableNet::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (f, b) in self.filters.iter().zip(&self.conv_bias) {
            out.extend_from_slice(f);
            out.extend_from_slice(b);
        }
        out.extend_from_slice(&self.fc_weights);
        out.extend_from_slice(&self.fc_bias);
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TrainableNet {
    /// All weights and biases: per layer filters then biases, then the head.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (bank, bias) in self.banks.iter().zip(&self.conv_bias) {
            out.extend_from_slice(bank.weights());
            out.extend_from_slice(bias);
        }
        out.extend_from_slice(&self.fc_weights);
        out.extend_from_slice(&self.fc_bias);
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameters().len() {
            return Err(Error::Shape(format!(
                "{} parameter values for a net with {}",
                values.len(),
                self.parameters().len()
            )));
        }
        let mut rest = values;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        for (bank, bias) in self.banks.iter_mut().zip(&mut self.conv_bias) {
            let n = bank.weights().len();
            bank.weights_mut().copy_from_slice(take(n));
            let n = bias.len();
            bias.copy_from_slice(take(n));
        }
        let n = self.fc_weights.len();
        self.fc_weights.copy_from_slice(take(n));
        self.fc_bias.copy_from_slice(take(NUM_CLASSES));
        Ok(())
    }

    /// `params -= rate * grad`.
    pub(crate) fn step(&mut self, grad: &Gradients, rate: f64) {
        for (bank, g) in self.banks.iter_mut().zip(&grad.filters) {
            bank.weights_mut().iter_mut().zip(g).for_each(|(w, g)| *w -= rate * g);
        }
        for (bias, g) in self.conv_bias.iter_mut().zip(&grad.conv_bias) {
            bias.iter_mut().zip(g).for_each(|(w, g)| *w -= rate * g);
        }
        self.fc_weights
            .iter_mut()
            .zip(&grad.fc_weights)
            .for_each(|(w, g)| *w -= rate * g);
        self.fc_bias
            .iter_mut()
            .zip(&grad.fc_bias)
            .for_each(|(w, g)| *w -= rate * g);
    }

    fn check_sample(&self, x: &MultibandImage) -> Result<()> {
        let c = self.config.crop_size;
        if x.dims() != (c, c, self.config.in_bands) {
            return Err(Error::Shape(format!(
                "network expects {c}x{c}x{} samples, got {:?}",
                self.config.in_bands,
                x.dims()
            )));
        }
        Ok(())
    }
}

/// Weights of every bank in patch-major layout, computed once per batch.
struct Prepared {
    weights_pm: Vec<Vec<f64>>,
}

impl Prepared {
    fn new(net: &TrainableNet) -> Self {
        Self {
            weights_pm: net.banks.iter().map(FilterBank::patch_major).collect(),
        }
    }
}

struct LayerTrace {
    input: MultibandImage,
    activated: MultibandImage,
    pooled: MultibandImage,
}

struct SampleTrace {
    layers: Vec<LayerTrace>,
    features: Vec<f64>,
    probs: [f64; NUM_CLASSES],
}

fn softmax(logits: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = logits[0].max(logits[1]);
    let e = [(logits[0] - max).exp(), (logits[1] - max).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn log_softmax(logits: [f64; NUM_CLASSES], class: usize) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    logits[class] - lse
}

fn forward_sample(net: &TrainableNet, prep: &Prepared, x: &MultibandImage) -> (SampleTrace, [f64; NUM_CLASSES]) {
    let mut current = x.clone();
    let mut layers = Vec::with_capacity(net.banks.len());
    for (l, spec) in net.config.layers.iter().enumerate() {
        let bank = &net.banks[l];
        let (w, h, b) = current.dims();
        let (cw, ch) = conv_dims(w, h, bank.size()).expect("checked at build");
        let mut z = correlate(current.data(), w, h, b, &prep.weights_pm[l], bank.size(), bank.n());
        for (v, bias) in z.iter_mut().zip(net.conv_bias[l].iter().cycle()) {
            *v = (*v + bias).max(0.0);
        }
        let activated = MultibandImage::from_parts(cw, ch, bank.n(), z);
        let pooled =
            convops::pool(&activated, spec.pool_size, spec.pool_stride, spec.pool_exponent).expect("checked at build");
        let out = match spec.norm_size {
            Some(size) => convops::divnorm(&pooled, size).expect("checked at build"),
            None => pooled.clone(),
        };
        layers.push(LayerTrace {
            input: std::mem::replace(&mut current, out),
            activated,
            pooled,
        });
    }
    let features = current.into_data();
    let d = features.len();
    let mut logits = net.fc_bias;
    for (c, logit) in logits.iter_mut().enumerate() {
        *logit += net.fc_weights[c * d..(c + 1) * d]
            .iter()
            .zip(&features)
            .map(|(w, f)| w * f)
            .sum::<f64>();
    }
    let probs = softmax(logits);
    (
        SampleTrace {
            layers,
            features,
            probs,
        },
        logits,
    )
}

/// Loss and gradients of one sample, with the loss scaled by `weight`.
fn sample_gradients(
    net: &TrainableNet,
    prep: &Prepared,
    x: &MultibandImage,
    label: Label,
    weight: f64,
) -> (f64, Gradients) {
    let (trace, logits) = forward_sample(net, prep, x);
    let class = label.class_index();
    let loss = -log_softmax(logits, class);
    let mut grads = Gradients::zeros_like(net);

    let d = trace.features.len();
    let mut d_logits = trace.probs;
    d_logits[class] -= 1.0;
    d_logits.iter_mut().for_each(|v| *v *= weight);
    let mut d_features = vec![0.0; d];
    for c in 0..NUM_CLASSES {
        grads.fc_bias[c] = d_logits[c];
        let row = &net.fc_weights[c * d..(c + 1) * d];
        for j in 0..d {
            grads.fc_weights[c * d + j] = d_logits[c] * trace.features[j];
            d_features[j] += d_logits[c] * row[j];
        }
    }

    let mut d_out = d_features;
    for (l, (spec, lt)) in net.config.layers.iter().zip(&trace.layers).enumerate().rev() {
        let bank = &net.banks[l];
        let d_pooled = match spec.norm_size {
            Some(size) => layers::divnorm_backward(&lt.pooled, size, &d_out),
            None => d_out,
        };
        let mut d_act = layers::pool_backward(
            &lt.activated,
            &lt.pooled,
            &d_pooled,
            spec.pool_size,
            spec.pool_stride,
            spec.pool_exponent,
        );
        for (g, &a) in d_act.iter_mut().zip(lt.activated.data()) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        let n = bank.n();
        for (i, g) in d_act.iter().enumerate() {
            grads.conv_bias[l][i % n] += g;
        }
        let (w, h, b) = lt.input.dims();
        let k = bank.filter_len();
        let mut d_pm = vec![0.0; k * n];
        let mut d_input = if l > 0 { vec![0.0; lt.input.len()] } else { Vec::new() };
        correlate_backward(
            lt.input.data(),
            w,
            h,
            b,
            &prep.weights_pm[l],
            bank.size(),
            n,
            &d_act,
            &mut d_pm,
            (l > 0).then_some(d_input.as_mut_slice()),
        );
        for i in 0..n {
            for kk in 0..k {
                grads.filters[l][i * k + kk] = d_pm[kk * n + i];
            }
        }
        d_out = d_input;
    }
    (loss, grads)
}

fn check_batch(net: &TrainableNet, samples: &[MultibandImage], labels: &[Label]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if samples.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    samples.iter().try_for_each(|x| net.check_sample(x))
}

/// Class probabilities `[p(real), p(fake)]` for cropped samples.
pub fn predict_batch(net: &TrainableNet, samples: &[MultibandImage]) -> Result<Vec<[f64; NUM_CLASSES]>> {
    samples.iter().try_for_each(|x| net.check_sample(x))?;
    let prep = Prepared::new(net);
    Ok(samples
        .par_iter()
        .map(|x| forward_sample(net, &prep, x).0.probs)
        .collect())
}

/// Flattened output of the last convolutional layer for cropped samples.
pub fn embed(net: &TrainableNet, samples: &[MultibandImage]) -> Result<Vec<Vec<f64>>> {
    samples.iter().try_for_each(|x| net.check_sample(x))?;
    let prep = Prepared::new(net);
    Ok(samples
        .par_iter()
        .map(|x| forward_sample(net, &prep, x).0.features)
        .collect())
}

/// Mean cross-entropy over the batch and per-sample probabilities.
pub fn forward_loss(
    net: &TrainableNet,
    samples: &[MultibandImage],
    labels: &[Label],
) -> Result<(f64, Vec<[f64; NUM_CLASSES]>)> {
    check_batch(net, samples, labels)?;
    let prep = Prepared::new(net);
    let rows: Vec<(f64, [f64; 2])> = samples
        .par_iter()
        .zip(labels)
        .map(|(x, l)| {
            let (trace, logits) = forward_sample(net, &prep, x);
            (-log_softmax(logits, l.class_index()), trace.probs)
        })
        .collect();
    let loss = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
    Ok((loss, rows.into_iter().map(|r| r.1).collect()))
}

/// Mean cross-entropy and its gradient with respect to every parameter.
/// Per-sample gradients are summed in sample order.
pub fn backward(net: &TrainableNet, samples: &[MultibandImage], labels: &[Label]) -> Result<(f64, Gradients)> {
    check_batch(net, samples, labels)?;
    let refs: Vec<&MultibandImage> = samples.iter().collect();
    Ok(batch_gradients(net, &refs, labels))
}

pub(crate) fn batch_gradients(net: &TrainableNet, samples: &[&MultibandImage], labels: &[Label]) -> (f64, Gradients) {
    let prep = Prepared::new(net);
    let weight = 1.0 / samples.len() as f64;
    let per_sample: Vec<(f64, Gradients)> = samples
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| sample_gradients(net, &prep, x, l, weight))
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        total.add_assign(g);
    }
    (loss * weight, total)
}
