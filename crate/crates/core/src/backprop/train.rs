use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, predict_batch, NetConfig, TrainableNet};
use crate::error::{Error, Result};
use crate::imagecore::MultibandImage;
use crate::label::Label;
use crate::seed;

pub const AUGMENTED_SAMPLES: usize = 10;
pub const NUM_BATCHES: usize = 4;
pub const DEFAULT_MINIBATCH: usize = 32;
/// Position of the unmirrored center crop in [`augment`]'s output.
const CENTER: usize = 4;

/// Top-left corners of the four corner crops and the center crop.
pub fn augment_offsets(input_size: usize, crop_size: usize) -> [(usize, usize); 5] {
    let m = input_size - crop_size;
    [(0, 0), (m, 0), (0, m), (m, m), (m / 2, m / 2)]
}

/// Five crops (corners, then center) followed by their horizontal mirrors.
pub fn augment(img: &MultibandImage, config: &NetConfig) -> Result<Vec<MultibandImage>> {
    let s = config.input_size;
    if img.width() != s || img.height() != s {
        return Err(Error::Shape(format!(
            "augmentation expects {s}x{s} inputs, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let c = config.crop_size;
    let crops = augment_offsets(s, c)
        .iter()
        .map(|&(x, y)| img.crop(x, y, c, c))
        .collect::<Result<Vec<_>>>()?;
    let mirrors: Vec<_> = crops.iter().map(MultibandImage::mirror_horizontal).collect();
    Ok(crops.into_iter().chain(mirrors).collect())
}

pub fn center_crop(img: &MultibandImage, config: &NetConfig) -> Result<MultibandImage> {
    let s = config.input_size;
    if img.dims() != (s, s, config.in_bands) {
        return Err(Error::Shape(format!(
            "network expects {s}x{s}x{} inputs, got {:?}",
            config.in_bands,
            img.dims()
        )));
    }
    let (x, y) = augment_offsets(s, config.crop_size)[CENTER];
    img.crop(x, y, config.crop_size, config.crop_size)
}

/// Probability of the fake class from the central crop alone.
pub fn predict_prob(net: &TrainableNet, img: &MultibandImage) -> Result<f64> {
    let crop = center_crop(img, &net.config)?;
    Ok(predict_batch(net, &[crop])?[0][Label::Fake.class_index()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchSubset {
    /// Batches 1–3; batch 4 is held out for validation.
    FirstThree,
    All,
}

impl BatchSubset {
    fn batches(self) -> std::ops::Range<usize> {
        match self {
            BatchSubset::FirstThree => 0..NUM_BATCHES - 1,
            BatchSubset::All => 0..NUM_BATCHES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub learning_rate: f64,
    pub subset: BatchSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub name: String,
    pub phases: Vec<Phase>,
}

impl TrainingSchedule {
    fn four_phase(name: &str, epochs: [usize; 4], rates: [f64; 4]) -> Self {
        let subsets = [
            BatchSubset::FirstThree,
            BatchSubset::All,
            BatchSubset::All,
            BatchSubset::All,
        ];
        Self {
            name: name.into(),
            phases: (0..4)
                .map(|i| Phase {
                    epochs: epochs[i],
                    learning_rate: rates[i],
                    subset: subsets[i],
                })
                .collect(),
        }
    }

    pub fn spoofnet() -> Self {
        Self::four_phase("spoofnet", [200, 80, 20, 20], [1e-4, 1e-4, 1e-5, 1e-6])
    }

    pub fn reference() -> Self {
        Self::four_phase("reference", [100, 40, 10, 10], [1e-3, 1e-3, 1e-4, 1e-5])
    }

    /// Shortened schedule for the reduced network on small benchmarks:
    /// fewer epochs at a proportionally larger rate, same phase shape.
    pub fn desk() -> Self {
        Self::four_phase("desk", [10, 4, 1, 1], [5e-2, 5e-2, 5e-3, 5e-4])
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "spoofnet" => Ok(Self::spoofnet()),
            "reference" => Ok(Self::reference()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown schedule {other:?} (expected spoofnet, reference or desk)"
            ))),
        }
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.phases.iter().map(|p| p.epochs).collect()
    }

    pub fn learning_rates(&self) -> Vec<f64> {
        self.phases.iter().map(|p| p.learning_rate).collect()
    }

    pub fn check(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for p in &self.phases {
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate {} must be positive",
                    p.learning_rate
                )));
            }
        }
        if self.phases.windows(2).any(|w| w[1].learning_rate > w[0].learning_rate) {
            return Err(Error::Config("learning rates must not increase across phases".into()));
        }
        Ok(())
    }
}

/// Assignment of every image to one of four class-balanced batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSplit {
    pub batch_of: Vec<usize>,
}

impl BatchSplit {
    /// Shuffles each class and deals it round-robin over the batches.
    pub fn stratified(labels: &[Label], rng_seed: u64) -> Result<Self> {
        let mut rng = seed::rng(rng_seed);
        let mut batch_of = vec![0; labels.len()];
        for class in [Label::Real, Label::Fake] {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            for (j, &i) in idx.iter().enumerate() {
                batch_of[i] = j % NUM_BATCHES;
            }
        }
        let split = Self { batch_of };
        split.check(labels)?;
        Ok(split)
    }

    pub fn members(&self, batch: usize) -> Vec<usize> {
        (0..self.batch_of.len())
            .filter(|&i| self.batch_of[i] == batch)
            .collect()
    }

    /// Every batch must hold both classes.
    pub fn check(&self, labels: &[Label]) -> Result<()> {
        if self.batch_of.len() != labels.len() {
            return Err(Error::Shape(format!(
                "batch split covers {} images, {} given",
                self.batch_of.len(),
                labels.len()
            )));
        }
        for b in 0..NUM_BATCHES {
            let members = self.members(b);
            let has = |l: Label| members.iter().any(|&i| labels[i] == l);
            if members.is_empty() || !has(Label::Real) || !has(Label::Fake) {
                return Err(Error::InvalidArgument(format!(
                    "batch {} needs samples of both classes",
                    b + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            minibatch: DEFAULT_MINIBATCH,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Batch-4 accuracy, reported while batch 4 is held out.
    pub val_acc: Option<f64>,
}

/// Mini-batch SGD over the schedule's phases. Each epoch visits every
/// augmented crop of the phase's batches once, in an order drawn from
/// `opts.seed` and the epoch number.
pub fn train(
    net: &mut TrainableNet,
    images: &[MultibandImage],
    labels: &[Label],
    split: &BatchSplit,
    schedule: &TrainingSchedule,
    opts: &FitOptions,
) -> Result<Vec<EpochLog>> {
    schedule.check()?;
    split.check(labels)?;
    if opts.minibatch == 0 {
        return Err(Error::InvalidArgument("mini-batch size must be positive".into()));
    }
    let crops: Vec<Vec<MultibandImage>> = images
        .par_iter()
        .map(|img| augment(img, &net.config))
        .collect::<Result<_>>()?;

    let mut log = Vec::new();
    let mut epoch = 0usize;
    for (p, phase) in schedule.phases.iter().enumerate() {
        let mut members: Vec<usize> = phase.subset.batches().flat_map(|b| split.members(b)).collect();
        members.sort_unstable();
        let samples: Vec<(usize, usize)> = members
            .iter()
            .flat_map(|&i| (0..AUGMENTED_SAMPLES).map(move |a| (i, a)))
            .collect();
        let held_out = match phase.subset {
            BatchSubset::FirstThree => split.members(NUM_BATCHES - 1),
            BatchSubset::All => Vec::new(),
        };
        for _ in 0..phase.epochs {
            epoch += 1;
            let mut order = samples.clone();
            order.shuffle(&mut seed::rng_for(opts.seed, epoch as u64));
            let mut loss_sum = 0.0;
            for chunk in order.chunks(opts.minibatch) {
                let xs: Vec<&MultibandImage> = chunk.iter().map(|&(i, a)| &crops[i][a]).collect();
                let ls: Vec<Label> = chunk.iter().map(|&(i, _)| labels[i]).collect();
                let (loss, grads) = batch_gradients(net, &xs, &ls);
                loss_sum += loss * chunk.len() as f64;
                net.step(&grads, phase.learning_rate);
            }
            let val_acc = if held_out.is_empty() {
                None
            } else {
                let xs: Vec<MultibandImage> = held_out.iter().map(|&i| crops[i][CENTER].clone()).collect();
                let probs = predict_batch(net, &xs)?;
                let correct = held_out
                    .iter()
                    .zip(&probs)
                    .filter(|(&i, p)| (p[1] > 0.5) == (labels[i] == Label::Fake))
                    .count();
                Some(correct as f64 / held_out.len() as f64)
            };
            let entry = EpochLog {
                epoch,
                phase: p + 1,
                lr: phase.learning_rate,
                train_loss: loss_sum / order.len().max(1) as f64,
                val_acc,
            };
            log::info!(
                "epoch {} (phase {}): loss {:.5}{}",
                entry.epoch,
                entry.phase,
                entry.train_loss,
                entry
                    .val_acc
                    .map_or(String::new(), |a| format!(", held-out acc {a:.3}"))
            );
            log.push(entry);
        }
    }
    Ok(log)
}
