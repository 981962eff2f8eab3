use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{BenchmarkManifest, Record, Split};
use crate::error::{Error, Result};
use crate::imagecore::MultibandImage;
use crate::label::Label;
use crate::{pnm, seed};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

// Texture scales, in pixels and intensity units.
const BASE_SIGMA: f64 = 2.0;
const BASE_AMPLITUDE: f64 = 0.12;
const MICRO_SIGMA: f64 = 0.7;
const MICRO_AMPLITUDE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub individuals: usize,
    /// Samples per individual and class.
    pub per_individual: usize,
    pub size: usize,
    pub blur_sigma: f64,
    pub noise_std: f64,
    pub contrast_jitter: f64,
    /// Fraction of individuals held out for testing.
    pub test_fraction: f64,
    pub dev_individuals: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            individuals: 20,
            per_individual: 10,
            size: 64,
            blur_sigma: 1.5,
            noise_std: 0.02,
            contrast_jitter: 0.1,
            test_fraction: 0.5,
            dev_individuals: 0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.individuals == 0 || self.per_individual == 0 {
            return bad("individuals and samples per individual must be positive".into());
        }
        if self.size < 8 {
            return bad(format!("image size {} is below 8", self.size));
        }
        for (name, v) in [
            ("blur sigma", self.blur_sigma),
            ("noise std", self.noise_std),
            ("contrast jitter", self.contrast_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.contrast_jitter >= 1.0 {
            return bad("contrast jitter must be below 1".into());
        }
        let (test, dev) = self.split_counts();
        if test == 0 || test + dev >= self.individuals {
            return bad(format!(
                "{} individuals cannot be split into {test} test, {dev} dev and a non-empty train set",
                self.individuals
            ));
        }
        Ok(())
    }

    fn split_counts(&self) -> (usize, usize) {
        let test = (self.individuals as f64 * self.test_fraction).round() as usize;
        (test, self.dev_individuals)
    }
}

/// Separable Gaussian blur with edge replication. `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &MultibandImage, sigma: f64) -> MultibandImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h, m) = img.dims();
    let pass = |src: &MultibandImage, horizontal: bool| {
        MultibandImage::from_fn(w, h, m, |x, y, b| {
            kernel
                .iter()
                .zip(-radius..=radius)
                .map(|(k, d)| {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    k * src.get(sx, sy, b)
                })
                .sum()
        })
        .expect("same dimensions as a valid image")
    };
    pass(&pass(img, true), false)
}

fn noise_field(rng: &mut impl Rng, size: usize) -> MultibandImage {
    let data = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    MultibandImage::from_parts(size, size, 1, data)
}

/// Smoothed white noise rescaled to zero mean and the given standard deviation.
fn band_limited(rng: &mut impl Rng, size: usize, sigma: f64, amplitude: f64) -> MultibandImage {
    gaussian_blur(&noise_field(rng, size), sigma)
        .standardize()
        .map(|v| v * amplitude)
}

fn add(a: &MultibandImage, b: &MultibandImage) -> MultibandImage {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    MultibandImage::from_parts(a.width(), a.height(), a.bands(), data)
}

struct IndividualImages {
    real: Vec<MultibandImage>,
    fake: Vec<MultibandImage>,
}

fn synthesize_individual(p: &SynthParams, index: usize) -> IndividualImages {
    let mut rng = seed::rng_for(p.seed, index as u64);
    let base = band_limited(&mut rng, p.size, BASE_SIGMA, BASE_AMPLITUDE).map(|v| v + 0.5);
    let sensor_noise = |rng: &mut rand_chacha::ChaCha8Rng| noise_field(rng, p.size).map(|v| v * p.noise_std);
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, img: MultibandImage| {
        let c = 1.0 + p.contrast_jitter * (2.0 * rng.random::<f64>() - 1.0);
        img.map(|v| (0.5 + c * (v - 0.5)).clamp(0.0, 1.0))
    };
    let live = |rng: &mut rand_chacha::ChaCha8Rng| {
        let micro = band_limited(rng, p.size, MICRO_SIGMA, MICRO_AMPLITUDE);
        add(&add(&base, &micro), &sensor_noise(rng))
    };

    let mut real = Vec::with_capacity(p.per_individual);
    let mut fake = Vec::with_capacity(p.per_individual);
    for _ in 0..p.per_individual {
        let sample = live(&mut rng);
        real.push(jitter(&mut rng, sample));
    }
    for _ in 0..p.per_individual {
        let sample = live(&mut rng);
        let recaptured = add(
            &gaussian_blur(&sample, p.blur_sigma),
            &noise_field(&mut rng, p.size).map(|v| v * p.noise_std),
        );
        fake.push(jitter(&mut rng, recaptured));
    }
    IndividualImages { real, fake }
}

pub fn individual_name(index: usize) -> String {
    format!("ind{index:03}")
}

/// Writes `images/*.pgm` and `manifest.jsonl` under `out`. Identical
/// parameters always give byte-identical output.
pub fn generate_synthetic_benchmark(params: &SynthParams, out: impl AsRef<Path>) -> Result<BenchmarkManifest> {
    params.check()?;
    let out = out.as_ref();
    let image_dir = out.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::file(&image_dir, e))?;

    let mut order: Vec<usize> = (0..params.individuals).collect();
    order.shuffle(&mut seed::rng_for(params.seed, u64::MAX));
    let (n_test, n_dev) = params.split_counts();
    let mut split_of = vec![Split::Train; params.individuals];
    for (rank, &ind) in order.iter().enumerate() {
        if rank < n_test {
            split_of[ind] = Split::Test;
        } else if rank < n_test + n_dev {
            split_of[ind] = Split::Dev;
        }
    }

    let per_individual: Vec<Vec<Record>> = (0..params.individuals)
        .into_par_iter()
        .map(|ind| -> Result<Vec<Record>> {
            let images = synthesize_individual(params, ind);
            let name = individual_name(ind);
            let mut records = Vec::with_capacity(2 * params.per_individual);
            for (label, imgs) in [(Label::Real, &images.real), (Label::Fake, &images.fake)] {
                for (j, img) in imgs.iter().enumerate() {
                    let stem = format!("{name}_{label}_{j:03}");
                    let rel = format!("{IMAGE_DIR}/{stem}.pgm");
                    pnm::save(img, out.join(&rel))?;
                    records.push(Record {
                        path: rel,
                        label,
                        individual_id: name.clone(),
                        attack_type: match label {
                            Label::Real => "none".into(),
                            Label::Fake => "print".into(),
                        },
                        split: split_of[ind],
                        group_id: stem,
                    });
                }
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    let mut manifest = BenchmarkManifest::new(per_individual.concat(), out)?;
    manifest.modality = Some("synthetic".into());
    manifest.save(out.join(MANIFEST_NAME))?;
    Ok(manifest)
}
