//! Self-contained JSON model files for both detector kinds.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archsearch::{prepare_input, ArchitectureSpec, Prenorm};
use crate::backprop::{self, NetConfig, TrainableNet};
use crate::convops::{self, FilterBank, FilterSet};
use crate::error::{Error, Result};
use crate::imagecore::{resize, MultibandImage};
use crate::maxmargin::LinearModel;
use crate::protocol::ThresholdRule;

pub const FORMAT_VERSION: u32 = 1;

/// Filter bank as `[filter][dy][dx][band]`.
pub type Tensor4 = Vec<Vec<Vec<Vec<f64>>>>;

pub fn bank_to_tensor(bank: &FilterBank) -> Tensor4 {
    (0..bank.n())
        .map(|i| {
            (0..bank.size())
                .map(|dy| {
                    (0..bank.size())
                        .map(|dx| (0..bank.in_bands()).map(|b| bank.weight(i, dy, dx, b)).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn tensor_to_bank(t: &Tensor4) -> Result<FilterBank> {
    let n = t.len();
    let size = t.first().map_or(0, Vec::len);
    let bands = t
        .first()
        .and_then(|f| f.first())
        .and_then(|r| r.first())
        .map_or(0, Vec::len);
    let mut weights = Vec::with_capacity(n * size * size * bands);
    for f in t {
        if f.len() != size {
            return Err(Error::Shape("ragged filter tensor".into()));
        }
        for row in f {
            if row.len() != size {
                return Err(Error::Shape("ragged filter tensor".into()));
            }
            for px in row {
                if px.len() != bands {
                    return Err(Error::Shape("ragged filter tensor".into()));
                }
                weights.extend_from_slice(px);
            }
        }
    }
    FilterBank::new(n, size, bands, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenThreshold {
    pub rule: ThresholdRule,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Detector {
    AoRandomFilter {
        architecture: ArchitectureSpec,
        input_bands: usize,
        filters: Vec<Tensor4>,
        classifier: LinearModel,
    },
    FoTrained {
        net: NetConfig,
        filters: Vec<Tensor4>,
        conv_bias: Vec<Vec<f64>>,
        /// One row per class, real first.
        fc_weights: Vec<Vec<f64>>,
        fc_bias: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    pub format_version: u32,
    pub seed: u64,
    #[serde(flatten)]
    pub detector: Detector,
    pub threshold: Option<FrozenThreshold>,
}

impl ModelContainer {
    pub fn ao(
        architecture: ArchitectureSpec,
        filters: &FilterSet,
        input_bands: usize,
        classifier: LinearModel,
        seed: u64,
        threshold: Option<FrozenThreshold>,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            detector: Detector::AoRandomFilter {
                architecture,
                input_bands,
                filters: filters.banks.iter().map(bank_to_tensor).collect(),
                classifier,
            },
            threshold,
        }
    }

    pub fn fo(net: &TrainableNet, seed: u64, threshold: Option<FrozenThreshold>) -> Self {
        let d = net.fc_weights.len() / backprop::NUM_CLASSES;
        Self {
            format_version: FORMAT_VERSION,
            seed,
            detector: Detector::FoTrained {
                net: net.config.clone(),
                filters: net.banks.iter().map(bank_to_tensor).collect(),
                conv_bias: net.conv_bias.clone(),
                fc_weights: net.fc_weights.chunks(d).map(<[f64]>::to_vec).collect(),
                fc_bias: net.fc_bias,
            },
            threshold,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.detector {
            Detector::AoRandomFilter { .. } => "ao-random-filter",
            Detector::FoTrained { .. } => "fo-trained",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "model format version {} (supported: {FORMAT_VERSION})",
                model.format_version
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    /// Runtime form of the detector.
    pub fn scorer(&self) -> Result<Scorer> {
        match &self.detector {
            Detector::AoRandomFilter {
                architecture,
                filters,
                classifier,
                ..
            } => Ok(Scorer::Ao {
                spec: architecture.clone(),
                filters: FilterSet {
                    banks: filters.iter().map(tensor_to_bank).collect::<Result<_>>()?,
                },
                classifier: classifier.clone(),
            }),
            Detector::FoTrained {
                net,
                filters,
                conv_bias,
                fc_weights,
                fc_bias,
            } => {
                let banks: Vec<FilterBank> = filters.iter().map(tensor_to_bank).collect::<Result<_>>()?;
                let d = net.feature_len()?;
                if fc_weights.len() != backprop::NUM_CLASSES || fc_weights.iter().any(|r| r.len() != d) {
                    return Err(Error::Shape(format!("head must be 2 x {d}")));
                }
                Ok(Scorer::Fo(TrainableNet {
                    config: net.clone(),
                    banks,
                    conv_bias: conv_bias.clone(),
                    fc_weights: fc_weights.concat(),
                    fc_bias: *fc_bias,
                }))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Scorer {
    Ao {
        spec: ArchitectureSpec,
        filters: FilterSet,
        classifier: LinearModel,
    },
    Fo(TrainableNet),
}

/// Square resize to the net's input size, band matching and the net's
/// input normalization.
pub fn fit_to_net(img: &MultibandImage, config: &NetConfig) -> Result<MultibandImage> {
    let s = config.input_size;
    let sized = if img.width() == s && img.height() == s {
        img.clone()
    } else {
        resize(img, s, s)?
    };
    let matched = match (sized.bands(), config.in_bands) {
        (a, b) if a == b => sized,
        (1, b) => sized.replicate_bands(b)?,
        (3, 1) => crate::imagecore::to_grayscale(&sized)?,
        (a, b) => return Err(Error::Shape(format!("cannot feed {a}-band images to a {b}-band net"))),
    };
    Ok(match config.prenorm {
        Prenorm::None => matched,
        Prenorm::Standardize => matched.standardize(),
    })
}

impl Scorer {
    /// Detection score; larger means more likely fake.
    pub fn score(&self, img: &MultibandImage) -> Result<f64> {
        match self {
            Scorer::Ao {
                spec,
                filters,
                classifier,
            } => {
                let f = convops::forward(&prepare_input(img, spec)?, &spec.layers, filters)?;
                classifier.score(&f)
            }
            Scorer::Fo(net) => backprop::predict_prob(net, &fit_to_net(img, &net.config)?),
        }
    }

    /// Representation the classifier sees.
    pub fn features(&self, img: &MultibandImage) -> Result<Vec<f64>> {
        match self {
            Scorer::Ao { spec, filters, .. } => {
                Ok(convops::forward(&prepare_input(img, spec)?, &spec.layers, filters)?.values)
            }
            Scorer::Fo(net) => {
                let crop = self.network_input(img)?;
                Ok(backprop::embed(net, &[crop])?.remove(0))
            }
        }
    }

    pub fn score_all(&self, images: &[MultibandImage]) -> Result<Vec<f64>> {
        images.par_iter().map(|img| self.score(img)).collect()
    }

    /// The image as it enters the first layer.
    pub fn network_input(&self, img: &MultibandImage) -> Result<MultibandImage> {
        match self {
            Scorer::Ao { spec, .. } => prepare_input(img, spec),
            Scorer::Fo(net) => {
                let c = &net.config;
                let (x, y) = backprop::augment_offsets(c.input_size, c.crop_size)[4];
                fit_to_net(img, c)?.crop(x, y, c.crop_size, c.crop_size)
            }
        }
    }

    pub fn first_bank(&self) -> &FilterBank {
        match self {
            Scorer::Ao { filters, .. } => &filters.banks[0],
            Scorer::Fo(net) => &net.banks[0],
        }
    }

    /// Output of the first layer (with its bias, for trained nets).
    pub fn first_layer(&self, img: &MultibandImage) -> Result<MultibandImage> {
        let input = self.network_input(img)?;
        match self {
            Scorer::Ao { spec, filters, .. } => convops::apply_layer(&input, &spec.layers[0], &filters.banks[0]),
            Scorer::Fo(net) => {
                let spec = &net.config.layers[0];
                let conv = convops::convolve(&input, &net.banks[0])?;
                let bias = &net.conv_bias[0];
                let n = bias.len();
                let data = conv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v + bias[i % n]).max(0.0))
                    .collect();
                let activated = MultibandImage::new(conv.width(), conv.height(), n, data)?;
                let pooled = convops::pool(&activated, spec.pool_size, spec.pool_stride, spec.pool_exponent)?;
                match spec.norm_size {
                    Some(size) => convops::divnorm(&pooled, size),
                    None => Ok(pooled),
                }
            }
        }
    }
}
