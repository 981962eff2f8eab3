//! Benchmark manifests, sensor preprocessing, dataset loading and the
//! synthetic benchmark generator.

mod manifest;
pub mod preprocess;
pub mod synth;

use rayon::prelude::*;

pub use manifest::{load_manifest, parse_manifest, BenchmarkManifest, Record, Split, SplitTally};
pub use preprocess::{
    compute_swipe_rows, preprocess_face_video, preprocess_fingerprint, FaceBox, FaceVideo, SensorRule, SwipeRows,
};
pub use synth::{gaussian_blur, generate_synthetic_benchmark, SynthParams, MANIFEST_NAME};

use crate::error::Result;
use crate::imagecore::MultibandImage;
use crate::label::Label;
use crate::pnm;

/// Images of one split, decoded into memory in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub images: Vec<MultibandImage>,
}

impl Dataset {
    pub fn load(manifest: &BenchmarkManifest, split: Split) -> Result<Self> {
        let records = manifest.split(split);
        let images = records
            .par_iter()
            .map(|r| pnm::load(manifest.resolve(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }
}
