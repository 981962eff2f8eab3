use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{crop_center_fraction, resize, MultibandImage};

/// Crop applied to a fingerprint sensor's images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRule {
    pub sensor: String,
    pub frac_cols: f64,
    pub frac_rows: f64,
    /// Swipe sensors: trim blank bottom rows and rescale to this many rows
    /// before cropping. `Some(None)` means the row target is still unknown.
    pub swipe_rows: Option<Option<usize>>,
}

impl SensorRule {
    pub fn new(sensor: impl Into<String>, frac_cols: f64, frac_rows: f64) -> Result<Self> {
        for f in [frac_cols, frac_rows] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("crop fraction {f} outside (0, 1]")));
            }
        }
        Ok(Self {
            sensor: sensor.into(),
            frac_cols,
            frac_rows,
            swipe_rows: None,
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "biometrika" => Self::new("biometrika", 0.70, 0.70),
            "italdata" => Self::new("italdata", 0.60, 0.90),
            "crossmatch" => Self::new("crossmatch", 0.60, 0.90),
            "swipe" => Ok(Self {
                swipe_rows: Some(None),
                ..Self::new("swipe", 0.90, 1.0)?
            }),
            other => Err(Error::Config(format!(
                "unknown fingerprint sensor {other:?} (expected biometrika, italdata, crossmatch or swipe)"
            ))),
        }
    }

    /// Swipe rule with the row target fixed from training images.
    pub fn swipe(rows: usize) -> Self {
        Self {
            sensor: "swipe".into(),
            frac_cols: 0.90,
            frac_rows: 1.0,
            swipe_rows: Some(Some(rows)),
        }
    }
}

/// Rows whose values are all below one 8-bit step count as background.
pub const BLANK_LEVEL: f64 = 1.0 / 255.0;

pub fn is_blank_row(img: &MultibandImage, y: usize) -> bool {
    (0..img.width()).all(|x| img.pixel(x, y).iter().all(|&v| v < BLANK_LEVEL))
}

/// Height without the blank rows at the bottom; 0 for an all-blank image.
pub fn non_blank_rows(img: &MultibandImage) -> usize {
    (0..img.height())
        .rev()
        .find(|&y| !is_blank_row(img, y))
        .map_or(0, |y| y + 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwipeRows {
    pub rows: usize,
    /// Indices of all-blank images left out of the mean.
    pub excluded: Vec<usize>,
}

/// Mean count of non-blank rows over the training images, rounded half up.
pub fn compute_swipe_rows(train: &[MultibandImage]) -> Result<SwipeRows> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training images for swipe rows".into()));
    }
    let mut excluded = Vec::new();
    let mut total = 0usize;
    let mut count = 0usize;
    for (i, img) in train.iter().enumerate() {
        match non_blank_rows(img) {
            0 => {
                log::warn!("training image {i} is entirely blank; excluded from swipe row mean");
                excluded.push(i);
            }
            rows => {
                total += rows;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("every swipe training image is blank".into()));
    }
    Ok(SwipeRows {
        rows: (2 * total + count) / (2 * count),
        excluded,
    })
}

pub fn preprocess_fingerprint(img: &MultibandImage, rule: &SensorRule) -> Result<MultibandImage> {
    let base = match rule.swipe_rows {
        None => img.clone(),
        Some(None) => {
            return Err(Error::Config(
                "swipe rule needs its row target computed from training images".into(),
            ))
        }
        Some(Some(rows)) => {
            let kept = non_blank_rows(img);
            if kept == 0 {
                return Err(Error::InvalidArgument("swipe image is entirely blank".into()));
            }
            let trimmed = img.crop(0, 0, img.width(), kept)?;
            resize(&trimmed, img.width(), rows)?
        }
    };
    crop_center_fraction(&base, rule.frac_cols, rule.frac_rows)
}

/// Frames sampled from each face video.
pub const FACE_FRAMES: usize = 10;
pub const FACE_CROP: usize = 200;

/// Face region in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceVideo {
    pub images: Vec<MultibandImage>,
    pub frame_indices: Vec<usize>,
    /// Frames whose crop window was pulled back inside the image.
    pub clamped: Vec<usize>,
}

/// `round(i·(n−1)/9)` for `i = 0..10`, halves rounded up.
pub fn face_frame_indices(n: usize) -> Vec<usize> {
    let steps = FACE_FRAMES - 1;
    (0..FACE_FRAMES)
        .map(|i| (2 * i * (n - 1) + steps) / (2 * steps))
        .collect()
}

/// Subsamples ten frames and crops a 200×200 window centered on each frame's
/// face box, or on the frame center when no boxes are supplied.
pub fn preprocess_face_video(frames: &[MultibandImage], boxes: Option<&[FaceBox]>) -> Result<FaceVideo> {
    if frames.len() < FACE_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "face videos need at least {FACE_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    if let Some(b) = boxes {
        if b.len() != frames.len() {
            return Err(Error::InvalidArgument(format!(
                "{} face boxes for {} frames",
                b.len(),
                frames.len()
            )));
        }
    }
    let frame_indices = face_frame_indices(frames.len());
    let mut images = Vec::with_capacity(FACE_FRAMES);
    let mut clamped = Vec::new();
    for &idx in &frame_indices {
        let frame = &frames[idx];
        if frame.width() < FACE_CROP || frame.height() < FACE_CROP {
            return Err(Error::Shape(format!(
                "frame {idx} is {}x{}, smaller than the {FACE_CROP}x{FACE_CROP} crop",
                frame.width(),
                frame.height()
            )));
        }
        let (cx, cy) = match boxes {
            Some(b) => {
                let b = b[idx];
                (b.x + b.width / 2, b.y + b.height / 2)
            }
            None => ((frame.width() / 2) as i64, (frame.height() / 2) as i64),
        };
        let half = (FACE_CROP / 2) as i64;
        let max_x = (frame.width() - FACE_CROP) as i64;
        let max_y = (frame.height() - FACE_CROP) as i64;
        let (x0, y0) = (cx - half, cy - half);
        let (cx0, cy0) = (x0.clamp(0, max_x), y0.clamp(0, max_y));
        if (cx0, cy0) != (x0, y0) {
            log::warn!("face box for frame {idx} extends outside the image; crop clamped");
            clamped.push(idx);
        }
        images.push(frame.crop(cx0 as usize, cy0 as usize, FACE_CROP, FACE_CROP)?);
    }
    Ok(FaceVideo {
        images,
        frame_indices,
        clamped,
    })
}
