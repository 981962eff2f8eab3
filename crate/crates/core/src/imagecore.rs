//! Multiband rasters and the geometric primitives applied before feature
//! extraction.
//!
//! Pixel storage order is the flattening order: pixels in row-major scan,
//! bands contiguous within each pixel, i.e. value `(x, y, b)` lives at
//! `(y * width + x) * bands + b`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `m`-band raster with real-valued pixel attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultibandImage {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f64>,
}

/// Pixel attributes of a multiband image concatenated in storage order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl MultibandImage {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        if data.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "data length {} does not match {width}x{height}x{bands}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel value at index {pos}")));
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
        })
    }

    /// Builder for internal use where the shape is known to be consistent.
    pub(crate) fn from_parts(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * bands);
        debug_assert!(width > 0 && height > 0 && bands > 0);
        Self {
            width,
            height,
            bands,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, bands: usize) -> Result<Self> {
        Self::new(width, height, bands, vec![0.0; width * height * bands])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * bands);
        for y in 0..height {
            for x in 0..width {
                for b in 0..bands {
                    data.push(f(x, y, b));
                }
            }
        }
        Self::new(width, height, bands, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.bands)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, band: usize) -> usize {
        (y * self.width + x) * self.bands + band
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, band: usize) -> f64 {
        self.data[self.index(x, y, band)]
    }

    /// Attribute vector of pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.bands]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.width,
            self.height,
            self.bands,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Single band `band` as a one-band image.
    pub fn band(&self, band: usize) -> Result<Self> {
        if band >= self.bands {
            return Err(Error::InvalidArgument(format!(
                "band {band} out of range for {}-band image",
                self.bands
            )));
        }
        let data = self.data.iter().skip(band).step_by(self.bands).copied().collect();
        Ok(Self::from_parts(self.width, self.height, 1, data))
    }

    /// Copies a single-band image into `bands` identical bands.
    pub fn replicate_bands(&self, bands: usize) -> Result<Self> {
        if self.bands != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "only 1-band images can be replicated, got {} bands",
                self.bands
            )));
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat_n(v, bands)).collect();
        Ok(Self::from_parts(self.width, self.height, bands, data))
    }

    pub fn mirror_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Self::from_parts(self.width, self.height, self.bands, data)
    }

    /// Rectangular window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height} at ({x0},{y0}) does not fit {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.bands);
        for y in y0..y0 + height {
            let start = self.index(x0, y, 0);
            data.extend_from_slice(&self.data[start..start + width * self.bands]);
        }
        Ok(Self::from_parts(width, height, self.bands, data))
    }

    /// Per-image standardization to zero mean and unit variance. A constant
    /// image is only centered.
    pub fn standardize(&self) -> Self {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
        self.map(|v| (v - mean) * scale)
    }
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Inverse of [`flatten`].
    pub fn reshape(&self, width: usize, height: usize, bands: usize) -> Result<MultibandImage> {
        MultibandImage::new(width, height, bands, self.values.clone())
    }
}

pub fn flatten(img: &MultibandImage) -> FeatureVector {
    FeatureVector::new(img.data.clone())
}

/// Output dimensions for [`resize_keep_aspect`]: the greater axis becomes
/// `target`, the other is scaled and rounded half-up.
pub fn keep_aspect_dims(width: usize, height: usize, target: usize) -> (usize, usize) {
    let scale_minor = |minor: usize, major: usize| -> usize { ((2 * minor * target + major) / (2 * major)).max(1) };
    if width >= height {
        (target, scale_minor(height, width))
    } else {
        (scale_minor(width, height), target)
    }
}

pub fn resize_keep_aspect(img: &MultibandImage, target_max_axis: usize) -> Result<MultibandImage> {
    if target_max_axis < 8 {
        return Err(Error::InvalidArgument(format!(
            "target axis {target_max_axis} is below the minimum of 8"
        )));
    }
    let (w, h) = keep_aspect_dims(img.width, img.height, target_max_axis);
    resize(img, w, h)
}

/// Bilinear resampling with pixel-center alignment. Same-size resizes return
/// an exact copy.
pub fn resize(img: &MultibandImage, width: usize, height: usize) -> Result<MultibandImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize to {width}x{height}")));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let m = img.bands;
    let mut data = Vec::with_capacity(width * height * m);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for b in 0..m {
                let top = img.get(x0, y0, b) * (1.0 - tx) + img.get(x1, y0, b) * tx;
                let bottom = img.get(x0, y1, b) * (1.0 - tx) + img.get(x1, y1, b) * tx;
                data.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Ok(MultibandImage::from_parts(width, height, m, data))
}

fn fraction_len(frac: f64, dim: usize) -> usize {
    // Tolerates representation error such as 0.6 * 800 = 479.99999...
    (frac * dim as f64 + 1e-9).floor() as usize
}

/// Central window covering `floor(frac * dim)` of each axis; odd margins
/// leave the extra pixel at the bottom/right.
pub fn crop_center_fraction(img: &MultibandImage, frac_cols: f64, frac_rows: f64) -> Result<MultibandImage> {
    for (name, f) in [("column", frac_cols), ("row", frac_rows)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidArgument(format!("{name} fraction {f} outside (0, 1]")));
        }
    }
    let w = fraction_len(frac_cols, img.width);
    let h = fraction_len(frac_rows, img.height);
    if w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "crop of {}x{} by ({frac_cols}, {frac_rows}) is empty",
            img.width, img.height
        )));
    }
    img.crop((img.width - w) / 2, (img.height - h) / 2, w, h)
}

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &MultibandImage) -> Result<MultibandImage> {
    match img.bands {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data
                .chunks_exact(3)
                .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
                .collect();
            Ok(MultibandImage::from_parts(img.width, img.height, 1, data))
        }
        m => Err(Error::UnsupportedFormat(format!(
            "grayscale conversion needs 1 or 3 bands, got {m}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize, m: usize) -> MultibandImage {
        MultibandImage::from_fn(w, h, m, |x, y, b| (x + 3 * y + 7 * b) as f64 / 100.0).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MultibandImage::new(0, 1, 1, vec![]).is_err());
        assert!(MultibandImage::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(MultibandImage::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn resize_identity_at_target() {
        let img = ramp(640, 480, 1);
        assert_eq!(resize_keep_aspect(&img, 640).unwrap(), img);
    }

    #[test]
    fn resize_halving() {
        let img = ramp(640, 480, 1);
        assert_eq!(resize_keep_aspect(&img, 320).unwrap().dims(), (320, 240, 1));
    }

    #[test]
    fn resize_minor_axis_rounding() {
        // 208 * 750 / 1500 = 104 exactly.
        assert_eq!(keep_aspect_dims(208, 1500, 750), (104, 750));
        // Half rounds up: 3 * 8 / 16 = 1.5 -> 2.
        assert_eq!(keep_aspect_dims(16, 3, 8), (8, 2));
        assert_eq!(keep_aspect_dims(16, 5, 8), (8, 3));
        let img = ramp(208, 1500, 1);
        assert_eq!(resize_keep_aspect(&img, 750).unwrap().dims(), (104, 750, 1));
    }

    #[test]
    fn resize_rejects_tiny_target() {
        assert!(matches!(
            resize_keep_aspect(&ramp(10, 10, 1), 7),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn crop_crossmatch_fractions() {
        let img = MultibandImage::zeros(800, 750, 1).unwrap();
        assert_eq!(crop_center_fraction(&img, 0.60, 0.90).unwrap().dims(), (480, 675, 1));
    }

    #[test]
    fn crop_identity_and_offset() {
        let img = ramp(10, 10, 2);
        assert_eq!(crop_center_fraction(&img, 1.0, 1.0).unwrap(), img);
        let c = crop_center_fraction(&img, 0.5, 0.5).unwrap();
        assert_eq!(c.dims(), (5, 5, 2));
        assert_eq!(c.pixel(0, 0), img.pixel(2, 2));
    }

    #[test]
    fn crop_rejects_bad_fraction() {
        let img = ramp(10, 10, 1);
        assert!(crop_center_fraction(&img, 0.0, 1.0).is_err());
        assert!(crop_center_fraction(&img, 1.0, 1.5).is_err());
        assert!(crop_center_fraction(&img, 0.05, 1.0).is_err());
    }

    #[test]
    fn grayscale() {
        let gray = ramp(3, 3, 1);
        assert_eq!(to_grayscale(&gray).unwrap(), gray);
        let flat = MultibandImage::new(1, 1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        assert!((to_grayscale(&flat).unwrap().get(0, 0, 0) - 0.5).abs() < 1e-15);
        let red = MultibandImage::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_grayscale(&red).unwrap().get(0, 0, 0), 0.299);
        let two = MultibandImage::zeros(1, 1, 2).unwrap();
        assert!(matches!(to_grayscale(&two), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn flatten_order() {
        let img = MultibandImage::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten(&img).values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten(&ramp(1, 1, 3)).dim(), 3);
    }

    #[test]
    fn mirror_twice_is_identity() {
        let img = ramp(5, 4, 3);
        assert_eq!(img.mirror_horizontal().mirror_horizontal(), img);
        assert_eq!(img.mirror_horizontal().pixel(0, 1), img.pixel(4, 1));
    }

    proptest! {
        #[test]
        fn flatten_reshape_round_trip(data in proptest::collection::vec(-10.0f64..10.0, 7 * 5 * 4)) {
            let img = MultibandImage::new(7, 5, 4, data).unwrap();
            let back = flatten(&img).reshape(7, 5, 4).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn resize_stays_within_input_range(
            w in 1usize..20, h in 1usize..20, tw in 1usize..40, th in 1usize..40, seed in 0u64..1000,
        ) {
            let img = MultibandImage::from_fn(w, h, 2, |x, y, b| {
                (((x * 31 + y * 17 + b * 7) as u64 ^ seed) % 97) as f64 / 96.0
            }).unwrap();
            let (lo, hi) = img.min_max();
            let out = resize(&img, tw, th).unwrap();
            let (olo, ohi) = out.min_max();
            prop_assert!(olo >= lo - 1e-9 && ohi <= hi + 1e-9);
        }
    }
}
