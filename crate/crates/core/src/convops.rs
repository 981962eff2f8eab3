//! Filter-bank convolution, rectified linear activation, Lα pooling and
//! divisive normalization, plus the layer stack that chains them.
//!
//! Every operation works on valid windows only, so each stage shrinks the
//! image domain. Convolution is a correlation: weight `(dy, dx)` multiplies
//! the input pixel at offset `(dx, dy)` from the window's top-left corner,
//! with no kernel flip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Strides};
use crate::imagecore::{flatten, FeatureVector, MultibandImage};

/// Added under the square root of the normalization denominator so blank
/// regions normalize to zero instead of NaN.
pub const NORM_EPSILON: f64 = 1e-8;

/// Upper bound on the im2col scratch tile, in values.
const PATCH_TILE: usize = 1 << 16;

/// A bank of `n` multiband filters of spatial size `size x size`.
///
/// Weights are stored filter-major as `(filter, dy, dx, band)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    n: usize,
    size: usize,
    in_bands: usize,
    weights: Vec<f64>,
}

impl FilterBank {
    pub fn new(n: usize, size: usize, in_bands: usize, weights: Vec<f64>) -> Result<Self> {
        if n == 0 || in_bands == 0 || size == 0 || size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "filter bank needs n >= 1, odd size and bands >= 1 (got n={n}, size={size}, bands={in_bands})"
            )));
        }
        if weights.len() != n * size * size * in_bands {
            return Err(Error::Shape(format!(
                "expected {} filter weights, got {}",
                n * size * size * in_bands,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite filter weight".into()));
        }
        Ok(Self {
            n,
            size,
            in_bands,
            weights,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn in_bands(&self) -> usize {
        self.in_bands
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn filter_len(&self) -> usize {
        self.size * self.size * self.in_bands
    }

    /// Weights of filter `i` in `(dy, dx, band)` order.
    pub fn filter(&self, i: usize) -> &[f64] {
        let len = self.filter_len();
        &self.weights[i * len..(i + 1) * len]
    }

    #[inline]
    pub fn weight(&self, i: usize, dy: usize, dx: usize, band: usize) -> f64 {
        self.weights[((i * self.size + dy) * self.size + dx) * self.in_bands + band]
    }

    /// Filter `i` as a `size x size x in_bands` image.
    pub fn filter_image(&self, i: usize) -> MultibandImage {
        MultibandImage::from_parts(self.size, self.size, self.in_bands, self.filter(i).to_vec())
    }

    /// Weights rearranged to `(dy, dx, band, filter)`, i.e. a row-major
    /// `filter_len x n` matrix.
    pub(crate) fn patch_major(&self) -> Vec<f64> {
        let k = self.filter_len();
        let mut out = vec![0.0; k * self.n];
        for i in 0..self.n {
            for (j, &w) in self.filter(i).iter().enumerate() {
                out[j * self.n + i] = w;
            }
        }
        out
    }
}

/// Hyperparameters of one convolutional layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub n_filters: usize,
    pub filter_size: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub pool_exponent: f64,
    /// Window of the divisive normalization; `None` disables it.
    pub norm_size: Option<usize>,
}

impl LayerSpec {
    pub fn use_norm(&self) -> bool {
        self.norm_size.is_some()
    }

    pub fn check(&self) -> Result<()> {
        let odd = |v: usize| v >= 1 && v % 2 == 1;
        if self.n_filters == 0
            || !odd(self.filter_size)
            || !odd(self.pool_size)
            || self.pool_stride == 0
            || !(self.pool_exponent >= 1.0 && self.pool_exponent.is_finite())
            || self.norm_size.is_some_and(|s| !odd(s))
        {
            return Err(Error::InvalidArgument(format!("invalid layer spec {self:?}")));
        }
        Ok(())
    }
}

/// One filter bank per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSet {
    pub banks: Vec<FilterBank>,
}

pub fn conv_dims(width: usize, height: usize, size: usize) -> Option<(usize, usize)> {
    (width >= size && height >= size).then(|| (width - size + 1, height - size + 1))
}

/// Pooling windows are anchored at the first valid position and advance by
/// `stride`; windows that would cross the border are dropped.
pub fn pool_dims(width: usize, height: usize, size: usize, stride: usize) -> Option<(usize, usize)> {
    (width >= size && height >= size && stride >= 1)
        .then(|| ((width - size) / stride + 1, (height - size) / stride + 1))
}

pub fn norm_dims(width: usize, height: usize, size: usize) -> Option<(usize, usize)> {
    conv_dims(width, height, size)
}

/// Raw valid correlation on a row-major `(y, x, band)` buffer with weights in
/// patch-major layout (see [`FilterBank::patch_major`]).
pub(crate) fn correlate(
    input: &[f64],
    width: usize,
    height: usize,
    bands: usize,
    weights_pm: &[f64],
    size: usize,
    n: usize,
) -> Vec<f64> {
    let (wo, ho) = conv_dims(width, height, size).expect("caller checks dims");
    let k = size * size * bands;
    let mut out = vec![0.0; wo * ho * n];
    let rows_per_tile = (PATCH_TILE / (wo * k)).clamp(1, ho);
    let mut patches = vec![0.0; rows_per_tile * wo * k];
    for y0 in (0..ho).step_by(rows_per_tile) {
        let rows = rows_per_tile.min(ho - y0);
        im2col(input, width, bands, size, wo, y0, rows, &mut patches);
        let p = rows * wo;
        gemm(
            p,
            k,
            n,
            &patches,
            Strides::row_major(k),
            weights_pm,
            Strides::row_major(n),
            0.0,
            &mut out[y0 * wo * n..(y0 + rows) * wo * n],
            Strides::row_major(n),
        );
    }
    out
}

/// Gradients of [`correlate`]: accumulates into `d_weights_pm` and, when
/// requested, writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_backward(
    input: &[f64],
    width: usize,
    height: usize,
    bands: usize,
    weights_pm: &[f64],
    size: usize,
    n: usize,
    d_out: &[f64],
    d_weights_pm: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let (wo, ho) = conv_dims(width, height, size).expect("caller checks dims");
    let k = size * size * bands;
    let rows_per_tile = (PATCH_TILE / (wo * k)).clamp(1, ho);
    let mut patches = vec![0.0; rows_per_tile * wo * k];
    let mut d_patches = if d_input.is_some() {
        vec![0.0; rows_per_tile * wo * k]
    } else {
        Vec::new()
    };
    if let Some(d_in) = d_input.as_deref_mut() {
        d_in.fill(0.0);
    }
    for y0 in (0..ho).step_by(rows_per_tile) {
        let rows = rows_per_tile.min(ho - y0);
        let p = rows * wo;
        im2col(input, width, bands, size, wo, y0, rows, &mut patches);
        let d_tile = &d_out[y0 * wo * n..(y0 + rows) * wo * n];
        gemm(
            k,
            p,
            n,
            &patches,
            Strides::transposed(k),
            d_tile,
            Strides::row_major(n),
            1.0,
            d_weights_pm,
            Strides::row_major(n),
        );
        if let Some(d_in) = d_input.as_deref_mut() {
            gemm(
                p,
                n,
                k,
                d_tile,
                Strides::row_major(n),
                weights_pm,
                Strides::transposed(n),
                0.0,
                &mut d_patches[..p * k],
                Strides::row_major(k),
            );
            col2im_add(&d_patches, width, bands, size, wo, y0, rows, d_in);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    width: usize,
    bands: usize,
    size: usize,
    wo: usize,
    y0: usize,
    rows: usize,
    patches: &mut [f64],
) {
    let k = size * size * bands;
    let run = size * bands;
    for y in y0..y0 + rows {
        for x in 0..wo {
            let row = ((y - y0) * wo + x) * k;
            for dy in 0..size {
                let src = ((y + dy) * width + x) * bands;
                patches[row + dy * run..row + (dy + 1) * run].copy_from_slice(&input[src..src + run]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    d_patches: &[f64],
    width: usize,
    bands: usize,
    size: usize,
    wo: usize,
    y0: usize,
    rows: usize,
    d_input: &mut [f64],
) {
    let k = size * size * bands;
    let run = size * bands;
    for y in y0..y0 + rows {
        for x in 0..wo {
            let row = ((y - y0) * wo + x) * k;
            for dy in 0..size {
                let dst = ((y + dy) * width + x) * bands;
                for (d, s) in d_input[dst..dst + run]
                    .iter_mut()
                    .zip(&d_patches[row + dy * run..row + (dy + 1) * run])
                {
                    *d += s;
                }
            }
        }
    }
}

/// Filter bank convolution over the valid domain; band `i` of the output is
/// the response of filter `i`.
pub fn convolve(img: &MultibandImage, bank: &FilterBank) -> Result<MultibandImage> {
    if img.bands() != bank.in_bands {
        return Err(Error::Shape(format!(
            "image has {} bands, filter bank expects {}",
            img.bands(),
            bank.in_bands
        )));
    }
    let (wo, ho) = conv_dims(img.width(), img.height(), bank.size).ok_or_else(|| {
        Error::Shape(format!(
            "{}x{} image is smaller than {}x{} filters",
            img.width(),
            img.height(),
            bank.size,
            bank.size
        ))
    })?;
    let out = correlate(
        img.data(),
        img.width(),
        img.height(),
        img.bands(),
        &bank.patch_major(),
        bank.size,
        bank.n,
    );
    Ok(MultibandImage::from_parts(wo, ho, bank.n, out))
}

pub fn relu(img: &MultibandImage) -> MultibandImage {
    img.map(|v| v.max(0.0))
}

/// How `v^α` and its root are evaluated for a pooling exponent.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Exponent {
    One,
    Two,
    Int(i32),
    Real(f64),
}

impl Exponent {
    pub fn new(alpha: f64) -> Self {
        if alpha == 1.0 {
            Exponent::One
        } else if alpha == 2.0 {
            Exponent::Two
        } else if alpha.fract() == 0.0 && alpha.abs() < 64.0 {
            Exponent::Int(alpha as i32)
        } else {
            Exponent::Real(alpha)
        }
    }

    #[inline]
    pub fn pow(self, v: f64) -> f64 {
        match self {
            Exponent::One => v,
            Exponent::Two => v * v,
            Exponent::Int(p) => v.powi(p),
            Exponent::Real(a) => v.powf(a),
        }
    }

    #[inline]
    pub fn root(self, s: f64) -> f64 {
        match self {
            Exponent::One => s,
            Exponent::Two => s.sqrt(),
            Exponent::Int(p) => s.powf(1.0 / f64::from(p)),
            Exponent::Real(a) => s.powf(1.0 / a),
        }
    }

    /// `d pooled / d v = (v / pooled)^(α-1)`, taken as 0 when the window is
    /// all zero (except α = 1, where it is 1 everywhere).
    #[inline]
    pub fn grad(self, v: f64, pooled: f64) -> f64 {
        match self {
            Exponent::One => 1.0,
            _ if pooled <= 0.0 => 0.0,
            Exponent::Two => v / pooled,
            Exponent::Int(p) => (v / pooled).powi(p - 1),
            Exponent::Real(a) => (v / pooled).powf(a - 1.0),
        }
    }
}

/// Lα pooling: the `L_B x L_B` window's α-norm per band, sampled every
/// `stride` pixels. Expects non-negative input.
pub fn pool(img: &MultibandImage, size: usize, stride: usize, alpha: f64) -> Result<MultibandImage> {
    if size == 0 || alpha.is_nan() || alpha < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "pooling needs size >= 1 and alpha >= 1 (got size={size}, alpha={alpha})"
        )));
    }
    let (wo, ho) = pool_dims(img.width(), img.height(), size, stride).ok_or_else(|| {
        Error::Shape(format!(
            "pooling {size}x{size} stride {stride} leaves no output for {}x{}",
            img.width(),
            img.height()
        ))
    })?;
    let exp = Exponent::new(alpha);
    let m = img.bands();
    let data = img.data();
    let mut out = vec![0.0; wo * ho * m];
    for oy in 0..ho {
        for ox in 0..wo {
            let acc = &mut out[(oy * wo + ox) * m..(oy * wo + ox + 1) * m];
            for dy in 0..size {
                let row = (oy * stride + dy) * img.width();
                for dx in 0..size {
                    let src = (row + ox * stride + dx) * m;
                    for (a, &v) in acc.iter_mut().zip(&data[src..src + m]) {
                        *a += exp.pow(v);
                    }
                }
            }
            for a in acc.iter_mut() {
                *a = exp.root(*a);
            }
        }
    }
    Ok(MultibandImage::from_parts(wo, ho, m, out))
}

/// Divisive normalization: each value is divided by the root of the energy
/// of all bands in the `L_C x L_C` window centered on it.
pub fn divnorm(img: &MultibandImage, size: usize) -> Result<MultibandImage> {
    let (wo, ho) = norm_dims(img.width(), img.height(), size).ok_or_else(|| {
        Error::Shape(format!(
            "{}x{} image is smaller than the {size}x{size} normalization window",
            img.width(),
            img.height()
        ))
    })?;
    let m = img.bands();
    let r = size / 2;
    let energy = pixel_energy(img);
    let mut out = Vec::with_capacity(wo * ho * m);
    for oy in 0..ho {
        for ox in 0..wo {
            let d = window_sum(&energy, img.width(), ox, oy, size) + NORM_EPSILON;
            let inv = 1.0 / d.sqrt();
            out.extend(img.pixel(ox + r, oy + r).iter().map(|v| v * inv));
        }
    }
    Ok(MultibandImage::from_parts(wo, ho, m, out))
}

/// Sum of squares across bands at every pixel.
pub(crate) fn pixel_energy(img: &MultibandImage) -> Vec<f64> {
    img.data()
        .chunks_exact(img.bands())
        .map(|p| p.iter().map(|v| v * v).sum())
        .collect()
}

#[inline]
pub(crate) fn window_sum(map: &[f64], width: usize, x0: usize, y0: usize, size: usize) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + size {
        s += map[y * width + x0..y * width + x0 + size].iter().sum::<f64>();
    }
    s
}

/// Applies one layer: convolution, activation, pooling and optional
/// normalization, in that order.
pub fn apply_layer(img: &MultibandImage, layer: &LayerSpec, bank: &FilterBank) -> Result<MultibandImage> {
    let activated = relu(&convolve(img, bank)?);
    let pooled = pool(&activated, layer.pool_size, layer.pool_stride, layer.pool_exponent)?;
    match layer.norm_size {
        Some(size) => divnorm(&pooled, size),
        None => Ok(pooled),
    }
}

/// The layer stack's output as a multiband image.
pub fn forward_image(img: &MultibandImage, layers: &[LayerSpec], filters: &FilterSet) -> Result<MultibandImage> {
    if !(1..=3).contains(&layers.len()) {
        return Err(Error::InvalidArgument(format!(
            "networks have 1 to 3 layers, got {}",
            layers.len()
        )));
    }
    if filters.banks.len() != layers.len() {
        return Err(Error::Shape(format!(
            "{} layers but {} filter banks",
            layers.len(),
            filters.banks.len()
        )));
    }
    let mut current = img.clone();
    for (i, (layer, bank)) in layers.iter().zip(&filters.banks).enumerate() {
        if bank.n != layer.n_filters || bank.size != layer.filter_size {
            return Err(Error::Shape(format!(
                "layer {}: filter bank {}x{}x{} does not match spec ({} filters of size {})",
                i + 1,
                bank.n,
                bank.size,
                bank.size,
                layer.n_filters,
                layer.filter_size
            )));
        }
        current = apply_layer(&current, layer, bank).map_err(|e| match e {
            Error::Shape(msg) => Error::Shape(format!("layer {}: {msg}", i + 1)),
            other => other,
        })?;
    }
    Ok(current)
}

pub fn forward(img: &MultibandImage, layers: &[LayerSpec], filters: &FilterSet) -> Result<FeatureVector> {
    forward_image(img, layers, filters).map(|out| flatten(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_bank(size: usize) -> FilterBank {
        let mut w = vec![0.0; size * size];
        w[(size / 2) * size + size / 2] = 1.0;
        FilterBank::new(1, size, 1, w).unwrap()
    }

    #[test]
    fn identity_filter_picks_center() {
        let img = MultibandImage::from_fn(3, 3, 1, |x, y, _| (x + 3 * y) as f64).unwrap();
        let out = convolve(&img, &identity_bank(3)).unwrap();
        assert_eq!(out.dims(), (1, 1, 1));
        assert_eq!(out.get(0, 0, 0), 4.0);
    }

    #[test]
    fn ramp_with_box_filter() {
        // Brute-force expectation: the 3x3 mean of x + 4y at each center is
        // the center value, times 9 for an all-ones filter.
        let img = MultibandImage::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f64 / 15.0).unwrap();
        let bank = FilterBank::new(1, 3, 1, vec![1.0; 9]).unwrap();
        let out = convolve(&img, &bank).unwrap();
        assert_eq!(out.dims(), (2, 2, 1));
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let mut expected = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    expected += img.get(x + dx, y + dy, 0);
                }
            }
            assert!((out.get(x, y, 0) - expected).abs() < 1e-12);
            let center = ((x + 1) + 4 * (y + 1)) as f64 / 15.0;
            assert!((out.get(x, y, 0) - 9.0 * center).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_output_dims() {
        let img = MultibandImage::zeros(32, 32, 3).unwrap();
        let bank = FilterBank::new(16, 5, 3, vec![0.01; 16 * 25 * 3]).unwrap();
        assert_eq!(convolve(&img, &bank).unwrap().dims(), (28, 28, 16));
    }

    #[test]
    fn conv_shape_errors() {
        let img = MultibandImage::zeros(4, 4, 2).unwrap();
        assert!(matches!(convolve(&img, &identity_bank(3)), Err(Error::Shape(_))));
        let small = MultibandImage::zeros(2, 2, 1).unwrap();
        assert!(matches!(convolve(&small, &identity_bank(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn bank_rejects_even_size() {
        assert!(FilterBank::new(1, 2, 1, vec![0.0; 4]).is_err());
    }

    #[test]
    fn relu_values() {
        let img = MultibandImage::new(2, 1, 1, vec![-2.0, 3.0]).unwrap();
        let r = relu(&img);
        assert_eq!(r.data(), &[0.0, 3.0]);
        assert_eq!(relu(&r), r);
    }

    #[test]
    fn pool_identity_window() {
        let img = MultibandImage::from_fn(4, 3, 2, |x, y, b| (x * y + b) as f64).unwrap();
        for alpha in [1.0, 2.0, 10.0] {
            let out = pool(&img, 1, 1, alpha).unwrap();
            assert_eq!(out.dims(), img.dims());
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12 * b.max(1.0));
            }
        }
    }

    #[test]
    fn pool_norms() {
        // Windows are square, so pad the pair with zeros.
        let sq = MultibandImage::new(3, 3, 1, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((pool(&sq, 3, 1, 2.0).unwrap().get(0, 0, 0) - 5.0).abs() < 1e-12);
        let sq = MultibandImage::new(3, 3, 1, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = (1.0f64 + 1024.0).powf(0.1);
        assert!((pool(&sq, 3, 1, 10.0).unwrap().get(0, 0, 0) - expected).abs() < 1e-12);
        assert!((expected - 2.000_195).abs() < 1e-6);
    }

    #[test]
    fn pool_grid_anchoring() {
        let img = MultibandImage::zeros(10, 7, 1).unwrap();
        assert_eq!(pool(&img, 3, 2, 2.0).unwrap().dims(), (4, 3, 1));
        assert_eq!(pool(&img, 3, 8, 2.0).unwrap().dims(), (1, 1, 1));
        assert!(matches!(pool(&img, 9, 1, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn divnorm_constant_and_zero() {
        let two = MultibandImage::new(2, 2, 1, vec![2.0; 4]).unwrap();
        let out = divnorm(&two, 1).unwrap();
        for &v in out.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
        let zero = MultibandImage::zeros(4, 4, 3).unwrap();
        let out = divnorm(&zero, 3).unwrap();
        assert_eq!(out.dims(), (2, 2, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_identity_composition() {
        let img = MultibandImage::from_fn(5, 5, 1, |x, y, _| x as f64 - y as f64).unwrap();
        let layer = LayerSpec {
            n_filters: 1,
            filter_size: 1,
            pool_size: 1,
            pool_stride: 1,
            pool_exponent: 1.0,
            norm_size: None,
        };
        let filters = FilterSet {
            banks: vec![FilterBank::new(1, 1, 1, vec![1.0]).unwrap()],
        };
        let out = forward(&img, &[layer], &filters).unwrap();
        assert_eq!(out, flatten(&relu(&img)));
    }

    #[test]
    fn forward_reports_collapsing_layer() {
        let img = MultibandImage::zeros(8, 8, 1).unwrap();
        let layer = |n: usize| LayerSpec {
            n_filters: n,
            filter_size: 5,
            pool_size: 3,
            pool_stride: 1,
            pool_exponent: 2.0,
            norm_size: None,
        };
        let filters = FilterSet {
            banks: vec![
                FilterBank::new(2, 5, 1, vec![0.1; 50]).unwrap(),
                FilterBank::new(2, 5, 2, vec![0.1; 100]).unwrap(),
            ],
        };
        let err = forward(&img, &[layer(2), layer(2)], &filters).unwrap_err();
        match err {
            Error::Shape(msg) => assert!(msg.starts_with("layer 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
