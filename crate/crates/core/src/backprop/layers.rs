use crate::convops::{norm_dims, pixel_energy, window_sum, Exponent, NORM_EPSILON};
use crate::imagecore::MultibandImage;

/// Gradient of Lα pooling with respect to its (non-negative) input.
pub(crate) fn pool_backward(
    input: &MultibandImage,
    pooled: &MultibandImage,
    d_pooled: &[f64],
    size: usize,
    stride: usize,
    alpha: f64,
) -> Vec<f64> {
    let exp = Exponent::new(alpha);
    let (w, _, m) = input.dims();
    let (wo, ho, _) = pooled.dims();
    let (a, p) = (input.data(), pooled.data());
    let mut d_in = vec![0.0; a.len()];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * m;
            for dy in 0..size {
                for dx in 0..size {
                    let src = ((oy * stride + dy) * w + ox * stride + dx) * m;
                    for c in 0..m {
                        d_in[src + c] += d_pooled[o + c] * exp.grad(a[src + c], p[o + c]);
                    }
                }
            }
        }
    }
    d_in
}

/// Gradient of divisive normalization. Each output depends on its center
/// value directly and on every value of its window through the denominator.
pub(crate) fn divnorm_backward(input: &MultibandImage, size: usize, d_out: &[f64]) -> Vec<f64> {
    let (w, h, m) = input.dims();
    let (wo, ho) = norm_dims(w, h, size).expect("forward pass succeeded");
    let r = size / 2;
    let p = input.data();
    let energy = pixel_energy(input);
    let mut d_in = vec![0.0; p.len()];
    // t = Σ_c dO_c · P_center,c / (S + ε)^{3/2}, per output position.
    let mut t = vec![0.0; wo * ho];
    for oy in 0..ho {
        for ox in 0..wo {
            let s = window_sum(&energy, w, ox, oy, size) + NORM_EPSILON;
            let inv = 1.0 / s.sqrt();
            let o = (oy * wo + ox) * m;
            let center = ((oy + r) * w + ox + r) * m;
            let mut dot = 0.0;
            for c in 0..m {
                d_in[center + c] += d_out[o + c] * inv;
                dot += d_out[o + c] * p[center + c];
            }
            t[oy * wo + ox] = dot * inv / s;
        }
    }
    for y in 0..h {
        let oy_range = y.saturating_sub(size - 1)..=y.min(ho - 1);
        for x in 0..w {
            let ox_range = x.saturating_sub(size - 1)..=x.min(wo - 1);
            let mut u = 0.0;
            for oy in oy_range.clone() {
                for ox in ox_range.clone() {
                    u += t[oy * wo + ox];
                }
            }
            if u != 0.0 {
                let i = (y * w + x) * m;
                for c in 0..m {
                    d_in[i + c] -= p[i + c] * u;
                }
            }
        }
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convops::{divnorm, pool};

    fn probe(w: usize, h: usize, m: usize) -> MultibandImage {
        MultibandImage::from_fn(w, h, m, |x, y, b| 0.1 + ((x * 5 + y * 3 + b * 7) % 11) as f64 / 9.0).unwrap()
    }

    fn weighted(out: &MultibandImage) -> f64 {
        out.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + (i % 4) as f64))
            .sum()
    }

    fn check(f: impl Fn(&MultibandImage) -> MultibandImage, analytic: Vec<f64>, img: &MultibandImage) {
        let h = 1e-6;
        for i in 0..img.len() {
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (weighted(&f(&plus)) - weighted(&f(&minus))) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn pool_gradient() {
        let img = probe(7, 6, 2);
        for alpha in [1.0, 2.0, 10.0] {
            let out = pool(&img, 3, 2, alpha).unwrap();
            let d_out: Vec<f64> = (0..out.len()).map(|i| 1.0 + (i % 4) as f64).collect();
            let grad = pool_backward(&img, &out, &d_out, 3, 2, alpha);
            check(|im| pool(im, 3, 2, alpha).unwrap(), grad, &img);
        }
    }

    #[test]
    fn divnorm_gradient() {
        let img = probe(6, 7, 3);
        let out = divnorm(&img, 3).unwrap();
        let d_out: Vec<f64> = (0..out.len()).map(|i| 1.0 + (i % 4) as f64).collect();
        let grad = divnorm_backward(&img, 3, &d_out);
        check(|im| divnorm(im, 3).unwrap(), grad, &img);
    }
}
