//! Linear max-margin classifier with a large hinge penalty.
//!
//! Training minimizes `½‖w‖² + C Σ max(0, 1 − yᵢ(w·xᵢ + b))` with an
//! unregularized bias. The dual is solved by sequential minimal optimization
//! with second-order working-set selection over a precomputed linear Gram
//! matrix; the stopping tolerance is tightened until the duality gap is at
//! most `1e-6 · (1 + |primal|)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, Strides};
use crate::imagecore::FeatureVector;
use crate::label::Label;

/// Hinge penalty used on top of deep representations.
pub const DEFAULT_C: f64 = 1e5;

const TAU: f64 = 1e-12;
const GAP_TOLERANCE: f64 = 1e-6;

/// Per-dimension affine map `x' = (x − mean) · scale` fitted on training
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaler {
    /// Dimensions with zero variance are centered but not scaled.
    pub fn fit(features: &[FeatureVector]) -> Self {
        let d = features[0].dim();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(&f.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let std = (s / n).sqrt();
                if std > 1e-12 {
                    1.0 / std
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn transform_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.scale) {
            *o = (v - m) * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub iterations: usize,
    pub primal_objective: f64,
    pub duality_gap: f64,
    pub support_vectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub scaler: Option<Scaler>,
    pub info: TrainingInfo,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub c: f64,
    /// Fit a [`Scaler`] on the training features and store it in the model.
    pub standardize: bool,
    pub max_iterations: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            standardize: false,
            max_iterations: 10_000_000,
        }
    }
}

/// Trains on raw features with penalty `c`.
pub fn train(features: &[FeatureVector], labels: &[Label], c: f64) -> Result<LinearModel> {
    train_with(
        features,
        labels,
        &TrainOptions {
            c,
            ..TrainOptions::default()
        },
    )
}

pub fn train_with(features: &[FeatureVector], labels: &[Label], opts: &TrainOptions) -> Result<LinearModel> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(opts.c > 0.0 && opts.c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "penalty C must be positive, got {}",
            opts.c
        )));
    }
    let n_fake = labels.iter().filter(|&&l| l == Label::Fake).count();
    if n_fake == 0 || n_fake == labels.len() {
        return Err(Error::DegenerateLabels(format!(
            "training needs both classes ({} fake of {} samples)",
            n_fake,
            labels.len()
        )));
    }
    let d = features[0].dim();
    if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.dim() != d) {
        return Err(Error::Shape(format!(
            "feature vector {i} has dimension {}, expected {d}",
            f.dim()
        )));
    }

    let n = features.len();
    let scaler = opts.standardize.then(|| Scaler::fit(features));
    let mut x = vec![0.0; n * d];
    for (row, f) in x.chunks_exact_mut(d.max(1)).zip(features) {
        match &scaler {
            Some(s) => s.transform_into(&f.values, row),
            None => row.copy_from_slice(&f.values),
        }
    }
    let mut gram = vec![0.0; n * n];
    gemm(
        n,
        d,
        n,
        &x,
        Strides::row_major(d),
        &x,
        Strides::transposed(d),
        0.0,
        &mut gram,
        Strides::row_major(n),
    );
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();

    let mut smo = Smo::new(&gram, &y, opts.c);
    let mut eps = 1e-3;
    let solution = loop {
        smo.solve(eps, opts.max_iterations);
        let sol = smo.solution();
        if sol.gap <= GAP_TOLERANCE * (1.0 + sol.primal.abs()) || eps < 1e-15 || smo.iterations >= opts.max_iterations {
            break sol;
        }
        eps *= 0.1;
    };
    if solution.gap > GAP_TOLERANCE * (1.0 + solution.primal.abs()) {
        log::warn!(
            "max-margin training stopped with duality gap {:.3e} (primal {:.6e})",
            solution.gap,
            solution.primal
        );
    }

    let mut weights = vec![0.0; d];
    for ((row, &a), &yi) in x.chunks_exact(d.max(1)).zip(&smo.alpha).zip(&y) {
        if a != 0.0 {
            let coef = a * yi;
            for (w, v) in weights.iter_mut().zip(row) {
                *w += coef * v;
            }
        }
    }
    Ok(LinearModel {
        weights,
        bias: solution.bias,
        c: opts.c,
        scaler,
        info: TrainingInfo {
            iterations: smo.iterations,
            primal_objective: solution.primal,
            duality_gap: solution.gap,
            support_vectors: smo.alpha.iter().filter(|&&a| a > 0.0).count(),
        },
    })
}

/// `w · x + b`, after the model's scaler when present. Positive scores lean
/// towards attack.
pub fn score(model: &LinearModel, x: &FeatureVector) -> Result<f64> {
    if x.dim() != model.weights.len() {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match model dimension {}",
            x.dim(),
            model.weights.len()
        )));
    }
    let dot = match &model.scaler {
        Some(s) => x
            .values
            .iter()
            .zip(&model.weights)
            .zip(s.mean.iter().zip(&s.scale))
            .map(|((v, w), (m, sc))| (v - m) * sc * w)
            .sum::<f64>(),
        None => x.values.iter().zip(&model.weights).map(|(v, w)| v * w).sum(),
    };
    Ok(dot + model.bias)
}

impl LinearModel {
    pub fn score(&self, x: &FeatureVector) -> Result<f64> {
        score(self, x)
    }
}

struct Solution {
    bias: f64,
    primal: f64,
    gap: f64,
}

struct Smo<'a> {
    gram: &'a [f64],
    y: &'a [f64],
    c: f64,
    n: usize,
    alpha: Vec<f64>,
    /// Gradient of the dual objective, `Qα − 1`.
    grad: Vec<f64>,
    iterations: usize,
}

impl<'a> Smo<'a> {
    fn new(gram: &'a [f64], y: &'a [f64], c: f64) -> Self {
        let n = y.len();
        Self {
            gram,
            y,
            c,
            n,
            alpha: vec![0.0; n],
            grad: vec![-1.0; n],
            iterations: 0,
        }
    }

    #[inline]
    fn k(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }

    fn in_up(&self, t: usize) -> bool {
        if self.y[t] > 0.0 {
            self.alpha[t] < self.c
        } else {
            self.alpha[t] > 0.0
        }
    }

    fn in_low(&self, t: usize) -> bool {
        if self.y[t] > 0.0 {
            self.alpha[t] > 0.0
        } else {
            self.alpha[t] < self.c
        }
    }

    /// Maximal violating pair with second-order selection of the second index.
    fn select(&self, eps: f64) -> Option<(usize, usize)> {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = None;
        for t in 0..self.n {
            if self.in_up(t) && -self.y[t] * self.grad[t] >= gmax {
                gmax = -self.y[t] * self.grad[t];
                i = Some(t);
            }
        }
        let i = i?;
        let mut gmax2 = f64::NEG_INFINITY;
        let mut best = f64::INFINITY;
        let mut j = None;
        for t in 0..self.n {
            if !self.in_low(t) {
                continue;
            }
            let yg = self.y[t] * self.grad[t];
            gmax2 = gmax2.max(yg);
            let b = gmax + yg;
            if b > 0.0 {
                let mut a = self.k(i, i) + self.k(t, t) - 2.0 * self.k(i, t);
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj <= best {
                    best = obj;
                    j = Some(t);
                }
            }
        }
        if gmax + gmax2 < eps {
            return None;
        }
        j.map(|j| (i, j))
    }

    fn solve(&mut self, eps: f64, max_iterations: usize) {
        let c = self.c;
        while self.iterations < max_iterations {
            let Some((i, j)) = self.select(eps) else {
                break;
            };
            self.iterations += 1;
            let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
            let mut quad = self.k(i, i) + self.k(j, j) - 2.0 * self.k(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let (mut ai, mut aj) = (old_i, old_j);
            if self.y[i] != self.y[j] {
                let delta = (-self.grad[i] - self.grad[j]) / quad;
                let diff = ai - aj;
                ai += delta;
                aj += delta;
                if diff > 0.0 {
                    if aj < 0.0 {
                        aj = 0.0;
                        ai = diff;
                    }
                } else if ai < 0.0 {
                    ai = 0.0;
                    aj = -diff;
                }
                if diff > 0.0 {
                    if ai > c {
                        ai = c;
                        aj = c - diff;
                    }
                } else if aj > c {
                    aj = c;
                    ai = c + diff;
                }
            } else {
                let delta = (self.grad[i] - self.grad[j]) / quad;
                let sum = ai + aj;
                ai -= delta;
                aj += delta;
                if sum > c {
                    if ai > c {
                        ai = c;
                        aj = sum - c;
                    }
                } else if aj < 0.0 {
                    aj = 0.0;
                    ai = sum;
                }
                if sum > c {
                    if aj > c {
                        aj = c;
                        ai = sum - c;
                    }
                } else if ai < 0.0 {
                    ai = 0.0;
                    aj = sum;
                }
            }
            self.alpha[i] = ai;
            self.alpha[j] = aj;
            let (di, dj) = (ai - old_i, aj - old_j);
            let (yi, yj) = (self.y[i], self.y[j]);
            for t in 0..self.n {
                let yt = self.y[t];
                self.grad[t] += yt * (yi * self.k(t, i) * di + yj * self.k(t, j) * dj);
            }
        }
    }

    /// Bias, primal objective and duality gap of the current iterate.
    fn solution(&self) -> Solution {
        // Margin scores without bias: sᵢ = Σⱼ αⱼ yⱼ Kᵢⱼ = yᵢ (gradᵢ + 1).
        let s: Vec<f64> = (0..self.n).map(|i| self.y[i] * (self.grad[i] + 1.0)).collect();
        let w_sq: f64 = (0..self.n).map(|i| self.alpha[i] * self.y[i] * s[i]).sum();
        let dual = self.alpha.iter().sum::<f64>() - 0.5 * w_sq;

        // Hinge sum is convex piecewise linear in b; its slope starts at
        // −(#positives) and rises by one at every breakpoint.
        let mut breakpoints: Vec<f64> = (0..self.n).map(|i| self.y[i] - s[i]).collect();
        breakpoints.sort_by(f64::total_cmp);
        let n_pos = self.y.iter().filter(|&&v| v > 0.0).count();
        let lo = breakpoints[n_pos - 1];
        let hi = breakpoints.get(n_pos).copied().unwrap_or(f64::INFINITY);
        let bias = self.smo_bias().clamp(lo, hi);

        let hinge: f64 = (0..self.n).map(|i| (1.0 - self.y[i] * (s[i] + bias)).max(0.0)).sum();
        let primal = 0.5 * w_sq + self.c * hinge;
        Solution {
            bias,
            primal,
            gap: (primal - dual).max(0.0),
        }
    }

    /// Bias from the KKT conditions: averaged over free support vectors, or
    /// the midpoint of the feasible interval when none are free.
    fn smo_bias(&self) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum, mut free) = (0.0, 0usize);
        for t in 0..self.n {
            let yg = self.y[t] * self.grad[t];
            if self.alpha[t] >= self.c {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if self.alpha[t] <= 0.0 {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                sum += yg;
            }
        }
        let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
        -rho
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec())
    }

    #[test]
    fn symmetric_pair() {
        let model = train(
            &[fv(&[1.0, 0.0]), fv(&[-1.0, 0.0])],
            &[Label::Fake, Label::Real],
            DEFAULT_C,
        )
        .unwrap();
        assert!((model.weights[0] - 1.0).abs() < 1e-9);
        assert!(model.weights[1].abs() < 1e-12);
        assert!(model.bias.abs() < 1e-12);
        assert!((score(&model, &fv(&[1.0, 0.0])).unwrap() - 1.0).abs() < 1e-9);
        assert!((score(&model, &fv(&[-1.0, 0.0])).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(score(&model, &fv(&[0.0, 0.0])).unwrap(), model.bias);
    }

    #[test]
    fn duplicated_data_same_boundary() {
        let xs = [
            fv(&[2.0, 1.0]),
            fv(&[1.5, 2.5]),
            fv(&[3.0, 0.0]),
            fv(&[-1.0, -0.5]),
            fv(&[0.0, -2.0]),
            fv(&[-2.0, 1.0]),
        ];
        let ys = [
            Label::Fake,
            Label::Fake,
            Label::Fake,
            Label::Real,
            Label::Real,
            Label::Real,
        ];
        let once = train(&xs, &ys, DEFAULT_C).unwrap();
        let xs2: Vec<_> = xs.iter().chain(xs.iter()).cloned().collect();
        let ys2: Vec<_> = ys.iter().chain(ys.iter()).copied().collect();
        let twice = train(&xs2, &ys2, DEFAULT_C).unwrap();
        for (a, b) in once.weights.iter().zip(&twice.weights) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((once.bias - twice.bias).abs() < 1e-6);
    }

    #[test]
    fn score_is_linear() {
        let model = LinearModel {
            weights: vec![0.5, -2.0],
            bias: 0.25,
            c: DEFAULT_C,
            scaler: None,
            info: TrainingInfo {
                iterations: 0,
                primal_objective: 0.0,
                duality_gap: 0.0,
                support_vectors: 0,
            },
        };
        let x = fv(&[1.5, 0.75]);
        let ax = fv(&[4.5, 2.25]);
        let lhs = score(&model, &ax).unwrap() - model.bias;
        let rhs = 3.0 * (score(&model, &x).unwrap() - model.bias);
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(matches!(score(&model, &fv(&[1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train(&[fv(&[1.0]), fv(&[2.0])], &[Label::Real, Label::Real], DEFAULT_C),
            Err(Error::DegenerateLabels(_))
        ));
        assert!(matches!(
            train(&[fv(&[1.0]), fv(&[2.0, 1.0])], &[Label::Real, Label::Fake], DEFAULT_C),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn standardized_model_scores_raw_inputs() {
        let xs = [
            fv(&[100.0, 0.1]),
            fv(&[102.0, 0.3]),
            fv(&[98.0, -0.2]),
            fv(&[101.0, -0.4]),
        ];
        let ys = [Label::Fake, Label::Fake, Label::Real, Label::Real];
        let model = train_with(
            &xs,
            &ys,
            &TrainOptions {
                standardize: true,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!(score(&model, x).unwrap() * y.sign() >= 1.0 - 1e-4);
        }
    }

    #[test]
    fn non_separable_data_converges() {
        let xs = [fv(&[0.0]), fv(&[1.0]), fv(&[2.0]), fv(&[3.0])];
        let ys = [Label::Real, Label::Fake, Label::Real, Label::Fake];
        let model = train(&xs, &ys, 10.0).unwrap();
        assert!(model.info.duality_gap <= 1e-6 * (1.0 + model.info.primal_objective.abs()));
    }
}
