//! Max-margin solver against a brute-force active-set enumeration of the dual.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofbench_core::maxmargin;
use spoofbench_core::{FeatureVector, Label};

const C: f64 = 1e5;

#[derive(Clone, Copy, PartialEq)]
enum State {
    Lower,
    Free,
    Upper,
}

struct Oracle {
    w: Vec<f64>,
    b: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tries every assignment of each multiplier to {0, free, C} and keeps the
/// KKT-consistent one with the lowest primal objective.
fn oracle(x: &[Vec<f64>], y: &[f64], c: f64) -> Oracle {
    let n = x.len();
    let d = x[0].len();
    let q = |i: usize, j: usize| y[i] * y[j] * dot(&x[i], &x[j]);
    let mut best: Option<(f64, Oracle)> = None;
    let mut states = vec![State::Lower; n];
    for code in 0..3usize.pow(n as u32) {
        let mut k = code;
        for s in states.iter_mut() {
            *s = [State::Lower, State::Free, State::Upper][k % 3];
            k /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| states[i] == State::Free).collect();
        let upper: Vec<usize> = (0..n).filter(|&i| states[i] == State::Upper).collect();
        let mut alpha = vec![0.0; n];
        for &i in &upper {
            alpha[i] = c;
        }
        let mut bias_fixed = None;
        if !free.is_empty() {
            let m = free.len();
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = q(i, j);
                }
                a[(r, m)] = y[i];
                rhs[r] = 1.0 - upper.iter().map(|&j| c * q(i, j)).sum::<f64>();
            }
            for (s, &j) in free.iter().enumerate() {
                a[(m, s)] = y[j];
            }
            rhs[m] = -upper.iter().map(|&j| c * y[j]).sum::<f64>();
            let svd = a.clone().svd(true, true);
            let Ok(sol) = svd.solve(&rhs, 1e-12) else { continue };
            if (&a * &sol - &rhs).norm() > 1e-7 * (1.0 + rhs.norm()) {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r];
            }
            bias_fixed = Some(sol[m]);
        }
        if free.iter().any(|&i| alpha[i] < -1e-9 || alpha[i] > c + 1e-9) {
            continue;
        }
        if (0..n).map(|i| alpha[i] * y[i]).sum::<f64>().abs() > 1e-6 * c.max(1.0) {
            continue;
        }
        let mut w = vec![0.0; d];
        for i in 0..n {
            for (wk, xk) in w.iter_mut().zip(&x[i]) {
                *wk += alpha[i] * y[i] * xk;
            }
        }
        let s: Vec<f64> = x.iter().map(|xi| dot(&w, xi)).collect();
        // Feasible bias interval from the bound multipliers.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..n {
            // yᵢ(sᵢ + b) ≥ 1 at the lower bound, ≤ 1 at the upper bound.
            let need = y[i] - s[i];
            match (states[i], y[i] > 0.0) {
                (State::Lower, true) => lo = lo.max(need),
                (State::Lower, false) => hi = hi.min(need),
                (State::Upper, true) => hi = hi.min(need),
                (State::Upper, false) => lo = lo.max(need),
                (State::Free, _) => {}
            }
        }
        let tol = 1e-7 * (1.0 + w.iter().map(|v| v.abs()).sum::<f64>());
        let b = match bias_fixed {
            Some(b) if b >= lo - tol && b <= hi + tol => b,
            Some(_) => continue,
            None if lo <= hi + tol => {
                if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else if lo.is_finite() {
                    lo
                } else {
                    hi
                }
            }
            None => continue,
        };
        let primal = 0.5 * dot(&w, &w)
            + c * s
                .iter()
                .zip(y)
                .map(|(si, yi)| (1.0 - yi * (si + b)).max(0.0))
                .sum::<f64>();
        if best.as_ref().is_none_or(|(p, _)| primal < *p) {
            best = Some((primal, Oracle { w, b }));
        }
    }
    best.expect("the dual always has a KKT point").1
}

fn instance(rng: &mut ChaCha8Rng, separable: bool) -> (Vec<Vec<f64>>, Vec<Label>) {
    loop {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let mut normal: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let len = dot(&normal, &normal).sqrt().max(1e-3);
        normal.iter_mut().for_each(|v| *v /= len);
        let offset = rng.random_range(-0.3..0.3);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        while x.len() < n {
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let side = dot(&normal, &p) + offset;
            if separable && side.abs() < 0.2 {
                continue;
            }
            let fake = if separable { side > 0.0 } else { rng.random_bool(0.5) };
            labels.push(if fake { Label::Fake } else { Label::Real });
            x.push(p);
        }
        if labels.contains(&Label::Fake) && labels.contains(&Label::Real) {
            return (x, labels);
        }
    }
}

fn check(x: &[Vec<f64>], labels: &[Label]) {
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if *l == Label::Fake { 1.0 } else { -1.0 })
        .collect();
    let expected = oracle(x, &y, C);
    let features: Vec<FeatureVector> = x.iter().map(|v| FeatureVector { values: v.clone() }).collect();
    let model = maxmargin::train(&features, labels, C).unwrap();
    let scale = expected.w.iter().map(|v| v.abs()).fold(1.0, f64::max);
    for (got, want) in model.weights.iter().zip(&expected.w) {
        assert!(
            (got - want).abs() <= 1e-3 * scale,
            "weights {:?} vs oracle {:?}",
            model.weights,
            expected.w
        );
    }
    for (xi, f) in x.iter().zip(&features) {
        let want = dot(&expected.w, xi) + expected.b;
        if want.abs() > 1e-6 * scale {
            let got = model.score(f).unwrap();
            assert_eq!(got > 0.0, want > 0.0, "decision differs at {xi:?}: {got} vs {want}");
        }
    }
}

#[test]
fn separable_instances_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..150 {
        let (x, labels) = instance(&mut rng, true);
        check(&x, &labels);
    }
}

#[test]
fn overlapping_instances_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..150 {
        let (x, labels) = instance(&mut rng, false);
        check(&x, &labels);
    }
}

#[test]
fn two_points_midpoint_boundary() {
    let x = vec![vec![-1.0, 0.0], vec![3.0, 0.0]];
    let y = [-1.0, 1.0];
    let o = oracle(&x, &y, C);
    assert!((o.w[0] - 0.5).abs() < 1e-12 && o.w[1].abs() < 1e-12);
    assert!((o.b + 0.5).abs() < 1e-12);
    check(&x, &[Label::Real, Label::Fake]);
}
