//! Numerically stable scalar helpers shared by the model and the kernels.

use std::f64::consts::PI;

/// `ln(sqrt(2π))`.
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `E[ln χ²₁] = ψ(1/2) + ln 2 = −(γ + ln 2)`.
pub const MEAN_LOG_CHI2_1: f64 = -1.270_362_845_461_478;

/// Largest |τ| admitted into density evaluations.
pub const TAU_CLAMP: f64 = 1.0 - 1e-9;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place log-softmax; returns the log normalizer.
pub fn log_softmax_in_place(scores: &mut [f64]) -> f64 {
    let lse = log_sum_exp(scores);
    for s in scores.iter_mut() {
        *s -= lse;
    }
    lse
}

/// Softmax of `scores`, stabilized by the maximum score.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    log_softmax_in_place(&mut out);
    for v in out.iter_mut() {
        *v = v.exp();
    }
    out
}

/// Logistic function Λ(x) = 1 / (1 + e^{-x}), evaluated without overflow.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// −1 + 2Λ(s), which equals tanh(s/2).
pub fn correlation_link(score: f64) -> f64 {
    (0.5 * score).tanh()
}

/// Fisher-type link f(c) = ln((1+c)/(1−c)), the inverse of [`correlation_link`].
pub fn fisher_link(c: f64) -> f64 {
    2.0 * c.atanh()
}

pub fn std_normal_logpdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

/// Log-density of the standardized bivariate normal with correlation `tau`.
/// Callers guarantee |tau| < 1.
pub fn bvn_logpdf_unchecked(a: f64, b: f64, tau: f64) -> f64 {
    let det = 1.0 - tau * tau;
    let quad = (a * a - 2.0 * tau * a * b + b * b) / det;
    -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::new();
        for x in iter {
            k.add(x);
        }
        k
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}
