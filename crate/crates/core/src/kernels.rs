//! Weighted estimation primitives used by the M-steps.
//!
//! * [`fit_grouped_mlogit`] / [`fit_weighted_mlogit`]: damped Newton for the
//!   weighted multinomial logit, box-constrained at ±[`COEF_BOUND`].
//! * [`OlsAccumulator`] / [`fit_weighted_ols`]: weighted normal equations from
//!   streamed sufficient statistics.
//! * [`fit_log_variance`] and [`fit_fisher_link`]: the two transformed-outcome
//!   regressions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{fisher_link, log_softmax_in_place};
use crate::par::chunked_reduce;

/// Magnitude at which logit coefficients are clamped and flagged as diverged.
pub const COEF_BOUND: f64 = 30.0;

/// Eigenvalue ratio below which a normal-equation matrix is treated as singular.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Row-major `n_outcomes × n_features` for logits, a plain vector for regressions.
    pub coefficients: Vec<f64>,
    pub final_objective: f64,
    /// Gradient norm of the weight-normalized objective (projected onto the
    /// free coordinates for bounded logits).
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some coefficient reached ±[`COEF_BOUND`].
    pub diverged: bool,
    /// A ridge term was added to a singular system.
    pub ridge: bool,
}

/// Rows of (features, outcome, weight) stored contiguously.
#[derive(Debug, Clone, Default)]
pub struct WeightedDataset {
    n_features: usize,
    features: Vec<f64>,
    outcomes: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedDataset {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            ..Default::default()
        }
    }

    pub fn push(&mut self, x: &[f64], outcome: f64, weight: f64) {
        assert_eq!(x.len(), self.n_features, "feature length mismatch");
        self.features.extend_from_slice(x);
        self.outcomes.push(outcome);
        self.weights.push(weight);
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn row(&self, i: usize) -> (&[f64], f64, f64) {
        (
            &self.features[i * self.n_features..(i + 1) * self.n_features],
            self.outcomes[i],
            self.weights[i],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut any_pos = false;
        for (i, &w) in self.weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("row {i}: weight {w} is not a finite non-negative number")));
            }
            any_pos |= w > 0.0;
        }
        if !any_pos {
            return Err(Error::invalid("no row carries positive weight"));
        }
        if self.features.iter().chain(&self.outcomes).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature or outcome"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Multinomial logit

/// Feature patterns with per-outcome weight totals: the sufficient statistics of
/// a weighted multinomial logit. Identical rows may be merged into one pattern.
#[derive(Debug, Clone)]
pub struct GroupedLogitData {
    pub n_features: usize,
    pub n_outcomes: usize,
    pub features: Vec<f64>,
    pub counts: Vec<f64>,
}

impl GroupedLogitData {
    pub fn new(n_features: usize, n_outcomes: usize) -> Self {
        Self {
            n_features,
            n_outcomes,
            features: Vec::new(),
            counts: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], counts: &[f64]) {
        debug_assert_eq!(x.len(), self.n_features);
        debug_assert_eq!(counts.len(), self.n_outcomes);
        self.features.extend_from_slice(x);
        self.counts.extend_from_slice(counts);
    }

    pub fn n_groups(&self) -> usize {
        self.counts.len() / self.n_outcomes.max(1)
    }

    fn x(&self, g: usize) -> &[f64] {
        &self.features[g * self.n_features..(g + 1) * self.n_features]
    }

    fn c(&self, g: usize) -> &[f64] {
        &self.counts[g * self.n_outcomes..(g + 1) * self.n_outcomes]
    }

    pub fn total_weight(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// One group per row of `data`, outcome `base` mapped to position 0.
    pub fn from_dataset(data: &WeightedDataset, n_outcomes: usize, base: usize) -> Result<Self> {
        let mut g = Self::new(data.n_features(), n_outcomes);
        let mut counts = vec![0.0; n_outcomes];
        for i in 0..data.len() {
            let (x, y, w) = data.row(i);
            let k = y as usize;
            if y < 0.0 || y.fract() != 0.0 || k >= n_outcomes {
                return Err(Error::invalid(format!("row {i}: outcome {y} is not a class index below {n_outcomes}")));
            }
            counts.fill(0.0);
            counts[swap_base(k, base)] = w;
            g.push(x, &counts);
        }
        Ok(g)
    }
}

#[inline]
fn swap_base(k: usize, base: usize) -> usize {
    if k == base {
        0
    } else if k == 0 {
        base
    } else {
        k
    }
}

struct LogitStats {
    obj: f64,
    grad: Vec<f64>,
    // information matrix (negative Hessian)
    hess: Vec<f64>,
}

/// Weighted log-likelihood Σ_g Σ_j c_gj log p_gj for full coefficients
/// (`n_outcomes × n_features`, row 0 ignored and treated as zero).
pub fn mlogit_objective(data: &GroupedLogitData, coefs: &[f64]) -> f64 {
    let (p, j) = (data.n_features, data.n_outcomes);
    let groups: Vec<usize> = (0..data.n_groups()).collect();
    chunked_reduce(
        &groups,
        || (0.0, vec![0.0; j]),
        |acc, &g| {
            let x = data.x(g);
            let lp = &mut acc.1;
            lp[0] = 0.0;
            for k in 1..j {
                lp[k] = crate::params::dot(&coefs[k * p..(k + 1) * p], x);
            }
            log_softmax_in_place(lp);
            acc.0 += data.c(g).iter().zip(lp.iter()).map(|(c, l)| if *c > 0.0 { c * l } else { 0.0 }).sum::<f64>();
        },
        |a, b| a.0 += b.0,
    )
    .0
}

/// Gradient of [`mlogit_objective`] with respect to the non-base rows,
/// row-major `(n_outcomes − 1) × n_features`.
pub fn mlogit_gradient(data: &GroupedLogitData, coefs: &[f64]) -> Vec<f64> {
    logit_stats(data, coefs, false).grad
}

fn logit_stats(data: &GroupedLogitData, coefs: &[f64], with_hessian: bool) -> LogitStats {
    let (p, j) = (data.n_features, data.n_outcomes);
    let m = (j - 1) * p;
    let groups: Vec<usize> = (0..data.n_groups()).collect();
    let init = || LogitStats {
        obj: 0.0,
        grad: vec![0.0; m],
        hess: if with_hessian { vec![0.0; m * m] } else { Vec::new() },
    };
    let mut st = chunked_reduce(
        &groups,
        || (init(), vec![0.0; j], Vec::with_capacity(p)),
        |(acc, lp, nz), &g| {
            let x = data.x(g);
            let c = data.c(g);
            let n: f64 = c.iter().sum();
            if n <= 0.0 {
                return;
            }
            lp[0] = 0.0;
            for k in 1..j {
                lp[k] = crate::params::dot(&coefs[k * p..(k + 1) * p], x);
            }
            log_softmax_in_place(lp);
            for k in 0..j {
                if c[k] > 0.0 {
                    acc.obj += c[k] * lp[k];
                }
            }
            for k in 1..j {
                let r = c[k] - n * lp[k].exp();
                if r != 0.0 {
                    let gk = &mut acc.grad[(k - 1) * p..k * p];
                    for (gi, xi) in gk.iter_mut().zip(x) {
                        *gi += r * xi;
                    }
                }
            }
            if with_hessian {
                nz.clear();
                nz.extend((0..p).filter(|&a| x[a] != 0.0));
                for k in 1..j {
                    let pk = lp[k].exp();
                    for l in k..j {
                        let pl = lp[l].exp();
                        let w = n * (if k == l { pk } else { 0.0 } - pk * pl);
                        if w == 0.0 {
                            continue;
                        }
                        let (r0, c0) = ((k - 1) * p, (l - 1) * p);
                        for (ia, &a) in nz.iter().enumerate() {
                            let wa = w * x[a];
                            let row = &mut acc.hess[(r0 + a) * m + c0..(r0 + a) * m + c0 + p];
                            let tail = if k == l { &nz[ia..] } else { &nz[..] };
                            for &b in tail {
                                row[b] += wa * x[b];
                            }
                        }
                    }
                }
            }
        },
        |a, b| {
            a.0.obj += b.0.obj;
            for (x, y) in a.0.grad.iter_mut().zip(&b.0.grad) {
                *x += y;
            }
            for (x, y) in a.0.hess.iter_mut().zip(&b.0.hess) {
                *x += y;
            }
        },
    )
    .0;
    if with_hessian {
        // fill the lower triangle from the accumulated upper triangle
        for r in 0..m {
            for c in 0..r {
                st.hess[r * m + c] = st.hess[c * m + r];
            }
        }
    }
    st
}

/// Solves `a x = b` for symmetric positive semi-definite `a` (row-major `n×n`).
/// Falls back to a ridge λ = 1e−8·trace(a) (growing tenfold) when Cholesky fails.
pub fn solve_psd(a: &[f64], b: &[f64], n: usize) -> (Vec<f64>, bool) {
    let m = DMatrix::from_row_slice(n, n, a);
    let rhs = DVector::from_column_slice(b);
    if let Some(ch) = m.clone().cholesky() {
        let x = ch.solve(&rhs);
        if x.iter().all(|v| v.is_finite()) {
            return (x.as_slice().to_vec(), false);
        }
    }
    let tr = m.trace().abs().max(1e-300);
    let mut lambda = 1e-8 * tr;
    for _ in 0..20 {
        let mut reg = m.clone();
        for i in 0..n {
            reg[(i, i)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            let x = ch.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                return (x.as_slice().to_vec(), true);
            }
        }
        lambda *= 10.0;
    }
    (vec![0.0; n], true)
}

fn projected_norm(grad: &[f64], beta: &[f64], bound: f64) -> (f64, Vec<bool>) {
    let mut free = vec![true; grad.len()];
    let mut s = 0.0;
    for (i, (&g, &b)) in grad.iter().zip(beta).enumerate() {
        let blocked = (b >= bound && g > 0.0) || (b <= -bound && g < 0.0);
        if blocked {
            free[i] = false;
        } else {
            s += g * g;
        }
    }
    (s.sqrt(), free)
}

/// Damped Newton maximization of the grouped weighted multinomial
/// log-likelihood, warm-started from `init` (full `n_outcomes × n_features`,
/// row 0 is the base and stays zero).
pub fn fit_grouped_mlogit(
    data: &GroupedLogitData,
    init: &[f64],
    opts: &KernelOptions,
) -> Result<FitReport> {
    let (p, j) = (data.n_features, data.n_outcomes);
    if j < 2 {
        return Err(Error::invalid("multinomial logit needs at least two outcomes"));
    }
    if init.len() != j * p {
        return Err(Error::invalid("initial coefficient length mismatch"));
    }
    let total = data.total_weight();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Kernel {
            kernel: "mlogit",
            message: "total weight must be positive".into(),
        });
    }
    let m = (j - 1) * p;
    let mut full = init.to_vec();
    full[..p].fill(0.0);
    for v in &mut full[p..] {
        *v = v.clamp(-COEF_BOUND, COEF_BOUND);
    }
    let mut ridge_used = false;
    let mut iterations = 0;
    let mut stats = logit_stats(data, &full, false);
    let mut converged = false;
    let mut gnorm;
    loop {
        let (g, free) = projected_norm(&stats.grad, &full[p..], COEF_BOUND);
        gnorm = g / total;
        if gnorm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        if stats.hess.is_empty() {
            stats = logit_stats(data, &full, true);
        }
        // Newton direction on the free coordinates: (−H) d = g
        let idx: Vec<usize> = (0..m).filter(|&i| free[i]).collect();
        let nf = idx.len();
        let mut a = vec![0.0; nf * nf];
        let mut b = vec![0.0; nf];
        for (r, &ir) in idx.iter().enumerate() {
            b[r] = stats.grad[ir];
            for (c, &ic) in idx.iter().enumerate() {
                a[r * nf + c] = stats.hess[ir * m + ic];
            }
        }
        let (d, ridge) = solve_psd(&a, &b, nf);
        ridge_used |= ridge;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = full.clone();
            for (r, &ir) in idx.iter().enumerate() {
                let v = &mut trial[p + ir];
                *v = (*v + step * d[r]).clamp(-COEF_BOUND, COEF_BOUND);
            }
            let ts = logit_stats(data, &trial, false);
            if ts.obj.is_finite() && ts.obj >= stats.obj {
                accepted = Some((trial, ts));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((t, ts)) => {
                let changed = t != full;
                full = t;
                stats = ts;
                if !changed {
                    break;
                }
            }
            None => break,
        }
    }
    let diverged = full[p..].iter().any(|v| v.abs() >= COEF_BOUND);
    Ok(FitReport {
        coefficients: full,
        final_objective: stats.obj,
        gradient_norm: gnorm,
        iterations,
        converged: converged && !diverged,
        diverged,
        ridge: ridge_used,
    })
}

/// Weighted multinomial logit on a row dataset with integer outcomes in
/// `0..n_outcomes`; coefficients of `base` are fixed at zero. The returned
/// matrix is indexed by the original outcome labels.
pub fn fit_weighted_mlogit(
    data: &WeightedDataset,
    n_outcomes: usize,
    base: usize,
    opts: &KernelOptions,
) -> Result<FitReport> {
    data.validate()?;
    if base >= n_outcomes {
        return Err(Error::invalid("base outcome out of range"));
    }
    let g = GroupedLogitData::from_dataset(data, n_outcomes, base)?;
    let p = data.n_features();
    let mut rep = fit_grouped_mlogit(&g, &vec![0.0; n_outcomes * p], opts)?;
    if base != 0 {
        let mut out = vec![0.0; n_outcomes * p];
        for k in 0..n_outcomes {
            let src = swap_base(k, base);
            out[k * p..(k + 1) * p].copy_from_slice(&rep.coefficients[src * p..(src + 1) * p]);
        }
        rep.coefficients = out;
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Weighted least squares

/// Running XᵀWX, XᵀWy, yᵀWy and Σw. Only the upper triangle of XᵀWX is kept
/// while accumulating.
#[derive(Debug, Clone)]
pub struct OlsAccumulator {
    p: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: f64,
    sw: f64,
    n: usize,
    nz: Vec<usize>,
}

impl OlsAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            p,
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
            yty: 0.0,
            sw: 0.0,
            n: 0,
            nz: Vec::with_capacity(p),
        }
    }

    #[inline]
    pub fn add(&mut self, x: &[f64], y: f64, w: f64) {
        if w == 0.0 {
            return;
        }
        let p = self.p;
        self.nz.clear();
        self.nz.extend((0..p).filter(|&a| x[a] != 0.0));
        for (i, &a) in self.nz.iter().enumerate() {
            let wa = w * x[a];
            let row = &mut self.xtx[a * p..(a + 1) * p];
            for &b in &self.nz[i..] {
                row[b] += wa * x[b];
            }
            self.xty[a] += wa * y;
        }
        self.yty += w * y * y;
        self.sw += w;
        self.n += 1;
    }

    pub fn merge(&mut self, other: &OlsAccumulator) {
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        self.yty += other.yty;
        self.sw += other.sw;
        self.n += other.n;
    }

    pub fn total_weight(&self) -> f64 {
        self.sw
    }

    /// Full symmetric XᵀWX, row-major.
    pub fn gram(&self) -> Vec<f64> {
        let p = self.p;
        let mut g = self.xtx.clone();
        for a in 0..p {
            for b in 0..a {
                g[a * p + b] = g[b * p + a];
            }
        }
        g
    }

    pub fn xty(&self) -> &[f64] {
        &self.xty
    }

    /// Weighted sum of squared residuals Σ w (y − xβ)².
    pub fn ssr(&self, beta: &[f64]) -> f64 {
        let g = self.gram();
        let p = self.p;
        let mut quad = 0.0;
        for a in 0..p {
            quad += beta[a] * crate::params::dot(&g[a * p..(a + 1) * p], beta);
        }
        self.yty - 2.0 * crate::params::dot(&self.xty, beta) + quad
    }

    pub fn solve(&self) -> Result<FitReport> {
        if !(self.sw > 0.0) {
            return Err(Error::Kernel {
                kernel: "ols",
                message: "no positive weight".into(),
            });
        }
        let (beta, ridge) = solve_symmetric(&self.gram(), &self.xty, self.p);
        let grad = ols_gradient_from(self, &beta);
        let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt() / self.sw;
        Ok(FitReport {
            final_objective: self.ssr(&beta),
            gradient_norm: gn,
            coefficients: beta,
            iterations: 1,
            converged: !ridge,
            diverged: false,
            ridge,
        })
    }
}

fn ols_gradient_from(acc: &OlsAccumulator, beta: &[f64]) -> Vec<f64> {
    let g = acc.gram();
    let p = acc.p;
    (0..p)
        .map(|a| 2.0 * (crate::params::dot(&g[a * p..(a + 1) * p], beta) - acc.xty[a]))
        .collect()
}

/// Solves a symmetric normal-equation system. When the smallest eigenvalue is
/// at most [`RANK_TOL`] times the largest, a ridge λ = RANK_TOL·λ_max is
/// added, which picks (nearly) the minimum-norm solution; the flag reports it.
pub fn solve_symmetric(a: &[f64], b: &[f64], n: usize) -> (Vec<f64>, bool) {
    let m = DMatrix::from_row_slice(n, n, a);
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, |x, y| x.max(y.abs()));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let rhs = DVector::from_column_slice(b);
    if max > 0.0 && min > RANK_TOL * max {
        if let Some(ch) = m.clone().cholesky() {
            return (ch.solve(&rhs).as_slice().to_vec(), false);
        }
    }
    let lambda = RANK_TOL * max.max(1e-300);
    // (Q Λ Qᵀ + λI)⁻¹ b via the eigendecomposition
    let q = &eig.eigenvectors;
    let qtb = q.transpose() * &rhs;
    let scaled = DVector::from_iterator(
        n,
        qtb.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(v, &l)| v / (l.max(0.0) + lambda)),
    );
    ((q * scaled).as_slice().to_vec(), true)
}

/// Σ w (y − xβ)² over a row dataset.
pub fn ols_objective(data: &WeightedDataset, beta: &[f64]) -> f64 {
    (0..data.len())
        .map(|i| {
            let (x, y, w) = data.row(i);
            let r = y - crate::params::dot(x, beta);
            w * r * r
        })
        .sum()
}

/// Gradient of [`ols_objective`].
pub fn ols_gradient(data: &WeightedDataset, beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; data.n_features()];
    for i in 0..data.len() {
        let (x, y, w) = data.row(i);
        let r = y - crate::params::dot(x, beta);
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi -= 2.0 * w * r * xi;
        }
    }
    g
}

fn accumulate(data: &WeightedDataset, transform: impl Fn(f64) -> f64 + Sync) -> OlsAccumulator {
    let p = data.n_features();
    let idx: Vec<usize> = (0..data.len()).collect();
    chunked_reduce(
        &idx,
        || OlsAccumulator::new(p),
        |acc, &i| {
            let (x, y, w) = data.row(i);
            acc.add(x, transform(y), w);
        },
        |a, b| a.merge(&b),
    )
}

pub fn fit_weighted_ols(data: &WeightedDataset) -> Result<FitReport> {
    data.validate()?;
    accumulate(data, |y| y).solve()
}

/// Smallest squared residual admitted before taking logs.
pub const MIN_SQ_RESIDUAL: f64 = 1e-300;

/// Weighted OLS of ln(r²) on the given features; the outcome column of `data`
/// holds the residuals r.
pub fn fit_log_variance(data: &WeightedDataset) -> Result<FitReport> {
    data.validate()?;
    accumulate(data, |r| (r * r).max(MIN_SQ_RESIDUAL).ln()).solve()
}

/// Largest |c| admitted before the Fisher transform.
pub const FISHER_CLAMP: f64 = 1.0 - 1e-6;

/// Weighted OLS of ln((1+c)/(1−c)) on the given features; the outcome column
/// holds covariance estimates c, clamped to ±[`FISHER_CLAMP`].
pub fn fit_fisher_link(data: &WeightedDataset) -> Result<FitReport> {
    data.validate()?;
    accumulate(data, |c| fisher_link(c.clamp(-FISHER_CLAMP, FISHER_CLAMP))).solve()
}
