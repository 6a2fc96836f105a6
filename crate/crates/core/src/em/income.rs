//! Income M-step.
//!
//! One sweep over the weighted rows gathers three linear systems at the
//! current parameters: generalized least squares for μ on quasi-differenced
//! rows, and Fisher-scoring systems for σ and ξ. The row scores are cached,
//! so each block step is then searched (μ, then σ, then ξ) against the
//! expected complete-data log-likelihood without touching the design again.
//! A step is taken only if that objective does not decrease, which keeps EM
//! monotone. κʸ is refit by weighted multinomial logit.

use std::collections::HashMap;

use crate::design::Design;
use crate::error::Result;
use crate::kernels::{fit_grouped_mlogit, solve_symmetric, GroupedLogitData, OlsAccumulator};
use crate::math::{correlation_link, KahanSum, LN_SQRT_2PI, MEAN_LOG_CHI2_1};
use crate::model::{clamp_tau, sd_from_score, SD_FLOOR};
use crate::par::chunked_reduce;
use crate::params::{dot, IncomeParams};
use crate::simulate::SeededStream;
use crate::types::IndividualHistory;

use super::{EmOptions, Posterior};

/// Income-class logit patterns (fixed covariates × transition class), built
/// once per panel.
#[derive(Debug, Clone)]
pub struct IncomeLayout {
    kappa: GroupedLogitData,
    zid: Vec<usize>,
}

impl IncomeLayout {
    pub fn new(panel: &[IndividualHistory], design: Design) -> Self {
        let mut ids: HashMap<(bool, usize, u64), usize> = HashMap::new();
        let mut kappa = GroupedLogitData::new(design.kappa_y_len(), design.k_y);
        let mut row = vec![0.0; design.kappa_y_len()];
        let zero = vec![0.0; design.k_y];
        let mut zid = Vec::with_capacity(panel.len());
        for h in panel {
            let key = (h.zf.female, h.zf.educ.code(), h.zf.first_xp.to_bits());
            let next = ids.len();
            let id = *ids.entry(key).or_insert_with(|| {
                for km in 0..design.k_m {
                    design.kappa_y_row(&h.zf, km, &mut row);
                    kappa.push(&row, &zero);
                }
                next
            });
            zid.push(id);
        }
        Self { kappa, zid }
    }
}

/// Design rows of the employed years of one class cell, reused across cells.
#[derive(Debug, Clone, Default)]
struct CellRows {
    t: Vec<usize>,
    y: Vec<f64>,
    /// Whether the previous employed year is adjacent, so that a correlation
    /// term applies.
    linked: Vec<bool>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    xi: Vec<f64>,
}

impl CellRows {
    fn len(&self) -> usize {
        self.t.len()
    }

    fn fill(&mut self, h: &IndividualHistory, km: usize, ky: usize, d: &Design) {
        let (nm, ns, nx) = (d.mu_len(), d.sigma_len(), d.xi_len());
        self.t.clear();
        self.y.clear();
        self.linked.clear();
        let mut prev: Option<usize> = None;
        for (t, r) in h.years.iter().enumerate() {
            match r.log_wage {
                Some(y) if r.state.is_employed() => {
                    self.linked.push(matches!(prev, Some(tp) if h.years[tp].year + 1 == r.year));
                    self.t.push(t);
                    self.y.push(y);
                    prev = Some(t);
                }
                _ => prev = None,
            }
        }
        let n = self.t.len();
        self.mu.resize(n * nm, 0.0);
        self.sigma.resize(n * ns, 0.0);
        self.xi.resize(n * nx, 0.0);
        for k in 0..n {
            let r = &h.years[self.t[k]];
            d.mu_row(r.state, &r.zv, &h.zf, ky, &mut self.mu[k * nm..(k + 1) * nm]);
            d.sigma_row(r.state, &r.zv, &h.zf, km, ky, &mut self.sigma[k * ns..(k + 1) * ns]);
            let xi = &mut self.xi[k * nx..(k + 1) * nx];
            if self.linked[k] {
                let rp = &h.years[self.t[k - 1]];
                d.xi_row(r.state, rp.state, &r.zv, &rp.zv, km, ky, xi);
            } else {
                xi.fill(0.0);
            }
        }
    }

    fn mu_row(&self, k: usize) -> &[f64] {
        let n = self.mu.len() / self.len();
        &self.mu[k * n..(k + 1) * n]
    }

    fn sigma_row(&self, k: usize) -> &[f64] {
        let n = self.sigma.len() / self.len();
        &self.sigma[k * n..(k + 1) * n]
    }

    fn xi_row(&self, k: usize) -> &[f64] {
        let n = self.xi.len() / self.len();
        &self.xi[k * n..(k + 1) * n]
    }

    /// Scores (μ, s, η) under `p`; η is NaN where no correlation term applies.
    fn scores(&self, k: usize, p: &IncomeParams) -> (f64, f64, f64) {
        let eta = if self.linked[k] { dot(&p.xi, self.xi_row(k)) } else { f64::NAN };
        (dot(&p.mu, self.mu_row(k)), dot(&p.sigma, self.sigma_row(k)), eta)
    }
}

fn tau_of(eta: f64) -> f64 {
    clamp_tau(correlation_link(eta))
}

/// Log-likelihood of one cell's rows from cached scores; `eta` is NaN on the
/// first year of each employed run.
fn cell_loglik(y: &[f64], mu: &[f64], s: &[f64], eta: &[f64]) -> f64 {
    let mut ll = 0.0;
    let mut prev_yt = 0.0;
    for k in 0..y.len() {
        let sd = sd_from_score(s[k]);
        let yt = (y[k] - mu[k]) / sd;
        ll -= LN_SQRT_2PI + sd.ln();
        if eta[k].is_nan() {
            ll -= 0.5 * yt * yt;
        } else {
            let tau = tau_of(eta[k]);
            let u = 1.0 - tau * tau;
            let e = yt - tau * prev_yt;
            ll -= 0.5 * u.ln() + 0.5 * e * e / u;
        }
        prev_yt = yt;
    }
    ll
}

/// (individual, class cell, weight) triples carrying non-negligible weight.
fn active_cells(post: &Posterior, prune: f64) -> Vec<(u32, u32, f64)> {
    let mut out = Vec::new();
    for i in 0..post.len() {
        for (c, &w) in post.row(i).iter().enumerate() {
            if w > prune {
                out.push((i as u32, c as u32, w));
            }
        }
    }
    out
}

/// Scores of every employed row of every active cell, in cell order.
#[derive(Debug, Clone, Default)]
struct Cache {
    start: Vec<usize>,
    w: Vec<f64>,
    y: Vec<f64>,
    mu: Vec<f64>,
    s: Vec<f64>,
    eta: Vec<f64>,
}

impl Cache {
    fn q_with(&self, mu: &[f64], s: &[f64], eta: &[f64]) -> f64 {
        let cells: Vec<usize> = (0..self.w.len()).collect();
        chunked_reduce(
            &cells,
            KahanSum::default,
            |acc, &c| {
                let (a, b) = (self.start[c], self.start[c + 1]);
                acc.add(self.w[c] * cell_loglik(&self.y[a..b], &mu[a..b], &s[a..b], &eta[a..b]));
            },
            |a, b| a.merge(&b),
        )
        .value()
    }

    fn q(&self) -> f64 {
        self.q_with(&self.mu, &self.s, &self.eta)
    }
}

/// Normal equations gathered in one sweep: GLS for μ and the scoring
/// systems for σ and ξ, all at the current parameters.
struct Sweep {
    cache: Cache,
    mu: OlsAccumulator,
    sigma: OlsAccumulator,
    xi: OlsAccumulator,
}

fn sweep(panel: &[IndividualHistory], active: &[(u32, u32, f64)], p: &IncomeParams) -> Sweep {
    let d = p.design;
    let (nm, ns, nx) = (d.mu_len(), d.sigma_len(), d.xi_len());
    let init = || {
        (
            Sweep {
                cache: Cache::default(),
                mu: OlsAccumulator::new(nm),
                sigma: OlsAccumulator::new(ns),
                xi: OlsAccumulator::new(nx),
            },
            CellRows::default(),
            [Vec::new(), Vec::new(), Vec::new()],
            vec![0.0; nm],
        )
    };
    let (mut out, ..) = chunked_reduce(
        active,
        init,
        |(acc, rows, [sd, yt, tau], xt), &(i, c, w)| {
            let (km, ky) = (c as usize / d.k_y, c as usize % d.k_y);
            rows.fill(&panel[i as usize], km, ky, &d);
            let n = rows.len();
            let cache = &mut acc.cache;
            cache.start.push(cache.y.len());
            cache.w.push(w);
            sd.clear();
            yt.clear();
            tau.clear();
            for k in 0..n {
                let (mu, s, eta) = rows.scores(k, p);
                let sk = sd_from_score(s);
                sd.push(sk);
                yt.push((rows.y[k] - mu) / sk);
                tau.push(if eta.is_nan() { 0.0 } else { tau_of(eta) });
                cache.y.push(rows.y[k]);
                cache.mu.push(mu);
                cache.s.push(s);
                cache.eta.push(eta);
            }
            for k in 0..n {
                let linked = rows.linked[k];
                // GLS on the quasi-differenced row
                let cur = rows.mu_row(k);
                if linked {
                    let prev = rows.mu_row(k - 1);
                    let (rt, root) = (tau[k], (1.0 - tau[k] * tau[k]).sqrt());
                    for j in 0..nm {
                        xt[j] = (cur[j] / sd[k] - rt * prev[j] / sd[k - 1]) / root;
                    }
                    acc.mu.add(xt, (rows.y[k] / sd[k] - rt * rows.y[k - 1] / sd[k - 1]) / root, w);
                } else {
                    for j in 0..nm {
                        xt[j] = cur[j] / sd[k];
                    }
                    acc.mu.add(xt, rows.y[k] / sd[k], w);
                }

                // log-variance scoring: ∂ℓ/∂s_k = −½ + ½ỹ_k·(Aỹ)_k, metric ½xxᵀ
                if sd[k] > SD_FLOOR {
                    let mut dq = if linked {
                        (yt[k] - tau[k] * yt[k - 1]) / (1.0 - tau[k] * tau[k])
                    } else {
                        yt[k]
                    };
                    if k + 1 < n && rows.linked[k + 1] {
                        let tn = tau[k + 1];
                        dq -= tn * (yt[k + 1] - tn * yt[k]) / (1.0 - tn * tn);
                    }
                    let g = -0.5 + 0.5 * yt[k] * dq;
                    acc.sigma.add(rows.sigma_row(k), 2.0 * g, 0.5 * w);
                }

                // correlation scoring on the Fisher scale
                if linked {
                    let (a, b, t) = (yt[k], yt[k - 1], tau[k]);
                    let u = 1.0 - t * t;
                    let e = a - t * b;
                    let dtau = (t * u + e * b * u - e * e * t) / (u * u);
                    let g = dtau * u / 2.0;
                    let info = (b * b * u + 2.0 * t * t) / 4.0;
                    if info > 0.0 {
                        acc.xi.add(rows.xi_row(k), g / info, w * info);
                    }
                }
            }
        },
        |(a, ..), (b, ..)| {
            let off = a.cache.y.len();
            a.cache.start.extend(b.cache.start.iter().map(|s| s + off));
            a.cache.w.extend(b.cache.w);
            a.cache.y.extend(b.cache.y);
            a.cache.mu.extend(b.cache.mu);
            a.cache.s.extend(b.cache.s);
            a.cache.eta.extend(b.cache.eta);
            a.mu.merge(&b.mu);
            a.sigma.merge(&b.sigma);
            a.xi.merge(&b.xi);
        },
    );
    out.cache.start.push(out.cache.y.len());
    out
}

/// Per-row score changes X·Δ for each block, aligned with the cache.
fn score_deltas(
    panel: &[IndividualHistory],
    active: &[(u32, u32, f64)],
    d: &Design,
    dmu: &[f64],
    ds: &[f64],
    dxi: &[f64],
) -> [Vec<f64>; 3] {
    let (out, _) = chunked_reduce(
        active,
        || ([Vec::new(), Vec::new(), Vec::new()], CellRows::default()),
        |(acc, rows), &(i, c, _)| {
            rows.fill(&panel[i as usize], c as usize / d.k_y, c as usize % d.k_y, d);
            for k in 0..rows.len() {
                acc[0].push(dot(dmu, rows.mu_row(k)));
                acc[1].push(dot(ds, rows.sigma_row(k)));
                acc[2].push(if rows.linked[k] { dot(dxi, rows.xi_row(k)) } else { 0.0 });
            }
        },
        |(a, _), (b, _)| {
            for (x, y) in a.iter_mut().zip(b) {
                x.extend(y);
            }
        },
    );
    out
}

const MAX_HALVINGS: usize = 30;

/// Halves the step along one block until the cached objective does not drop.
/// Returns the accepted step, or `None`.
fn block_search(q0: f64, base: &[f64], delta: &[f64], eval: impl Fn(&[f64]) -> f64) -> Option<(f64, f64, Vec<f64>)> {
    if delta.iter().all(|v| *v == 0.0) {
        return None;
    }
    let mut step = 1.0;
    for _ in 0..MAX_HALVINGS {
        let trial: Vec<f64> = base.iter().zip(delta).map(|(b, d)| b + step * d).collect();
        let q = eval(&trial);
        if q.is_finite() && q >= q0 {
            return Some((step, q, trial));
        }
        step *= 0.5;
    }
    None
}

fn axpy(base: &[f64], step: f64, d: &[f64]) -> Vec<f64> {
    base.iter().zip(d).map(|(b, x)| b + step * x).collect()
}

/// Income M-step given a joint posterior. Returns the new parameters and the
/// number of inner fits that did not meet their tolerance.
pub fn m_step_income(
    panel: &[IndividualHistory],
    layout: &IncomeLayout,
    post: &Posterior,
    current: &IncomeParams,
    opts: &EmOptions,
) -> Result<(IncomeParams, usize)> {
    let d = current.design;
    let active = active_cells(post, opts.prune);
    let mut p = current.clone();

    let sw = sweep(panel, &active, &p);
    let mut cache = sw.cache;
    let mut q = cache.q();
    let mu_new = solve_symmetric(&sw.mu.gram(), sw.mu.xty(), d.mu_len()).0;
    let dmu: Vec<f64> = mu_new.iter().zip(&p.mu).map(|(a, b)| a - b).collect();
    let ds = solve_symmetric(&sw.sigma.gram(), sw.sigma.xty(), d.sigma_len()).0;
    let dxi = solve_symmetric(&sw.xi.gram(), sw.xi.xty(), d.xi_len()).0;
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let zero = |v: &[f64]| if finite(v) { v.to_vec() } else { vec![0.0; v.len()] };
    let (dmu, ds, dxi) = (zero(&dmu), zero(&ds), zero(&dxi));
    let [rmu, rs, rxi] = score_deltas(panel, &active, &d, &dmu, &ds, &dxi);

    // mean
    if let Some((step, nq, trial)) = block_search(q, &cache.mu, &rmu, |m| cache.q_with(m, &cache.s, &cache.eta)) {
        p.mu = axpy(&p.mu, step, &dmu);
        cache.mu = trial;
        q = nq;
    }
    // log-variance
    if let Some((step, nq, trial)) = block_search(q, &cache.s, &rs, |s| cache.q_with(&cache.mu, s, &cache.eta)) {
        p.sigma = axpy(&p.sigma, step, &ds);
        cache.s = trial;
        q = nq;
    }
    // correlation link
    if let Some((step, _, _)) = block_search(q, &cache.eta, &rxi, |e| cache.q_with(&cache.mu, &cache.s, e)) {
        p.xi = axpy(&p.xi, step, &dxi);
    }

    // income-class logit
    let mut warnings = 0;
    if d.k_y > 1 {
        let mut kappa = layout.kappa.clone();
        kappa.counts.fill(0.0);
        for (i, &zid) in layout.zid.iter().enumerate() {
            let row = post.row(i);
            for km in 0..d.k_m {
                let base = (zid * d.k_m + km) * d.k_y;
                for ky in 0..d.k_y {
                    kappa.counts[base + ky] += row[km * d.k_y + ky];
                }
            }
        }
        let r = fit_grouped_mlogit(&kappa, p.kappa_y.as_slice(), &opts.kernel)
            .map_err(|e| e.context("income-class logit"))?;
        if !r.converged {
            warnings += 1;
        }
        p.kappa_y.set_from_slice(&r.coefficients);
    }
    Ok((p, warnings))
}

/// Starting income parameters: a pooled single-class fit (least squares for
/// μ, log-squared residuals for σ, zero correlation) with every coefficient
/// perturbed by uniform(−0.1, 0.1) draws from a keyed stream.
pub fn income_init(panel: &[IndividualHistory], design: Design, seed: u64) -> Result<IncomeParams> {
    let mut p = IncomeParams::zeros(design);
    let (nm, ns) = (design.mu_len(), design.sigma_len());
    let mut row = vec![0.0; nm.max(ns)];
    let mut acc = OlsAccumulator::new(nm);
    for h in panel {
        for r in &h.years {
            if let (true, Some(y)) = (r.state.is_employed(), r.log_wage) {
                design.mu_row(r.state, &r.zv, &h.zf, 0, &mut row[..nm]);
                acc.add(&row[..nm], y, 1.0);
            }
        }
    }
    if acc.total_weight() > 0.0 {
        p.mu = solve_symmetric(&acc.gram(), acc.xty(), nm).0;
        let mut acc = OlsAccumulator::new(ns);
        let mut mrow = vec![0.0; nm];
        for h in panel {
            for r in &h.years {
                if let (true, Some(y)) = (r.state.is_employed(), r.log_wage) {
                    design.mu_row(r.state, &r.zv, &h.zf, 0, &mut mrow);
                    let e = y - crate::params::dot(&p.mu, &mrow);
                    design.sigma_row(r.state, &r.zv, &h.zf, 0, 0, &mut row[..ns]);
                    acc.add(&row[..ns], (e * e).max(1e-300).ln() - MEAN_LOG_CHI2_1, 1.0);
                }
            }
        }
        p.sigma = solve_symmetric(&acc.gram(), acc.xty(), ns).0;
    }
    let mut s = SeededStream::new(seed, 0, "em-init-income");
    for j in 1..design.k_y {
        for v in p.kappa_y.row_mut(j) {
            *v = s.uniform() * 0.2 - 0.1;
        }
    }
    for v in p.mu.iter_mut().chain(p.sigma.iter_mut()).chain(p.xi.iter_mut()) {
        *v += s.uniform() * 0.2 - 0.1;
    }
    Ok(p)
}

/// Posterior-weighted mean and variance of normalized residuals over all
/// employed person-years.
pub fn residual_moments(panel: &[IndividualHistory], post: &Posterior, p: &IncomeParams) -> (f64, f64) {
    let d = p.design;
    let mut rows = CellRows::default();
    let (mut sw, mut s1, mut s2) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    for (i, h) in panel.iter().enumerate() {
        for (c, &w) in post.row(i).iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            rows.fill(h, c / d.k_y, c % d.k_y, &d);
            for k in 0..rows.len() {
                let (mu, s, _) = rows.scores(k, p);
                let yt = (rows.y[k] - mu) / sd_from_score(s);
                sw.add(w);
                s1.add(w * yt);
                s2.add(w * yt * yt);
            }
        }
    }
    let m = s1.value() / sw.value();
    (m, s2.value() / sw.value() - m * m)
}
