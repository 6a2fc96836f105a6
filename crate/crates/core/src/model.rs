//! Closed-form model quantities: class priors, state probabilities, income
//! moments, the correlation link, densities and per-individual likelihoods.

use crate::design::Design;
use crate::error::{Error, Result};
use crate::math::{
    bvn_logpdf_unchecked, correlation_link, log_sum_exp, std_normal_logpdf, TAU_CLAMP,
};
use crate::params::{dot, IncomeParams, MobilityParams};
use crate::types::{
    EmploymentState, FixedCovariates, IndividualHistory, TimeVaryingCovariates, N_STATES,
};

/// Lower bound applied to every income standard deviation.
pub const SD_FLOOR: f64 = 1e-6;

/// Reusable row buffers sized for one design.
#[derive(Debug, Clone)]
pub struct Scratch {
    pub row: Vec<f64>,
    pub row2: Vec<f64>,
    pub out: Vec<f64>,
}

impl Scratch {
    pub fn new(d: &Design) -> Self {
        let n = [
            d.kappa_m_len(),
            d.kappa_y_len(),
            d.chi0_len(),
            d.chi_len(),
            d.mu_len(),
            d.sigma_len(),
            d.xi_len(),
        ]
        .into_iter()
        .max()
        .unwrap();
        Self {
            row: vec![0.0; n],
            row2: vec![0.0; n],
            out: vec![0.0; d.k_m.max(d.k_y).max(N_STATES)],
        }
    }
}

fn check_class(index: usize, count: usize) -> Result<()> {
    if index >= count {
        return Err(Error::ClassOutOfRange { index, count });
    }
    Ok(())
}

fn check_xp(zv: &TimeVaryingCovariates) -> Result<()> {
    if !zv.xp.is_finite() || zv.xp < 0.0 || !zv.xp_sq.is_finite() {
        return Err(Error::invalid(format!("invalid experience {}", zv.xp)));
    }
    Ok(())
}

fn exp_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.exp()).collect()
}

// ---------------------------------------------------------------------------
// Log-space building blocks used by the estimators.

pub fn log_class_prior_mobility_into(
    zf: &FixedCovariates,
    p: &MobilityParams,
    sc: &mut Scratch,
    out: &mut [f64],
) {
    let d = &p.design;
    let row = &mut sc.row[..d.kappa_m_len()];
    d.kappa_m_row(zf, row);
    p.kappa_m.log_probs_into(row, out);
}

pub fn log_class_prior_income_into(
    zf: &FixedCovariates,
    km: usize,
    p: &IncomeParams,
    sc: &mut Scratch,
    out: &mut [f64],
) {
    let d = &p.design;
    let row = &mut sc.row[..d.kappa_y_len()];
    d.kappa_y_row(zf, km, row);
    p.kappa_y.log_probs_into(row, out);
}

pub fn log_initial_state_probs_into(
    zf: &FixedCovariates,
    km: usize,
    p: &MobilityParams,
    sc: &mut Scratch,
    out: &mut [f64],
) {
    let d = &p.design;
    let row = &mut sc.row[..d.chi0_len()];
    d.chi0_row(zf, km, row);
    p.chi0.log_probs_into(row, out);
}

pub fn log_transition_probs_into(
    prev: EmploymentState,
    zv_prev: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    km: usize,
    p: &MobilityParams,
    sc: &mut Scratch,
    out: &mut [f64],
) {
    let d = &p.design;
    let row = &mut sc.row[..d.chi_len()];
    d.chi_row(prev, zv_prev, zf, km, row);
    p.chi.log_probs_into(row, out);
}

#[inline]
pub fn mean_score(
    state: EmploymentState,
    zv: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    ky: usize,
    p: &IncomeParams,
    buf: &mut [f64],
) -> f64 {
    let row = &mut buf[..p.design.mu_len()];
    p.design.mu_row(state, zv, zf, ky, row);
    dot(&p.mu, row)
}

#[inline]
pub fn log_variance_score(
    state: EmploymentState,
    zv: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    km: usize,
    ky: usize,
    p: &IncomeParams,
    buf: &mut [f64],
) -> f64 {
    let row = &mut buf[..p.design.sigma_len()];
    p.design.sigma_row(state, zv, zf, km, ky, row);
    dot(&p.sigma, row)
}

#[allow(clippy::too_many_arguments)]
#[inline]
pub fn correlation_score(
    cur: EmploymentState,
    prev: EmploymentState,
    zv: &TimeVaryingCovariates,
    zv_prev: &TimeVaryingCovariates,
    km: usize,
    ky: usize,
    p: &IncomeParams,
    buf: &mut [f64],
) -> f64 {
    let row = &mut buf[..p.design.xi_len()];
    p.design.xi_row(cur, prev, zv, zv_prev, km, ky, row);
    dot(&p.xi, row)
}

/// sd = sqrt(exp(score)), floored at [`SD_FLOOR`].
#[inline]
pub fn sd_from_score(score: f64) -> f64 {
    (0.5 * score).exp().max(SD_FLOOR)
}

#[inline]
pub fn clamp_tau(tau: f64) -> f64 {
    tau.clamp(-TAU_CLAMP, TAU_CLAMP)
}

// ---------------------------------------------------------------------------
// Public operations.

/// Pr{kᵐ | z_f}: multinomial logit over transition classes, class 0 as base.
pub fn class_prior_mobility(zf: &FixedCovariates, params: &MobilityParams) -> Result<Vec<f64>> {
    zf.validate()?;
    let mut sc = Scratch::new(&params.design);
    let mut out = vec![0.0; params.design.k_m];
    log_class_prior_mobility_into(zf, params, &mut sc, &mut out);
    Ok(exp_vec(&out))
}

/// Pr{kʸ | kᵐ, z_f}.
pub fn class_prior_income(
    zf: &FixedCovariates,
    km: usize,
    params: &IncomeParams,
) -> Result<Vec<f64>> {
    zf.validate()?;
    check_class(km, params.design.k_m)?;
    let mut sc = Scratch::new(&params.design);
    let mut out = vec![0.0; params.design.k_y];
    log_class_prior_income_into(zf, km, params, &mut sc, &mut out);
    Ok(exp_vec(&out))
}

/// Pr{S₁ | z_f, kᵐ}.
pub fn initial_state_probs(
    zf: &FixedCovariates,
    km: usize,
    params: &MobilityParams,
) -> Result<Vec<f64>> {
    zf.validate()?;
    check_class(km, params.design.k_m)?;
    let mut sc = Scratch::new(&params.design);
    let mut out = vec![0.0; N_STATES];
    log_initial_state_probs_into(zf, km, params, &mut sc, &mut out);
    Ok(exp_vec(&out))
}

/// Pr{S_t | S_{t−1}, z^v_{t−1}, z_f, kᵐ}.
pub fn transition_probs(
    prev: EmploymentState,
    zv_prev: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    km: usize,
    params: &MobilityParams,
) -> Result<Vec<f64>> {
    zf.validate()?;
    check_xp(zv_prev)?;
    check_class(km, params.design.k_m)?;
    let mut sc = Scratch::new(&params.design);
    let mut out = vec![0.0; N_STATES];
    log_transition_probs_into(prev, zv_prev, zf, km, params, &mut sc, &mut out);
    Ok(exp_vec(&out))
}

/// Mean of log-wage in an employed state.
pub fn income_mean(
    state: EmploymentState,
    zv: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    ky: usize,
    params: &IncomeParams,
) -> Result<f64> {
    if !state.is_employed() {
        return Err(Error::UndefinedWage);
    }
    check_class(ky, params.design.k_y)?;
    let mut buf = vec![0.0; params.design.mu_len()];
    Ok(mean_score(state, zv, zf, ky, params, &mut buf))
}

/// Standard deviation of log-wage: sqrt(exp(linear score)).
pub fn income_sd(
    state: EmploymentState,
    zv: &TimeVaryingCovariates,
    zf: &FixedCovariates,
    km: usize,
    ky: usize,
    params: &IncomeParams,
) -> Result<f64> {
    if !state.is_employed() {
        return Err(Error::UndefinedWage);
    }
    check_class(km, params.design.k_m)?;
    check_class(ky, params.design.k_y)?;
    let mut buf = vec![0.0; params.design.sigma_len()];
    Ok(sd_from_score(log_variance_score(state, zv, zf, km, ky, params, &mut buf)))
}

/// τ = −1 + 2Λ(score), the correlation between consecutive normalized wages,
/// kept strictly inside (−1, 1).
#[allow(clippy::too_many_arguments)]
pub fn pair_correlation(
    cur: EmploymentState,
    prev: EmploymentState,
    zv: &TimeVaryingCovariates,
    zv_prev: &TimeVaryingCovariates,
    km: usize,
    ky: usize,
    params: &IncomeParams,
) -> Result<f64> {
    if !cur.is_employed() || !prev.is_employed() {
        return Err(Error::UndefinedWage);
    }
    check_class(km, params.design.k_m)?;
    check_class(ky, params.design.k_y)?;
    let mut buf = vec![0.0; params.design.xi_len()];
    Ok(clamp_tau(correlation_link(correlation_score(
        cur, prev, zv, zv_prev, km, ky, params, &mut buf,
    ))))
}

/// AR(1) coefficient from the positive root of τρ² + σ²ρ − τ = 0.
///
/// Evaluated in the rationalized form 2τ / (σ² + √(σ⁴ + 4τ²)), which has the
/// τ → 0 limit 0 built in and avoids cancellation for small τ.
pub fn rho_from_sigma_tau(sigma_sq: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return 0.0;
    }
    let root = (sigma_sq * sigma_sq + 4.0 * tau * tau).sqrt();
    2.0 * tau / (sigma_sq + root)
}

/// Log-density of the standardized bivariate normal with correlation `tau`.
pub fn bivariate_normal_logpdf(a: f64, b: f64, tau: f64) -> Result<f64> {
    if !(tau.abs() < 1.0) {
        return Err(Error::invalid(format!("|tau| must be < 1, got {tau}")));
    }
    Ok(bvn_logpdf_unchecked(a, b, tau))
}

/// Log-likelihood of the wage path given classes. Every maximal run of
/// consecutive employed years contributes a marginal term for its first year
/// and a bivariate-over-marginal term for each later year.
pub fn income_loglik(h: &IndividualHistory, km: usize, ky: usize, params: &IncomeParams) -> f64 {
    let mut sc = Scratch::new(&params.design);
    income_loglik_with(h, km, ky, params, &mut sc)
}

pub fn income_loglik_with(
    h: &IndividualHistory,
    km: usize,
    ky: usize,
    p: &IncomeParams,
    sc: &mut Scratch,
) -> f64 {
    let mut ll = 0.0;
    // (index, normalized wage) of the previous year when it was employed
    let mut prev: Option<(usize, f64)> = None;
    for (t, r) in h.years.iter().enumerate() {
        let y = match r.log_wage {
            Some(y) if r.state.is_employed() => y,
            _ => {
                prev = None;
                continue;
            }
        };
        let mu = mean_score(r.state, &r.zv, &h.zf, ky, p, &mut sc.row);
        let sd = sd_from_score(log_variance_score(r.state, &r.zv, &h.zf, km, ky, p, &mut sc.row));
        let yt = (y - mu) / sd;
        match prev {
            Some((tp, ytp)) if h.years[tp].year + 1 == r.year => {
                let rp = &h.years[tp];
                let tau = clamp_tau(correlation_link(correlation_score(
                    r.state, rp.state, &r.zv, &rp.zv, km, ky, p, &mut sc.row,
                )));
                ll += bvn_logpdf_unchecked(yt, ytp, tau) - std_normal_logpdf(ytp) - sd.ln();
            }
            _ => {
                ll += std_normal_logpdf(yt) - sd.ln();
            }
        }
        prev = Some((t, yt));
    }
    ll
}

/// log Pr{S₁ | z_f, kᵐ} + Σ_{t≥2} log Pr{S_t | S_{t−1}, z^v_{t−1}, z_f, kᵐ}.
pub fn mobility_loglik(h: &IndividualHistory, km: usize, params: &MobilityParams) -> f64 {
    let mut sc = Scratch::new(&params.design);
    mobility_loglik_with(h, km, params, &mut sc)
}

pub fn mobility_loglik_with(
    h: &IndividualHistory,
    km: usize,
    p: &MobilityParams,
    sc: &mut Scratch,
) -> f64 {
    let mut out = [0.0; N_STATES];
    let mut ll = 0.0;
    for (t, r) in h.years.iter().enumerate() {
        if t == 0 {
            log_initial_state_probs_into(&h.zf, km, p, sc, &mut out);
        } else {
            let rp = &h.years[t - 1];
            log_transition_probs_into(rp.state, &rp.zv, &h.zf, km, p, sc, &mut out);
        }
        ll += out[r.state.code()];
    }
    ll
}

/// Log of the complete-data likelihood for one class pair, excluding the
/// constant density of the fixed covariates.
pub fn complete_loglik(
    h: &IndividualHistory,
    km: usize,
    ky: usize,
    theta_m: &MobilityParams,
    theta_y: &IncomeParams,
) -> f64 {
    let d = theta_m.design;
    let mut sc = Scratch::new(&d);
    let mut pm = vec![0.0; d.k_m];
    let mut py = vec![0.0; d.k_y];
    log_class_prior_mobility_into(&h.zf, theta_m, &mut sc, &mut pm);
    log_class_prior_income_into(&h.zf, km, theta_y, &mut sc, &mut py);
    mobility_loglik_with(h, km, theta_m, &mut sc)
        + pm[km]
        + income_loglik_with(h, km, ky, theta_y, &mut sc)
        + py[ky]
}

/// Per-class log-likelihood components of one individual.
#[derive(Debug, Clone)]
pub struct ClassLogliks {
    /// mobility_loglik(k) + log Pr{k | z_f}, per transition class.
    pub mobility: Vec<f64>,
    /// complete_loglik(kᵐ, kʸ), indexed kᵐ·K_y + kʸ.
    pub joint: Vec<f64>,
}

/// Computes mobility terms for all transition classes and, when `income` is
/// given, the complete log-likelihood of every (kᵐ, kʸ) cell.
pub fn class_logliks(
    h: &IndividualHistory,
    theta_m: &MobilityParams,
    theta_y: Option<&IncomeParams>,
    sc: &mut Scratch,
) -> ClassLogliks {
    let d = theta_m.design;
    let mut prior_m = vec![0.0; d.k_m];
    log_class_prior_mobility_into(&h.zf, theta_m, sc, &mut prior_m);
    let mobility: Vec<f64> = (0..d.k_m)
        .map(|km| mobility_loglik_with(h, km, theta_m, sc) + prior_m[km])
        .collect();
    let mut joint = Vec::new();
    if let Some(ty) = theta_y {
        let mut prior_y = vec![0.0; d.k_y];
        joint.reserve(d.n_classes());
        for (km, &lm) in mobility.iter().enumerate() {
            log_class_prior_income_into(&h.zf, km, ty, sc, &mut prior_y);
            for (ky, &py) in prior_y.iter().enumerate() {
                joint.push(lm + py + income_loglik_with(h, km, ky, ty, sc));
            }
        }
    }
    ClassLogliks { mobility, joint }
}

/// log Σ_{kᵐ,kʸ} exp(complete_loglik).
pub fn mixture_loglik(h: &IndividualHistory, theta_m: &MobilityParams, theta_y: &IncomeParams) -> f64 {
    let mut sc = Scratch::new(&theta_m.design);
    log_sum_exp(&class_logliks(h, theta_m, Some(theta_y), &mut sc).joint)
}
