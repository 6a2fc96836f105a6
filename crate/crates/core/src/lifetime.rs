//! Discounted lifetime earnings and sector counterfactuals.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_variance_score, mean_score, sd_from_score, Scratch};
use crate::params::{ModelConfig, ParameterSet, ReplacementRate};
use crate::simulate::{draw_classes, simulate_path, FirstYear, PathSpec, PopulationSpec, SeededStream};
use crate::types::{Education, EmploymentState, IndividualHistory, YearRecord, XP_STEP};

/// Groups smaller than this get a wide-uncertainty flag on their curves.
pub const MIN_GROUP_SIZE: usize = 100;

/// Value at retirement of a constant flow `rr·e^y` for `horizon_years` years.
pub fn retirement_value(last_log_wage: f64, beta: f64, rr: f64, horizon_years: u32) -> f64 {
    let factor = if beta == 1.0 {
        horizon_years as f64
    } else {
        (1.0 - beta.powi(horizon_years as i32)) / (1.0 - beta)
    };
    factor * rr * last_log_wage.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeValue {
    /// Discounted earnings plus discounted retirement value.
    pub value: f64,
    pub flow: f64,
    pub retirement: f64,
    /// No employed period: value is 0 and the log is undefined.
    pub never_employed: bool,
}

impl LifetimeValue {
    pub fn log_value(&self) -> Option<f64> {
        (!self.never_employed && self.value > 0.0).then(|| self.value.ln())
    }
}

/// Σ βˢ·e^{y_s} over employed periods (non-employment contributes nothing),
/// plus β^T·V_R anchored on the last employed wage, where T is the path length.
/// The replacement rate follows the sector of the last employed period.
pub fn lifetime_value(path: &[YearRecord], beta: f64, rr: ReplacementRate, horizon_years: u32) -> LifetimeValue {
    let mut flow = 0.0;
    let mut disc = 1.0;
    let mut last: Option<(f64, bool)> = None;
    for r in path {
        if let (true, Some(y)) = (r.state.is_employed(), r.log_wage) {
            flow += disc * y.exp();
            last = Some((y, r.state.is_public()));
        }
        disc *= beta;
    }
    match last {
        Some((y, public)) => {
            let retirement = disc * retirement_value(y, beta, rr.for_sector(public), horizon_years);
            LifetimeValue {
                value: flow + retirement,
                flow,
                retirement,
                never_employed: false,
            }
        }
        None => LifetimeValue {
            value: 0.0,
            flow: 0.0,
            retirement: 0.0,
            never_employed: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    JobForLifePublic,
    JobForLifePrivate,
    MobilityPublicStart,
    MobilityPrivateStart,
    Unconditional,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::JobForLifePublic => "job_for_life_public",
            Scenario::JobForLifePrivate => "job_for_life_private",
            Scenario::MobilityPublicStart => "mobility_public_start",
            Scenario::MobilityPrivateStart => "mobility_private_start",
            Scenario::Unconditional => "unconditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sector {
    Public,
    Private,
}

impl Sector {
    pub fn full_time_state(self) -> EmploymentState {
        match self {
            Sector::Public => EmploymentState::PublicFullTime,
            Sector::Private => EmploymentState::PrivateFullTime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartCondition {
    ObservedPublic,
    ObservedPrivate,
    Unconditional,
}

/// Discounting, retirement, and age conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifetimeSettings {
    pub beta: f64,
    pub rr: ReplacementRate,
    pub retirement_age: u32,
    pub retirement_horizon_years: u32,
    /// Age at zero experience.
    pub entry_age_base: u32,
}

impl LifetimeSettings {
    pub fn new(config: &ModelConfig, population: &PopulationSpec) -> Self {
        Self {
            beta: config.beta,
            rr: config.rr,
            retirement_age: config.retirement_age,
            retirement_horizon_years: config.retirement_horizon_years,
            entry_age_base: population.entry_age_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        let rates = match self.rr {
            ReplacementRate::Uniform(r) => [r, r],
            ReplacementRate::BySector { public, private } => [public, private],
        };
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::invalid("replacement rates must be finite and non-negative"));
        }
        Ok(())
    }

    /// Age at the first observation of `h`.
    pub fn first_age(&self, h: &IndividualHistory) -> u32 {
        self.entry_age_base + (h.zf.first_xp / XP_STEP).round() as u32
    }

    /// Simulated years from the first observation up to retirement (at least one).
    pub fn years_to_retirement(&self, h: &IndividualHistory) -> usize {
        self.retirement_age.saturating_sub(self.first_age(h)).max(1) as usize
    }
}

/// One individual's value under one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeRecord {
    pub id: u64,
    pub scenario: Scenario,
    pub female: bool,
    pub educ: Education,
    pub first_state: EmploymentState,
    pub first_age: u32,
    pub value: LifetimeValue,
}

impl LifetimeRecord {
    pub fn log_value(&self) -> Option<f64> {
        self.value.log_value()
    }
}

fn selected(h: &IndividualHistory, start: StartCondition) -> bool {
    match (start, h.years.first().map(|r| r.state)) {
        (_, None) => false,
        (StartCondition::Unconditional, _) => true,
        (StartCondition::ObservedPublic, Some(s)) => s == EmploymentState::PublicFullTime,
        (StartCondition::ObservedPrivate, Some(s)) => s == EmploymentState::PrivateFullTime,
    }
}

/// Normalized wage residual of the first observation under classes (kᵐ, kʸ).
fn first_residual(h: &IndividualHistory, km: usize, ky: usize, params: &ParameterSet) -> Option<f64> {
    let r = h.years.first()?;
    let y = r.log_wage.filter(|_| r.state.is_employed())?;
    let mut sc = Scratch::new(&params.income.design);
    let mu = mean_score(r.state, &r.zv, &h.zf, ky, &params.income, &mut sc.row);
    let sd = sd_from_score(log_variance_score(r.state, &r.zv, &h.zf, km, ky, &params.income, &mut sc.row));
    Some((y - mu) / sd)
}

fn record(h: &IndividualHistory, scenario: Scenario, s: &LifetimeSettings, path: &[YearRecord]) -> LifetimeRecord {
    LifetimeRecord {
        id: h.id,
        scenario,
        female: h.zf.female,
        educ: h.zf.educ,
        first_state: h.years[0].state,
        first_age: s.first_age(h),
        value: lifetime_value(path, s.beta, s.rr, s.retirement_horizon_years),
    }
}

/// Every individual works full time in `sector` from the first observation
/// until retirement. Wages only; classes are drawn from their priors with the
/// same keyed stream for both sectors, and the first-year residual is carried
/// over from the observed wage when there is one.
pub fn job_for_life_values(
    panel: &[IndividualHistory],
    sector: Sector,
    params: &ParameterSet,
    settings: &LifetimeSettings,
    seed: u64,
) -> Result<Vec<LifetimeRecord>> {
    params.validate()?;
    settings.validate()?;
    let scenario = match sector {
        Sector::Public => Scenario::JobForLifePublic,
        Sector::Private => Scenario::JobForLifePrivate,
    };
    Ok(panel
        .par_iter()
        .filter(|h| !h.years.is_empty())
        .map(|h| {
            let (km, ky) = draw_classes(
                &h.zf,
                &params.mobility,
                &params.income,
                &mut SeededStream::new(seed, h.id, "classes"),
            );
            let spec = PathSpec {
                first: FirstYear::Draw,
                start_year: h.years[0].year,
                years: settings.years_to_retirement(h),
                forced_state: Some(sector.full_time_state()),
                first_residual: first_residual(h, km, ky, params),
                rho_mode: params.config.rho_mode,
            };
            let path = simulate_path(
                &h.zf,
                km,
                ky,
                &params.mobility,
                &params.income,
                &spec,
                &mut SeededStream::new(seed, h.id, "states"),
                &mut SeededStream::new(seed, h.id, "wages"),
            );
            record(h, scenario, settings, &path)
        })
        .collect())
}

/// Free state-and-wage simulation to retirement from each selected
/// individual's observed first spell.
pub fn mobility_values(
    panel: &[IndividualHistory],
    start: StartCondition,
    params: &ParameterSet,
    settings: &LifetimeSettings,
    seed: u64,
) -> Result<Vec<LifetimeRecord>> {
    params.validate()?;
    settings.validate()?;
    let scenario = match start {
        StartCondition::ObservedPublic => Scenario::MobilityPublicStart,
        StartCondition::ObservedPrivate => Scenario::MobilityPrivateStart,
        StartCondition::Unconditional => Scenario::Unconditional,
    };
    Ok(panel
        .par_iter()
        .filter(|h| selected(h, start))
        .map(|h| {
            let first = &h.years[0];
            let (km, ky) = draw_classes(
                &h.zf,
                &params.mobility,
                &params.income,
                &mut SeededStream::new(seed, h.id, "classes"),
            );
            let spec = PathSpec {
                first: FirstYear::Observed {
                    state: first.state,
                    log_wage: first.log_wage,
                },
                start_year: first.year,
                years: settings.years_to_retirement(h),
                forced_state: None,
                first_residual: None,
                rho_mode: params.config.rho_mode,
            };
            let path = simulate_path(
                &h.zf,
                km,
                ky,
                &params.mobility,
                &params.income,
                &spec,
                &mut SeededStream::new(seed, h.id, "states"),
                &mut SeededStream::new(seed, h.id, "wages"),
            );
            record(h, scenario, settings, &path)
        })
        .collect())
}

/// Linear interpolation between order statistics: with `h = (n−1)·p`, the
/// result is `x[⌊h⌋] + (h−⌊h⌋)·(x[⌊h⌋+1] − x[⌊h⌋])` on ascending `sorted`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Percentiles 1, 2, …, 99.
pub fn percentile_grid() -> Vec<f64> {
    (1..=99).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumCurve {
    pub percentiles: Vec<f64>,
    /// Quantile of group A minus quantile of group B, in log points.
    pub log_diff: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
    pub wide_uncertainty: bool,
}

impl PremiumCurve {
    /// Percentiles at which the curve changes sign (the first percentile of
    /// each new sign). Exact zeros carry the previous sign.
    pub fn sign_changes(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut sign = 0.0;
        for (p, v) in self.percentiles.iter().zip(&self.log_diff) {
            let s = if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                continue;
            };
            if sign != 0.0 && s != sign {
                out.push(*p);
            }
            sign = s;
        }
        out
    }
}

/// Per-percentile difference of the empirical quantiles of two samples of
/// log values. `grid` holds percentiles in (0, 100), strictly increasing.
pub fn premium_curve(a: &[f64], b: &[f64], grid: &[f64]) -> Result<PremiumCurve> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("premium curve needs two non-empty groups"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) || grid.iter().any(|p| !(*p > 0.0 && *p < 100.0)) {
        return Err(Error::invalid("percentile grid must be strictly increasing within (0, 100)"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("premium curve inputs must be finite"));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (sa, sb) = (sort(a), sort(b));
    let log_diff = grid
        .iter()
        .map(|p| quantile_sorted(&sa, p / 100.0) - quantile_sorted(&sb, p / 100.0))
        .collect();
    Ok(PremiumCurve {
        percentiles: grid.to_vec(),
        log_diff,
        n_a: a.len(),
        n_b: b.len(),
        wide_uncertainty: a.len() < MIN_GROUP_SIZE || b.len() < MIN_GROUP_SIZE,
    })
}

/// Subgroups used to slice the counterfactual curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    All,
    Men,
    Women,
    Education(Education),
    /// First observed above 45.
    Over45,
}

impl Group {
    pub fn contains(self, r: &LifetimeRecord) -> bool {
        match self {
            Group::All => true,
            Group::Men => !r.female,
            Group::Women => r.female,
            Group::Education(e) => r.educ == e,
            Group::Over45 => r.first_age > 45,
        }
    }

    pub fn label(self) -> String {
        match self {
            Group::All => "all".into(),
            Group::Men => "men".into(),
            Group::Women => "women".into(),
            Group::Education(e) => format!("educ{}", e.code()),
            Group::Over45 => "over45".into(),
        }
    }

    pub fn standard() -> Vec<Group> {
        vec![
            Group::All,
            Group::Men,
            Group::Women,
            Group::Education(Education::Low),
            Group::Education(Education::Medium),
            Group::Education(Education::High),
            Group::Over45,
        ]
    }
}

/// Log values of the records in `group` whose first observed state passes
/// `first`, skipping never-employed trajectories.
pub fn log_values(records: &[LifetimeRecord], group: Group, first: Option<EmploymentState>) -> Vec<f64> {
    records
        .iter()
        .filter(|r| group.contains(r) && first.is_none_or(|s| r.first_state == s))
        .filter_map(LifetimeRecord::log_value)
        .collect()
}

/// The job-for-life and with-mobility scenarios for one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactuals {
    pub job_for_life_public: Vec<LifetimeRecord>,
    pub job_for_life_private: Vec<LifetimeRecord>,
    pub mobility_public_start: Vec<LifetimeRecord>,
    pub mobility_private_start: Vec<LifetimeRecord>,
}

impl Counterfactuals {
    pub fn run(
        panel: &[IndividualHistory],
        params: &ParameterSet,
        settings: &LifetimeSettings,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            job_for_life_public: job_for_life_values(panel, Sector::Public, params, settings, seed)?,
            job_for_life_private: job_for_life_values(panel, Sector::Private, params, settings, seed)?,
            mobility_public_start: mobility_values(panel, StartCondition::ObservedPublic, params, settings, seed)?,
            mobility_private_start: mobility_values(panel, StartCondition::ObservedPrivate, params, settings, seed)?,
        })
    }

    /// Job-for-life public values of public starters against job-for-life
    /// private values of private starters.
    pub fn premium_with_selection(&self, group: Group, grid: &[f64]) -> Result<PremiumCurve> {
        premium_curve(
            &log_values(&self.job_for_life_public, group, Some(EmploymentState::PublicFullTime)),
            &log_values(&self.job_for_life_private, group, Some(EmploymentState::PrivateFullTime)),
            grid,
        )
    }

    /// Everyone forced into the public sector against everyone forced into the private sector.
    pub fn premium_without_selection(&self, group: Group, grid: &[f64]) -> Result<PremiumCurve> {
        premium_curve(
            &log_values(&self.job_for_life_public, group, None),
            &log_values(&self.job_for_life_private, group, None),
            grid,
        )
    }

    /// Job-for-life minus with-mobility quantiles for starters in `sector`.
    pub fn mobility_loss(&self, sector: Sector, group: Group, grid: &[f64]) -> Result<PremiumCurve> {
        let (jfl, mob) = match sector {
            Sector::Public => (&self.job_for_life_public, &self.mobility_public_start),
            Sector::Private => (&self.job_for_life_private, &self.mobility_private_start),
        };
        premium_curve(
            &log_values(jfl, group, Some(sector.full_time_state())),
            &log_values(mob, group, None),
            grid,
        )
    }

    /// All curves for the standard groups, labelled (scenario, group A, group B).
    pub fn curves(&self, grid: &[f64]) -> Vec<(String, String, String, PremiumCurve)> {
        let mut out = Vec::new();
        for g in Group::standard() {
            let l = g.label();
            let named = [
                ("premium_with_selection", "job_for_life_public", "job_for_life_private", self.premium_with_selection(g, grid)),
                ("premium_without_selection", "job_for_life_public", "job_for_life_private", self.premium_without_selection(g, grid)),
                ("loss_public", "job_for_life_public", "mobility_public_start", self.mobility_loss(Sector::Public, g, grid)),
                ("loss_private", "job_for_life_private", "mobility_private_start", self.mobility_loss(Sector::Private, g, grid)),
            ];
            for (scenario, a, b, c) in named {
                if let Ok(c) = c {
                    out.push((format!("{scenario}/{l}"), format!("{a}/{l}"), format!("{b}/{l}"), c));
                }
            }
        }
        out
    }
}

/// Curve rows: `percentile,log_diff,group_a,group_b,scenario,RR,beta,seed`.
pub fn curves_csv(
    curves: &[(String, String, String, PremiumCurve)],
    settings: &LifetimeSettings,
    seed: u64,
) -> String {
    let mut s = String::from("percentile,log_diff,group_a,group_b,scenario,RR,beta,seed,n_a,n_b,wide_uncertainty\n");
    for (scenario, a, b, c) in curves {
        for (p, d) in c.percentiles.iter().zip(&c.log_diff) {
            let _ = writeln!(
                s,
                "{p},{d:?},{a},{b},{scenario},{},{:?},{seed},{},{},{}",
                settings.rr.label(),
                settings.beta,
                c.n_a,
                c.n_b,
                c.wide_uncertainty
            );
        }
    }
    s
}

/// Per-individual rows for any number of scenarios.
pub fn records_csv(records: &[LifetimeRecord]) -> String {
    let mut s = String::from("person_id,scenario,female,educ,first_state,first_age,value,log_value,never_employed\n");
    for r in records {
        let log = r.log_value().map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:?},{},{}",
            r.id,
            r.scenario.name(),
            r.female as u8,
            r.educ.code(),
            r.first_state.code(),
            r.first_age,
            r.value.value,
            log,
            r.value.never_employed
        );
    }
    s
}
