//! Forward simulation: synthetic panels and probabilistic-assignment prediction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::correlation_link;
use crate::model::{
    clamp_tau, correlation_score, log_class_prior_income_into, log_class_prior_mobility_into,
    log_initial_state_probs_into, log_transition_probs_into, log_variance_score, mean_score,
    rho_from_sigma_tau, sd_from_score, Scratch,
};
use crate::params::{IncomeParams, MobilityParams, ParameterSet, RhoMode};
use crate::types::{
    EmploymentState, Education, FixedCovariates, IndividualHistory, TimeVaryingCovariates,
    YearRecord, N_STATES, XP_STEP,
};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// A random stream keyed by (seed, individual, purpose). Draws depend only on
/// the key, never on scheduling or the order in which individuals are visited.
#[derive(Debug, Clone)]
pub struct SeededStream {
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, individual: u64, purpose: &str) -> Self {
        let k = splitmix64(splitmix64(seed) ^ splitmix64(individual.wrapping_add(0x51ED_270B)) ^ fnv1a(purpose));
        Self {
            rng: ChaCha8Rng::seed_from_u64(k),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Index drawn from log-probabilities by inversion of one uniform.
    pub fn categorical_log(&mut self, log_probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, lp) in log_probs.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return i;
            }
        }
        // rounding left u above the cumulative total: take the last positive cell
        log_probs
            .iter()
            .rposition(|lp| lp.exp() > 0.0)
            .unwrap_or(log_probs.len() - 1)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Band of first-observation experience, in whole years (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperienceBand {
    pub min_years: u32,
    pub max_years: u32,
    pub share: f64,
}

/// Covariate mixture for synthetic individuals.
///
/// Text form, one `key = value` per line, `#` comments:
///
/// ```text
/// female_share = 0.5
/// educ_shares = 0.69, 0.16, 0.15
/// xp_band = 0, 5, 0.27        # min years, max years, share; repeatable
/// entry_age_base = 25
/// start_year = 2010
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub female_share: f64,
    pub educ_shares: [f64; 3],
    pub xp_bands: Vec<ExperienceBand>,
    /// Age at zero experience; age at first observation is this plus experience in years.
    pub entry_age_base: u32,
    pub start_year: i32,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            female_share: 0.5,
            educ_shares: [0.69, 0.16, 0.15],
            xp_bands: vec![
                ExperienceBand { min_years: 0, max_years: 5, share: 0.27 },
                ExperienceBand { min_years: 6, max_years: 20, share: 0.42 },
                ExperienceBand { min_years: 21, max_years: 34, share: 0.31 },
            ],
            entry_age_base: 25,
            start_year: 2010,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("`{key}`: cannot parse `{}` as a number", v.trim())))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_f64(key, s)).collect()
}

impl PopulationSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = PopulationSpec::default();
        let mut bands = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            match k {
                "female_share" => spec.female_share = parse_f64(k, v)?,
                "educ_shares" => {
                    let l = parse_list(k, v)?;
                    if l.len() != 3 {
                        return Err(Error::Parse("educ_shares needs three values".into()));
                    }
                    spec.educ_shares = [l[0], l[1], l[2]];
                }
                "xp_band" => {
                    let l = parse_list(k, v)?;
                    if l.len() != 3 || l[0] < 0.0 || l[1] < l[0] || l[0].fract() != 0.0 || l[1].fract() != 0.0 {
                        return Err(Error::Parse(format!("line {}: xp_band needs `min, max, share` with whole years", no + 1)));
                    }
                    bands.push(ExperienceBand {
                        min_years: l[0] as u32,
                        max_years: l[1] as u32,
                        share: l[2],
                    });
                }
                "entry_age_base" => spec.entry_age_base = parse_f64(k, v)? as u32,
                "start_year" => spec.start_year = parse_f64(k, v)? as i32,
                other => return Err(Error::Parse(format!("line {}: unknown key `{other}`", no + 1))),
            }
        }
        if !bands.is_empty() {
            spec.xp_bands = bands;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "female_share = {:?}\neduc_shares = {:?}, {:?}, {:?}\n",
            self.female_share, self.educ_shares[0], self.educ_shares[1], self.educ_shares[2]
        );
        for b in &self.xp_bands {
            s.push_str(&format!("xp_band = {}, {}, {:?}\n", b.min_years, b.max_years, b.share));
        }
        s.push_str(&format!("entry_age_base = {}\nstart_year = {}\n", self.entry_age_base, self.start_year));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.female_share) {
            return Err(Error::invalid("female_share must lie in [0,1]"));
        }
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::invalid(format!("{name}: shares must be non-negative")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("{name}: shares sum to {s}, not 1")));
            }
            Ok(())
        };
        check("educ_shares", &self.educ_shares)?;
        if self.xp_bands.is_empty() {
            return Err(Error::invalid("at least one xp_band is required"));
        }
        let shares: Vec<f64> = self.xp_bands.iter().map(|b| b.share).collect();
        check("xp_band", &shares)
    }

    pub fn entry_age(&self, first_xp: f64) -> u32 {
        self.entry_age_base + (first_xp / XP_STEP).round() as u32
    }

    pub fn draw_covariates(&self, stream: &mut SeededStream) -> FixedCovariates {
        let female = stream.uniform() < self.female_share;
        let u = stream.uniform();
        let educ = if u < self.educ_shares[0] {
            Education::Low
        } else if u < self.educ_shares[0] + self.educ_shares[1] {
            Education::Medium
        } else {
            Education::High
        };
        let u = stream.uniform();
        let mut acc = 0.0;
        let mut band = *self.xp_bands.last().unwrap();
        for b in &self.xp_bands {
            acc += b.share;
            if u < acc {
                band = *b;
                break;
            }
        }
        let span = band.max_years - band.min_years + 1;
        let years = band.min_years + ((stream.uniform() * span as f64) as u32).min(span - 1);
        FixedCovariates {
            female,
            educ,
            first_xp: years as f64 / 10.0,
        }
    }
}

/// (kᵐ, kʸ): transition class from its prior, then income class given it.
pub fn draw_classes(
    zf: &FixedCovariates,
    theta_m: &MobilityParams,
    theta_y: &IncomeParams,
    stream: &mut SeededStream,
) -> (usize, usize) {
    let d = theta_m.design;
    let mut sc = Scratch::new(&d);
    let mut pm = vec![0.0; d.k_m];
    log_class_prior_mobility_into(zf, theta_m, &mut sc, &mut pm);
    let km = stream.categorical_log(&pm);
    let mut py = vec![0.0; d.k_y];
    log_class_prior_income_into(zf, km, theta_y, &mut sc, &mut py);
    (km, stream.categorical_log(&py))
}

/// How the first simulated year is seeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FirstYear {
    /// State from the initial-state probabilities, fresh wage residual.
    Draw,
    /// Given state; the wage residual is recovered from `log_wage` when present.
    Observed {
        state: EmploymentState,
        log_wage: Option<f64>,
    },
}

/// Everything needed to roll one individual forward.
#[derive(Debug, Clone, Copy)]
pub struct PathSpec {
    pub first: FirstYear,
    pub start_year: i32,
    pub years: usize,
    /// Hold every year in this state instead of drawing transitions.
    pub forced_state: Option<EmploymentState>,
    /// Normalized residual for the first year, overriding draws and observed wages.
    pub first_residual: Option<f64>,
    pub rho_mode: RhoMode,
}

/// Draws states and wages; `states` and `wages` are independent streams so
/// that changing wage parameters leaves the state path untouched.
#[allow(clippy::too_many_arguments)]
pub fn simulate_path(
    zf: &FixedCovariates,
    km: usize,
    ky: usize,
    theta_m: &MobilityParams,
    theta_y: &IncomeParams,
    spec: &PathSpec,
    states: &mut SeededStream,
    wages: &mut SeededStream,
) -> Vec<YearRecord> {
    let d = theta_m.design;
    let mut sc = Scratch::new(&d);
    let mut lp = [0.0; N_STATES];
    let mut out: Vec<YearRecord> = Vec::with_capacity(spec.years);
    let mut employed_years = 0usize;
    // normalized residual of the previous year when employed
    let mut prev_resid: Option<f64> = None;
    for t in 0..spec.years {
        let zv = TimeVaryingCovariates::after(zf.first_xp, employed_years);
        let u_state = states.uniform();
        let state = if let Some(s) = spec.forced_state {
            s
        } else if t == 0 {
            match spec.first {
                FirstYear::Observed { state, .. } => state,
                FirstYear::Draw => {
                    log_initial_state_probs_into(zf, km, theta_m, &mut sc, &mut lp);
                    pick(&lp, u_state)
                }
            }
        } else {
            let prev = &out[t - 1];
            log_transition_probs_into(prev.state, &prev.zv, zf, km, theta_m, &mut sc, &mut lp);
            pick(&lp, u_state)
        };
        let eps = wages.normal();
        let mut log_wage = None;
        if state.is_employed() {
            let mu = mean_score(state, &zv, zf, ky, theta_y, &mut sc.row);
            let s2_score = log_variance_score(state, &zv, zf, km, ky, theta_y, &mut sc.row);
            let sd = sd_from_score(s2_score);
            let resid = match (t, prev_resid) {
                (0, _) => match (spec.first_residual, spec.first) {
                    (Some(r), _) => r,
                    (None, FirstYear::Observed { log_wage: Some(y), .. }) => (y - mu) / sd,
                    _ => eps,
                },
                (_, None) => eps,
                (_, Some(pr)) => {
                    let prev = &out[t - 1];
                    let tau = clamp_tau(correlation_link(correlation_score(
                        state, prev.state, &zv, &prev.zv, km, ky, theta_y, &mut sc.row,
                    )));
                    let rho = match spec.rho_mode {
                        RhoMode::CorrelationConsistent => tau,
                        RhoMode::PaperFormula => rho_from_sigma_tau(sd * sd, tau),
                    };
                    rho * pr + (1.0 - rho * rho).max(0.0).sqrt() * eps
                }
            };
            let y = match (t, spec.first, spec.first_residual) {
                (0, FirstYear::Observed { log_wage: Some(y), .. }, None) if spec.forced_state.is_none() => y,
                _ => mu + sd * resid,
            };
            log_wage = Some(y);
            prev_resid = Some(resid);
        } else {
            prev_resid = None;
        }
        out.push(YearRecord {
            year: spec.start_year + t as i32,
            state,
            log_wage,
            zv,
        });
        if state.is_employed() {
            employed_years += 1;
        }
    }
    out
}

fn pick(log_probs: &[f64], u: f64) -> EmploymentState {
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return EmploymentState::ALL[i];
        }
    }
    let last = log_probs.iter().rposition(|lp| lp.exp() > 0.0).unwrap_or(0);
    EmploymentState::ALL[last]
}

/// One simulated career from fresh draws of states and wages.
#[allow(clippy::too_many_arguments)]
pub fn simulate_individual(
    id: u64,
    zf: &FixedCovariates,
    km: usize,
    ky: usize,
    params: &ParameterSet,
    horizon: usize,
    start_year: i32,
    seed: u64,
) -> IndividualHistory {
    let spec = PathSpec {
        first: FirstYear::Draw,
        start_year,
        years: horizon,
        forced_state: None,
        first_residual: None,
        rho_mode: params.config.rho_mode,
    };
    let years = simulate_path(
        zf,
        km,
        ky,
        &params.mobility,
        &params.income,
        &spec,
        &mut SeededStream::new(seed, id, "states"),
        &mut SeededStream::new(seed, id, "wages"),
    );
    IndividualHistory { id, zf: *zf, years }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedIndividual {
    pub history: IndividualHistory,
    pub km: usize,
    pub ky: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimulatedPanel {
    pub individuals: Vec<SimulatedIndividual>,
}

impl SimulatedPanel {
    pub fn histories(&self) -> Vec<IndividualHistory> {
        self.individuals.iter().map(|s| s.history.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.individuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.individuals.is_empty()
    }
}

/// Synthetic panel of `n` individuals observed for `years` consecutive years.
pub fn generate_panel(
    spec: &PopulationSpec,
    params: &ParameterSet,
    n: usize,
    years: usize,
    seed: u64,
) -> Result<SimulatedPanel> {
    spec.validate()?;
    params.validate()?;
    if n == 0 {
        return Err(Error::invalid("population size must be at least 1"));
    }
    if years < 3 {
        return Err(Error::invalid("at least 3 years are required"));
    }
    let individuals = (1..=n as u64)
        .into_par_iter()
        .map(|id| {
            let zf = spec.draw_covariates(&mut SeededStream::new(seed, id, "covariates"));
            let (km, ky) = draw_classes(
                &zf,
                &params.mobility,
                &params.income,
                &mut SeededStream::new(seed, id, "classes"),
            );
            let history = simulate_individual(id, &zf, km, ky, params, years, spec.start_year, seed);
            SimulatedIndividual { history, km, ky }
        })
        .collect();
    Ok(SimulatedPanel { individuals })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Draw the first state from the initial-state probabilities instead of
    /// conditioning on the observed first spell.
    pub draw_initial_state: bool,
    /// Years simulated after the first; `None` runs to each individual's last
    /// observed year.
    pub horizon: Option<usize>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            draw_initial_state: false,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictReport {
    pub skipped: Vec<(u64, String)>,
}

/// Probabilistic-assignment prediction from each individual's first spell.
/// Classes are drawn from their priors given the fixed covariates.
pub fn predict_panel(
    observed: &[IndividualHistory],
    params: &ParameterSet,
    seed: u64,
    opts: &PredictOptions,
) -> Result<(SimulatedPanel, PredictReport)> {
    params.validate()?;
    let results: Vec<std::result::Result<SimulatedIndividual, (u64, String)>> = observed
        .par_iter()
        .map(|h| {
            let first = h.years.first().ok_or((h.id, "no observed first spell".to_string()))?;
            let (km, ky) = draw_classes(
                &h.zf,
                &params.mobility,
                &params.income,
                &mut SeededStream::new(seed, h.id, "classes"),
            );
            let extra = match opts.horizon {
                Some(k) => k,
                None => (h.years.last().unwrap().year - first.year) as usize,
            };
            let spec = PathSpec {
                first: if opts.draw_initial_state {
                    FirstYear::Draw
                } else {
                    FirstYear::Observed {
                        state: first.state,
                        log_wage: first.log_wage,
                    }
                },
                start_year: first.year,
                years: extra + 1,
                forced_state: None,
                first_residual: None,
                rho_mode: params.config.rho_mode,
            };
            let years = simulate_path(
                &h.zf,
                km,
                ky,
                &params.mobility,
                &params.income,
                &spec,
                &mut SeededStream::new(seed, h.id, "states"),
                &mut SeededStream::new(seed, h.id, "wages"),
            );
            Ok(SimulatedIndividual {
                history: IndividualHistory { id: h.id, zf: h.zf, years },
                km,
                ky,
            })
        })
        .collect();
    let mut panel = SimulatedPanel::default();
    let mut report = PredictReport::default();
    for r in results {
        match r {
            Ok(s) => panel.individuals.push(s),
            Err(e) => report.skipped.push(e),
        }
    }
    Ok((panel, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::Design;
    use crate::params::ModelConfig;
    use crate::published::published_params;

    #[test]
    fn streams_are_keyed() {
        let a: Vec<f64> = (0..4).map({
            let mut s = SeededStream::new(7, 3, "x");
            move |_| s.uniform()
        }).collect();
        let mut s2 = SeededStream::new(7, 3, "x");
        let b: Vec<f64> = (0..4).map(|_| s2.uniform()).collect();
        assert_eq!(a, b);
        assert_ne!(SeededStream::new(7, 3, "y").uniform(), a[0]);
        assert_ne!(SeededStream::new(7, 4, "x").uniform(), a[0]);
        assert_ne!(SeededStream::new(8, 3, "x").uniform(), a[0]);
    }

    #[test]
    fn population_spec_text_round_trip() {
        let s = PopulationSpec::default();
        assert_eq!(PopulationSpec::parse(&s.to_text()).unwrap(), s);
        assert!(PopulationSpec::parse("educ_shares = 0.5, 0.3, 0.3").is_err());
        assert!(PopulationSpec::parse("colour = 3").is_err());
    }

    #[test]
    fn degenerate_prior_always_drawn() {
        let d = Design::new(3, 2);
        let mut m = MobilityParams::zeros(d);
        let y = IncomeParams::zeros(d);
        // class 2 intercept far above the others
        *m.kappa_m.row_mut(2).last_mut().unwrap() = 30.0;
        let zf = FixedCovariates::new(false, Education::Low, 1.0).unwrap();
        let mut s = SeededStream::new(1, 1, "classes");
        for _ in 0..1000 {
            assert_eq!(draw_classes(&zf, &m, &y, &mut s).0, 2);
        }
    }

    #[test]
    fn absorbing_nonemployment_emits_no_wages() {
        let d = Design::new(1, 1);
        let mut p = ParameterSet {
            config: ModelConfig { k_m: 1, k_y: 1, ..Default::default() },
            mobility: MobilityParams::zeros(d),
            income: IncomeParams::zeros(d),
        };
        for s in 1..5 {
            *p.mobility.chi0.row_mut(s).last_mut().unwrap() = -60.0;
            *p.mobility.chi.row_mut(s).last_mut().unwrap() = -60.0;
        }
        let zf = FixedCovariates::new(true, Education::Medium, 0.3).unwrap();
        let h = simulate_individual(5, &zf, 0, 0, &p, 20, 2000, 9);
        assert!(h.years.iter().all(|r| r.state == EmploymentState::NonEmployed && r.log_wage.is_none()));
        assert!(h.years.iter().all(|r| r.zv.xp == 0.3));
    }

    #[test]
    fn generated_panel_respects_invariants_and_is_deterministic() {
        let p = published_params();
        let spec = PopulationSpec::default();
        let a = generate_panel(&spec, &p, 300, 6, 42).unwrap();
        let b = generate_panel(&spec, &p, 300, 6, 42).unwrap();
        assert_eq!(a, b);
        for s in &a.individuals {
            s.history.validate().unwrap();
            assert!(s.history.is_contiguous());
            let mut expect = s.history.zf.first_xp;
            for r in &s.history.years {
                assert!((r.zv.xp - expect).abs() < 1e-12);
                if r.state.is_employed() {
                    expect += XP_STEP;
                }
            }
        }
        assert!(generate_panel(&spec, &p, 10, 2, 1).is_err());
    }

    #[test]
    fn zero_horizon_prediction_returns_first_spell() {
        let p = published_params();
        let panel = generate_panel(&PopulationSpec::default(), &p, 50, 4, 3).unwrap();
        let firsts: Vec<IndividualHistory> = panel
            .histories()
            .into_iter()
            .map(|mut h| {
                h.years.truncate(1);
                h
            })
            .collect();
        let opts = PredictOptions { horizon: Some(0), ..Default::default() };
        let (pred, rep) = predict_panel(&firsts, &p, 11, &opts).unwrap();
        assert!(rep.skipped.is_empty());
        assert_eq!(pred.histories(), firsts);

        let empty = vec![IndividualHistory { id: 99, zf: firsts[0].zf, years: vec![] }];
        let (pred, rep) = predict_panel(&empty, &p, 11, &opts).unwrap();
        assert!(pred.is_empty());
        assert_eq!(rep.skipped[0].0, 99);
    }
}
