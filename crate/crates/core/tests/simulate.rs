use labordyn_core::math::fisher_link;
use labordyn_core::model::{income_mean, income_sd, pair_correlation, rho_from_sigma_tau, transition_probs};
use labordyn_core::published::published_params;
use labordyn_core::simulate::{
    generate_panel, predict_panel, simulate_path, FirstYear, PathSpec, PopulationSpec, PredictOptions, SeededStream,
};
use labordyn_core::{Education, EmploymentState, FixedCovariates, IndividualHistory, ParameterSet, RhoMode};
use proptest::prelude::*;

fn zf() -> FixedCovariates {
    FixedCovariates::new(true, Education::Medium, 0.8).unwrap()
}

#[test]
fn transition_frequencies_within_multinomial_bands() {
    let p = published_params();
    let z = zf();
    let n = 40_000u64;
    for (km, from) in [(0, 0u8), (1, 1), (2, 2), (3, 3), (0, 4)] {
        let from = EmploymentState::from_code(from).unwrap();
        let mut counts = [0u64; 5];
        let mut zv_prev = None;
        for i in 0..n {
            let spec = PathSpec {
                first: FirstYear::Observed {
                    state: from,
                    log_wage: from.is_employed().then_some(2.0),
                },
                start_year: 2000,
                years: 2,
                forced_state: None,
                first_residual: None,
                rho_mode: RhoMode::CorrelationConsistent,
            };
            let path = simulate_path(
                &z,
                km,
                0,
                &p.mobility,
                &p.income,
                &spec,
                &mut SeededStream::new(9, i, "states"),
                &mut SeededStream::new(9, i, "wages"),
            );
            counts[path[1].state.code()] += 1;
            zv_prev = Some(path[0].zv);
        }
        let probs = transition_probs(from, &zv_prev.unwrap(), &z, km, &p.mobility).unwrap();
        for (c, q) in counts.iter().zip(&probs) {
            let f = *c as f64 / n as f64;
            let band = 3.0 * (q * (1.0 - q) / n as f64).sqrt() + 1e-12;
            assert!((f - q).abs() <= band, "from {from:?}: {f} vs {q}");
        }
    }
}

/// Wage parameters with a constant correlation `tau` between adjacent years.
fn constant_tau(tau: f64) -> ParameterSet {
    let mut p = published_params();
    let d = p.config.design();
    let names = d.xi_names();
    for (v, n) in p.income.xi.iter_mut().zip(&names) {
        *v = if n == "const" { fisher_link(tau) } else { 0.0 };
    }
    p
}

struct ArMoments {
    variance: f64,
    autocorrelation: f64,
    /// Mean of e_t e_{t-1} and of the AR coefficient the simulator should use.
    cross: f64,
    expected_rho: f64,
}

/// Moments of normalized wages for people held in one employed state.
fn ar_moments(p: &ParameterSet, mode: RhoMode, people: u64, years: usize) -> ArMoments {
    let z = zf();
    let state = EmploymentState::PublicFullTime;
    let (mut s2, mut n, mut cross, mut lag0, mut lag1, mut rho_sum, mut pairs) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..people {
        let spec = PathSpec {
            first: FirstYear::Draw,
            start_year: 2000,
            years,
            forced_state: Some(state),
            first_residual: None,
            rho_mode: mode,
        };
        let path = simulate_path(
            &z,
            1,
            2,
            &p.mobility,
            &p.income,
            &spec,
            &mut SeededStream::new(4, i, "states"),
            &mut SeededStream::new(4, i, "wages"),
        );
        let mut e = Vec::with_capacity(years);
        let mut rho = Vec::with_capacity(years);
        for (t, r) in path.iter().enumerate() {
            let mu = income_mean(state, &r.zv, &z, 2, &p.income).unwrap();
            let sd = income_sd(state, &r.zv, &z, 1, 2, &p.income).unwrap();
            e.push((r.log_wage.unwrap() - mu) / sd);
            if t > 0 {
                let tau = pair_correlation(state, state, &r.zv, &path[t - 1].zv, 1, 2, &p.income).unwrap();
                rho.push(match mode {
                    RhoMode::CorrelationConsistent => tau,
                    RhoMode::PaperFormula => rho_from_sigma_tau(sd * sd, tau),
                });
            }
        }
        for t in 0..e.len() {
            s2 += e[t] * e[t];
            n += 1.0;
            if t > 0 {
                cross += e[t] * e[t - 1];
                lag0 += e[t - 1] * e[t - 1];
                lag1 += e[t] * e[t];
                rho_sum += rho[t - 1];
                pairs += 1.0;
            }
        }
    }
    ArMoments {
        variance: s2 / n,
        autocorrelation: cross / (lag0 * lag1).sqrt(),
        cross: cross / pairs,
        expected_rho: rho_sum / pairs,
    }
}

#[test]
fn correlation_consistent_wages_are_stationary_ar1() {
    let tau = 0.62;
    let m = ar_moments(&constant_tau(tau), RhoMode::CorrelationConsistent, 10_000, 12);
    assert!((m.variance - 1.0).abs() < 0.02, "variance {}", m.variance);
    assert!((m.autocorrelation - tau).abs() < 0.02, "autocorrelation {}", m.autocorrelation);
    assert!((m.expected_rho - tau).abs() < 1e-12);
}

#[test]
fn paper_formula_mode_uses_the_root_as_ar_coefficient() {
    let tau = 0.3;
    let m = ar_moments(&constant_tau(tau), RhoMode::PaperFormula, 10_000, 12);
    assert!((m.variance - 1.0).abs() < 0.02, "variance {}", m.variance);
    assert!((m.cross - m.expected_rho).abs() < 0.02, "{} vs {}", m.cross, m.expected_rho);
    assert!((m.expected_rho - tau).abs() > 0.05);
}

#[test]
fn generation_independent_of_thread_count() {
    let p = published_params();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_panel(&PopulationSpec::default(), &p, 700, 6, 77).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn prediction_independent_of_thread_count() {
    let p = published_params();
    let observed = generate_panel(&PopulationSpec::default(), &p, 500, 6, 78).unwrap().histories();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| predict_panel(&observed, &p, 5, &PredictOptions::default()).unwrap().0)
    };
    let a = run(1);
    assert_eq!(a, run(4));
    for (s, o) in a.individuals.iter().zip(&observed) {
        assert_eq!(s.history.years[0], o.years[0]);
        assert_eq!(s.history.years.len(), o.years.len());
    }
}

fn check_history(h: &IndividualHistory) -> Result<(), TestCaseError> {
    for (t, r) in h.years.iter().enumerate() {
        prop_assert_eq!(r.state.is_employed(), r.log_wage.is_some());
        if t > 0 {
            let prev = &h.years[t - 1];
            let step = if prev.state.is_employed() { 0.1 } else { 0.0 };
            prop_assert!((r.zv.xp - prev.zv.xp - step).abs() < 1e-12);
            prop_assert_eq!(r.year, prev.year + 1);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_panels_respect_state_and_experience_rules(seed in any::<u64>(), years in 3usize..12) {
        let p = published_params();
        let panel = generate_panel(&PopulationSpec::default(), &p, 60, years, seed).unwrap();
        let again = generate_panel(&PopulationSpec::default(), &p, 60, years, seed).unwrap();
        prop_assert_eq!(&panel, &again);
        for s in &panel.individuals {
            prop_assert_eq!(s.history.years.len(), years);
            prop_assert!((s.history.years[0].zv.xp - s.history.zf.first_xp).abs() < 1e-12);
            check_history(&s.history)?;
        }
    }

    #[test]
    fn predicted_panels_respect_state_and_experience_rules(seed in any::<u64>()) {
        let p = published_params();
        let observed = generate_panel(&PopulationSpec::default(), &p, 40, 5, seed).unwrap().histories();
        let (pred, report) = predict_panel(&observed, &p, seed ^ 7, &PredictOptions::default()).unwrap();
        prop_assert!(report.skipped.is_empty());
        for s in &pred.individuals {
            check_history(&s.history)?;
        }
    }
}
