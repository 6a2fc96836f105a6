use labordyn_core::math::{correlation_link, fisher_link, std_normal_logpdf};
use labordyn_core::model::{
    bivariate_normal_logpdf, class_prior_income, class_prior_mobility, income_loglik, income_mean, income_sd,
    initial_state_probs, mixture_loglik, pair_correlation, rho_from_sigma_tau, transition_probs,
};
use labordyn_core::published::published_params;
use labordyn_core::simulate::{generate_panel, PopulationSpec};
use labordyn_core::{
    Design, Education, EmploymentState, FixedCovariates, IncomeParams, IndividualHistory, LogitCoefs,
    MobilityParams, TimeVaryingCovariates,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EMPLOYED: [EmploymentState; 4] = [
    EmploymentState::PrivateFullTime,
    EmploymentState::PublicFullTime,
    EmploymentState::PrivatePartTime,
    EmploymentState::PublicPartTime,
];

fn arb_zf() -> impl Strategy<Value = FixedCovariates> {
    (any::<bool>(), 0u8..3, 0u32..35).prop_map(|(f, e, xp)| {
        FixedCovariates::new(f, Education::from_code(e).unwrap(), xp as f64 / 10.0).unwrap()
    })
}

fn arb_state() -> impl Strategy<Value = EmploymentState> {
    (0u8..5).prop_map(|c| EmploymentState::from_code(c).unwrap())
}

fn random_mobility(seed: u64, scale: f64) -> MobilityParams {
    MobilityParams::random(Design::new(4, 3), scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_probability_vector(p: &[f64]) -> Result<(), TestCaseError> {
    let s: f64 = p.iter().sum();
    prop_assert!((s - 1.0).abs() < 1e-12, "sum {}", s);
    prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    Ok(())
}

fn shift(block: &mut LogitCoefs, c: &[f64]) {
    for j in 0..block.n_outcomes() {
        for (v, d) in block.row_mut(j).iter_mut().zip(c) {
            *v += d;
        }
    }
}

fn swap_label(name: &str, a: &str, b: &str) -> String {
    if name.contains(a) {
        name.replace(a, b)
    } else if name.contains(b) {
        name.replace(b, a)
    } else {
        name.to_string()
    }
}

fn permute_columns(v: &[f64], names: &[String], a: &str, b: &str) -> Vec<f64> {
    names
        .iter()
        .map(|n| {
            let target = swap_label(n, a, b);
            v[names.iter().position(|m| *m == target).unwrap()]
        })
        .collect()
}

fn permute_logit(block: &LogitCoefs, names: &[String], a: &str, b: &str) -> LogitCoefs {
    let mut out = block.clone();
    for j in 0..block.n_outcomes() {
        let row = permute_columns(block.row(j), names, a, b);
        out.row_mut(j).copy_from_slice(&row);
    }
    out
}

fn swap_rows(block: &mut LogitCoefs, i: usize, j: usize) {
    let ri = block.row(i).to_vec();
    let rj = block.row(j).to_vec();
    block.row_mut(i).copy_from_slice(&rj);
    block.row_mut(j).copy_from_slice(&ri);
}

/// Relabels transition classes 1 ↔ 2 and income classes 1 ↔ 2.
fn relabel(m: &MobilityParams, y: &IncomeParams) -> (MobilityParams, IncomeParams) {
    let d = m.design;
    let mut m2 = m.clone();
    swap_rows(&mut m2.kappa_m, 1, 2);
    m2.chi0 = permute_logit(&m.chi0, &d.chi0_names(), "km1", "km2");
    m2.chi = permute_logit(&m.chi, &d.chi_names(), "km1", "km2");
    let mut y2 = y.clone();
    let perm_both = |v: &[f64], names: &[String]| {
        let once = permute_columns(v, names, "km1", "km2");
        permute_columns(&once, names, "ky1", "ky2")
    };
    y2.kappa_y = permute_logit(&y.kappa_y, &d.kappa_y_names(), "km1", "km2");
    swap_rows(&mut y2.kappa_y, 1, 2);
    y2.mu = perm_both(&y.mu, &d.mu_names());
    y2.sigma = perm_both(&y.sigma, &d.sigma_names());
    y2.xi = perm_both(&y.xi, &d.xi_names());
    (m2, y2)
}

/// Direct conditional-normal oracle: ỹ_t | ỹ_{t−1} ~ N(τ ỹ_{t−1}, 1 − τ²).
fn income_oracle(h: &IndividualHistory, km: usize, ky: usize, p: &IncomeParams) -> f64 {
    let mut ll = 0.0;
    let mut prev: Option<(usize, f64)> = None;
    for (t, r) in h.years.iter().enumerate() {
        let Some(y) = r.log_wage else {
            prev = None;
            continue;
        };
        let mu = income_mean(r.state, &r.zv, &h.zf, ky, p).unwrap();
        let sd = income_sd(r.state, &r.zv, &h.zf, km, ky, p).unwrap();
        let z = (y - mu) / sd;
        ll -= sd.ln();
        match prev {
            Some((tp, zp)) if h.years[tp].year + 1 == r.year => {
                let rp = &h.years[tp];
                let tau = pair_correlation(r.state, rp.state, &r.zv, &rp.zv, km, ky, p).unwrap();
                let v = 1.0 - tau * tau;
                let e = z - tau * zp;
                ll += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - e * e / (2.0 * v);
            }
            _ => ll += std_normal_logpdf(z),
        }
        prev = Some((t, z));
    }
    ll
}

#[test]
fn relabeling_leaves_mixture_likelihood_unchanged() {
    let p = published_params();
    let (m2, y2) = relabel(&p.mobility, &p.income);
    assert_ne!(m2, p.mobility);
    let panel = generate_panel(&PopulationSpec::default(), &p, 200, 8, 31).unwrap().histories();
    for h in &panel {
        let a = mixture_loglik(h, &p.mobility, &p.income);
        let b = mixture_loglik(h, &m2, &y2);
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn income_loglik_matches_conditional_density_oracle() {
    let p = published_params();
    let panel = generate_panel(&PopulationSpec::default(), &p, 300, 10, 37).unwrap().histories();
    for h in &panel {
        for km in 0..4 {
            for ky in 0..3 {
                let a = income_loglik(h, km, ky, &p.income);
                let b = income_oracle(h, km, ky, &p.income);
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn fisher_round_trip_within_double_precision() {
    // τ(s) = tanh(s/2) is representable to one ulp, so the inverse is exact
    // to 1e-10 only while 1 − τ² stays well above the ulp; beyond that the
    // error grows like ulp / (1 − τ²).
    let mut s = -30.0;
    while s <= 30.0 {
        let tau = correlation_link(s);
        assert!(tau.abs() <= 1.0);
        let err = (fisher_link(tau) - s).abs();
        if s.abs() <= 12.0 {
            assert!(err < 1e-10, "s {s} err {err}");
        } else {
            let bound = 4.0 * f64::EPSILON / (1.0 - tau * tau).max(f64::MIN_POSITIVE);
            assert!(err <= bound.max(1e-10) || tau.abs() == 1.0, "s {s} err {err}");
        }
        s += 0.01;
    }
}

#[test]
fn bvn_with_zero_correlation_is_product_of_marginals() {
    for i in 0..41 {
        for j in 0..41 {
            let (a, b) = (-5.0 + 0.25 * i as f64, -5.0 + 0.25 * j as f64);
            let d = bivariate_normal_logpdf(a, b, 0.0).unwrap() - std_normal_logpdf(a) - std_normal_logpdf(b);
            assert!(d.abs() < 1e-12);
        }
    }
}

#[test]
fn rho_is_continuous_at_zero() {
    for i in 0..50 {
        let s2 = 0.01 + 0.2 * i as f64;
        for k in 1..=100 {
            let tau = k as f64 * 1e-4;
            for t in [tau, -tau] {
                let rho = rho_from_sigma_tau(s2, t).abs();
                // 2|τ| / (σ² + √(σ⁴ + 4τ²)) never exceeds |τ|/σ²
                assert!(rho <= t.abs() / s2 * (1.0 + 1e-12));
                if s2 >= 0.62 {
                    assert!(rho <= t.abs() * (1.0 + s2));
                }
            }
        }
        assert_eq!(rho_from_sigma_tau(s2, 0.0), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn probability_outputs_are_distributions(
        seed in any::<u64>(),
        scale in 0.0f64..4.0,
        zf in arb_zf(),
        prev in arb_state(),
        xp in 0.0f64..4.0,
        km in 0usize..4,
    ) {
        let m = random_mobility(seed, scale);
        let mut y = IncomeParams::zeros(m.design);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for j in 1..3 {
            for v in y.kappa_y.row_mut(j) {
                *v = rand::Rng::random_range(&mut rng, -scale..=scale);
            }
        }
        assert_probability_vector(&class_prior_mobility(&zf, &m).unwrap())?;
        assert_probability_vector(&class_prior_income(&zf, km, &y).unwrap())?;
        assert_probability_vector(&initial_state_probs(&zf, km, &m).unwrap())?;
        let zv = TimeVaryingCovariates::new(xp);
        assert_probability_vector(&transition_probs(prev, &zv, &zf, km, &m).unwrap())?;
    }

    #[test]
    fn common_shift_leaves_probabilities_unchanged(
        seed in any::<u64>(),
        zf in arb_zf(),
        prev in arb_state(),
        km in 0usize..4,
        c in prop::collection::vec(-3.0f64..3.0, 32),
    ) {
        let m = random_mobility(seed, 1.0);
        let mut s = m.clone();
        shift(&mut s.kappa_m, &c);
        shift(&mut s.chi0, &c);
        shift(&mut s.chi, &c);
        let zv = TimeVaryingCovariates::new(zf.first_xp);
        let pairs = [
            (class_prior_mobility(&zf, &m).unwrap(), class_prior_mobility(&zf, &s).unwrap()),
            (initial_state_probs(&zf, km, &m).unwrap(), initial_state_probs(&zf, km, &s).unwrap()),
            (transition_probs(prev, &zv, &zf, km, &m).unwrap(), transition_probs(prev, &zv, &zf, km, &s).unwrap()),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_correlation_strictly_inside_unit_interval(
        seed in any::<u64>(),
        scale in 0.0f64..20.0,
        cur in 0usize..4,
        prev in 0usize..4,
        xp in 0.0f64..4.0,
        km in 0usize..4,
        ky in 0usize..3,
    ) {
        let mut y = IncomeParams::zeros(Design::new(4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in y.xi.iter_mut() {
            *v = rand::Rng::random_range(&mut rng, -scale..=scale);
        }
        let zv = TimeVaryingCovariates::new(xp);
        let zp = TimeVaryingCovariates::new((xp - 0.1).max(0.0));
        let tau = pair_correlation(EMPLOYED[cur], EMPLOYED[prev], &zv, &zp, km, ky, &y).unwrap();
        prop_assert!(tau > -1.0 && tau < 1.0);
    }

    #[test]
    fn bvn_symmetric_and_normalized_shape(a in -6.0f64..6.0, b in -6.0f64..6.0, tau in -0.99f64..0.99) {
        let l = bivariate_normal_logpdf(a, b, tau).unwrap();
        prop_assert!((l - bivariate_normal_logpdf(b, a, tau).unwrap()).abs() < 1e-12);
        prop_assert!((l - bivariate_normal_logpdf(-a, -b, tau).unwrap()).abs() < 1e-12);
        let quad = (a * a - 2.0 * tau * a * b + b * b) / (1.0 - tau * tau);
        let direct = -(2.0 * std::f64::consts::PI).ln() - 0.5 * (1.0 - tau * tau).ln() - 0.5 * quad;
        prop_assert!((l - direct).abs() < 1e-12);
    }
}
