//! Acceptance suite. Each criterion prints one `ACCEPTANCE <n> PASS|FAIL`
//! line with its measurements and wall-clock time, then asserts.
//!
//! Criteria run one at a time behind a lock so their timings are not
//! distorted by each other. Run with `--nocapture` to see the report lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use labordyn_cli::{run_from_args, RunManifest, MANIFEST_FILE};
use labordyn_core::diagnostics::{matrix_distance, transition_matrix, transition_matrix_where, TransitionMatrix};
use labordyn_core::em::{e_step_joint, estimate, EmOptions, Phase};
use labordyn_core::kernels::{mlogit_gradient, mlogit_objective, ols_gradient, ols_objective, GroupedLogitData, WeightedDataset};
use labordyn_core::lifetime::{
    lifetime_value, percentile_grid, retirement_value, Counterfactuals, Group, LifetimeSettings, Sector,
};
use labordyn_core::math::fisher_link;
use labordyn_core::model::{bivariate_normal_logpdf, income_mean, income_sd, transition_probs};
use labordyn_core::panel_io::{nearest_rank, prepare, PrepareOptions, MIN_WINSOR_CELL};
use labordyn_core::published::published_params;
use labordyn_core::simulate::{generate_panel, predict_panel, simulate_path, FirstYear, PathSpec, PopulationSpec, PredictOptions, SeededStream};
use labordyn_core::{
    Education, EmploymentState, FixedCovariates, IndividualHistory, ParameterSet, ReplacementRate, RhoMode,
    TimeVaryingCovariates, YearRecord,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(n: u32, name: &str, limit_secs: f64, body: impl FnOnce() -> (bool, String)) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let (ok, detail) = body();
    let secs = t.elapsed().as_secs_f64();
    let in_time = secs < limit_secs;
    let pass = ok && in_time;
    let limit = if limit_secs.is_finite() {
        format!("limit {limit_secs:.0}s{}", if in_time { "" } else { ", exceeded" })
    } else {
        "no limit".to_string()
    };
    println!(
        "ACCEPTANCE {n} {} {name}: {detail}; runtime {secs:.1}s ({limit})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}; runtime {secs:.1}s");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..at.len())
        .map(|k| {
            x[k] = at[k] + h;
            let up = f(&x);
            x[k] = at[k] - h;
            let down = f(&x);
            x[k] = at[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(a).max(1.0)
}

#[test]
fn criterion_1_kernel_correctness() {
    criterion(1, "kernel correctness", 10.0, || {
        let mut worst_logit: f64 = 0.0;
        let mut worst_ols: f64 = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let (p, j) = (2 + (seed as usize * 3) % 29, 2 + seed as usize % 4);
            let mut data = GroupedLogitData::new(p, j);
            for _ in 0..60 {
                let mut x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                x[p - 1] = 1.0;
                let counts: Vec<f64> = (0..j).map(|_| rng.random_range(0.0..3.0)).collect();
                data.push(&x, &counts);
            }
            let mut coefs: Vec<f64> = (0..p * j).map(|_| rng.random_range(-0.5..0.5)).collect();
            coefs[..p].fill(0.0);
            let analytic = mlogit_gradient(&data, &coefs);
            let numeric = central_difference(|c| mlogit_objective(&data, c), &coefs, 1e-5);
            worst_logit = worst_logit.max(relative_error(&analytic, &numeric[p..]));

            let q = 1 + (seed as usize * 7) % 30;
            let mut ols = WeightedDataset::new(q);
            for _ in 0..80 {
                let x: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
                ols.push(&x, rng.random_range(-5.0..5.0), rng.random_range(0.1..2.0));
            }
            let beta: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = ols_gradient(&ols, &beta);
            let numeric = central_difference(|b| ols_objective(&ols, b), &beta, 1e-4);
            worst_ols = worst_ols.max(relative_error(&analytic, &numeric));
        }
        let mut worst_bvn: f64 = 0.0;
        for i in 0..100 {
            let a = -3.0 + 6.0 * (i % 10) as f64 / 9.0;
            let b = 2.5 - 5.0 * (i / 10) as f64 / 9.0;
            let tau = -0.95 + 1.9 * ((i * 37) % 100) as f64 / 99.0;
            let one = 1.0 - tau * tau;
            let direct = -(2.0 * std::f64::consts::PI).ln() - 0.5 * one.ln() - (a * a - 2.0 * tau * a * b + b * b) / (2.0 * one);
            worst_bvn = worst_bvn.max((bivariate_normal_logpdf(a, b, tau).unwrap() - direct).abs());
        }
        (
            worst_logit < 1e-6 && worst_ols < 1e-6 && worst_bvn < 1e-12,
            format!("mlogit FD rel err {worst_logit:.2e}, OLS FD rel err {worst_ols:.2e} (< 1e-6); bvn max abs err {worst_bvn:.2e} (< 1e-12)"),
        )
    });
}

#[test]
fn criterion_2_em_monotonicity() {
    criterion(2, "EM monotonicity (5k x 8)", 300.0, || {
        let p = published_params();
        let panel = generate_panel(&PopulationSpec::default(), &p, 5000, 8, 2024).unwrap().histories();
        let opts = EmOptions::from_config(&p.config, 2024);
        let est = estimate(&panel, &p.config, &opts).unwrap();
        let v = est.trace.monotonicity_violations(1e-8);
        let counts = [Phase::Mobility, Phase::Income, Phase::Joint].map(|ph| est.trace.phase(ph).count());
        (
            v.is_empty() && counts.iter().all(|c| *c > 0),
            format!(
                "iterations per phase {counts:?}, converged {:?}, violations {}",
                est.converged,
                v.len()
            ),
        )
    });
}

/// Posterior-weighted model wage mean and sd per employed state, against the
/// same moments under the generating classes.
fn wage_moments(panel: &[IndividualHistory], p: &ParameterSet, weights: &dyn Fn(usize) -> Vec<(usize, usize, f64)>) -> [(f64, f64); 4] {
    let mut acc = [(0.0, 0.0, 0.0); 4];
    for (i, h) in panel.iter().enumerate() {
        let w = weights(i);
        for r in h.years.iter().filter(|r| r.state.is_employed()) {
            let a = &mut acc[r.state.code() - 1];
            for &(km, ky, pr) in &w {
                a.0 += pr * income_mean(r.state, &r.zv, &h.zf, ky, &p.income).unwrap();
                a.1 += pr * income_sd(r.state, &r.zv, &h.zf, km, ky, &p.income).unwrap();
                a.2 += pr;
            }
        }
    }
    acc.map(|(m, s, n)| (m / n, s / n))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn criterion_3_parameter_recovery() {
    criterion(3, "parameter recovery (50k x 8)", 1800.0, || {
        let truth = published_params();
        let spec = PopulationSpec::default();
        let sim = generate_panel(&spec, &truth, 50_000, 8, 3033).unwrap();
        let panel = sim.histories();
        let opts = EmOptions::from_config(&truth.config, 3033);
        let est = estimate(&panel, &truth.config, &opts).unwrap();
        let fit = &est.params;

        let implied_truth = generate_panel(&spec, &truth, 200_000, 8, 77).unwrap().histories();
        let implied_fit = generate_panel(&spec, fit, 200_000, 8, 77).unwrap().histories();
        let d_matrix = matrix_distance(&transition_matrix(&implied_truth), &transition_matrix(&implied_fit));

        let (post, _) = e_step_joint(&panel, &fit.mobility, &fit.income);
        let k_y = fit.config.k_y;
        let est_w = |i: usize| {
            post.row(i)
                .iter()
                .enumerate()
                .map(|(c, pr)| (c / k_y, c % k_y, *pr))
                .collect::<Vec<_>>()
        };
        let true_w = |i: usize| vec![(sim.individuals[i].km, sim.individuals[i].ky, 1.0)];
        let m_fit = wage_moments(&panel, fit, &est_w);
        let m_true = wage_moments(&panel, &truth, &true_w);
        let d_wage = m_fit
            .iter()
            .zip(&m_true)
            .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
            .fold(0.0, f64::max);

        let k_m = fit.config.k_m;
        let marginal = post.mobility_marginal(k_m, k_y);
        let best = permutations(k_m)
            .into_iter()
            .max_by(|a, b| {
                let score = |perm: &Vec<usize>| -> f64 {
                    (0..panel.len()).map(|i| marginal.row(i)[perm[sim.individuals[i].km]]).sum()
                };
                score(a).total_cmp(&score(b))
            })
            .unwrap();
        let mut true_share = vec![0.0; k_m];
        let mut fit_share = vec![0.0; k_m];
        for i in 0..panel.len() {
            true_share[sim.individuals[i].km] += 1.0 / panel.len() as f64;
            for k in 0..k_m {
                fit_share[k] += marginal.row(i)[best[k]] / panel.len() as f64;
            }
        }
        let d_share = true_share
            .iter()
            .zip(&fit_share)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (
            d_matrix < 0.02 && d_wage < 0.02 && d_share < 0.03,
            format!(
                "(a) transition sup-norm {d_matrix:.4} (< 0.02); (b) wage mean/sd max gap {d_wage:.4} (< 0.02); \
                 (c) class share max gap {d_share:.4} (< 0.03), true {true_share:.3?} fit {fit_share:.3?}; converged {:?}",
                est.converged
            ),
        )
    });
}

#[test]
fn criterion_4_prediction_fit() {
    criterion(4, "prediction-fit reproduction", 300.0, || {
        let p = published_params();
        let observed = generate_panel(&PopulationSpec::default(), &p, 200_000, 8, 4044).unwrap().histories();
        let (pred, report) = predict_panel(&observed, &p, 4045, &PredictOptions::default()).unwrap();
        let pred = pred.histories();
        let three = |x: &[IndividualHistory]| -> [TransitionMatrix; 3] {
            [
                transition_matrix(x.iter()),
                transition_matrix_where(x, |h| !h.zf.female),
                transition_matrix_where(x, |h| h.zf.female),
            ]
        };
        let (a, b) = (three(&observed), three(&pred));
        let d = [0, 1, 2].map(|k| matrix_distance(&a[k], &b[k]));
        (
            report.skipped.is_empty() && d[0] <= 0.01 && d[1] <= 0.08 && d[2] <= 0.01,
            format!("sup-norm aggregate {:.4} (<= 0.01), men {:.4} (<= 0.08), women {:.4} (<= 0.01)", d[0], d[1], d[2]),
        )
    });
}

fn random_path(rng: &mut ChaCha8Rng) -> Vec<YearRecord> {
    let len = rng.random_range(1..45);
    let mut xp = 0.0;
    (0..len)
        .map(|t| {
            let state = EmploymentState::from_code(rng.random_range(0..5)).unwrap();
            let r = YearRecord {
                year: 1990 + t as i32,
                state,
                log_wage: state.is_employed().then(|| rng.random_range(0.5..4.5)),
                zv: TimeVaryingCovariates::new(xp),
            };
            if state.is_employed() {
                xp += 0.1;
            }
            r
        })
        .collect()
}

fn brute_force(path: &[YearRecord], beta: f64, rr: ReplacementRate, horizon: u32) -> f64 {
    let mut total = 0.0;
    let mut last = None;
    for (t, r) in path.iter().enumerate() {
        if let Some(y) = r.log_wage {
            total += beta.powi(t as i32) * y.exp();
            last = Some((y, r.state.is_public()));
        }
    }
    let Some((y, public)) = last else { return 0.0 };
    for j in 0..horizon {
        total += beta.powi((path.len() as u32 + j) as i32) * rr.for_sector(public) * y.exp();
    }
    total
}

#[test]
fn criterion_5_lifetime_oracle() {
    criterion(5, "lifetime-value oracle", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5055);
        let rates = [ReplacementRate::Uniform(0.4), ReplacementRate::Uniform(0.7), ReplacementRate::preset("sector").unwrap()];
        let (mut worst, mut closed_ok, mut mono_ok) = (0.0f64, true, true);
        for i in 0..1000 {
            let path = random_path(&mut rng);
            let beta = rng.random_range(0.9..0.99);
            let rr = rates[i % 3];
            let h = rng.random_range(1..40u32);
            let v = lifetime_value(&path, beta, rr, h);
            let oracle = brute_force(&path, beta, rr, h);
            worst = worst.max((v.value - oracle).abs() / oracle.max(1.0));

            let y: f64 = rng.random_range(0.0..4.0);
            let r: f64 = rng.random_range(0.0..1.0);
            let closed = std::hint::black_box((1.0 - beta.powi(h as i32)) / (1.0 - beta)) * r * y.exp();
            closed_ok &= retirement_value(y, beta, r, h) == closed;

            if !v.never_employed {
                let up_beta = lifetime_value(&path, beta + 0.005, rr, h);
                let up_rr = lifetime_value(&path, beta, ReplacementRate::Uniform(rr.for_sector(true) + 0.1), h);
                let base = lifetime_value(&path, beta, ReplacementRate::Uniform(rr.for_sector(true)), h);
                mono_ok &= up_beta.value > v.value && up_rr.value > base.value;
            }
        }
        (
            worst < 1e-10 && closed_ok && mono_ok,
            format!("max rel err vs brute force {worst:.2e} (< 1e-10) over 1000 trajectories; closed form exact {closed_ok}; beta/RR monotone {mono_ok}"),
        )
    });
}

#[test]
fn criterion_6_counterfactual_orderings() {
    criterion(6, "counterfactual orderings", 600.0, || {
        let p = published_params();
        let panel = generate_panel(&PopulationSpec::default(), &p, 50_000, 8, 6066).unwrap().histories();
        let settings = LifetimeSettings::new(&p.config, &PopulationSpec::default());
        let cf = Counterfactuals::run(&panel, &p, &settings, 6067).unwrap();
        let g = percentile_grid();
        let loss_pub = cf.mobility_loss(Sector::Public, Group::All, &g).unwrap();
        let loss_pvt = cf.mobility_loss(Sector::Private, Group::All, &g).unwrap();
        let premium = cf.premium_with_selection(Group::All, &g).unwrap();
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let a = min(&loss_pub.log_diff).min(min(&loss_pvt.log_diff));
        let gaps: Vec<f64> = loss_pvt.log_diff.iter().zip(&loss_pub.log_diff).map(|(x, y)| x - y).collect();
        let b = min(&gaps);
        let changes = premium.sign_changes();
        let c = premium.log_diff[0] > 0.0 && changes.len() == 1 && (36.0..=56.0).contains(&changes[0]);
        (
            a > 0.0 && b > 0.0 && c,
            format!(
                "(a) min job-for-life minus mobility {a:.4} (> 0); (b) min private-minus-public loss {b:.4} (> 0); \
                 (c) premium at p1 {:.4}, sign changes at {changes:?} (want one, in 36..=56)",
                premium.log_diff[0]
            ),
        )
    });
}

fn constant_tau(tau: f64) -> ParameterSet {
    let mut p = published_params();
    let names = p.config.design().xi_names();
    for (v, n) in p.income.xi.iter_mut().zip(&names) {
        *v = if n == "const" { fisher_link(tau) } else { 0.0 };
    }
    p
}

#[test]
fn criterion_7_simulation_laws() {
    criterion(7, "simulation laws", 120.0, || {
        let p = published_params();
        let zf = FixedCovariates::new(true, Education::Low, 1.2).unwrap();
        let per_origin = 200_000u64;
        let (mut worst_z, mut outside) = (0.0f64, 0usize);
        for (k, from) in EmploymentState::ALL.iter().enumerate() {
            let km = k % p.config.k_m;
            let mut counts = [0u64; 5];
            let mut zv_prev = TimeVaryingCovariates::new(zf.first_xp);
            for i in 0..per_origin {
                let spec = PathSpec {
                    first: FirstYear::Observed {
                        state: *from,
                        log_wage: from.is_employed().then_some(2.0),
                    },
                    start_year: 2000,
                    years: 2,
                    forced_state: None,
                    first_residual: None,
                    rho_mode: RhoMode::CorrelationConsistent,
                };
                let path = simulate_path(
                    &zf,
                    km,
                    1,
                    &p.mobility,
                    &p.income,
                    &spec,
                    &mut SeededStream::new(7077, i, "states"),
                    &mut SeededStream::new(7077, i, "wages"),
                );
                counts[path[1].state.code()] += 1;
                zv_prev = path[0].zv;
            }
            let probs = transition_probs(*from, &zv_prev, &zf, km, &p.mobility).unwrap();
            for (c, q) in counts.iter().zip(&probs) {
                let sd = (q * (1.0 - q) / per_origin as f64).sqrt();
                let z = (*c as f64 / per_origin as f64 - q).abs() / sd.max(f64::MIN_POSITIVE);
                worst_z = worst_z.max(z);
                outside += (z > 3.0) as usize;
            }
        }

        let tau = 0.62;
        let q = constant_tau(tau);
        let state = EmploymentState::PrivateFullTime;
        let (mut s2, mut n, mut cross, mut l0, mut l1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..20_000u64 {
            let spec = PathSpec {
                first: FirstYear::Draw,
                start_year: 2000,
                years: 12,
                forced_state: Some(state),
                first_residual: None,
                rho_mode: RhoMode::CorrelationConsistent,
            };
            let path = simulate_path(
                &zf,
                2,
                0,
                &q.mobility,
                &q.income,
                &spec,
                &mut SeededStream::new(7078, i, "states"),
                &mut SeededStream::new(7078, i, "wages"),
            );
            let e: Vec<f64> = path
                .iter()
                .map(|r| {
                    let mu = income_mean(state, &r.zv, &zf, 0, &q.income).unwrap();
                    let sd = income_sd(state, &r.zv, &zf, 2, 0, &q.income).unwrap();
                    (r.log_wage.unwrap() - mu) / sd
                })
                .collect();
            for t in 0..e.len() {
                s2 += e[t] * e[t];
                n += 1.0;
                if t > 0 {
                    cross += e[t] * e[t - 1];
                    l0 += e[t - 1] * e[t - 1];
                    l1 += e[t] * e[t];
                }
            }
        }
        let var = s2 / n;
        let ac = cross / (l0 * l1).sqrt();
        (
            outside == 0 && (var - 1.0).abs() < 0.02 && (ac - tau).abs() < 0.02,
            format!(
                "10^6 transition draws: {outside} of 25 cells outside 3 sigma (max |z| {worst_z:.2}); \
                 AR(1) variance {var:.4} (1 +/- 0.02), lag-1 autocorrelation {ac:.4} (tau {tau} +/- 0.02)"
            ),
        )
    });
}

fn fixture() -> Vec<IndividualHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(8088);
    let zf = |xp: f64| FixedCovariates::new(false, Education::Medium, xp).unwrap();
    let mut out = Vec::new();
    // a large (state, year) cell for winsorization, with one absurd outlier
    for id in 1..=300u64 {
        let spells = (2010..2016).map(|y| {
            let w = if id == 7 && y == 2012 { 20.0 } else { rng.random_range(9.0..11.0) };
            (y, EmploymentState::PrivateFullTime, Some(w))
        });
        out.push(IndividualHistory::from_spells(id, zf(1.0), spells));
    }
    // interior gaps
    out.push(IndividualHistory::from_spells(
        1001,
        zf(0.5),
        [
            (2010, EmploymentState::PublicFullTime, Some(10.0)),
            (2011, EmploymentState::PublicFullTime, Some(10.1)),
            (2014, EmploymentState::PublicPartTime, Some(9.0)),
            (2015, EmploymentState::PublicFullTime, Some(10.2)),
        ],
    ));
    // young leaver, imputed to the end; old leaver (age 60 by 2012) is not
    out.push(IndividualHistory::from_spells(
        1002,
        zf(0.2),
        (2010..2013).map(|y| (y, EmploymentState::PrivatePartTime, Some(9.0))),
    ));
    out.push(IndividualHistory::from_spells(
        1003,
        zf(3.3),
        (2010..2013).map(|y| (y, EmploymentState::PublicFullTime, Some(10.0))),
    ));
    // too short
    out.push(IndividualHistory::from_spells(
        1004,
        zf(1.0),
        [(2010, EmploymentState::PrivateFullTime, Some(10.0)), (2011, EmploymentState::NonEmployed, None)],
    ));
    out
}

#[test]
fn criterion_8_preparation_rules() {
    criterion(8, "preparation rules", 10.0, || {
        let raw = fixture();
        let opts = PrepareOptions::default();
        let (once, report) = prepare(&raw, &opts).unwrap();
        let (twice, _) = prepare(&once, &opts).unwrap();
        let idempotent = once == twice;
        let contiguous = once.iter().all(|h| h.is_contiguous() && h.validate().is_ok());
        let no_wage_in_zero = once
            .iter()
            .flat_map(|h| &h.years)
            .all(|r| r.state.is_employed() == r.log_wage.is_some());
        let by_id: BTreeMap<u64, &IndividualHistory> = once.iter().map(|h| (h.id, h)).collect();
        let dropped_short = !by_id.contains_key(&1004) && report.dropped == vec![(1004, 2)];
        let gap = by_id[&1001].years.iter().filter(|r| r.year == 2012 || r.year == 2013).all(|r| r.state == EmploymentState::NonEmployed)
            && by_id[&1001].len() == 6;
        let leaver = by_id[&1002].last_year() == Some(2015) && by_id[&1002].years[3..].iter().all(|r| r.state == EmploymentState::NonEmployed);
        let old = by_id[&1003].last_year() == Some(2012);

        let mut cell: Vec<f64> = raw
            .iter()
            .flat_map(|h| &h.years)
            .filter(|r| r.year == 2012 && r.state == EmploymentState::PrivateFullTime)
            .filter_map(|r| r.log_wage)
            .collect();
        cell.sort_by(f64::total_cmp);
        let (lo, hi) = (nearest_rank(&cell, 0.01), nearest_rank(&cell, 0.99));
        let outlier = by_id[&7].years.iter().find(|r| r.year == 2012).unwrap().log_wage == Some(hi);
        let bounded = once
            .iter()
            .flat_map(|h| &h.years)
            .filter(|r| r.year == 2012 && r.state == EmploymentState::PrivateFullTime)
            .all(|r| (lo..=hi).contains(&r.log_wage.unwrap()));
        let small_cells_skipped = report.winsor.skipped.iter().all(|c| c.2 < MIN_WINSOR_CELL);
        let checks = [
            ("idempotent", idempotent),
            ("contiguous", contiguous),
            ("no wage in state 0", no_wage_in_zero),
            ("short history dropped", dropped_short),
            ("interior gap imputed", gap),
            ("leaver imputed", leaver),
            ("age-60 stop", old),
            ("outlier to 99th pct", outlier),
            ("cell within bounds", bounded),
            ("small cells skipped", small_cells_skipped),
        ];
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        (
            failed.is_empty(),
            format!("{} checks, failed {failed:?}", checks.len()),
        )
    });
}

fn run(args: &[String]) -> i32 {
    let mut v = vec!["labordyn".to_string()];
    v.extend_from_slice(args);
    run_from_args(v)
}

fn csv_outputs(dir: &Path) -> Vec<PathBuf> {
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    m.outputs.into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).collect()
}

/// Largest absolute difference between numeric fields of two CSVs whose
/// non-numeric fields agree; `None` if their shape or text differs.
fn numeric_gap(a: &str, b: &str) -> Option<f64> {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() {
        return None;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        let (fx, fy): (Vec<&str>, Vec<&str>) = (x.split(',').collect(), y.split(',').collect());
        if fx.len() != fy.len() {
            return None;
        }
        for (u, v) in fx.iter().zip(&fy) {
            match (u.parse::<f64>(), v.parse::<f64>()) {
                (Ok(p), Ok(q)) => worst = worst.max((p - q).abs() / p.abs().max(1.0)),
                _ if u == v => {}
                _ => return None,
            }
        }
    }
    Some(worst)
}

#[test]
fn criterion_9_determinism() {
    criterion(9, "determinism from manifests", f64::INFINITY, || {
        let dir = TempDir::new().unwrap();
        let root = dir.path();
        let s = |p: PathBuf| p.to_string_lossy().into_owned();
        let gen = root.join("generate");
        let est = root.join("estimate");
        let life = root.join("lifetime");
        let panel = s(gen.join("panel.csv"));
        let runs: Vec<(PathBuf, Vec<String>)> = vec![
            (gen.clone(), ["generate", "--n", "2000", "--years", "8", "--seed", "9"].map(String::from).to_vec()),
            (
                est.clone(),
                vec!["estimate".into(), "--panel".into(), panel.clone(), "--k-m".into(), "2".into(), "--k-y".into(), "2".into(), "--max-iter".into(), "25".into(), "--seed".into(), "9".into()],
            ),
            (
                life.clone(),
                vec!["lifetime".into(), "--panel".into(), panel.clone(), "--rr".into(), "0.4".into(), "--rr".into(), "sector".into(), "--seed".into(), "9".into()],
            ),
        ];
        let mut notes = Vec::new();
        let mut ok = true;
        for (out, args) in &runs {
            let mut a = args.clone();
            a.extend(["--threads".into(), "1".into(), "--out".into(), s(out.clone())]);
            let code = run(&a);
            ok &= code == 0 || code == labordyn_cli::EXIT_NON_CONVERGENCE;
            let manifest = s(out.join(MANIFEST_FILE));
            let name = out.file_name().unwrap().to_string_lossy().into_owned();
            let (r1, r8) = (root.join(format!("{name}-replay1")), root.join(format!("{name}-replay8")));
            for (target, threads) in [(&r1, "1"), (&r8, "8")] {
                let code = run(&["replay".into(), manifest.clone(), "--out".into(), s(target.clone()), "--threads".into(), threads.into()]);
                ok &= code == 0 || code == labordyn_cli::EXIT_NON_CONVERGENCE;
            }
            let files = csv_outputs(out);
            let (mut identical, mut worst) = (true, 0.0f64);
            for f in &files {
                let fname = f.file_name().unwrap();
                let base = std::fs::read_to_string(f).unwrap();
                identical &= std::fs::read_to_string(r1.join(fname)).unwrap() == base;
                match numeric_gap(&base, &std::fs::read_to_string(r8.join(fname)).unwrap()) {
                    Some(g) => worst = worst.max(g),
                    None => worst = f64::INFINITY,
                }
            }
            ok &= identical && worst <= 1e-10 && !files.is_empty();
            notes.push(format!("{name}: {} CSVs byte-identical at 1 thread {identical}, max gap at 8 threads {worst:.1e}", files.len()));
        }
        (ok, notes.join("; "))
    });
}
