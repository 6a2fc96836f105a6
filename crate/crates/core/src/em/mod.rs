//! Sequential EM: mobility parameters alone, income parameters given the
//! mobility estimates, then all parameters jointly.

mod income;
mod mobility;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernels::KernelOptions;
use crate::math::{log_sum_exp, KahanSum};
use crate::model::{class_logliks, Scratch};
use crate::par::chunked_reduce;
use crate::params::{euclidean_distance, IncomeParams, MobilityParams, ModelConfig, ParameterSet};
use crate::types::IndividualHistory;

pub use income::{income_init, m_step_income, residual_moments, IncomeLayout};
pub use mobility::{m_step_mobility, MobilityLayout};

/// Per-individual class probabilities, row-major `n × n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub n_classes: usize,
    pub probs: Vec<f64>,
}

impl Posterior {
    pub fn len(&self) -> usize {
        self.probs.len() / self.n_classes.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }

    /// Marginal over transition classes of a joint (kᵐ·K_y + kʸ) posterior.
    pub fn mobility_marginal(&self, k_m: usize, k_y: usize) -> Posterior {
        assert_eq!(self.n_classes, k_m * k_y);
        let mut probs = Vec::with_capacity(self.len() * k_m);
        for i in 0..self.len() {
            let r = self.row(i);
            for km in 0..k_m {
                probs.push(r[km * k_y..(km + 1) * k_y].iter().sum());
            }
        }
        Posterior { n_classes: k_m, probs }
    }
}

/// Posterior from per-class log terms plus the observed-data log-likelihood.
fn normalize(terms: Vec<Vec<f64>>, n_classes: usize) -> (Posterior, f64) {
    let mut probs = Vec::with_capacity(terms.len() * n_classes);
    let mut ll = KahanSum::default();
    for t in terms {
        let lse = log_sum_exp(&t);
        ll.add(lse);
        probs.extend(t.iter().map(|v| (v - lse).exp()));
    }
    (Posterior { n_classes, probs }, ll.value())
}

/// Mobility E-step: Pr{kᵐ | history} and the observed-data log-likelihood of
/// the state paths.
pub fn e_step_mobility(panel: &[IndividualHistory], theta_m: &MobilityParams) -> (Posterior, f64) {
    let d = theta_m.design;
    let terms = per_individual(panel, |h, sc| class_logliks(h, theta_m, None, sc).mobility, &d);
    normalize(terms, d.k_m)
}

/// Joint E-step over all (kᵐ, kʸ) cells, indexed kᵐ·K_y + kʸ.
pub fn e_step_joint(
    panel: &[IndividualHistory],
    theta_m: &MobilityParams,
    theta_y: &IncomeParams,
) -> (Posterior, f64) {
    let d = theta_m.design;
    let terms = per_individual(panel, |h, sc| class_logliks(h, theta_m, Some(theta_y), sc).joint, &d);
    normalize(terms, d.n_classes())
}

fn per_individual<F>(panel: &[IndividualHistory], f: F, d: &crate::design::Design) -> Vec<Vec<f64>>
where
    F: Fn(&IndividualHistory, &mut Scratch) -> Vec<f64> + Sync,
{
    chunked_reduce(
        panel,
        || (Vec::new(), Scratch::new(d)),
        |acc, h| {
            let v = f(h, &mut acc.1);
            acc.0.push(v);
        },
        |a, b| a.0.extend(b.0),
    )
    .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mobility,
    Income,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Mobility => "mobility",
            Phase::Income => "income",
            Phase::Joint => "joint",
        }
    }
}

/// One EM iteration: log-likelihood at the parameters entering the iteration
/// and the distance moved by its M-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: Phase,
    pub iteration: usize,
    pub loglik: f64,
    pub distance: f64,
    /// Inner fits that stopped without meeting the kernel tolerance.
    pub kernel_warnings: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn phase(&self, p: Phase) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.phase == p)
    }

    /// Iterations whose log-likelihood fell below its predecessor by more
    /// than the relative tolerance `tol·max(1, |ℓ|)`.
    pub fn monotonicity_violations(&self, tol: f64) -> Vec<(Phase, usize, f64)> {
        let mut out = Vec::new();
        for w in self.records.windows(2) {
            if w[0].phase != w[1].phase {
                continue;
            }
            let drop = w[0].loglik - w[1].loglik;
            if drop > tol * w[0].loglik.abs().max(1.0) {
                out.push((w[1].phase, w[1].iteration, drop));
            }
        }
        out
    }

    /// JSON-lines rendering, one record per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{{\"phase\":\"{}\",\"iteration\":{},\"loglik\":{:?},\"distance\":{:?},\"kernel_warnings\":{}}}\n",
                    r.phase.name(),
                    r.iteration,
                    r.loglik,
                    r.distance,
                    r.kernel_warnings
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointConfig {
    pub dir: PathBuf,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub kernel: KernelOptions,
    pub checkpoint: Option<CheckpointConfig>,
    /// Independent random starts for the mobility phase; the best final
    /// log-likelihood wins.
    pub restarts: usize,
    pub seed: u64,
    /// Posterior weights below this are dropped from the income M-step.
    pub prune: f64,
}

impl EmOptions {
    pub fn from_config(c: &ModelConfig, seed: u64) -> Self {
        Self {
            tol: c.em_tol,
            max_iter: c.em_max_iter,
            kernel: KernelOptions {
                tol: c.kernel_tol,
                max_iter: c.kernel_max_iter,
            },
            checkpoint: None,
            restarts: 1,
            seed,
            prune: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmRun<P> {
    pub params: P,
    pub trace: Trace,
    pub converged: bool,
    pub iterations: usize,
    /// Observed-data log-likelihood at the returned parameters.
    pub loglik: f64,
}

fn write_checkpoint(
    opts: &EmOptions,
    phase: Phase,
    iteration: usize,
    config: &ModelConfig,
    m: &MobilityParams,
    y: Option<&IncomeParams>,
) -> Result<()> {
    let Some(cp) = &opts.checkpoint else {
        return Ok(());
    };
    if cp.every == 0 || iteration % cp.every != 0 {
        return Ok(());
    }
    let set = ParameterSet {
        config: config.clone(),
        mobility: m.clone(),
        income: y.cloned().unwrap_or_else(|| IncomeParams::zeros(m.design)),
    };
    let text = crate::params_io::format_params(&set)?;
    let body = format!("# phase = {}\n# iteration = {iteration}\n{text}", phase.name());
    crate::io_util::write_atomic(&cp.dir.join(format!("checkpoint_{}.toml", phase.name())), body.as_bytes())
}

/// Phase 1: EM over the mobility parameters.
pub fn run_em_mobility(
    panel: &[IndividualHistory],
    init: &MobilityParams,
    config: &ModelConfig,
    opts: &EmOptions,
) -> Result<EmRun<MobilityParams>> {
    let mut layout = MobilityLayout::new(panel, init.design);
    let mut theta = init.clone();
    let mut trace = Trace::default();
    let mut converged = false;
    let mut it = 0;
    let (mut post, mut ll) = e_step_mobility(panel, &theta);
    while it < opts.max_iter {
        it += 1;
        let (next, warnings) = m_step_mobility(&mut layout, &post, &theta, &opts.kernel)?;
        let dist = euclidean_distance(&theta.flatten(), &next.flatten());
        trace.push(TraceRecord {
            phase: Phase::Mobility,
            iteration: it,
            loglik: ll,
            distance: dist,
            kernel_warnings: warnings,
        });
        theta = next;
        write_checkpoint(opts, Phase::Mobility, it, config, &theta, None)?;
        (post, ll) = e_step_mobility(panel, &theta);
        if dist < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params: theta,
        trace,
        converged,
        iterations: it,
        loglik: ll,
    })
}

/// Phase 1 from `opts.restarts` seeded random starts; keeps the best.
pub fn run_em_mobility_restarts(
    panel: &[IndividualHistory],
    config: &ModelConfig,
    opts: &EmOptions,
) -> Result<EmRun<MobilityParams>> {
    let mut best: Option<EmRun<MobilityParams>> = None;
    for r in 0..opts.restarts.max(1) {
        let init = mobility_init(config, opts.seed, r as u64);
        let run = run_em_mobility(panel, &init, config, opts)?;
        if best.as_ref().is_none_or(|b| run.loglik > b.loglik) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Uniform(−0.1, 0.1) starting coefficients from a keyed stream.
pub fn mobility_init(config: &ModelConfig, seed: u64, restart: u64) -> MobilityParams {
    let mut s = crate::simulate::SeededStream::new(seed, restart, "em-init-mobility");
    MobilityParams::random(config.design(), 0.1, s.rng())
}

/// Phase 2: EM over the income parameters with mobility held fixed.
pub fn run_em_income(
    panel: &[IndividualHistory],
    theta_m: &MobilityParams,
    init: &IncomeParams,
    config: &ModelConfig,
    opts: &EmOptions,
) -> Result<EmRun<IncomeParams>> {
    let layout = IncomeLayout::new(panel, init.design);
    let mut theta = init.clone();
    let mut trace = Trace::default();
    let mut converged = false;
    let mut it = 0;
    let (mut post, mut ll) = e_step_joint(panel, theta_m, &theta);
    while it < opts.max_iter {
        it += 1;
        let (next, warnings) = m_step_income(panel, &layout, &post, &theta, opts)?;
        let dist = euclidean_distance(&theta.flatten(), &next.flatten());
        trace.push(TraceRecord {
            phase: Phase::Income,
            iteration: it,
            loglik: ll,
            distance: dist,
            kernel_warnings: warnings,
        });
        theta = next;
        write_checkpoint(opts, Phase::Income, it, config, theta_m, Some(&theta))?;
        (post, ll) = e_step_joint(panel, theta_m, &theta);
        if dist < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params: theta,
        trace,
        converged,
        iterations: it,
        loglik: ll,
    })
}

/// Phase 3: joint EM; the mobility M-step uses the kᵐ-marginal of the joint posterior.
pub fn run_em_joint(
    panel: &[IndividualHistory],
    theta_m_init: &MobilityParams,
    theta_y_init: &IncomeParams,
    config: &ModelConfig,
    opts: &EmOptions,
) -> Result<EmRun<(MobilityParams, IncomeParams)>> {
    let d = theta_m_init.design;
    let mut mlayout = MobilityLayout::new(panel, d);
    let ylayout = IncomeLayout::new(panel, d);
    let mut tm = theta_m_init.clone();
    let mut ty = theta_y_init.clone();
    let mut trace = Trace::default();
    let mut converged = false;
    let mut it = 0;
    let (mut post, mut ll) = e_step_joint(panel, &tm, &ty);
    while it < opts.max_iter {
        it += 1;
        let marginal = post.mobility_marginal(d.k_m, d.k_y);
        let (nm, w1) = m_step_mobility(&mut mlayout, &marginal, &tm, &opts.kernel)?;
        let (ny, w2) = m_step_income(panel, &ylayout, &post, &ty, opts)?;
        let mut old = tm.flatten();
        old.extend(ty.flatten());
        let mut new = nm.flatten();
        new.extend(ny.flatten());
        let dist = euclidean_distance(&old, &new);
        trace.push(TraceRecord {
            phase: Phase::Joint,
            iteration: it,
            loglik: ll,
            distance: dist,
            kernel_warnings: w1 + w2,
        });
        tm = nm;
        ty = ny;
        write_checkpoint(opts, Phase::Joint, it, config, &tm, Some(&ty))?;
        (post, ll) = e_step_joint(panel, &tm, &ty);
        if dist < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params: (tm, ty),
        trace,
        converged,
        iterations: it,
        loglik: ll,
    })
}

/// Output of the three-phase estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub params: ParameterSet,
    pub trace: Trace,
    /// Convergence flag per phase, in order.
    pub converged: [bool; 3],
    pub loglik: [f64; 3],
}

/// Runs phases 1 → 2 → 3 from seeded starting values.
pub fn estimate(panel: &[IndividualHistory], config: &ModelConfig, opts: &EmOptions) -> Result<Estimate> {
    config.validate()?;
    if panel.is_empty() {
        return Err(crate::Error::invalid("cannot estimate on an empty panel"));
    }
    let p1 = run_em_mobility_restarts(panel, config, opts)?;
    let y0 = income_init(panel, config.design(), opts.seed)?;
    let p2 = run_em_income(panel, &p1.params, &y0, config, opts)?;
    let p3 = run_em_joint(panel, &p1.params, &p2.params, config, opts)?;
    let mut trace = p1.trace;
    trace.records.extend(p2.trace.records);
    trace.records.extend(p3.trace.records);
    let (mobility, income) = p3.params;
    Ok(Estimate {
        params: ParameterSet {
            config: config.clone(),
            mobility,
            income,
        },
        trace,
        converged: [p1.converged, p2.converged, p3.converged],
        loglik: [p1.loglik, p2.loglik, p3.loglik],
    })
}
