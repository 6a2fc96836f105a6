use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use labordyn_core::diagnostics::{
    compare_panels, composition_table, histograms_csv, transition_matrix, transition_matrix_where, wage_histograms,
    HistogramKey, DEFAULT_BIN_WIDTH,
};
use labordyn_core::em::{e_step_joint, estimate, CheckpointConfig, EmOptions, Trace};
use labordyn_core::lifetime::{
    curves_csv, lifetime_value, percentile_grid, records_csv, Counterfactuals, LifetimeSettings,
};
use labordyn_core::panel_io::{format_panel, load_panel, prepare, LoadReport, PrepareOptions};
use labordyn_core::params_io::{format_params, load_params};
use labordyn_core::published::published_params;
use labordyn_core::simulate::{generate_panel, predict_panel, PopulationSpec, PredictOptions, SimulatedPanel};
use labordyn_core::{write_atomic, IndividualHistory, ParameterSet, ReplacementRate};

use crate::{
    Cli, Command, DiagnoseArgs, EstimateArgs, Failure, GenerateArgs, LifetimeArgs, LifetimeMode, PredictArgs,
    PrepareArgs, DEFAULT_OUT, DEFAULT_SEED,
};

/// Files touched by a run and, for estimation, per-phase convergence.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub converged: Option<Vec<bool>>,
}

struct Ctx {
    seed: u64,
    out: PathBuf,
    params: Option<PathBuf>,
    outcome: Outcome,
}

impl Ctx {
    fn write(&mut self, name: &str, body: &str) -> Result<(), Failure> {
        let path = self.out.join(name);
        write_atomic(&path, body.as_bytes())?;
        self.outcome.outputs.push(path);
        Ok(())
    }

    fn panel(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<(Vec<IndividualHistory>, LoadReport), Failure> {
        let path = required(path, flag)?;
        let loaded = load_panel(path)?;
        self.outcome.inputs.push(path.to_path_buf());
        Ok(loaded)
    }

    fn params(&mut self) -> Result<ParameterSet, Failure> {
        match &self.params {
            Some(p) => {
                let set = load_params(p)?;
                self.outcome.inputs.push(p.clone());
                Ok(set)
            }
            None => Ok(published_params()),
        }
    }

    fn population(&mut self, path: &Option<PathBuf>) -> Result<PopulationSpec, Failure> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
                self.outcome.inputs.push(p.clone());
                Ok(PopulationSpec::parse(&text)?)
            }
            None => Ok(PopulationSpec::default()),
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref().ok_or_else(|| Failure::validation(format!("{flag} is required")))
}

pub fn dispatch(cli: &Cli) -> Result<Outcome, Failure> {
    let mut ctx = Ctx {
        seed: cli.common.seed.unwrap_or(DEFAULT_SEED),
        out: cli.common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        params: cli.common.params.clone(),
        outcome: Outcome::default(),
    };
    match &cli.command {
        Command::Generate(a) => generate(&mut ctx, a)?,
        Command::Prepare(a) => prepare_cmd(&mut ctx, a)?,
        Command::Estimate(a) => estimate_cmd(&mut ctx, a)?,
        Command::Predict(a) => predict(&mut ctx, a)?,
        Command::Lifetime(a) => lifetime(&mut ctx, a)?,
        Command::Diagnose(a) => diagnose(&mut ctx, a)?,
        Command::Replay(_) => return Err(Failure::other("replay is resolved before dispatch")),
    }
    Ok(ctx.outcome)
}

fn classes_csv(panel: &SimulatedPanel) -> String {
    let mut s = String::from("person_id,km,ky\n");
    for i in &panel.individuals {
        let _ = writeln!(s, "{},{},{}", i.history.id, i.km, i.ky);
    }
    s
}

fn load_report_csv(r: &LoadReport) -> String {
    let mut s = String::from("kind,key,detail\n");
    let _ = writeln!(s, "rows,,{}", r.rows);
    for (line, msg) in &r.malformed {
        let _ = writeln!(s, "malformed,{line},\"{}\"", msg.replace('"', "'"));
    }
    for (id, n) in &r.dropped {
        let _ = writeln!(s, "dropped,{id},{n}");
    }
    s
}

fn generate(ctx: &mut Ctx, a: &GenerateArgs) -> Result<(), Failure> {
    let params = ctx.params()?;
    let spec = ctx.population(&a.population)?;
    let panel = generate_panel(&spec, &params, a.n.unwrap_or(5000), a.years.unwrap_or(8), ctx.seed)?;
    ctx.write("panel.csv", &format_panel(&panel.histories()))?;
    ctx.write("classes.csv", &classes_csv(&panel))
}

fn prepare_cmd(ctx: &mut Ctx, a: &PrepareArgs) -> Result<(), Failure> {
    let (panel, load) = ctx.panel(&a.panel, "--panel")?;
    let d = PrepareOptions::default();
    let opts = PrepareOptions {
        end_year: a.end_year,
        max_age: a.max_age.unwrap_or(d.max_age),
        entry_age_base: a.entry_age_base.unwrap_or(d.entry_age_base),
    };
    let (out, report) = prepare(&panel, &opts)?;
    ctx.write("panel.csv", &format_panel(&out))?;
    ctx.write("load_report.csv", &load_report_csv(&load))?;
    let mut s = String::from("kind,person_id,state,year,low,high,count\n");
    for (id, n) in &report.dropped {
        let _ = writeln!(s, "dropped,{id},,,,,{n}");
    }
    let _ = writeln!(s, "imputed,,,,,,{}", report.imputed_rows);
    for (st, y, lo, hi, n) in &report.winsor.treated {
        let _ = writeln!(s, "winsorized,,{st},{y},{lo:?},{hi:?},{n}");
    }
    for (st, y, n) in &report.winsor.skipped {
        let _ = writeln!(s, "skipped,,{st},{y},,,{n}");
    }
    ctx.write("prepare_report.csv", &s)
}

fn trace_csv(t: &Trace) -> String {
    let mut s = String::from("phase,iteration,loglik,distance,kernel_warnings\n");
    for r in &t.records {
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{}",
            r.phase.name(),
            r.iteration,
            r.loglik,
            r.distance,
            r.kernel_warnings
        );
    }
    s
}

/// Joint posterior per individual with the modal classes.
fn posterior_csv(panel: &[IndividualHistory], p: &ParameterSet) -> (String, Vec<usize>, Vec<usize>) {
    let (post, _) = e_step_joint(panel, &p.mobility, &p.income);
    let k_y = p.config.k_y;
    let mut s = String::from("person_id,km,ky");
    for c in 0..post.n_classes {
        let _ = write!(s, ",p_km{}_ky{}", c / k_y, c % k_y);
    }
    s.push('\n');
    let (mut kms, mut kys) = (Vec::new(), Vec::new());
    for (i, h) in panel.iter().enumerate() {
        let row = post.row(i);
        let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        kms.push(best / k_y);
        kys.push(best % k_y);
        let _ = write!(s, "{},{},{}", h.id, best / k_y, best % k_y);
        for v in row {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    (s, kms, kys)
}

fn estimate_cmd(ctx: &mut Ctx, a: &EstimateArgs) -> Result<(), Failure> {
    let (panel, _) = ctx.panel(&a.panel, "--panel")?;
    let mut config = match &ctx.params {
        Some(_) => ctx.params()?.config,
        None => Default::default(),
    };
    if let Some(k) = a.k_m {
        config.k_m = k;
    }
    if let Some(k) = a.k_y {
        config.k_y = k;
    }
    if let Some(n) = a.max_iter {
        config.em_max_iter = n;
    }
    if let Some(t) = a.tol {
        config.em_tol = t;
    }
    let mut opts = EmOptions::from_config(&config, ctx.seed);
    opts.restarts = a.restarts.unwrap_or(1);
    if let Some(every) = a.checkpoint_every {
        opts.checkpoint = Some(CheckpointConfig {
            dir: ctx.out.join("checkpoints"),
            every,
        });
    }
    let est = estimate(&panel, &config, &opts)?;
    ctx.write("params.toml", &format_params(&est.params)?)?;
    ctx.write("trace.csv", &trace_csv(&est.trace))?;
    let mut s = String::from("phase,converged,loglik,iterations\n");
    for (k, name) in ["mobility", "income", "joint"].iter().enumerate() {
        let its = est.trace.records.iter().filter(|r| r.phase.name() == *name).count();
        let _ = writeln!(s, "{name},{},{:?},{its}", est.converged[k], est.loglik[k]);
    }
    ctx.write("convergence.csv", &s)?;
    let (post, _, _) = posterior_csv(&panel, &est.params);
    ctx.write("posterior.csv", &post)?;
    ctx.outcome.converged = Some(est.converged.to_vec());
    Ok(())
}

fn predict(ctx: &mut Ctx, a: &PredictArgs) -> Result<(), Failure> {
    let (panel, _) = ctx.panel(&a.panel, "--panel")?;
    let params = ctx.params()?;
    let opts = PredictOptions {
        draw_initial_state: a.draw_initial,
        horizon: a.horizon,
    };
    let (pred, report) = predict_panel(&panel, &params, ctx.seed, &opts)?;
    ctx.write("panel.csv", &format_panel(&pred.histories()))?;
    ctx.write("classes.csv", &classes_csv(&pred))?;
    let mut s = String::from("person_id,reason\n");
    for (id, why) in &report.skipped {
        let _ = writeln!(s, "{id},{why}");
    }
    ctx.write("skipped.csv", &s)
}

fn lifetime(ctx: &mut Ctx, a: &LifetimeArgs) -> Result<(), Failure> {
    let (panel, _) = ctx.panel(&a.panel, "--panel")?;
    let params = ctx.params()?;
    let population = ctx.population(&a.population)?;
    let mut settings = LifetimeSettings::new(&params.config, &population);
    if let Some(b) = a.beta {
        settings.beta = b;
    }
    let rates: Vec<ReplacementRate> = if a.rr.is_empty() {
        vec![settings.rr]
    } else {
        a.rr.iter().map(|r| ReplacementRate::preset(r)).collect::<Result<_, _>>()?
    };
    settings.validate()?;
    for rr in rates {
        settings.rr = rr;
        settings.validate()?;
        let tag = rr.label();
        match a.mode.unwrap_or(LifetimeMode::Counterfactual) {
            LifetimeMode::Observed => {
                let mut s = String::from("person_id,value,flow,retirement,log_value,never_employed,RR,beta\n");
                for h in &panel {
                    let v = lifetime_value(&h.years, settings.beta, rr, settings.retirement_horizon_years);
                    let log = v.log_value().map(|x| format!("{x:?}")).unwrap_or_default();
                    let _ = writeln!(
                        s,
                        "{},{:?},{:?},{:?},{log},{},{tag},{:?}",
                        h.id, v.value, v.flow, v.retirement, v.never_employed, settings.beta
                    );
                }
                ctx.write(&format!("values_rr{tag}.csv"), &s)?;
            }
            LifetimeMode::Counterfactual => {
                let cf = Counterfactuals::run(&panel, &params, &settings, ctx.seed)?;
                let curves = cf.curves(&percentile_grid());
                for scenario in ["premium_with_selection", "premium_without_selection", "loss_public", "loss_private"] {
                    let picked: Vec<_> = curves
                        .iter()
                        .filter(|c| c.0.split('/').next() == Some(scenario))
                        .cloned()
                        .collect();
                    ctx.write(&format!("{scenario}_rr{tag}.csv"), &curves_csv(&picked, &settings, ctx.seed))?;
                }
                let mut all = cf.job_for_life_public;
                all.extend(cf.job_for_life_private);
                all.extend(cf.mobility_public_start);
                all.extend(cf.mobility_private_start);
                ctx.write(&format!("values_rr{tag}.csv"), &records_csv(&all))?;
            }
        }
    }
    Ok(())
}

fn diagnose(ctx: &mut Ctx, a: &DiagnoseArgs) -> Result<(), Failure> {
    let width = a.bin_width.unwrap_or(DEFAULT_BIN_WIDTH);
    let (pa, _) = ctx.panel(&a.panel, "--panel")?;
    let pb = match &a.compare {
        Some(_) => Some(ctx.panel(&a.compare, "--compare")?.0),
        None => None,
    };
    let params = match &ctx.params {
        Some(_) => Some(ctx.params()?),
        None => None,
    };
    let sides: Vec<(&str, &Vec<IndividualHistory>)> = match &pb {
        Some(b) => vec![("a", &pa), ("b", b)],
        None => vec![("a", &pa)],
    };
    for (tag, panel) in &sides {
        let mut s = String::new();
        for (group, m) in [
            ("all", transition_matrix(panel.iter())),
            ("men", transition_matrix_where(panel, |h| !h.zf.female)),
            ("women", transition_matrix_where(panel, |h| h.zf.female)),
        ] {
            let _ = writeln!(s, "# group={group} empty={}", m.is_empty());
            s.push_str(&m.to_csv());
        }
        ctx.write(&format!("transitions_{tag}.csv"), &s)?;
        let mut hist = String::new();
        for (key, name) in [
            (HistogramKey::All, "all"),
            (HistogramKey::State, "state"),
            (HistogramKey::Sector, "sector"),
            (HistogramKey::Gender, "gender"),
        ] {
            let _ = writeln!(hist, "# key={name}");
            hist.push_str(&histograms_csv(&wage_histograms(panel, None, width, key)?));
        }
        if let Some(p) = &params {
            let (post, kms, kys) = posterior_csv(panel, p);
            ctx.write(&format!("posterior_{tag}.csv"), &post)?;
            let _ = writeln!(hist, "# key=income_class");
            hist.push_str(&histograms_csv(&wage_histograms(panel, Some(&kys), width, HistogramKey::IncomeClass)?));
            let base = PopulationSpec::default().entry_age_base;
            let mut comp = String::from("# classes=transition\n");
            comp.push_str(&composition_table(panel, &kms, p.config.k_m, base)?.to_csv());
            comp.push_str("# classes=income\n");
            comp.push_str(&composition_table(panel, &kys, p.config.k_y, base)?.to_csv());
            ctx.write(&format!("composition_{tag}.csv"), &comp)?;
        }
        ctx.write(&format!("histograms_{tag}.csv"), &hist)?;
    }
    if let Some(b) = &pb {
        ctx.write("compare.csv", &compare_panels(&pa, b, width)?.to_csv())?;
    }
    Ok(())
}
