//! Panel CSV format and the preparation rules: short-history filtering,
//! non-employment imputation, and per-cell winsorization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io, Error, Result};
use crate::types::{Education, EmploymentState, FixedCovariates, IndividualHistory, YearRecord, XP_STEP};

pub const PANEL_HEADER: [&str; 7] = ["person_id", "year", "state", "log_wage", "female", "educ", "first_xp"];

/// Loading aborts when more than this fraction of data rows is malformed.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

pub const MIN_SPELLS: usize = 3;

/// Cells with fewer wages than this are left untouched by winsorization.
pub const MIN_WINSOR_CELL: usize = 100;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub rows: usize,
    /// (line number, message) for every rejected row.
    pub malformed: Vec<(u64, String)>,
    /// (person id, spell count) for individuals dropped as too short.
    pub dropped: Vec<(u64, usize)>,
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<(u64, i32, EmploymentState, Option<f64>, FixedCovariates), String> {
    if rec.len() != PANEL_HEADER.len() {
        return Err(format!("expected {} fields, found {}", PANEL_HEADER.len(), rec.len()));
    }
    let field = |k: usize| rec[k].trim();
    let num = |k: usize| -> std::result::Result<f64, String> {
        field(k)
            .parse::<f64>()
            .map_err(|_| format!("{}: cannot parse `{}`", PANEL_HEADER[k], field(k)))
    };
    let id = field(0).parse::<u64>().map_err(|_| format!("person_id: cannot parse `{}`", field(0)))?;
    let year = field(1).parse::<i32>().map_err(|_| format!("year: cannot parse `{}`", field(1)))?;
    let state = field(2)
        .parse::<u8>()
        .map_err(|_| format!("state: cannot parse `{}`", field(2)))
        .and_then(|c| EmploymentState::from_code(c).map_err(|e| e.to_string()))?;
    let wage = if field(3).is_empty() { None } else { Some(num(3)?) };
    match (state.is_employed(), wage) {
        (false, Some(_)) => return Err("wage present in state 0".into()),
        (true, None) => return Err(format!("state {} without a wage", state.code())),
        (_, Some(w)) if !w.is_finite() => return Err("non-finite wage".into()),
        _ => {}
    }
    let female = match field(4) {
        "0" => false,
        "1" => true,
        other => return Err(format!("female: expected 0 or 1, found `{other}`")),
    };
    let educ = field(5)
        .parse::<u8>()
        .map_err(|_| format!("educ: cannot parse `{}`", field(5)))
        .and_then(|c| Education::from_code(c).map_err(|e| e.to_string()))?;
    let zf = FixedCovariates::new(female, educ, num(6)?).map_err(|e| e.to_string())?;
    Ok((id, year, state, wage, zf))
}

/// Parses panel CSV text. Rows are grouped by person and sorted by year;
/// individuals with fewer than [`MIN_SPELLS`] rows are dropped.
pub fn parse_panel<R: std::io::Read>(reader: R) -> Result<(Vec<IndividualHistory>, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let mut report = LoadReport::default();
    match records.next() {
        None => return Ok((Vec::new(), report)),
        Some(h) => {
            let h = h.map_err(|e| Error::Parse(format!("header: {e}")))?;
            let got: Vec<&str> = h.iter().map(str::trim).collect();
            if got != PANEL_HEADER {
                return Err(Error::Parse(format!(
                    "header must be `{}`, found `{}`",
                    PANEL_HEADER.join(","),
                    got.join(",")
                )));
            }
        }
    }
    let mut people: BTreeMap<u64, (FixedCovariates, BTreeMap<i32, (EmploymentState, Option<f64>)>)> = BTreeMap::new();
    for rec in records {
        report.rows += 1;
        let line = report.rows as u64 + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push((line, e.to_string()));
                continue;
            }
        };
        if rec.iter().all(|f| f.trim().is_empty()) {
            report.rows -= 1;
            continue;
        }
        match parse_row(&rec) {
            Ok((id, year, state, wage, zf)) => {
                let entry = people.entry(id).or_insert_with(|| (zf, BTreeMap::new()));
                if entry.0 != zf {
                    report.malformed.push((line, format!("person {id}: fixed covariates differ from earlier rows")));
                } else if entry.1.insert(year, (state, wage)).is_some() {
                    report.malformed.push((line, format!("duplicate row for person {id}, year {year}")));
                }
            }
            Err(m) => report.malformed.push((line, m)),
        }
    }
    if report.rows > 0 && report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * report.rows as f64 {
        let (line, msg) = &report.malformed[0];
        return Err(Error::Validation(format!(
            "{} of {} rows malformed (first at line {line}: {msg})",
            report.malformed.len(),
            report.rows
        )));
    }
    let mut out = Vec::with_capacity(people.len());
    for (id, (zf, years)) in people {
        if years.len() < MIN_SPELLS {
            report.dropped.push((id, years.len()));
            continue;
        }
        out.push(IndividualHistory::from_spells(id, zf, years.into_iter().map(|(y, (s, w))| (y, s, w))));
    }
    Ok((out, report))
}

pub fn load_panel(path: &Path) -> Result<(Vec<IndividualHistory>, LoadReport)> {
    let f = std::fs::File::open(path).map_err(|e| io(path, e))?;
    parse_panel(std::io::BufReader::new(f))
}

pub fn format_panel(panel: &[IndividualHistory]) -> String {
    let mut s = PANEL_HEADER.join(",");
    s.push('\n');
    for h in panel {
        for r in &h.years {
            let w = r.log_wage.map(|w| format!("{w:?}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{w},{},{},{:?}",
                h.id,
                r.year,
                r.state.code(),
                h.zf.female as u8,
                h.zf.educ.code(),
                h.zf.first_xp
            );
        }
    }
    s
}

pub fn save_panel(path: &Path, panel: &[IndividualHistory]) -> Result<()> {
    crate::io_util::write_atomic(path, format_panel(panel).as_bytes())
}

/// Fills interior year gaps with non-employment, and extends individuals who
/// leave before `end_year` with non-employment for every later year in which
/// they are still younger than `max_age`. Age is `entry_age_base` plus years
/// of experience at first observation plus calendar years since then.
pub fn impute_nonemployment(
    panel: &[IndividualHistory],
    end_year: i32,
    max_age: u32,
    entry_age_base: u32,
) -> Vec<IndividualHistory> {
    panel
        .iter()
        .map(|h| {
            let Some(first) = h.first_year() else {
                return h.clone();
            };
            let first_age = (entry_age_base + (h.zf.first_xp / XP_STEP).round() as u32) as i64;
            let mut years: Vec<YearRecord> = Vec::with_capacity(h.years.len());
            for r in &h.years {
                if let Some(prev) = years.last().map(|p: &YearRecord| p.year) {
                    for y in prev + 1..r.year {
                        years.push(non_employed(y, r));
                    }
                }
                years.push(r.clone());
            }
            let last = years.last().unwrap().clone();
            for y in last.year + 1..=end_year {
                if first_age + (y - first) as i64 >= max_age as i64 {
                    break;
                }
                years.push(non_employed(y, &last));
            }
            let mut out = IndividualHistory { id: h.id, zf: h.zf, years };
            out.recompute_experience();
            out
        })
        .collect()
}

fn non_employed(year: i32, like: &YearRecord) -> YearRecord {
    YearRecord {
        year,
        state: EmploymentState::NonEmployed,
        log_wage: None,
        zv: like.zv,
    }
}

/// The `p`-quantile by the nearest-rank rule: the ⌈p·n⌉-th smallest value.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WinsorReport {
    /// (state code, year, bottom bound, top bound, values changed) per treated cell.
    pub treated: Vec<(usize, i32, f64, f64, usize)>,
    /// (state code, year, wage count) for cells too small to treat.
    pub skipped: Vec<(usize, i32, usize)>,
}

/// Clamps wages in every (state, year) cell to the cell's 1st and 99th
/// nearest-rank percentiles.
pub fn winsorize_wages(panel: &[IndividualHistory]) -> (Vec<IndividualHistory>, WinsorReport) {
    let mut cells: BTreeMap<(usize, i32), Vec<f64>> = BTreeMap::new();
    for h in panel {
        for r in &h.years {
            if let (true, Some(y)) = (r.state.is_employed(), r.log_wage) {
                cells.entry((r.state.code(), r.year)).or_default().push(y);
            }
        }
    }
    let mut report = WinsorReport::default();
    let mut bounds: BTreeMap<(usize, i32), (f64, f64)> = BTreeMap::new();
    for (key, mut v) in cells {
        if v.len() < MIN_WINSOR_CELL {
            report.skipped.push((key.0, key.1, v.len()));
            continue;
        }
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (nearest_rank(&v, 0.01), nearest_rank(&v, 0.99));
        let changed = v.iter().filter(|y| **y < lo || **y > hi).count();
        report.treated.push((key.0, key.1, lo, hi, changed));
        bounds.insert(key, (lo, hi));
    }
    let out = panel
        .iter()
        .map(|h| {
            let mut h = h.clone();
            for r in h.years.iter_mut() {
                if let (Some(y), Some((lo, hi))) = (r.log_wage.as_mut(), bounds.get(&(r.state.code(), r.year))) {
                    *y = y.clamp(*lo, *hi);
                }
            }
            h
        })
        .collect();
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Last panel year; defaults to the latest year observed.
    pub end_year: Option<i32>,
    pub max_age: u32,
    pub entry_age_base: u32,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            end_year: None,
            max_age: 60,
            entry_age_base: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrepareReport {
    pub dropped: Vec<(u64, usize)>,
    pub imputed_rows: usize,
    pub winsor: WinsorReport,
}

impl PrepareReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dropped_individuals = {}", self.dropped.len());
        for (id, n) in &self.dropped {
            let _ = writeln!(s, "dropped {id} spells={n}");
        }
        let _ = writeln!(s, "imputed_rows = {}", self.imputed_rows);
        let _ = writeln!(s, "winsorized_cells = {}", self.winsor.treated.len());
        for (st, y, lo, hi, n) in &self.winsor.treated {
            let _ = writeln!(s, "winsorized state={st} year={y} low={lo:?} high={hi:?} changed={n}");
        }
        let _ = writeln!(s, "skipped_cells = {}", self.winsor.skipped.len());
        for (st, y, n) in &self.winsor.skipped {
            let _ = writeln!(s, "skipped state={st} year={y} wages={n}");
        }
        s
    }
}

/// Short-history filter, imputation, then winsorization. Applying it to its
/// own output changes nothing.
pub fn prepare(panel: &[IndividualHistory], opts: &PrepareOptions) -> Result<(Vec<IndividualHistory>, PrepareReport)> {
    for h in panel {
        h.validate()?;
    }
    let mut report = PrepareReport::default();
    let kept: Vec<IndividualHistory> = panel
        .iter()
        .filter(|h| {
            let ok = h.len() >= MIN_SPELLS;
            if !ok {
                report.dropped.push((h.id, h.len()));
            }
            ok
        })
        .cloned()
        .collect();
    let end_year = opts
        .end_year
        .or_else(|| kept.iter().filter_map(IndividualHistory::last_year).max())
        .unwrap_or(0);
    let before: usize = kept.iter().map(IndividualHistory::len).sum();
    let imputed = impute_nonemployment(&kept, end_year, opts.max_age, opts.entry_age_base);
    report.imputed_rows = imputed.iter().map(IndividualHistory::len).sum::<usize>() - before;
    let (out, w) = winsorize_wages(&imputed);
    report.winsor = w;
    Ok((out, report))
}
