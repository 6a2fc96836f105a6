//! TOML reader and writer for [`ParameterSet`].
//!
//! Layout: a `format` tag, a `[config]` table, then one table per coefficient
//! block keyed by feature name. Multinomial blocks have one sub-table per
//! non-base outcome (`[chi.state3]`, `[kappa_y.class1]`, ...).

use std::fmt::Write as _;
use std::path::Path;

use toml::{Table, Value};

use crate::design::Design;
use crate::error::{Error, Result};
use crate::params::{IncomeParams, LogitCoefs, MobilityParams, ModelConfig, ParameterSet};
use crate::types::N_STATES;

pub const FORMAT_TAG: &str = "labordyn-params/1";

fn block_err(block: &str, message: impl Into<String>) -> Error {
    Error::ParamBlock {
        block: block.to_string(),
        message: message.into(),
    }
}

fn read_vector(block: &str, table: &Table, names: &[String]) -> Result<Vec<f64>> {
    for key in table.keys() {
        if !names.iter().any(|n| n == key) {
            return Err(block_err(block, format!("unknown coefficient `{key}`")));
        }
    }
    names
        .iter()
        .map(|n| match table.get(n) {
            Some(Value::Float(f)) => Ok(*f),
            Some(Value::Integer(i)) => Ok(*i as f64),
            Some(other) => Err(block_err(
                block,
                format!("coefficient `{n}` is not a number: {other}"),
            )),
            None => Err(block_err(block, format!("missing coefficient `{n}`"))),
        })
        .collect()
}

fn sub_table<'a>(parent: &'a Table, key: &str, block: &str) -> Result<&'a Table> {
    match parent.get(key) {
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(block_err(block, "expected a table")),
        None => Err(block_err(block, "missing block")),
    }
}

fn read_logit(
    root: &Table,
    block: &str,
    prefix: &str,
    n_outcomes: usize,
    names: &[String],
) -> Result<LogitCoefs> {
    let t = sub_table(root, block, block)?;
    let expected: Vec<String> = (1..n_outcomes).map(|j| format!("{prefix}{j}")).collect();
    for key in t.keys() {
        if !expected.contains(key) {
            return Err(block_err(block, format!("unknown outcome `{key}`")));
        }
    }
    let rows = expected
        .iter()
        .map(|k| {
            let name = format!("{block}.{k}");
            read_vector(&name, sub_table(t, k, &name)?, names)
        })
        .collect::<Result<Vec<_>>>()?;
    LogitCoefs::from_rows(names.len(), &rows)
}

/// Parses a parameter file from text. Unknown or missing keys are rejected
/// with the offending block named.
pub fn parse_params(text: &str) -> Result<ParameterSet> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
    match root.get("format") {
        Some(Value::String(s)) if s == FORMAT_TAG => {}
        Some(other) => return Err(Error::Parse(format!("unsupported format tag {other}"))),
        None => return Err(Error::Parse("missing format tag".into())),
    }
    const KNOWN: [&str; 9] = [
        "format", "config", "kappa_m", "chi0", "chi", "kappa_y", "mu", "sigma", "xi",
    ];
    if let Some(k) = root.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(block_err(k, "unknown block"));
    }
    let config: ModelConfig = match root.get("config") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| block_err("config", e.to_string()))?,
        None => return Err(block_err("config", "missing block")),
    };
    config.validate()?;
    let d = config.design();
    let mobility = MobilityParams {
        design: d,
        kappa_m: read_logit(&root, "kappa_m", "class", d.k_m, &d.kappa_m_names())?,
        chi0: read_logit(&root, "chi0", "state", N_STATES, &d.chi0_names())?,
        chi: read_logit(&root, "chi", "state", N_STATES, &d.chi_names())?,
    };
    let income = IncomeParams {
        design: d,
        kappa_y: read_logit(&root, "kappa_y", "class", d.k_y, &d.kappa_y_names())?,
        mu: read_vector("mu", sub_table(&root, "mu", "mu")?, &d.mu_names())?,
        sigma: read_vector("sigma", sub_table(&root, "sigma", "sigma")?, &d.sigma_names())?,
        xi: read_vector("xi", sub_table(&root, "xi", "xi")?, &d.xi_names())?,
    };
    let set = ParameterSet {
        config,
        mobility,
        income,
    };
    set.validate()?;
    Ok(set)
}

pub fn load_params(path: &Path) -> Result<ParameterSet> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::error::io(path, e))?;
    parse_params(&text).map_err(|e| e.context(format!("reading {}", path.display())))
}

fn write_vector(out: &mut String, header: &str, names: &[String], values: &[f64]) {
    let _ = writeln!(out, "\n[{header}]");
    for (n, v) in names.iter().zip(values) {
        let _ = writeln!(out, "{n} = {v:?}");
    }
}

fn write_logit(out: &mut String, block: &str, prefix: &str, names: &[String], c: &LogitCoefs) {
    for j in 1..c.n_outcomes() {
        write_vector(out, &format!("{block}.{prefix}{j}"), names, c.row(j));
    }
}

/// Serializes in canonical order; floats use the shortest round-tripping form.
pub fn format_params(p: &ParameterSet) -> Result<String> {
    p.validate()?;
    let d: Design = p.config.design();
    let mut out = String::new();
    let _ = writeln!(out, "format = \"{FORMAT_TAG}\"\n");
    let mut cfg = Table::new();
    cfg.insert("config".into(), Value::try_from(&p.config).map_err(|e| Error::Parse(e.to_string()))?);
    out.push_str(&toml::to_string(&cfg).map_err(|e| Error::Parse(e.to_string()))?);
    write_logit(&mut out, "kappa_m", "class", &d.kappa_m_names(), &p.mobility.kappa_m);
    write_logit(&mut out, "chi0", "state", &d.chi0_names(), &p.mobility.chi0);
    write_logit(&mut out, "chi", "state", &d.chi_names(), &p.mobility.chi);
    write_logit(&mut out, "kappa_y", "class", &d.kappa_y_names(), &p.income.kappa_y);
    write_vector(&mut out, "mu", &d.mu_names(), &p.income.mu);
    write_vector(&mut out, "sigma", &d.sigma_names(), &p.income.sigma);
    write_vector(&mut out, "xi", &d.xi_names(), &p.income.xi);
    Ok(out)
}

pub fn save_params(p: &ParameterSet, path: &Path) -> Result<()> {
    let text = format_params(p)?;
    crate::io_util::write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::published::published_params;

    #[test]
    fn round_trip_is_exact() {
        let p = published_params();
        let text = format_params(&p).unwrap();
        let back = parse_params(&text).unwrap();
        assert_eq!(p, back);
        assert_eq!(text, format_params(&back).unwrap());
    }

    #[test]
    fn unknown_key_names_the_block() {
        let text = format_params(&published_params()).unwrap();
        let bad = text.replace("[mu]\n", "[mu]\nbogus = 1.0\n");
        match parse_params(&bad) {
            Err(Error::ParamBlock { block, message }) => {
                assert_eq!(block, "mu");
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_coefficient_names_the_block() {
        let text = format_params(&published_params()).unwrap();
        let start = text.find("[chi.state2]").unwrap();
        let line_start = start + text[start..].find("prev3 = ").unwrap();
        let line_end = line_start + text[line_start..].find('\n').unwrap() + 1;
        let bad = format!("{}{}", &text[..line_start], &text[line_end..]);
        match parse_params(&bad) {
            Err(Error::ParamBlock { block, message }) => {
                assert_eq!(block, "chi.state2");
                assert!(message.contains("prev3"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let text = format_params(&published_params())
            .unwrap()
            .replace(FORMAT_TAG, "other/9");
        assert!(matches!(parse_params(&text), Err(Error::Parse(_))));
    }
}
