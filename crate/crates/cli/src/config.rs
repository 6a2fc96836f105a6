//! Optional TOML defaults for any flag.
//!
//! ```toml
//! seed = 7
//! threads = 2
//! params = "params.toml"
//!
//! [estimate]
//! k_m = 2
//! max_iter = 100
//!
//! [lifetime]
//! rr = ["0.4", "sector"]
//! ```
//!
//! Top-level keys fill the common flags; a table named after the subcommand
//! fills that subcommand's flags. A value only applies where the flag was
//! not given on the command line.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{Cli, Command, Common, Failure};

fn unset(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::Bool(b) => !b,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

fn fill<T: Serialize + DeserializeOwned>(
    target: &T,
    table: &toml::Table,
    section: &str,
    skip: &[&str],
) -> Result<T, Failure> {
    let mut obj = serde_json::to_value(target).map_err(|e| Failure::other(e.to_string()))?;
    let map = obj.as_object_mut().expect("flag groups serialize as objects");
    for (k, v) in table {
        if skip.contains(&k.as_str()) {
            continue;
        }
        let slot = map
            .get_mut(k)
            .ok_or_else(|| Failure::validation(format!("config: unknown key `{k}` in {section}")))?;
        if unset(slot) {
            *slot = serde_json::to_value(v).map_err(|e| Failure::other(e.to_string()))?;
        }
    }
    serde_json::from_value(obj).map_err(|e| Failure::validation(format!("config: {section}: {e}")))
}

/// Merges the config file (if any) into `cli`. The result carries no
/// config path, so it alone reproduces the run.
pub fn resolve(cli: Cli) -> Result<Cli, Failure> {
    let Some(path) = cli.common.config.clone() else {
        return Ok(cli);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let sections = ["generate", "prepare", "estimate", "predict", "lifetime", "diagnose"];
    for (k, v) in &table {
        if sections.contains(&k.as_str()) && !v.is_table() {
            return Err(Failure::validation(format!("config: `{k}` must be a table")));
        }
    }
    if table.contains_key("config") {
        return Err(Failure::validation("config: a config file cannot name another config file"));
    }
    let mut common: Common = fill(&cli.common, &table, "top level", &sections)?;
    common.config = None;
    let name = cli.command.name();
    let empty = toml::Table::new();
    let section = table.get(name).and_then(|v| v.as_table()).unwrap_or(&empty);
    let command = match &cli.command {
        Command::Generate(a) => Command::Generate(fill(a, section, name, &[])?),
        Command::Prepare(a) => Command::Prepare(fill(a, section, name, &[])?),
        Command::Estimate(a) => Command::Estimate(fill(a, section, name, &[])?),
        Command::Predict(a) => Command::Predict(fill(a, section, name, &[])?),
        Command::Lifetime(a) => Command::Lifetime(fill(a, section, name, &[])?),
        Command::Diagnose(a) => Command::Diagnose(fill(a, section, name, &[])?),
        Command::Replay(_) => return Err(Failure::validation("replay takes no config file")),
    };
    Ok(Cli { common, command })
}
