//! Pipeline runner behind the `ehrseq` binary.
//!
//! A run is driven by one JSON config ([`config::RunConfig`]). Any field can
//! be overridden on the command line with a flag of the same dotted name,
//! for example `--generator.n_patients 500` or `--models.2.hidden_size=32`.

pub mod config;
pub mod stages;

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde_json::{json, Value};

pub use config::{Loaded, RunConfig};
pub use stages::{Command, Manifest, Pipeline};

/// Flags the binary parses itself; every other `--name` is a config override.
pub const OWN_FLAGS: [&str; 5] = ["config", "verbose", "quiet", "help", "version"];

/// Separates `--dotted.key value` / `--dotted.key=value` overrides from
/// the binary's own arguments.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, Value)>)> {
    let mut own = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            own.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if name.is_empty() || OWN_FLAGS.contains(&name.as_str()) {
            own.push(arg);
            continue;
        }
        let value = match inline.or_else(|| it.next()) {
            Some(v) => v,
            None => bail!("--{name} needs a value"),
        };
        overrides.push((name, config::parse_value(&value)));
    }
    Ok((own, overrides))
}

/// Checks override keys against the config schema so a mistyped flag is an
/// error rather than a silently ignored field.
pub fn check_override_keys(overrides: &[(String, Value)]) -> Result<()> {
    let unknown: Vec<String> = overrides
        .iter()
        .filter(|(k, _)| !config::is_known_path(k))
        .map(|(k, _)| format!("--{k} does not name a config field"))
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(ehrseq::Error::Config(unknown).into())
    }
}

/// Loads the config file (or defaults), applies overrides and resolves
/// seeds with `EHRSEQ_SEED` as the fallback.
pub fn load(config: Option<&Path>, overrides: &[(String, Value)]) -> Result<Loaded> {
    check_override_keys(overrides)?;
    let env = std::env::var(config::SEED_ENV).ok();
    match config {
        Some(p) => RunConfig::load(p, overrides, env.as_deref()),
        None => RunConfig::from_value(Value::Null, overrides, env.as_deref()),
    }
}

/// Error category: the first library error in the cause chain decides.
pub fn categorize(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ehrseq::Error>() {
            return e.category();
        }
        if cause.is::<serde_json::Error>() {
            return "input";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

/// Process exit code per error category. Usage errors exit with 2.
pub fn exit_code(category: &str) -> i32 {
    match category {
        "config" => 3,
        "input" => 4,
        "io" => 5,
        "data" => 6,
        "numeric" => 7,
        "model" => 8,
        _ => 1,
    }
}

fn violations_of(err: &anyhow::Error) -> Vec<String> {
    err.chain()
        .find_map(|c| match c.downcast_ref::<ehrseq::Error>() {
            Some(ehrseq::Error::Config(v)) => Some(v.clone()),
            _ => None,
        })
        .unwrap_or_default()
}

/// The status line for a failure, and its exit code.
pub fn failure(command: &str, err: &anyhow::Error) -> (Value, i32) {
    let category = categorize(err);
    let mut status = json!({
        "status": "error",
        "command": command,
        "category": category,
        "message": format!("{err:#}"),
    });
    let violations = violations_of(err);
    if !violations.is_empty() {
        status["violations"] = json!(violations);
    }
    (status, exit_code(category))
}

/// `validate`: violations and warnings are reported, not raised.
pub fn validate(config: Option<&Path>, overrides: &[(String, Value)]) -> Result<Value> {
    let loaded = load(config, overrides)?;
    let violations = loaded.config.violations();
    Ok(json!({
        "status": "ok",
        "command": "validate",
        "valid": violations.is_empty(),
        "violations": violations,
        "warnings": loaded.warnings,
    }))
}

/// Runs a pipeline subcommand and builds its status line.
pub fn execute(cmd: Command, config: Option<&Path>, overrides: &[(String, Value)]) -> Result<Value> {
    let loaded = load(config, overrides)?;
    let manifest = stages::run(loaded, config, cmd)?;
    let out_dir: PathBuf = manifest.config.paths.out_dir.clone();
    Ok(json!({
        "status": "ok",
        "command": cmd.name(),
        "out_dir": out_dir,
        "manifest": out_dir.join("manifests").join(format!("{}.json", cmd.name())),
        "outputs": manifest.outputs.len(),
        "warnings": manifest.warnings,
    }))
}
