use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use percept_core::harness::HarnessConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Parsed `--config` file. Top-level keys `seed` and `threads`; one table per
/// subcommand (`[train]`, `[experiment]`, ...) and a shared `[harness]` table.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    pub table: toml::Table,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self { table })
    }

    pub fn section(&self, name: &str) -> Result<Option<&toml::Table>, CliError> {
        match self.table.get(name) {
            None => Ok(None),
            Some(toml::Value::Table(t)) => Ok(Some(t)),
            Some(_) => Err(CliError::Usage(format!("config: [{name}] must be a table"))),
        }
    }

    pub fn top<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.table.get(key).map(|v| v.clone().try_into().map_err(|e| CliError::Usage(format!("config: {key}: {e}")))).transpose()
    }
}

fn typed_on_cli(matches: &ArgMatches, id: &str) -> bool {
    matches.ids().any(|i| i.as_str() == id) && matches.value_source(id) == Some(ValueSource::CommandLine)
}

/// `cli` with every flag the user did not type replaced by the section's value.
pub fn resolve<T: Serialize + DeserializeOwned>(
    cli: &T,
    matches: &ArgMatches,
    section: Option<&toml::Table>,
    name: &str,
) -> Result<T, CliError> {
    let mut table = toml::Table::try_from(cli).map_err(|e| CliError::Usage(format!("{name}: {e}")))?;
    for (k, v) in section.into_iter().flatten() {
        let key = k.replace('-', "_");
        if !typed_on_cli(matches, &key) {
            table.insert(key, v.clone());
        }
    }
    toml::Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("config [{name}]: {e}")))
}

/// Harness configuration: defaults, then `[harness]`, then `overrides`.
pub fn harness(file: &FileConfig, overrides: toml::Table, seed: u64) -> Result<HarnessConfig, CliError> {
    let mut table = toml::Table::try_from(HarnessConfig::default()).expect("default harness config serialises");
    let known: Vec<String> = table.keys().cloned().collect();
    for (k, v) in file.section("harness")?.into_iter().flatten().chain(&overrides) {
        let key = k.replace('-', "_");
        if !known.contains(&key) {
            return Err(CliError::Usage(format!("config [harness]: unknown key '{k}'")));
        }
        table.insert(key, v.clone());
    }
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    toml::Value::Table(table).try_into().map_err(|e| CliError::Usage(format!("config [harness]: {e}")))
}

/// Keys a harness-backed command leaves to `[harness]`.
pub const HARNESS_KEYS: [&str; 5] = ["scope", "per_class", "set_cap", "validation_size", "probe_arch"];
const GLOBAL_KEYS: [&str; 5] = ["seed", "config", "threads", "out", "label"];

/// Rejects keys that name no flag of the command.
pub fn check_keys(section: &toml::Table, known: &[String], name: &str, harness_flags: bool) -> Result<(), CliError> {
    for k in section.keys() {
        let key = k.replace('-', "_");
        if harness_flags && HARNESS_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config [{name}]: '{k}' belongs in [harness]")));
        }
        if GLOBAL_KEYS.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("config [{name}]: '{k}' is a top-level key")));
        }
        if !known.contains(&key) {
            return Err(CliError::Usage(format!("config [{name}]: unknown key '{k}'")));
        }
    }
    Ok(())
}
