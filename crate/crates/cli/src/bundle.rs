//! The result bundle written by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use metakit::table::{ColumnKind, ResultTable};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{OutputsConfig, TABLE_CATALOG};
use crate::exit::CliError;

pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub data_sha256: Option<String>,
    /// SOURCE_DATE_EPOCH when set, so rebuilt bundles are byte-identical.
    pub timestamp: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Bundle {
    pub tables: BTreeMap<String, ResultTable>,
    pub plots: BTreeMap<String, PathBuf>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ResultTable>,
    pub provenance: Provenance,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn timestamp() -> String {
    let t: DateTime<Utc> = match std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
    {
        Some(secs) => DateTime::from_timestamp(secs, 0).unwrap_or_default(),
        None => Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

impl Bundle {
    pub fn new(command: &str, config_bytes: &[u8], data: Option<&Path>) -> Self {
        let data_sha256 = data
            .and_then(|p| std::fs::read(p).ok())
            .map(|b| sha256_hex(&b));
        Bundle {
            tables: BTreeMap::new(),
            plots: BTreeMap::new(),
            notes: Vec::new(),
            error: None,
            provenance: Provenance {
                tool: "metakit",
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config_sha256: sha256_hex(config_bytes),
                data_sha256,
                timestamp: timestamp(),
            },
        }
    }

    /// Insert a catalog table if the output selection asks for it.
    pub fn add(&mut self, outs: &OutputsConfig, t: ResultTable) {
        debug_assert!(
            TABLE_CATALOG.contains(&t.name.as_str()),
            "table {} is not in the catalog",
            t.name
        );
        if outs.wants(&t.name) {
            self.tables.insert(t.name.clone(), t);
        }
    }

    pub fn add_opt(&mut self, outs: &OutputsConfig, t: Option<ResultTable>) {
        if let Some(t) = t {
            self.add(outs, t);
        }
    }

    pub fn set_error(&mut self, e: &CliError) {
        let mut t = ResultTable::new("error", "Error")
            .column("class", "Class", ColumnKind::Text)
            .column("exit_code", "Exit code", ColumnKind::Integer)
            .column("message", "Message", ColumnKind::Text);
        t.push_row(vec![
            e.class().into(),
            (e.code() as i64).into(),
            e.to_string().into(),
        ]);
        if let CliError::Meta(metakit::MetaError::Convergence { trace, .. }) = e {
            for line in trace {
                t.footnote(line.clone());
            }
        }
        self.error = Some(t);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("bundle serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        let p = out.join(BUNDLE_FILE);
        std::fs::write(&p, self.to_json())
            .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }
}
