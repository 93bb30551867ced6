use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

/// What was run, recorded verbatim in every JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub input: Option<String>,
    pub output_dir: String,
    pub seed: Option<u64>,
    pub grid_k: Option<usize>,
    pub tolerance: Option<f64>,
    pub paths: Option<usize>,
    /// `SOURCE_DATE_EPOCH` if set, else the input file's modification
    /// time, so that repeated runs produce identical bytes.
    pub timestamp: Option<String>,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(command: String, input: Option<&Path>, output_dir: &Path) -> Self {
        RunManifest {
            command,
            input: input.map(|p| p.display().to_string()),
            output_dir: output_dir.display().to_string(),
            seed: None,
            grid_k: None,
            tolerance: None,
            paths: None,
            timestamp: timestamp(input),
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

fn timestamp(input: Option<&Path>) -> Option<String> {
    let when = match std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<u64>().ok()) {
        Some(secs) => UNIX_EPOCH + Duration::from_secs(secs),
        None => input.and_then(|p| std::fs::metadata(p).ok()).and_then(|m| m.modified().ok())?,
    };
    Some(rfc3339(when))
}

fn rfc3339(t: SystemTime) -> String {
    DateTime::<Utc>::from(t).to_rfc3339_opts(SecondsFormat::Secs, true)
}
