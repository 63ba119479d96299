//! Workload manifests: the JSON document describing pilots, data units and
//! compute units for one run.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_manifest, ComputeUnitDescription, DataUnitDescription, PilotDescription, Violation};

/// Transfer rate between sites when the manifest gives none, in bytes/s.
pub const DEFAULT_BANDWIDTH: f64 = 1_000_000.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadManifest {
    #[serde(default)]
    pub pilots: Vec<PilotDescription>,
    #[serde(default)]
    pub data_units: Vec<DataUnitDescription>,
    #[serde(default)]
    pub compute_units: Vec<ComputeUnitDescription>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<BandwidthMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max_s: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Symmetric site-by-site transfer rates in bytes/s. Sites are the first
/// component of pilot affinity labels; `external` names the outside source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthMatrix {
    pub sites: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl BandwidthMatrix {
    /// Rate between two sites, falling back to [`DEFAULT_BANDWIDTH`] when
    /// either site is not listed.
    pub fn rate(&self, from: &str, to: &str) -> f64 {
        let idx = |s: &str| self.sites.iter().position(|x| x == s);
        match (idx(from), idx(to)) {
            (Some(i), Some(j)) => self
                .matrix
                .get(i)
                .and_then(|row| row.get(j))
                .copied()
                .unwrap_or(DEFAULT_BANDWIDTH),
            _ => DEFAULT_BANDWIDTH,
        }
    }

    /// Structural problems: shape, duplicate sites, asymmetry, non-positive entries.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.sites.len();
        for (i, s) in self.sites.iter().enumerate() {
            if self.sites[..i].contains(s) {
                out.push(format!("duplicate site `{s}`"));
            }
        }
        if self.matrix.len() != n || self.matrix.iter().any(|row| row.len() != n) {
            out.push(format!("matrix must be {n}x{n}"));
            return out;
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.matrix[i][j];
                if !(v.is_finite() && v > 0.0) {
                    out.push(format!("entry [{i}][{j}] must be positive"));
                }
                if j > i && self.matrix[i][j] != self.matrix[j][i] {
                    out.push(format!("matrix not symmetric at [{i}][{j}]"));
                }
            }
        }
        out
    }
}

/// Rate lookup that treats a missing matrix as all-default.
pub fn bandwidth_between(matrix: Option<&BandwidthMatrix>, from: &str, to: &str) -> f64 {
    matrix.map_or(DEFAULT_BANDWIDTH, |m| m.rate(from, to))
}

/// Whole virtual seconds needed to move `bytes` at `rate` bytes/s.
pub fn transfer_ticks(bytes: u64, rate: f64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    let rate_int = rate as u64;
    if rate_int > 0 && rate_int as f64 == rate {
        bytes.div_ceil(rate_int)
    } else {
        (bytes as f64 / rate).ceil() as u64
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("manifest invalid: {}", ViolationList(.0))]
    Validation(Vec<Violation>),
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl WorkloadManifest {
    /// Structural parse only.
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        serde_json::from_str(text).map_err(|e| ManifestError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_manifest(self)
    }

    pub fn max_pilot_cores(&self) -> u32 {
        self.pilots.iter().map(|p| p.cores).max().unwrap_or(0)
    }
}

/// Reads, parses and validates a manifest file. All violations are
/// reported together.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<WorkloadManifest, ManifestError> {
    let text = std::fs::read_to_string(path)?;
    let manifest = WorkloadManifest::from_json(&text)?;
    let violations = manifest.validate();
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(ManifestError::Validation(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const MINIMAL: &str = r#"{
        "pilots": [{"id": "p1", "resource": "sim://a", "cores": 1, "walltime_s": 10, "affinity": "a"}],
        "compute_units": [{"id": "c1", "executable": "true", "sim_duration_s": 1}]
    }"#;

    fn write_tmp(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_manifest_parses() {
        let f = write_tmp(MINIMAL);
        let m = parse_manifest(f.path()).unwrap();
        assert_eq!(m.pilots.len(), 1);
        assert_eq!(m.compute_units[0].cores, 1);
        assert!(m.data_units.is_empty());
    }

    #[test]
    fn asymmetric_bandwidth_rejected() {
        let mut m = WorkloadManifest::from_json(MINIMAL).unwrap();
        m.bandwidth = Some(BandwidthMatrix {
            sites: vec!["a".into(), "b".into()],
            matrix: vec![vec![1.0, 2.0], vec![3.0, 1.0]],
        });
        let f = write_tmp(&m.to_json_pretty());
        match parse_manifest(f.path()) {
            Err(ManifestError::Validation(v)) => {
                assert!(v.iter().any(|v| v.rule.contains("symmetric")), "{v:?}")
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_position() {
        let truncated = &MINIMAL[..MINIMAL.len() / 2];
        let f = write_tmp(truncated);
        match parse_manifest(f.path()) {
            Err(ManifestError::Parse { line, column, .. }) => {
                assert!(line >= 1 && column >= 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = MINIMAL.replace("\"cores\": 1,", "\"cores\": 1, \"gpus\": 2,");
        assert!(matches!(
            WorkloadManifest::from_json(&text),
            Err(ManifestError::Parse { .. })
        ));
    }

    #[test]
    fn rates_and_ticks() {
        let m = BandwidthMatrix {
            sites: vec!["a".into(), "b".into()],
            matrix: vec![vec![1e9, 1e6], vec![1e6, 1e9]],
        };
        assert_eq!(m.rate("a", "b"), 1e6);
        assert_eq!(m.rate("a", "zzz"), DEFAULT_BANDWIDTH);
        assert_eq!(transfer_ticks(1_000_000, 1e6), 1);
        assert_eq!(transfer_ticks(1_000_001, 1e6), 2);
        assert_eq!(transfer_ticks(5_000_000, 1e6), 5);
        assert_eq!(transfer_ticks(0, 1e6), 0);
        assert_eq!(transfer_ticks(3, 2.5), 2);
    }
}
