//! `.pometrics` files: one metrics report as fixed `key: value` lines.
//!
//! ```text
//! POMETRICS
//! version: 1
//! protocol: B
//! fpr95: 0.0375
//! auroc: 0.9921
//! threshold: 1.8830
//! n_id: 400
//! n_ood: 300
//! checksum: 0123456789abcdef
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Protocol;
use crate::error::{Error, Result};
use crate::textfmt::{self, Lines};

const MAGIC: &str = "POMETRICS";
const KEYS: [&str; 6] = ["protocol", "fpr95", "auroc", "threshold", "n_id", "n_ood"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub fpr95: f64,
    pub auroc: f64,
    /// ID-score threshold at which 95% of ID predictions are kept.
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn render_metrics_report(report: &MetricsReport) -> String {
    let mut out = String::new();
    textfmt::write_header(
        &mut out,
        MAGIC,
        &[
            ("protocol", report.protocol.to_string()),
            ("fpr95", report.fpr95.to_string()),
            ("auroc", report.auroc.to_string()),
            ("threshold", report.threshold.to_string()),
            ("n_id", report.n_id.to_string()),
            ("n_ood", report.n_ood.to_string()),
        ],
    );
    out
}

pub fn parse_metrics_report(text: &str) -> Result<MetricsReport> {
    let mut lines = Lines::new(text);
    let header = textfmt::read_header(&mut lines, MAGIC, &KEYS)?;
    // Header lines 1 and 2 are the magic and version.
    let float = |i: usize, key: &str| textfmt::parse_f64(i + 3, key, header.raw(i));
    let report = MetricsReport {
        protocol: header
            .raw(0)
            .parse()
            .map_err(|_| Error::parse(3, format!("invalid protocol {:?}", header.raw(0))))?,
        fpr95: float(1, "fpr95")?,
        auroc: float(2, "auroc")?,
        threshold: float(3, "threshold")?,
        n_id: header.parse(4, "n_id")?,
        n_ood: header.parse(5, "n_ood")?,
    };
    if !lines.is_done() {
        return Err(Error::Format(
            "trailing content after metrics report".into(),
        ));
    }
    Ok(report)
}

pub fn save_metrics_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    textfmt::write_file(path.as_ref(), &render_metrics_report(report))
}

pub fn load_metrics_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    parse_metrics_report(&textfmt::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsReport {
        MetricsReport {
            protocol: Protocol::B,
            fpr95: 0.1 + 0.2,
            auroc: 0.987_654_321_012_345_6,
            threshold: 1.0 / 3.0,
            n_id: 400,
            n_ood: 300,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let text = render_metrics_report(&sample());
        assert!(text.starts_with("POMETRICS\nversion: 1\nprotocol: B\nfpr95: "));
        assert_eq!(parse_metrics_report(&text).unwrap(), sample());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pometrics");
        save_metrics_report(&sample(), &path).unwrap();
        assert_eq!(load_metrics_report(&path).unwrap(), sample());
    }

    #[test]
    fn tampered_value_is_rejected() {
        let text = render_metrics_report(&sample()).replace("n_id: 400", "n_id: 401");
        assert!(matches!(parse_metrics_report(&text), Err(Error::Format(_))));
    }
}
