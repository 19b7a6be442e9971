//! Run reports. Every subcommand writes the same columns; metrics that do
//! not apply to a row are `null` in JSON and empty in CSV.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Column order of `report.csv`.
pub const COLUMNS: [&str; 15] = [
    "command",
    "model",
    "d",
    "seed",
    "steps",
    "samples",
    "loss_first",
    "loss_last",
    "alignment_f1",
    "order_accuracy",
    "fd",
    "kl",
    "is_analog",
    "mel_analog",
    "multiscale",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub command: String,
    pub model: String,
    pub d: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    pub samples: Option<usize>,
    /// Mean training loss over the first 1000 steps.
    pub loss_first: Option<f64>,
    /// Mean training loss over the last 1000 steps.
    pub loss_last: Option<f64>,
    pub alignment_f1: Option<f64>,
    pub order_accuracy: Option<f64>,
    pub fd: Option<f64>,
    pub kl: Option<f64>,
    pub is_analog: Option<f64>,
    pub mel_analog: Option<f64>,
    pub multiscale: Option<f64>,
}

impl MetricRow {
    pub fn new(command: &str, model: &str) -> Self {
        Self {
            command: command.to_string(),
            model: model.to_string(),
            ..Default::default()
        }
    }

    fn cells(&self) -> Vec<String> {
        let int = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
        let real = |v: Option<f64>| v.map(sig6).unwrap_or_default();
        vec![
            self.command.clone(),
            self.model.clone(),
            int(self.d.map(|v| v as u64)),
            int(self.seed),
            int(self.steps),
            int(self.samples.map(|v| v as u64)),
            real(self.loss_first),
            real(self.loss_last),
            real(self.alignment_f1),
            real(self.order_accuracy),
            real(self.fd),
            real(self.kl),
            real(self.is_analog),
            real(self.mel_analog),
            real(self.multiscale),
        ]
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.loss_first,
            self.loss_last,
            self.alignment_f1,
            self.order_accuracy,
            self.fd,
            self.kl,
            self.is_analog,
            self.mel_analog,
            self.multiscale,
        ]
        .into_iter()
        .flatten()
    }
}

/// Six significant digits, shortest form.
pub fn sig6(v: f64) -> String {
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    rounded.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("non-finite value in report row {model:?}")]
    NonFinite { model: String },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Report {
    pub fn validate(&self) -> Result<(), ReportError> {
        for row in &self.rows {
            if row.values().any(|v| !v.is_finite()) {
                return Err(ReportError::NonFinite {
                    model: row.model.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.cells())?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        self.validate()?;
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| ReportError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(io(&json))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()?).map_err(io(&csv))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ReportError> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> Report {
        let mut row = MetricRow::new("eval-gen", "two-stage");
        row.d = Some(8);
        row.alignment_f1 = Some(0.123456789);
        row.fd = Some(1234567.0);
        Report {
            run_id: "r".into(),
            command: "eval-gen".into(),
            config_hash: "h".into(),
            rows: vec![row, MetricRow::new("eval-gen", "baseline")],
        }
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1234567.0), "1234570");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn csv_has_fixed_columns() {
        let csv = report().to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "eval-gen,two-stage,8,,,,,,0.123457,,1234570,,,,");
        assert_eq!(lines.next().unwrap().split(',').count(), COLUMNS.len());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let r = report();
        r.write(dir.path()).unwrap();
        assert_eq!(Report::load(dir.path()).unwrap(), r);
    }

    #[test]
    fn non_finite_rejected() {
        let mut r = report();
        r.rows[1].kl = Some(f64::NAN);
        assert!(r.validate().is_err());
    }
}
