use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::eval::latency::LatencyStats;

/// One row of the rate / precision table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub method: String,
    pub preset: String,
    pub mean_bpp: f64,
    pub bpp_std: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
}

const RATE_COLUMNS: [&str; 7] = ["method", "preset", "mean_bpp", "bpp_std", "ap", "tp", "fp"];

/// Write rows as CSV; the header is written even when `rows` is empty.
pub fn rate_precision_report(rows: &[RateRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(RATE_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LatencyRow<'a> {
    op: &'a str,
    min: f64,
    mean: f64,
    std: f64,
    samples: usize,
    single_sample: bool,
}

pub fn write_latency_csv(op: &str, stats: &LatencyStats, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(LatencyRow {
        op,
        min: stats.min,
        mean: stats.mean,
        std: stats.std,
        samples: stats.samples,
        single_sample: stats.single_sample,
    })?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_for_no_rows() {
        let f = tempfile::NamedTempFile::new().unwrap();
        rate_precision_report(&[], f.path()).unwrap();
        assert_eq!(std::fs::read_to_string(f.path()).unwrap(), "method,preset,mean_bpp,bpp_std,ap,tp,fp\n");
    }

    #[test]
    fn rows_follow_header() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let row = RateRow {
            method: "(256,2)".into(),
            preset: String::new(),
            mean_bpp: 0.24,
            bpp_std: 0.01,
            ap: 0.19,
            tp: 234,
            fp: 1159,
        };
        rate_precision_report(&[row], f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "\"(256,2)\",,0.24,0.01,0.19,234,1159");
    }
}
