use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// JSON schema every report file satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");

pub fn report_json(r: &MetricReport) -> Result<String> {
    if !r.all_finite() {
        return Err(Error::Numerical(format!("report for '{}' has non-finite values", r.method)));
    }
    Ok(serde_json::to_string_pretty(r)? + "\n")
}

pub fn write_report(r: &MetricReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_json(r)?).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Report JSON with `wall_seconds` zeroed, for byte comparisons across runs.
pub fn canonical_json(r: &MetricReport) -> Result<String> {
    let mut r = r.clone();
    r.wall_seconds = 0.0;
    report_json(&r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    /// `a.psnr_mean - b.psnr_mean` in dB.
    pub psnr_gain_db: f64,
    /// `100 (b.fid - a.fid) / b.fid`.
    pub fid_reduction_pct: f64,
}

pub fn compare(a: &MetricReport, b: &MetricReport) -> Comparison {
    let fid_reduction_pct = if b.fid > 0.0 {
        100.0 * (b.fid - a.fid) / b.fid
    } else {
        0.0
    };
    Comparison {
        psnr_gain_db: a.psnr_mean - b.psnr_mean,
        fid_reduction_pct,
    }
}

/// One line in the form "X dB higher PSNR and Y% lower FID compared to <b>".
pub fn format_comparison(c: &Comparison, baseline: &str) -> String {
    let (psnr_word, psnr) = if c.psnr_gain_db >= 0.0 {
        ("higher", c.psnr_gain_db)
    } else {
        ("lower", -c.psnr_gain_db)
    };
    let (fid_word, fid) = if c.fid_reduction_pct >= 0.0 {
        ("lower", c.fid_reduction_pct)
    } else {
        ("higher", -c.fid_reduction_pct)
    };
    format!("{psnr:.2} dB {psnr_word} PSNR and {fid:.2}% {fid_word} FID compared to {baseline}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DiDelta;

    fn report(method: &str, psnr: f64, fid: f64) -> MetricReport {
        MetricReport {
            psnr_mean: psnr,
            psnr_std: 0.5,
            psnr_per_subject: vec![psnr],
            fid,
            di_delta: DiDelta::default(),
            method: method.into(),
            dataset_id: "d".into(),
            seed: 7,
            wall_seconds: 1.5,
        }
    }

    #[test]
    fn phrasing() {
        let c = compare(&report("proposed", 25.87, 0.6333), &report("2D-GAN", 25.0, 1.0));
        assert_eq!(
            format_comparison(&c, "2D-GAN"),
            "0.87 dB higher PSNR and 36.67% lower FID compared to 2D-GAN"
        );
        let c = compare(&report("a", 20.0, 2.0), &report("b", 21.0, 1.0));
        assert_eq!(format_comparison(&c, "b"), "1.00 dB lower PSNR and 100.00% higher FID compared to b");
    }

    #[test]
    fn non_finite_rejected_and_round_trip() {
        let mut r = report("m", 30.0, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_report(&r, &p).unwrap();
        assert_eq!(read_report(&p).unwrap(), r);
        r.fid = f64::NAN;
        assert!(report_json(&r).is_err());
    }
}
