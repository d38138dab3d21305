//! Experiment report CSV: one row per (variant, latency, fusion order) with
//! detection and tracking metrics. The header is stable; missing metrics
//! stay empty rather than defaulting to zero.

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str =
    "variant,fusion_order,latency_frames,latency_ms,preset,seed,config_hash,map,amota,amotp";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub fusion_order: String,
    /// None for single-view variants (no channel).
    pub latency_frames: Option<u32>,
    /// Derived from the preset rate; None when latency does not apply.
    pub latency_ms: Option<f64>,
    pub preset: String,
    pub seed: u64,
    pub config_hash: String,
    pub map: Option<f64>,
    pub amota: Option<f64>,
    pub amotp: Option<f64>,
}

fn cell_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn cell_u32(v: Option<u32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Emits the header plus one line per row.
pub fn emit_report(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.fusion_order,
            cell_u32(r.latency_frames),
            cell_f64(r.latency_ms),
            r.preset,
            r.seed,
            r.config_hash,
            cell_f64(r.map),
            cell_f64(r.amota),
            cell_f64(r.amotp),
        ));
    }
    out
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse("empty report".to_string()))?;
    if header != REPORT_HEADER {
        return Err(Error::parse(format!("unexpected report header '{header}'")));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::parse(format!("report row needs 10 cells, got {}", f.len())));
        }
        let opt_u32 = |s: &str| -> Result<Option<u32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::parse(format!("bad integer '{s}'")))
            }
        };
        let opt_f64 = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::parse(format!("bad number '{s}'")))
            }
        };
        rows.push(ReportRow {
            variant: f[0].to_string(),
            fusion_order: f[1].to_string(),
            latency_frames: opt_u32(f[2])?,
            latency_ms: opt_f64(f[3])?,
            preset: f[4].to_string(),
            seed: f[5].parse().map_err(|_| Error::parse("bad seed".to_string()))?,
            config_hash: f[6].to_string(),
            map: opt_f64(f[7])?,
            amota: opt_f64(f[8])?,
            amotp: opt_f64(f[9])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> ReportRow {
        ReportRow {
            variant: "XET-V2X".to_string(),
            fusion_order: "image_first".to_string(),
            latency_frames: Some(2),
            latency_ms: Some(400.0),
            preset: "intersection".to_string(),
            seed: 7,
            config_hash: "abc123".to_string(),
            map: Some(0.75),
            amota: Some(0.5),
            amotp: Some(0.42),
        }
    }

    #[test]
    fn roundtrip_and_stable_header() {
        let rows = vec![row()];
        let text = emit_report(&rows);
        assert!(text.starts_with(REPORT_HEADER));
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn missing_metrics_are_empty_cells_not_zero() {
        let mut r = row();
        r.amotp = None;
        r.latency_frames = None;
        r.latency_ms = None;
        let text = emit_report(&[r]);
        let line = text.lines().nth(1).unwrap();
        assert!(line.contains(",,"), "empty cells expected: {line}");
        assert!(!line.ends_with("0"));
        let parsed = parse_report(&text).unwrap();
        assert_eq!(parsed[0].amotp, None);
        assert_eq!(parsed[0].latency_frames, None);
    }

    #[test]
    fn latency_ms_derived_at_10hz() {
        // 2 frames at 10 Hz is 200 ms; at 5 Hz it is 400 ms.
        for (rate, expect) in [(10.0, 200.0), (5.0, 400.0)] {
            let ms = 2.0 * 1000.0 / rate;
            assert_eq!(ms, expect);
        }
    }

    #[test]
    fn identical_rows_serialize_identically() {
        let rows = vec![row(), row()];
        assert_eq!(emit_report(&rows), emit_report(&rows.clone()));
    }
}
