//! Detection and tracking metrics: center-distance mAP, recall-averaged
//! MOTA/MOTP, and the per-experiment CSV report.

pub mod map;
pub mod mot;
pub mod report;

pub use map::{compute_map, MapResult};
pub use mot::{compute_amota_amotp, MotResult};
pub use report::{emit_report, ReportRow, REPORT_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracker::ObjectClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Center-distance matching thresholds for AP, meters, ascending.
    pub match_dist_thresholds: Vec<f64>,
    /// Number of recall levels for the AMOTA/AMOTP sweep.
    pub recall_samples: usize,
    pub classes: Vec<ObjectClass>,
    /// Matching distance for tracking metrics, meters.
    pub tracking_match_dist: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            recall_samples: 40,
            classes: ObjectClass::ALL.to_vec(),
            tracking_match_dist: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.match_dist_thresholds.is_empty()
            || self.match_dist_thresholds.iter().any(|t| *t <= 0.0)
            || self.match_dist_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(
                "match_dist_thresholds must be positive and strictly ascending".to_string(),
            ));
        }
        if self.recall_samples < 2 {
            return Err(Error::config("recall_samples must be >= 2".to_string()));
        }
        if self.classes.is_empty() {
            return Err(Error::config("at least one class required".to_string()));
        }
        Ok(())
    }
}

pub(crate) fn center_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
