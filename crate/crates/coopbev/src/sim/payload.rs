//! Payload accounting for the three V2X transmission levels: raw sensor
//! data, feature-level intermediate representations, and instance-level
//! results. Byte counts come from declared element widths, not in-memory
//! layout.

use serde::{Deserialize, Serialize};

use crate::features::FeatureMap;
use crate::sim::AgentFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadLevel {
    Raw,
    Feature,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadReport {
    pub level: PayloadLevel,
    pub bytes_per_frame: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayloadWidths {
    /// Bytes per raw channel sample (image channel value or point coordinate).
    pub raw_sample_bytes: u64,
    /// Bytes per transmitted feature value.
    pub feature_value_bytes: u64,
    /// Fixed record size per detected instance.
    pub instance_record_bytes: u64,
    /// Per-message header.
    pub header_bytes: u64,
}

impl Default for PayloadWidths {
    fn default() -> Self {
        PayloadWidths {
            raw_sample_bytes: 4,
            feature_value_bytes: 2,
            instance_record_bytes: 40,
            header_bytes: 16,
        }
    }
}

/// Per-modality byte breakdown alongside the three headline reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadBreakdown {
    pub raw_image_bytes: u64,
    pub raw_lidar_bytes: u64,
    pub feature_image_bytes: u64,
    pub feature_lidar_bytes: u64,
}

/// Accounts one agent frame: raw = image samples + point samples; feature =
/// pyramid elements (both modalities); instance = record count × record size.
pub fn payload_account(
    frame: &AgentFrame,
    image_pyramid: &[FeatureMap],
    lidar_pyramid: &[FeatureMap],
    num_detections: usize,
    widths: &PayloadWidths,
) -> ([PayloadReport; 3], PayloadBreakdown) {
    let raw_image = 3 * frame.image.height as u64 * frame.image.width as u64 * widths.raw_sample_bytes;
    let raw_lidar = 4 * frame.cloud.points.len() as u64 * widths.raw_sample_bytes;
    let feat_image: u64 = image_pyramid.iter().map(|l| l.numel() as u64).sum::<u64>() * widths.feature_value_bytes;
    let feat_lidar: u64 = lidar_pyramid.iter().map(|l| l.numel() as u64).sum::<u64>() * widths.feature_value_bytes;
    let breakdown = PayloadBreakdown {
        raw_image_bytes: raw_image,
        raw_lidar_bytes: raw_lidar,
        feature_image_bytes: feat_image,
        feature_lidar_bytes: feat_lidar,
    };
    let reports = [
        PayloadReport {
            level: PayloadLevel::Raw,
            bytes_per_frame: widths.header_bytes + raw_image + raw_lidar,
        },
        PayloadReport {
            level: PayloadLevel::Feature,
            bytes_per_frame: widths.header_bytes + feat_image + feat_lidar,
        },
        PayloadReport {
            level: PayloadLevel::Instance,
            bytes_per_frame: widths.header_bytes + num_detections as u64 * widths.instance_record_bytes,
        },
    ];
    (reports, breakdown)
}
