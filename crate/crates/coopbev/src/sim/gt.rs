//! Ground-truth construction: the union over agents and modalities of
//! observed objects, restricted to the ego region of interest. "Observed"
//! means enough LiDAR hits or painted image pixels from at least one agent.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, RoiBox};
use crate::sim::render::RenderStats;
use crate::sim::WorldState;
use crate::tracker::ObjectClass;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityThresholds {
    pub min_lidar_hits: usize,
    pub min_image_pixels: usize,
}

impl Default for VisibilityThresholds {
    fn default() -> Self {
        VisibilityThresholds {
            min_lidar_hits: 5,
            min_image_pixels: 20,
        }
    }
}

/// One ground-truth tuple with a persistent identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub track_id: u64,
    pub class: ObjectClass,
    pub position: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

/// GT_k = (union over agents and modalities of observed objects) ∩ ROI_ego.
/// The ROI test uses the object center in the ego frame. Output is sorted by
/// object id.
pub fn build_gt(
    world: &WorldState,
    roi_ego: &RoiBox,
    per_agent_stats: &[RenderStats],
    thresholds: &VisibilityThresholds,
) -> Vec<GtRecord> {
    let ego_pose = world.ego().pose;
    let mut out = Vec::new();
    for obj in &world.objects {
        let observed = per_agent_stats.iter().any(|s| {
            s.lidar_hits.get(&obj.id).copied().unwrap_or(0) >= thresholds.min_lidar_hits
                || s.image_pixels.get(&obj.id).copied().unwrap_or(0) >= thresholds.min_image_pixels
        });
        if !observed {
            continue;
        }
        let local = ego_pose.to_local([obj.pose.x, obj.pose.y, obj.pose.z]);
        if !roi_ego.contains(local) {
            continue;
        }
        out.push(GtRecord {
            track_id: obj.id,
            class: obj.class,
            position: [obj.pose.x, obj.pose.y, obj.pose.z],
            dims: obj.dims,
            yaw: wrap_angle(obj.pose.yaw),
        });
    }
    out.sort_by_key(|r| r.track_id);
    out
}
