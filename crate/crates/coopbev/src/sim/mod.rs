//! Synthetic multi-agent worlds: moving boxes, agent poses, ray-cast LiDAR
//! and painted orthographic camera frames, the frame-delay V2X channel,
//! visibility-based ground-truth construction, and payload accounting.

pub mod channel;
pub mod gt;
pub mod io;
pub mod payload;
pub mod render;
pub mod scenario;

pub use channel::LatencyChannel;
pub use gt::{build_gt, GtRecord, VisibilityThresholds};
pub use payload::{payload_account, PayloadBreakdown, PayloadLevel, PayloadReport, PayloadWidths};
pub use render::{render_sensors, RenderStats};
pub use scenario::{generate_scenario, Scenario, ScenarioFrame, ScenarioPreset, ScenarioSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, RoiBox};
use crate::imagebev::ImageFrame;
use crate::pointpillars::PointCloud;
use crate::tracker::ObjectClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ego,
    Cav,
    Rsu,
}

/// LiDAR model: evenly spaced azimuths over a horizontal field of view and a
/// fixed fan of elevation angles; rays return the nearest box face or the
/// ground plane within range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub azimuth_steps: usize,
    /// Radians, negative is downward.
    pub elevations: Vec<f64>,
    /// Sensor height above the agent origin, meters.
    pub height: f64,
    pub max_range: f64,
    /// Horizontal field of view in radians (2π for a full sweep), centered
    /// on the agent's +x axis.
    pub fov: f64,
}

/// Orthographic top-down camera over a local plan window, painting
/// class-colored boxes into a fixed-size image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// Plan window in the agent frame, meters.
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl CameraSpec {
    /// Affine intrinsics mapping local plan (x, y, 1) to pixels (u, v, 1).
    pub fn intrinsics(&self) -> [[f64; 3]; 3] {
        let sx = self.width as f64 / (self.x_max - self.x_min);
        let sy = self.height as f64 / (self.y_max - self.y_min);
        [
            [sx, 0.0, -sx * self.x_min],
            [0.0, sy, -sy * self.y_min],
            [0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub lidar: LidarSpec,
    pub camera: CameraSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub kind: AgentKind,
    pub pose: Pose,
    pub rig: SensorRig,
    /// Pillar/BEV region of interest in this agent's local frame.
    pub roi: RoiBox,
}

/// One simulated object: center pose, (length, width, height), and a
/// constant plan velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub id: u64,
    pub class: ObjectClass,
    pub pose: Pose,
    pub dims: [f64; 3],
    pub velocity: [f64; 2],
}

impl SimObject {
    pub fn z_bottom(&self) -> f64 {
        self.pose.z - self.dims[2] * 0.5
    }

    pub fn z_top(&self) -> f64 {
        self.pose.z + self.dims[2] * 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub frame_index: u64,
    /// World clock, seconds.
    pub t: f64,
    pub objects: Vec<SimObject>,
    pub agents: Vec<AgentSpec>,
}

impl WorldState {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(Error::integrity(format!("duplicate object id {}", o.id)));
            }
        }
        let egos = self.agents.iter().filter(|a| a.kind == AgentKind::Ego).count();
        if egos != 1 {
            return Err(Error::integrity(format!("expected exactly one ego agent, found {egos}")));
        }
        Ok(())
    }

    pub fn ego(&self) -> &AgentSpec {
        self.agents
            .iter()
            .find(|a| a.kind == AgentKind::Ego)
            .expect("validated worlds have one ego")
    }
}

/// One agent's timestamped multimodal observation; the unit of transmission.
/// Cloud and image share the agent clock `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFrame {
    pub agent_id: String,
    pub frame_index: u64,
    pub t: f64,
    pub cloud: PointCloud,
    pub image: ImageFrame,
    pub pose: Pose,
}
