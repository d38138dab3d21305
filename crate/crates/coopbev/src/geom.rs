use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Rigid transform of an agent or object: planar position + height + yaw.
/// Yaw rotates about +z, measured from +x toward +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            yaw: 0.0,
        }
    }

    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose { x, y, z, yaw }
    }

    /// Maps a point from this frame into the world frame.
    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * p[0] - s * p[1],
            self.y + s * p[0] + c * p[1],
            self.z + p[2],
        ]
    }

    /// Maps a world point into this frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * std::f64::consts::PI);
    if r <= -std::f64::consts::PI {
        r += 2.0 * std::f64::consts::PI;
    } else if r > std::f64::consts::PI {
        r -= 2.0 * std::f64::consts::PI;
    }
    r
}

/// Axis-aligned region of interest in a sensor's local frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl RoiBox {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, z_min: f64, z_max: f64) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max || z_min >= z_max {
            return Err(Error::config(format!(
                "ROI min must be < max per axis: x [{x_min},{x_max}] y [{y_min},{y_max}] z [{z_min},{z_max}]"
            )));
        }
        Ok(RoiBox {
            x_min,
            x_max,
            y_min,
            y_max,
            z_min,
            z_max,
        })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.x_min
            && p[0] < self.x_max
            && p[1] >= self.y_min
            && p[1] < self.y_max
            && p[2] >= self.z_min
            && p[2] < self.z_max
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn x_extent(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn y_extent(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn z_extent(&self) -> f64 {
        self.z_max - self.z_min
    }

    /// Normalized coordinates in [0,1]^2 of a local-frame point; u follows x,
    /// v follows y. Callers decide what to do with out-of-range values.
    pub fn normalize_xy(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_min) / self.x_extent(),
            (y - self.y_min) / self.y_extent(),
        )
    }
}

/// Oriented box footprint test: is a world point inside the box in plan view?
/// `dims` is (length, width, height); length runs along the box yaw.
pub fn point_in_box_xy(p: [f64; 2], center: [f64; 2], dims_lw: [f64; 2], yaw: f64) -> bool {
    let (s, c) = yaw.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let local_x = c * dx + s * dy;
    let local_y = -s * dx + c * dy;
    local_x.abs() <= dims_lw[0] * 0.5 && local_y.abs() <= dims_lw[1] * 0.5
}
