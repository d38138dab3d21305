//! Sensor rendering: ray-cast LiDAR against oriented boxes and the ground
//! plane, and orthographic top-down box painting for cameras. Both report
//! per-object visibility statistics used by ground-truth construction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imagebev::ImageFrame;
use crate::numerics::Tensor;
use crate::pointpillars::PointCloud;
use crate::sim::{AgentFrame, AgentSpec, SimObject, WorldState};
use crate::tracker::ObjectClass;

/// Per-object sensor evidence from one agent's rendering pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub lidar_hits: BTreeMap<u64, usize>,
    pub image_pixels: BTreeMap<u64, usize>,
}

fn class_color(class: ObjectClass) -> [f64; 3] {
    match class {
        ObjectClass::Car => [0.9, 0.1, 0.1],
        ObjectClass::Pedestrian => [0.1, 0.9, 0.1],
        ObjectClass::Motorcycle => [0.1, 0.1, 0.9],
        ObjectClass::Bicycle => [0.9, 0.9, 0.1],
    }
}

fn class_intensity(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Car => 0.8,
        ObjectClass::Pedestrian => 0.6,
        ObjectClass::Motorcycle => 0.7,
        ObjectClass::Bicycle => 0.65,
    }
}

const GROUND_COLOR: [f64; 3] = [0.05, 0.05, 0.05];
const GROUND_INTENSITY: f64 = 0.2;

/// Nearest intersection of a ray with an oriented box, if any.
/// Ray: origin + t * dir, t > 0. Box: center pose, dims (l, w, h).
fn ray_box(origin: [f64; 3], dir: [f64; 3], obj: &SimObject) -> Option<f64> {
    // Into the box frame (yaw about z).
    let (s, c) = obj.pose.yaw.sin_cos();
    let ox = origin[0] - obj.pose.x;
    let oy = origin[1] - obj.pose.y;
    let oz = origin[2] - obj.pose.z;
    let o = [c * ox + s * oy, -s * ox + c * oy, oz];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]];
    let half = [obj.dims[0] * 0.5, obj.dims[1] * 0.5, obj.dims[2] * 0.5];
    let mut t_near = 0.0f64;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis].abs() < 1e-12 {
            if o[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (-half[axis] - o[axis]) * inv;
        let mut t1 = (half[axis] - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 1e-9 {
        Some(t_near)
    } else {
        None
    }
}

/// Renders one agent's LiDAR sweep and camera image against the world.
pub fn render_sensors(world: &WorldState, agent: &AgentSpec) -> Result<(AgentFrame, RenderStats)> {
    let mut stats = RenderStats::default();
    let pose = agent.pose;
    let lidar = &agent.rig.lidar;
    let origin = [pose.x, pose.y, pose.z + lidar.height];
    let mut points: Vec<[f64; 4]> = Vec::new();
    let (yaw_s, yaw_c) = pose.yaw.sin_cos();
    for az_step in 0..lidar.azimuth_steps {
        // Azimuth in the agent frame, centered on +x.
        let az = if (lidar.fov - std::f64::consts::TAU).abs() < 1e-9 {
            lidar.fov * (az_step as f64) / (lidar.azimuth_steps as f64)
        } else {
            -lidar.fov * 0.5 + lidar.fov * (az_step as f64 + 0.5) / (lidar.azimuth_steps as f64)
        };
        let (az_sin, az_cos) = az.sin_cos();
        // Rotate into the world frame.
        let dx = yaw_c * az_cos - yaw_s * az_sin;
        let dy = yaw_s * az_cos + yaw_c * az_sin;
        for elev in &lidar.elevations {
            let (es, ec) = elev.sin_cos();
            let dir = [dx * ec, dy * ec, es];
            // Nearest object hit.
            let mut best: Option<(f64, usize)> = None;
            for (oi, obj) in world.objects.iter().enumerate() {
                if let Some(t) = ray_box(origin, dir, obj) {
                    if t <= lidar.max_range && best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, oi));
                    }
                }
            }
            // Ground plane z = 0.
            let ground_t = if dir[2] < -1e-9 {
                let t = -origin[2] / dir[2];
                (t <= lidar.max_range).then_some(t)
            } else {
                None
            };
            let hit = match (best, ground_t) {
                (Some((t, _)), Some(g)) if g < t => Some((g, None)),
                (Some((t, oi)), _) => Some((t, Some(oi))),
                (None, Some(g)) => Some((g, None)),
                (None, None) => None,
            };
            if let Some((t, obj_idx)) = hit {
                let world_pt = [
                    origin[0] + t * dir[0],
                    origin[1] + t * dir[1],
                    origin[2] + t * dir[2],
                ];
                let local = pose.to_local(world_pt);
                let intensity = match obj_idx {
                    Some(oi) => {
                        let obj = &world.objects[oi];
                        *stats.lidar_hits.entry(obj.id).or_insert(0) += 1;
                        class_intensity(obj.class)
                    }
                    None => GROUND_INTENSITY,
                };
                points.push([local[0], local[1], local[2], intensity]);
            }
        }
    }

    // Camera: per pixel, the covering object with the highest top wins.
    let cam = &agent.rig.camera;
    let (h, w) = (cam.height, cam.width);
    let mut img = vec![0.0; 3 * h * w];
    let sx = (cam.x_max - cam.x_min) / w as f64;
    let sy = (cam.y_max - cam.y_min) / h as f64;
    for row in 0..h {
        let ly = cam.y_min + (row as f64 + 0.5) * sy;
        for col in 0..w {
            let lx = cam.x_min + (col as f64 + 0.5) * sx;
            let wp = pose.to_world([lx, ly, 0.0]);
            let mut winner: Option<(f64, usize)> = None;
            for (oi, obj) in world.objects.iter().enumerate() {
                if crate::geom::point_in_box_xy(
                    [wp[0], wp[1]],
                    [obj.pose.x, obj.pose.y],
                    [obj.dims[0], obj.dims[1]],
                    obj.pose.yaw,
                ) && winner.map_or(true, |(top, _)| obj.z_top() > top)
                {
                    winner = Some((obj.z_top(), oi));
                }
            }
            let color = match winner {
                Some((_, oi)) => {
                    let obj = &world.objects[oi];
                    *stats.image_pixels.entry(obj.id).or_insert(0) += 1;
                    class_color(obj.class)
                }
                None => GROUND_COLOR,
            };
            for ch in 0..3 {
                img[ch * h * w + row * w + col] = color[ch];
            }
        }
    }

    let image = ImageFrame {
        height: h,
        width: w,
        data: Tensor::new(vec![3, h, w], img)?,
        intrinsics: cam.intrinsics(),
        extrinsics: pose,
    };
    let frame = AgentFrame {
        agent_id: agent.agent_id.clone(),
        frame_index: world.frame_index,
        t: world.t,
        cloud: PointCloud {
            points,
            frame: agent.agent_id.clone(),
        },
        image,
        pose,
    };
    Ok((frame, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Pose, RoiBox};
    use crate::sim::{AgentKind, CameraSpec, LidarSpec, SensorRig};

    fn ego_agent() -> AgentSpec {
        AgentSpec {
            agent_id: "ego".to_string(),
            kind: AgentKind::Ego,
            pose: Pose::identity(),
            rig: SensorRig {
                lidar: LidarSpec {
                    azimuth_steps: 180,
                    elevations: vec![-0.28, -0.2, -0.14, -0.09, -0.04, 0.0],
                    height: 1.8,
                    max_range: 40.0,
                    fov: std::f64::consts::TAU,
                },
                camera: CameraSpec {
                    width: 32,
                    height: 32,
                    x_min: 2.0,
                    x_max: 18.0,
                    y_min: -8.0,
                    y_max: 8.0,
                },
            },
            roi: RoiBox::new(-32.0, 32.0, -32.0, 32.0, -0.5, 4.0).unwrap(),
        }
    }

    fn rsu_agent() -> AgentSpec {
        AgentSpec {
            agent_id: "rsu".to_string(),
            kind: AgentKind::Rsu,
            pose: Pose::new(27.0, 14.0, 0.0, -std::f64::consts::FRAC_PI_2),
            rig: SensorRig {
                lidar: LidarSpec {
                    azimuth_steps: 180,
                    elevations: vec![-0.45, -0.35, -0.26, -0.18, -0.1, -0.04],
                    height: 6.0,
                    max_range: 45.0,
                    fov: std::f64::consts::TAU,
                },
                camera: CameraSpec {
                    width: 32,
                    height: 32,
                    x_min: -16.0,
                    x_max: 16.0,
                    y_min: -16.0,
                    y_max: 16.0,
                },
            },
            roi: RoiBox::new(-32.0, 32.0, -32.0, 32.0, -0.5, 4.0).unwrap(),
        }
    }

    fn car(id: u64, x: f64, y: f64) -> SimObject {
        SimObject {
            id,
            class: ObjectClass::Car,
            pose: Pose::new(x, y, 0.8, 0.0),
            dims: [4.4, 1.9, 1.6],
            velocity: [0.0, 0.0],
        }
    }

    fn world(objects: Vec<SimObject>) -> WorldState {
        WorldState {
            frame_index: 0,
            t: 0.0,
            objects,
            agents: vec![ego_agent(), rsu_agent()],
        }
    }

    #[test]
    fn single_box_casts_an_occlusion_shadow() {
        let w = world(vec![car(1, 8.0, 0.0)]);
        let ego = ego_agent();
        let (frame, stats) = render_sensors(&w, &ego).unwrap();
        assert!(stats.lidar_hits[&1] >= 5, "expected solid hit count");
        // Points on the box facade sit near x ~ 5.8 (front face); nothing on
        // the box between its back face and farther along the same rays at
        // ground level directly behind it.
        let behind: Vec<&[f64; 4]> = frame
            .cloud
            .points
            .iter()
            .filter(|p| p[1].abs() < 0.5 && p[0] > 10.2 && p[0] < 14.0 && p[2] < 0.1)
            .collect();
        assert!(behind.is_empty(), "shadow region should be empty, got {behind:?}");
    }

    #[test]
    fn empty_world_returns_ground_only() {
        let w = world(vec![]);
        let (frame, stats) = render_sensors(&w, &ego_agent()).unwrap();
        assert!(stats.lidar_hits.is_empty());
        assert!(!frame.cloud.points.is_empty());
        // All returns on the ground plane (z ~ 0 in agent frame).
        assert!(frame.cloud.points.iter().all(|p| p[2].abs() < 1e-9));
        assert!(frame.cloud.points.iter().all(|p| p[3] == GROUND_INTENSITY));
    }

    #[test]
    fn occluded_box_visible_to_rsu_but_not_ego() {
        // Blocker ahead of ego; a second car hides behind it (radially), but
        // the RSU has a clear line of sight.
        let blocker = SimObject {
            id: 1,
            class: ObjectClass::Car,
            pose: Pose::new(14.0, 0.0, 1.6, 0.0),
            dims: [9.0, 2.6, 3.2],
            velocity: [0.0, 0.0],
        };
        let hidden = car(2, 23.0, 0.5);
        let w = world(vec![blocker, hidden]);
        let (_, ego_stats) = render_sensors(&w, &ego_agent()).unwrap();
        let (_, rsu_stats) = render_sensors(&w, &rsu_agent()).unwrap();
        assert!(ego_stats.lidar_hits.get(&1).copied().unwrap_or(0) >= 5);
        assert_eq!(ego_stats.lidar_hits.get(&2).copied().unwrap_or(0), 0, "ego must not see the hidden car");
        assert!(rsu_stats.lidar_hits.get(&2).copied().unwrap_or(0) >= 5, "rsu must see the hidden car");
    }

    #[test]
    fn camera_paints_class_colors_and_counts_pixels() {
        let w = world(vec![car(1, 8.0, 0.0)]);
        let (frame, stats) = render_sensors(&w, &ego_agent()).unwrap();
        assert!(stats.image_pixels[&1] >= 20, "car should cover pixels");
        // A pixel at the car center is painted the car color.
        let k = frame.image.intrinsics;
        let u = (k[0][0] * 8.0 + k[0][2]) as usize;
        let v = (k[1][1] * 0.0 + k[1][2]) as usize;
        let plane = 32 * 32;
        let r = frame.image.data.data()[v * 32 + u];
        let g = frame.image.data.data()[plane + v * 32 + u];
        assert!((r - 0.9).abs() < 1e-12 && (g - 0.1).abs() < 1e-12);
    }

    #[test]
    fn object_outside_camera_window_paints_nothing() {
        let w = world(vec![car(1, -6.0, 0.0)]); // behind ego
        let (_, stats) = render_sensors(&w, &ego_agent()).unwrap();
        assert_eq!(stats.image_pixels.get(&1).copied().unwrap_or(0), 0);
        assert!(stats.lidar_hits.get(&1).copied().unwrap_or(0) >= 5);
    }

    #[test]
    fn taller_object_wins_overlapping_pixels() {
        let low = SimObject {
            id: 1,
            class: ObjectClass::Car,
            pose: Pose::new(8.0, 0.0, 0.6, 0.0),
            dims: [4.0, 2.0, 1.2],
            velocity: [0.0, 0.0],
        };
        let mut tall = low.clone();
        tall.id = 2;
        tall.class = ObjectClass::Pedestrian;
        tall.pose = Pose::new(8.0, 0.0, 0.9, 0.0);
        tall.dims = [0.6, 0.6, 1.8];
        let w = world(vec![low, tall]);
        let (frame, _) = render_sensors(&w, &ego_agent()).unwrap();
        let k = frame.image.intrinsics;
        let u = (k[0][0] * 8.0 + k[0][2]) as usize;
        let v = (k[1][1] * 0.0 + k[1][2]) as usize;
        let plane = 32 * 32;
        let g = frame.image.data.data()[plane + v * 32 + u];
        assert!((g - 0.9).abs() < 1e-12, "pedestrian color should win");
    }

    #[test]
    fn rendering_is_deterministic() {
        let w = world(vec![car(1, 8.0, 0.0), car(2, 12.0, -3.0)]);
        let (a, sa) = render_sensors(&w, &ego_agent()).unwrap();
        let (b, sb) = render_sensors(&w, &ego_agent()).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }
}
