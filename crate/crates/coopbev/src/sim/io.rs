//! Scenario file format: one JSON document per sequence with dense arrays
//! inline as numeric lists; point clouds larger than the inline cap move to
//! a binary sidecar (`<name>.clouds.bin`, little-endian f64 quadruples)
//! referenced by element offset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::imagebev::ImageFrame;
use crate::pointpillars::PointCloud;
use crate::sim::gt::{GtRecord, VisibilityThresholds};
use crate::sim::render::RenderStats;
use crate::sim::scenario::{Scenario, ScenarioFrame, ScenarioSpec};
use crate::sim::{AgentFrame, AgentSpec, WorldState};

pub const DEFAULT_INLINE_CAP: usize = 4096;

#[derive(Serialize, Deserialize)]
struct SidecarRef {
    /// Offset in f64 elements into the sidecar file.
    offset: u64,
    /// Number of points (4 f64 each).
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct CloudRepr {
    frame: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    inline: Option<Vec<[f64; 4]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sidecar: Option<SidecarRef>,
}

#[derive(Serialize, Deserialize)]
struct AgentFrameRepr {
    agent_id: String,
    frame_index: u64,
    t: f64,
    cloud: CloudRepr,
    image: ImageFrame,
    pose: Pose,
}

#[derive(Serialize, Deserialize)]
struct FrameRepr {
    world: WorldState,
    agent_frames: Vec<AgentFrameRepr>,
    stats: Vec<RenderStats>,
    gt: Vec<GtRecord>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioRepr {
    format: String,
    spec: ScenarioSpec,
    agents: Vec<AgentSpec>,
    visibility: VisibilityThresholds,
    frames: Vec<FrameRepr>,
}

const FORMAT_TAG: &str = "coopbev-scenario-v1";

/// Writes `<name>.json` (plus `<name>.clouds.bin` when any cloud exceeds
/// `inline_cap` points) and returns the JSON path.
pub fn write_scenario(dir: &Path, name: &str, scenario: &Scenario, inline_cap: usize) -> Result<PathBuf> {
    let mut sidecar: Vec<u8> = Vec::new();
    let mut sidecar_values: u64 = 0;
    let frames: Vec<FrameRepr> = scenario
        .frames
        .iter()
        .map(|f| FrameRepr {
            world: f.world.clone(),
            agent_frames: f
                .agent_frames
                .iter()
                .map(|af| {
                    let cloud = if af.cloud.points.len() > inline_cap {
                        let offset = sidecar_values;
                        for p in &af.cloud.points {
                            for v in p {
                                sidecar.extend_from_slice(&v.to_le_bytes());
                            }
                        }
                        sidecar_values += 4 * af.cloud.points.len() as u64;
                        CloudRepr {
                            frame: af.cloud.frame.clone(),
                            inline: None,
                            sidecar: Some(SidecarRef {
                                offset,
                                count: af.cloud.points.len() as u64,
                            }),
                        }
                    } else {
                        CloudRepr {
                            frame: af.cloud.frame.clone(),
                            inline: Some(af.cloud.points.clone()),
                            sidecar: None,
                        }
                    };
                    AgentFrameRepr {
                        agent_id: af.agent_id.clone(),
                        frame_index: af.frame_index,
                        t: af.t,
                        cloud,
                        image: af.image.clone(),
                        pose: af.pose,
                    }
                })
                .collect(),
            stats: f.stats.clone(),
            gt: f.gt.clone(),
        })
        .collect();
    let repr = ScenarioRepr {
        format: FORMAT_TAG.to_string(),
        spec: scenario.spec,
        agents: scenario.agents.clone(),
        visibility: scenario.visibility,
        frames,
    };
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string(&repr).map_err(|e| Error::parse(e.to_string()))?;
    std::fs::write(&json_path, json)?;
    if !sidecar.is_empty() {
        std::fs::write(dir.join(format!("{name}.clouds.bin")), sidecar)?;
    }
    Ok(json_path)
}

pub fn read_scenario(json_path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(json_path)?;
    let repr: ScenarioRepr = serde_json::from_str(&text).map_err(|e| Error::parse(e.to_string()))?;
    if repr.format != FORMAT_TAG {
        return Err(Error::parse(format!("unknown scenario format '{}'", repr.format)));
    }
    let needs_sidecar = repr
        .frames
        .iter()
        .flat_map(|f| &f.agent_frames)
        .any(|af| af.cloud.sidecar.is_some());
    let sidecar: Vec<f64> = if needs_sidecar {
        let bin_path = json_path.with_extension("").with_extension("clouds.bin");
        let bin_path = if bin_path.exists() {
            bin_path
        } else {
            // <name>.json -> <name>.clouds.bin
            let stem = json_path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::parse("bad scenario path".to_string()))?;
            json_path.with_file_name(format!("{stem}.clouds.bin"))
        };
        let bytes = std::fs::read(&bin_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::parse("sidecar length not a multiple of 8".to_string()));
        }
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect()
    } else {
        Vec::new()
    };
    let frames: Result<Vec<ScenarioFrame>> = repr
        .frames
        .into_iter()
        .map(|f| {
            let agent_frames: Result<Vec<AgentFrame>> = f
                .agent_frames
                .into_iter()
                .map(|af| {
                    let points = match (af.cloud.inline, af.cloud.sidecar) {
                        (Some(points), None) => points,
                        (None, Some(r)) => {
                            let start = r.offset as usize;
                            let end = start + 4 * r.count as usize;
                            if end > sidecar.len() {
                                return Err(Error::parse("sidecar reference out of range".to_string()));
                            }
                            sidecar[start..end]
                                .chunks_exact(4)
                                .map(|c| [c[0], c[1], c[2], c[3]])
                                .collect()
                        }
                        _ => return Err(Error::parse("cloud must be inline xor sidecar".to_string())),
                    };
                    Ok(AgentFrame {
                        agent_id: af.agent_id,
                        frame_index: af.frame_index,
                        t: af.t,
                        cloud: PointCloud {
                            points,
                            frame: af.cloud.frame,
                        },
                        image: af.image,
                        pose: af.pose,
                    })
                })
                .collect();
            Ok(ScenarioFrame {
                world: f.world,
                agent_frames: agent_frames?,
                stats: f.stats,
                gt: f.gt,
            })
        })
        .collect();
    Ok(Scenario {
        spec: repr.spec,
        agents: repr.agents,
        frames: frames?,
        visibility: repr.visibility,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{generate_scenario, ScenarioPreset};

    #[test]
    fn roundtrip_inline() {
        let spec = ScenarioSpec {
            preset: ScenarioPreset::Intersection,
            rate_hz: 5.0,
            duration_s: 0.6,
            seed: 3,
        };
        let s = generate_scenario(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_scenario(dir.path(), "scenario", &s, DEFAULT_INLINE_CAP).unwrap();
        let back = read_scenario(&path).unwrap();
        assert_eq!(s, back);
        assert!(!dir.path().join("scenario.clouds.bin").exists());
    }

    #[test]
    fn roundtrip_with_sidecar() {
        let spec = ScenarioSpec {
            preset: ScenarioPreset::Intersection,
            rate_hz: 5.0,
            duration_s: 0.6,
            seed: 3,
        };
        let s = generate_scenario(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // Tiny cap forces every cloud into the sidecar.
        let path = write_scenario(dir.path(), "scenario", &s, 0).unwrap();
        assert!(dir.path().join("scenario.clouds.bin").exists());
        let back = read_scenario(&path).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn writes_are_byte_identical_across_runs() {
        let spec = ScenarioSpec {
            preset: ScenarioPreset::Moving,
            rate_hz: 5.0,
            duration_s: 0.4,
            seed: 9,
        };
        let dir = tempfile::tempdir().unwrap();
        let s1 = generate_scenario(&spec).unwrap();
        let p1 = write_scenario(dir.path(), "a", &s1, DEFAULT_INLINE_CAP).unwrap();
        let s2 = generate_scenario(&spec).unwrap();
        let p2 = write_scenario(dir.path(), "b", &s2, DEFAULT_INLINE_CAP).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
