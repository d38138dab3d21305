//! Experiment orchestration: train or load a model variant on a synthetic
//! scenario, run latency-aware inference, evaluate, and emit report files.
//! Sweeps merge rows across a grid of specs.

use std::path::{Path, PathBuf};

use crate::attention::fuse::FusionOrder;
use crate::config::{config_hash, ExperimentConfig};
use crate::error::{Error, Result};
use crate::geom::RoiBox;
use crate::metrics::{compute_amota_amotp, compute_map, emit_report, ReportRow};
use crate::model::{load_checkpoint, save_checkpoint, Model, Variant};
use crate::numerics::RngState;
use crate::sim::channel::pair_frames;
use crate::sim::io::{write_scenario, DEFAULT_INLINE_CAP};
use crate::sim::payload::payload_account;
use crate::sim::scenario::{generate_scenario, Scenario, ScenarioPreset, ScenarioSpec};
use crate::tracker::{assemble_output, write_results, DetectionRecord, FrameOutput, Tracker};
use crate::train::optim::{lr_schedule, AdamW};
use crate::train::step::{train_step, PairedFrame, TrainConfig, WINDOW_LEN};

/// One experiment: a variant trained and evaluated on a scenario preset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub variant: Variant,
    /// Must be None for single-view variants (they have no channel).
    pub latency_frames: Option<u32>,
    pub fusion_order: FusionOrder,
    pub preset: ScenarioPreset,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// false = require an existing checkpoint (no training).
    pub train: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.variant.uses_other() && self.latency_frames.is_some() {
            return Err(Error::usage(format!(
                "{} is a single-view variant: it has no V2X channel, so a latency setting is invalid (baseline matrix)",
                self.variant
            )));
        }
        Ok(())
    }

    pub fn effective_latency(&self) -> Option<u32> {
        if self.variant.uses_other() {
            Some(self.latency_frames.unwrap_or(0))
        } else {
            None
        }
    }

    fn spec_line(&self) -> String {
        format!(
            "variant={} latency={:?} order={} preset={} seed={}",
            self.variant,
            self.effective_latency(),
            self.fusion_order,
            self.preset,
            self.seed
        )
    }

    /// Directory holding the trained model and scenario for this
    /// (variant, order, preset, seed); shared across latencies.
    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join(format!(
            "{}_{}_{}_s{}",
            self.variant, self.fusion_order, self.preset, self.seed
        ))
    }

    /// Per-latency run directory.
    pub fn run_dir(&self) -> PathBuf {
        let leaf = match self.effective_latency() {
            Some(d) => format!("lat{d}"),
            None => "single".to_string(),
        };
        self.model_dir().join(leaf)
    }
}

pub struct RunArtifacts {
    pub row: ReportRow,
    pub run_dir: PathBuf,
    pub model_dir: PathBuf,
    pub frames: Vec<FrameOutput>,
}

/// Runs inference over the full sequence with the real score-thresholded
/// lifecycle, returning per-frame outputs (with assigned track ids).
pub fn run_inference(
    model: &Model,
    frames: &[PairedFrame],
    ego_roi: &RoiBox,
    other_roi: Option<&RoiBox>,
    order: FusionOrder,
) -> Result<Vec<FrameOutput>> {
    let mut tracker = Tracker::new();
    let mut prev_bev = None;
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let other = match (&frame.other, other_roi) {
            (Some(of), Some(roi)) => Some((of, roi)),
            _ => None,
        };
        let fwd = model.forward_frame(
            &frame.ego,
            ego_roi,
            other,
            prev_bev.as_ref().map(|(t, p)| (t, p)),
            &tracker.tracks.clone(),
            order,
            false,
        )?;
        let mut records = fwd.records.clone();
        tracker.lifecycle_update(&fwd.outputs, &mut records, &model.cfg.decoder, frame.frame_index)?;
        out.push(assemble_output(records, frame.frame_index, frame.t));
        prev_bev = Some((fwd.bev_out, frame.ego.pose));
    }
    Ok(out)
}

/// Trains the model on the scenario at zero channel latency: windows are
/// visited in a seeded shuffled order, `epochs` passes over the sequence.
pub fn train_on_scenario(
    model: &mut Model,
    scenario: &Scenario,
    order: FusionOrder,
    cfg: &TrainConfig,
) -> Result<Vec<(u64, f64)>> {
    let frames = pair_frames(scenario, 0)?;
    if frames.len() < WINDOW_LEN {
        return Err(Error::config(format!(
            "scenario too short: {} frames, need {WINDOW_LEN}",
            frames.len()
        )));
    }
    let ego_roi = scenario.agents[scenario.ego_index()].roi;
    let other_roi = scenario.other_index().map(|i| scenario.agents[i].roi);
    let n_windows = frames.len() - WINDOW_LEN + 1;
    let total_steps = (cfg.epochs * n_windows) as u64;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order_rng = RngState::new(cfg.seed).fork("window-order");
    let mut dropout_rng = RngState::new(cfg.seed).fork("track-dropout");
    let mut curve = Vec::with_capacity(total_steps as usize);
    let mut step_idx = 0u64;
    for _epoch in 0..cfg.epochs {
        let mut window_order: Vec<usize> = (0..n_windows).collect();
        order_rng.shuffle(&mut window_order);
        for w in window_order {
            let scale = lr_schedule(step_idx, cfg.warmup_iters, total_steps, cfg.lr_min_factor);
            let outcome = train_step(
                model,
                &frames[w..w + WINDOW_LEN],
                &ego_roi,
                other_roi.as_ref(),
                order,
                cfg,
                &mut opt,
                scale,
                &mut dropout_rng,
            )?;
            curve.push((step_idx, outcome.loss));
            step_idx += 1;
        }
    }
    Ok(curve)
}

fn loss_curve_csv(curve: &[(u64, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

/// Runs one experiment end to end and writes its artifacts:
///   <model_dir>/scenario.json, model.ckpt, loss_curve.csv, config.toml
///   <run_dir>/results.txt, report.csv
/// An existing checkpoint is reused (training is deterministic, so the bytes
/// would be identical); `train == false` requires one to exist.
pub fn run_experiment(spec: &ExperimentSpec, cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    spec.validate()?;
    cfg.validate()?;
    let model_dir = spec.model_dir();
    let run_dir = spec.run_dir();
    std::fs::create_dir_all(&run_dir)?;

    let scn_spec = ScenarioSpec {
        preset: spec.preset,
        rate_hz: cfg.scenario.rate_hz,
        duration_s: cfg.scenario.duration_s,
        seed: spec.seed,
    };
    let scenario = generate_scenario(&scn_spec)?;
    write_scenario(&model_dir, "scenario", &scenario, DEFAULT_INLINE_CAP)?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = spec.seed;
    let mut model = Model::new(&cfg.model, spec.variant, spec.seed)?;
    let ckpt_path = model_dir.join("model.ckpt");
    if ckpt_path.exists() {
        let bytes = std::fs::read(&ckpt_path)?;
        load_checkpoint(&mut model, &bytes)?;
    } else if spec.train {
        let curve = train_on_scenario(&mut model, &scenario, spec.fusion_order, &train_cfg)?;
        std::fs::write(model_dir.join("loss_curve.csv"), loss_curve_csv(&curve))?;
        std::fs::write(&ckpt_path, save_checkpoint(&mut model))?;
    } else {
        return Err(Error::usage(format!(
            "eval-only requested but no checkpoint at {}",
            ckpt_path.display()
        )));
    }

    // Inference at the spec latency.
    let latency = spec.effective_latency();
    let frames = pair_frames(&scenario, latency.unwrap_or(0))?;
    let ego_roi = scenario.agents[scenario.ego_index()].roi;
    let other_roi = scenario.other_index().map(|i| scenario.agents[i].roi);
    let frame_outputs = run_inference(&model, &frames, &ego_roi, other_roi.as_ref(), spec.fusion_order)?;
    std::fs::write(run_dir.join("results.txt"), write_results(&frame_outputs))?;

    // Metrics against the scenario ground truth.
    let det_frames: Vec<Vec<DetectionRecord>> = frame_outputs.iter().map(|f| f.records.clone()).collect();
    let gt_frames: Vec<Vec<crate::sim::gt::GtRecord>> = scenario.frames.iter().map(|f| f.gt.clone()).collect();
    let map = compute_map(&det_frames, &gt_frames, &cfg.eval)?;
    let mot = compute_amota_amotp(&det_frames, &gt_frames, &cfg.eval)?;

    // Payload accounting for the transmitted cooperative frame.
    if let Some(oi) = scenario.other_index() {
        if spec.variant.uses_other() {
            let oframe = &scenario.frames[0].agent_frames[oi];
            let (img_pyr, lidar_pyr) = encode_other_pyramids(&model, oframe, &scenario.agents[oi].roi)?;
            let n_dets = frame_outputs.first().map_or(0, |f| f.records.len());
            let (reports, breakdown) =
                payload_account(oframe, &img_pyr, &lidar_pyr, n_dets, &cfg.payload);
            let payload_json = serde_json::json!({
                "reports": reports,
                "breakdown": breakdown,
            });
            std::fs::write(
                run_dir.join("payload.json"),
                serde_json::to_string_pretty(&payload_json).map_err(|e| Error::parse(e.to_string()))?,
            )?;
        }
    }

    let hash = config_hash(cfg, &spec.spec_line())?;
    std::fs::write(
        model_dir.join("config.toml"),
        format!("# {}\n{}", spec.spec_line(), cfg.to_toml()?),
    )?;
    let row = ReportRow {
        variant: spec.variant.as_str().to_string(),
        fusion_order: spec.fusion_order.as_str().to_string(),
        latency_frames: latency,
        latency_ms: latency.map(|d| d as f64 * 1000.0 / cfg.scenario.rate_hz),
        preset: spec.preset.as_str().to_string(),
        seed: spec.seed,
        config_hash: hash,
        map: map.mean_ap,
        amota: mot.amota,
        amotp: mot.amotp,
    };
    std::fs::write(run_dir.join("report.csv"), emit_report(std::slice::from_ref(&row)))?;
    Ok(RunArtifacts {
        row,
        run_dir,
        model_dir,
        frames: frame_outputs,
    })
}

fn encode_other_pyramids(
    model: &Model,
    frame: &crate::sim::AgentFrame,
    roi: &RoiBox,
) -> Result<(Vec<crate::features::FeatureMap>, Vec<crate::features::FeatureMap>)> {
    let img = match model.other_img_enc.as_ref() {
        Some(enc) => {
            let norm = crate::imagebev::normalize_image(
                &frame.image,
                model.cfg.image_norm_mean,
                model.cfg.image_norm_std,
            )?;
            enc.forward(&norm)?.0
        }
        None => Vec::new(),
    };
    let lidar = match (model.other_pillar.as_ref(), model.other_backbone.as_ref()) {
        (Some(pe), Some(bb)) => {
            let grid = crate::pointpillars::voxelize(
                &frame.cloud,
                roi,
                model.cfg.pillar_voxel,
                model.cfg.pillar_point_cap,
            )?;
            let (pseudo, _) = pe.forward(&grid)?;
            bb.forward(&pseudo)?.0
        }
        _ => Vec::new(),
    };
    Ok((img, lidar))
}

/// Runs a grid of experiments sharing one scenario preset and writes a
/// merged CSV (ordered by variant then latency) to `<out>/merged.csv`.
/// Rerunning with the same grid overwrites the same files with identical
/// bytes; nothing is appended.
pub fn sweep(grid: &[ExperimentSpec], cfg: &ExperimentConfig, out: &Path) -> Result<(PathBuf, Vec<ReportRow>)> {
    if let Some(first) = grid.first() {
        if grid.iter().any(|s| s.preset != first.preset) {
            return Err(Error::usage("sweep entries must share one scenario preset".to_string()));
        }
    }
    let mut rows = Vec::with_capacity(grid.len());
    for spec in grid {
        rows.push(run_experiment(spec, cfg)?.row);
    }
    let mut ordered: Vec<usize> = (0..grid.len()).collect();
    ordered.sort_by_key(|i| (grid[*i].variant, grid[*i].effective_latency(), grid[*i].seed));
    let rows: Vec<ReportRow> = ordered.into_iter().map(|i| rows[i].clone()).collect();
    std::fs::create_dir_all(out)?;
    let merged = out.join("merged.csv");
    std::fs::write(&merged, emit_report(&rows))?;
    Ok((merged, rows))
}
