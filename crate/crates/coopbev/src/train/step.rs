//! Sequence training: each step consumes a contiguous 5-frame window. The
//! first four frames run as detached context, maintaining the track-query
//! chain with teacher-forced births; the final frame is supervised with
//! matched focal + L1 losses and backpropagated through the whole model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::fuse::FusionOrder;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Pose, RoiBox};
use crate::model::Model;
use crate::numerics::sigmoid;
use crate::sim::gt::GtRecord;
use crate::sim::AgentFrame;
use crate::tracker::{softplus_derivative, QueryOutput, QuerySource, Tracker, NUM_CLASSES};
use crate::train::hungarian::{hungarian_match, CostMatrix};
use crate::train::loss::{focal_loss, focal_loss_grad, l1_box_loss, l1_box_loss_grad};
use crate::train::optim::{clip_grad_norm, zero_grads, AdamW};

pub const WINDOW_LEN: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Weight of the L1 box term in the loss.
    pub lambda_l1: f64,
    /// Matching cost weights: classification and per-coordinate L1.
    pub match_class_weight: f64,
    pub match_l1_weight: f64,
    pub lr_min_factor: f64,
    /// Probability of dropping each track query before the supervised frame,
    /// so object queries keep receiving birth supervision.
    pub track_dropout: f64,
    /// Maximum number of unbound noise track queries injected before the
    /// supervised frame; they must be classified as background, which is
    /// what teaches the model to retire false-positive tracks.
    pub fake_tracks: u32,
}

impl TrainConfig {
    /// Desk-scale defaults sized for the overfit scenarios.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            lr: 4e-3,
            weight_decay: 0.01,
            warmup_iters: 15,
            epochs: 10,
            grad_clip_norm: 35.0,
            seed,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda_l1: 4.0,
            match_class_weight: 1.0,
            match_l1_weight: 0.25,
            lr_min_factor: 0.05,
            track_dropout: 0.5,
            fake_tracks: 2,
        }
    }

    /// Full-scale optimizer constants, kept as a named preset.
    pub fn paper_scale(seed: u64) -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 0.01,
            warmup_iters: 500,
            epochs: 10,
            grad_clip_norm: 35.0,
            seed,
            ..TrainConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive".to_string()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::config("grad clip norm must be positive".to_string()));
        }
        Ok(())
    }
}

/// One ego frame paired with whatever the latency channel delivered, plus
/// the cooperative ground truth at the ego timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFrame {
    pub frame_index: u64,
    pub t: f64,
    pub ego: AgentFrame,
    pub other: Option<AgentFrame>,
    pub gt: Vec<GtRecord>,
}

/// Dimensions enter the loss space divided by this scale so every target
/// coordinate is O(1) and matching is not dominated by box size errors.
pub const BOX_DIM_SCALE: f64 = 5.0;

/// Regression target vector in the loss space: (u, v, z, l, w, h, sin yaw,
/// cos yaw) with u, v normalized to the ego ROI and dims scaled down.
pub fn gt_target_vec(gt: &GtRecord, ego_roi: &RoiBox, ego_pose: &Pose) -> [f64; 8] {
    let local = ego_pose.to_local(gt.position);
    let (u, v) = ego_roi.normalize_xy(local[0], local[1]);
    let yaw_local = wrap_angle(gt.yaw - ego_pose.yaw);
    [
        u,
        v,
        local[2],
        gt.dims[0] / BOX_DIM_SCALE,
        gt.dims[1] / BOX_DIM_SCALE,
        gt.dims[2] / BOX_DIM_SCALE,
        yaw_local.sin(),
        yaw_local.cos(),
    ]
}

/// Prediction in the same space, built from the raw head outputs.
pub fn pred_vec(out: &QueryOutput) -> [f64; 8] {
    let u = out.ref_point.0 + crate::tracker::REF_OFFSET_SCALE * out.box_raw[0].tanh();
    let v = out.ref_point.1 + crate::tracker::REF_OFFSET_SCALE * out.box_raw[1].tanh();
    let dims = out.record.dims;
    [
        u,
        v,
        out.box_raw[2],
        dims[0] / BOX_DIM_SCALE,
        dims[1] / BOX_DIM_SCALE,
        dims[2] / BOX_DIM_SCALE,
        out.box_raw[6],
        out.box_raw[7],
    ]
}

/// Chain rule from the loss-space prediction back to the raw box outputs.
fn dpred_to_draw(out: &QueryOutput, dpred: &[f64; 8], draw: &mut [f64]) {
    let tu = out.box_raw[0].tanh();
    let tv = out.box_raw[1].tanh();
    draw[0] += dpred[0] * crate::tracker::REF_OFFSET_SCALE * (1.0 - tu * tu);
    draw[1] += dpred[1] * crate::tracker::REF_OFFSET_SCALE * (1.0 - tv * tv);
    draw[2] += dpred[2];
    for i in 3..6 {
        draw[i] += dpred[i] * softplus_derivative(out.box_raw[i]) / BOX_DIM_SCALE;
    }
    draw[6] += dpred[6];
    draw[7] += dpred[7];
}

/// Matches decoder outputs to ground truth. Track queries are matched
/// preferentially to their bound ground-truth identity; the remaining
/// ground truth is assigned to object queries by minimum-cost matching over
/// class and box costs. Returns (query row, gt index) pairs.
pub fn match_outputs(
    outputs: &[QueryOutput],
    gt: &[GtRecord],
    bindings: &BTreeMap<u64, u64>,
    ego_roi: &RoiBox,
    ego_pose: &Pose,
    cfg: &TrainConfig,
) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    let mut gt_claimed = vec![false; gt.len()];
    for (row, out) in outputs.iter().enumerate() {
        let QuerySource::Track(tid) = out.source else { continue };
        let Some(gid) = bindings.get(&tid) else { continue };
        if let Some(gi) = gt.iter().position(|g| g.track_id == *gid) {
            if !gt_claimed[gi] {
                gt_claimed[gi] = true;
                pairs.push((row, gi));
            }
        }
    }
    let free_rows: Vec<usize> = outputs
        .iter()
        .enumerate()
        .filter(|(_, o)| matches!(o.source, QuerySource::Object(_)))
        .map(|(i, _)| i)
        .collect();
    let free_gts: Vec<usize> = (0..gt.len()).filter(|gi| !gt_claimed[*gi]).collect();
    if !free_rows.is_empty() && !free_gts.is_empty() {
        let mut costs = Vec::with_capacity(free_rows.len() * free_gts.len());
        for row in &free_rows {
            let out = &outputs[*row];
            let probs: Vec<f64> = out.class_logits.iter().map(|z| sigmoid(*z)).collect();
            let pv = pred_vec(out);
            for gi in &free_gts {
                let g = &gt[*gi];
                let tv = gt_target_vec(g, ego_roi, ego_pose);
                let class_cost = 1.0 - probs[g.class.index()];
                let l1: f64 = pv.iter().zip(&tv).map(|(a, b)| (a - b).abs()).sum();
                costs.push(cfg.match_class_weight * class_cost + cfg.match_l1_weight * l1);
            }
        }
        let sub = CostMatrix::new(free_rows.len(), free_gts.len(), costs)?;
        for (r, c) in hungarian_match(&sub)? {
            pairs.push((free_rows[r], free_gts[c]));
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Focal + L1 loss over one frame's outputs; also emits per-query gradients
/// for the decoder heads.
#[allow(clippy::type_complexity)]
pub fn frame_loss(
    outputs: &[QueryOutput],
    gt: &[GtRecord],
    pairs: &[(usize, usize)],
    ego_roi: &RoiBox,
    ego_pose: &Pose,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let norm = 1.0 / gt.len().max(1) as f64;
    let mut matched_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for (row, gi) in pairs {
        matched_gt.insert(*row, *gi);
    }
    let mut loss = 0.0;
    let mut dlogits = vec![vec![0.0; NUM_CLASSES]; outputs.len()];
    let mut dbox = vec![vec![0.0; 8]; outputs.len()];
    for (row, out) in outputs.iter().enumerate() {
        let target_class = matched_gt.get(&row).map(|gi| gt[*gi].class.index());
        for c in 0..NUM_CLASSES {
            let p = sigmoid(out.class_logits[c]);
            let y = target_class == Some(c);
            loss += norm * focal_loss(p, y, cfg.focal_alpha, cfg.focal_gamma)?;
            let dp = focal_loss_grad(p, y, cfg.focal_alpha, cfg.focal_gamma);
            dlogits[row][c] = norm * dp * p * (1.0 - p);
        }
        if let Some(gi) = matched_gt.get(&row) {
            let tv = gt_target_vec(&gt[*gi], ego_roi, ego_pose);
            let pv = pred_vec(out);
            loss += cfg.lambda_l1 * norm * l1_box_loss(&pv, &tv)?;
            let mut dpred = [0.0; 8];
            l1_box_loss_grad(&pv, &tv, cfg.lambda_l1 * norm, &mut dpred);
            dpred_to_draw(out, &dpred, &mut dbox[row]);
        }
    }
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, dlogits, dbox))
}

pub struct TrainState {
    pub tracker: Tracker,
    pub bindings: BTreeMap<u64, u64>,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState {
            tracker: Tracker::new(),
            bindings: BTreeMap::new(),
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

/// Propagates teacher-forced track state after a frame's matching: matched
/// object queries spawn tracks bound to their ground-truth identity, matched
/// track queries refresh, and tracks whose ground truth vanished retire.
fn advance_tracks(
    state: &mut TrainState,
    outputs: &[QueryOutput],
    gt: &[GtRecord],
    pairs: &[(usize, usize)],
    frame_index: u64,
) {
    let mut seen_gts: Vec<u64> = Vec::new();
    for (row, gi) in pairs {
        let out = &outputs[*row];
        let gid = gt[*gi].track_id;
        seen_gts.push(gid);
        match out.source {
            QuerySource::Object(_) => {
                let tid = state.tracker.spawn_for_training(out, frame_index);
                state.bindings.insert(tid, gid);
            }
            QuerySource::Track(tid) => {
                state.tracker.refresh_for_training(tid, out);
            }
        }
    }
    // Retire tracks whose bound object left the ground truth.
    let stale: Vec<u64> = state
        .bindings
        .iter()
        .filter(|(_, gid)| !seen_gts.contains(gid))
        .map(|(tid, _)| *tid)
        .collect();
    for tid in stale {
        state.tracker.retire(tid);
        state.bindings.remove(&tid);
    }
}

pub struct StepOutcome {
    pub loss: f64,
    pub n_matched: usize,
    pub pre_clip_norm: f64,
}

/// One optimizer step over a 5-frame window: four detached context frames
/// then a supervised final frame.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    window: &[PairedFrame],
    ego_roi: &RoiBox,
    other_roi: Option<&RoiBox>,
    order: FusionOrder,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    lr_scale: f64,
    rng: &mut crate::numerics::RngState,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if window.len() != WINDOW_LEN {
        return Err(Error::config(format!(
            "train window must be {WINDOW_LEN} contiguous frames, got {}",
            window.len()
        )));
    }
    zero_grads(model);
    let mut state = TrainState::new();
    let mut prev_bev: Option<(crate::numerics::Tensor, Pose)> = None;
    let mut final_outcome = None;
    for (wi, frame) in window.iter().enumerate() {
        let is_final = wi == WINDOW_LEN - 1;
        if is_final {
            if cfg.track_dropout > 0.0 && rng.uniform() < cfg.track_dropout {
                // All-or-nothing track dropout: either the frame is decoded
                // with the full track set (object queries must stay silent on
                // tracked objects) or with none (object queries must fire).
                // Mixed states would make birth supervision inconsistent.
                let ids: Vec<u64> = state.tracker.tracks.iter().map(|t| t.track_id).collect();
                for tid in ids {
                    state.tracker.retire(tid);
                    state.bindings.remove(&tid);
                }
            }
            // Small reference denoising on surviving tracks (binding kept):
            // teaches recovery within the rate-limited update regime.
            for t in state.tracker.tracks.iter_mut() {
                if rng.uniform() < 0.5 {
                    t.ref_point = (
                        (t.ref_point.0 + rng.uniform_in(-0.015, 0.015)).clamp(0.02, 0.98),
                        (t.ref_point.1 + rng.uniform_in(-0.015, 0.015)).clamp(0.02, 0.98),
                    );
                }
            }
            // Unbound noise tracks: supervised as background.
            let n_fake = if cfg.fake_tracks > 0 { rng.below(u64::from(cfg.fake_tracks) + 1) } else { 0 };
            let d = model.cfg.embed_dim;
            for _ in 0..n_fake {
                let clone_existing = rng.uniform() < 0.5 && !state.tracker.tracks.is_empty();
                if clone_existing {
                    let idx = rng.below(state.tracker.tracks.len() as u64) as usize;
                    let src = state.tracker.tracks[idx].clone();
                    let ref_point = (
                        (src.ref_point.0 + rng.uniform_in(-0.08, 0.08)).clamp(0.02, 0.98),
                        (src.ref_point.1 + rng.uniform_in(-0.08, 0.08)).clamp(0.02, 0.98),
                    );
                    state.tracker.spawn_raw(src.query_embed, ref_point, frame.frame_index);
                } else {
                    let std = 1.0 / (d as f64).sqrt();
                    let embed: Vec<f64> = (0..d).map(|_| rng.normal_scaled(std)).collect();
                    let ref_point = (rng.uniform_in(0.05, 0.95), rng.uniform_in(0.05, 0.95));
                    state.tracker.spawn_raw(embed, ref_point, frame.frame_index);
                }
            }
        }
        let other = match (&frame.other, other_roi) {
            (Some(of), Some(roi)) => Some((of, roi)),
            _ => None,
        };
        let fwd = model
            .forward_frame(
                &frame.ego,
                ego_roi,
                other,
                prev_bev.as_ref().map(|(t, p)| (t, p)),
                &state.tracker.tracks.clone(),
                order,
                is_final,
            )
            .map_err(|e| Error::numeric(format!("frame {} forward failed: {e}", frame.frame_index)))?;
        let pairs = match_outputs(&fwd.outputs, &frame.gt, &state.bindings, ego_roi, &frame.ego.pose, cfg)?;
        if is_final {
            // Deep supervision: the same matched pairs supervise every
            // decoder layer's heads.
            let mut loss = 0.0;
            let mut dlogits_layers = Vec::with_capacity(fwd.aux_outputs.len() + 1);
            let mut dbox_layers = Vec::with_capacity(fwd.aux_outputs.len() + 1);
            for outputs in fwd.aux_outputs.iter().chain(std::iter::once(&fwd.outputs)) {
                let (l, dl, db) =
                    frame_loss(outputs, &frame.gt, &pairs, ego_roi, &frame.ego.pose, cfg).map_err(|e| {
                        Error::numeric(format!("frame {} loss failed: {e}", frame.frame_index))
                    })?;
                loss += l;
                dlogits_layers.push(dl);
                dbox_layers.push(db);
            }
            model.backward_frame(&fwd, &dlogits_layers, &dbox_layers)?;
            let pre_clip_norm = clip_grad_norm(model, cfg.grad_clip_norm);
            opt.step(model, lr_scale)?;
            final_outcome = Some(StepOutcome {
                loss,
                n_matched: pairs.len(),
                pre_clip_norm,
            });
        } else {
            advance_tracks(&mut state, &fwd.outputs, &frame.gt, &pairs, frame.frame_index);
            prev_bev = Some((fwd.bev_out, frame.ego.pose));
        }
    }
    Ok(final_outcome.expect("window has a final frame"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use crate::sim::channel::pair_frames;
    use crate::sim::scenario::{generate_scenario, ScenarioPreset, ScenarioSpec};
    use crate::train::optim::{lr_schedule, GradCoverage};

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.query_grid_w = 8;
        cfg.query_grid_h = 8;
        cfg.embed_dim = 16;
        cfg.attn_head_dim = 8;
        cfg.pillar_mlp_width = 6;
        cfg.bev_stage_channels = vec![6, 8];
        cfg.fpn_channels = 6;
        cfg.image_stage_channels = vec![6, 8, 8];
        cfg.decoder.embed_dim = 16;
        cfg.decoder.num_object_queries = 12;
        cfg.decoder.num_layers = 1;
        cfg
    }

    fn scenario_frames() -> (Vec<PairedFrame>, RoiBox, RoiBox) {
        let spec = ScenarioSpec::new(ScenarioPreset::Intersection, 17);
        let scenario = generate_scenario(&spec).unwrap();
        let ego_roi = scenario.agents[0].roi;
        let other_roi = scenario.agents[1].roi;
        let frames = pair_frames(&scenario, 0).unwrap();
        (frames, ego_roi, other_roi)
    }

    #[test]
    fn identical_steps_produce_identical_losses() {
        let (frames, ego_roi, other_roi) = scenario_frames();
        let window = &frames[0..5];
        let cfg = TrainConfig::desk(1);
        let run = || {
            let mut model = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
            let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
            let mut rng = crate::numerics::RngState::new(3);
            train_step(&mut model, window, &ego_roi, Some(&other_roi), FusionOrder::ImageFirst, &cfg, &mut opt, 1.0, &mut rng)
                .unwrap()
                .loss
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn wrong_window_length_rejected() {
        let (frames, ego_roi, other_roi) = scenario_frames();
        let cfg = TrainConfig::desk(1);
        let mut model = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let mut rng = crate::numerics::RngState::new(3);
        let err = train_step(
            &mut model,
            &frames[0..3],
            &ego_roi,
            Some(&other_roi),
            FusionOrder::ImageFirst,
            &cfg,
            &mut opt,
            1.0,
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn loss_decreases_on_overfit_run_and_no_dead_params() {
        let (frames, ego_roi, other_roi) = scenario_frames();
        let cfg = TrainConfig::desk(1);
        let mut model = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
        let mut coverage = GradCoverage::default();
        let windows: Vec<&[PairedFrame]> = frames.windows(5).collect();
        let total_steps = 40u64;
        let mut first_loss = None;
        let mut last_losses = Vec::new();
        let mut rng = crate::numerics::RngState::new(3);
        for step in 0..total_steps {
            let window = windows[(step as usize * 3) % windows.len()];
            let scale = lr_schedule(step, cfg.warmup_iters, total_steps, cfg.lr_min_factor);
            let out = train_step(
                &mut model,
                window,
                &ego_roi,
                Some(&other_roi),
                FusionOrder::ImageFirst,
                &cfg,
                &mut opt,
                scale,
                &mut rng,
            )
            .unwrap();
            coverage.record(&mut model);
            if first_loss.is_none() {
                first_loss = Some(out.loss);
            }
            if step >= total_steps - 5 {
                last_losses.push(out.loss);
            }
        }
        let first = first_loss.unwrap();
        let tail = last_losses.iter().sum::<f64>() / last_losses.len() as f64;
        assert!(
            tail < first,
            "training should reduce the loss: first {first}, tail mean {tail}"
        );
        let dead = coverage.dead_params();
        assert!(dead.is_empty(), "dead parameters: {dead:?}");
    }

    #[test]
    fn matching_prefers_bound_track_identity() {
        let (frames, ego_roi, other_roi) = scenario_frames();
        let cfg = TrainConfig::desk(1);
        let model = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let frame = &frames[0];
        let fwd = model
            .forward_frame(
                &frame.ego,
                &ego_roi,
                frame.other.as_ref().map(|o| (o, &other_roi)),
                None,
                &[],
                FusionOrder::ImageFirst,
                false,
            )
            .unwrap();
        // First match without bindings: all pairs go to object queries.
        let pairs = match_outputs(&fwd.outputs, &frame.gt, &BTreeMap::new(), &ego_roi, &frame.ego.pose, &cfg).unwrap();
        assert_eq!(pairs.len(), frame.gt.len());
        // Simulate a track bound to gt id 2 and decode with that track.
        let mut state = TrainState::new();
        advance_tracks(&mut state, &fwd.outputs, &frame.gt, &pairs, 0);
        assert_eq!(state.tracker.tracks.len(), frame.gt.len());
        let fwd2 = model
            .forward_frame(
                &frame.ego,
                &ego_roi,
                frame.other.as_ref().map(|o| (o, &other_roi)),
                None,
                &state.tracker.tracks.clone(),
                FusionOrder::ImageFirst,
                false,
            )
            .unwrap();
        let pairs2 = match_outputs(&fwd2.outputs, &frame.gt, &state.bindings, &ego_roi, &frame.ego.pose, &cfg).unwrap();
        // Every pair now lands on a track query, preserving identity.
        for (row, gi) in &pairs2 {
            let out = &fwd2.outputs[*row];
            if let QuerySource::Track(tid) = out.source {
                assert_eq!(state.bindings[&tid], frame.gt[*gi].track_id);
            } else {
                panic!("expected all ground truth claimed by track queries");
            }
        }
    }

    #[test]
    fn gt_target_roundtrip_space() {
        let roi = RoiBox::new(-32.0, 32.0, -32.0, 32.0, -0.5, 4.0).unwrap();
        let gt = GtRecord {
            track_id: 1,
            class: crate::tracker::ObjectClass::Car,
            position: [16.0, -8.0, 0.8],
            dims: [4.4, 1.9, 1.6],
            yaw: 0.5,
        };
        let tv = gt_target_vec(&gt, &roi, &Pose::identity());
        assert!((tv[0] - 0.75).abs() < 1e-12);
        assert!((tv[1] - 0.375).abs() < 1e-12);
        assert!((tv[2] - 0.8).abs() < 1e-12);
        assert!((tv[6] - 0.5f64.sin()).abs() < 1e-12);
    }
}
