//! Query-based joint detection and tracking. A decoder turns fused BEV
//! features into class scores and box regressions via object queries;
//! track queries persist across frames carrying identity, with birth and
//! death driven by score thresholds and an age limit.

use serde::{Deserialize, Serialize};

use crate::attention::deform::{msdeform_attn, msdeform_attn_backward, DeformAttnWeights, MsdaCache, ProjectedRef};
use crate::attention::BEVQuerySet;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geom::{wrap_angle, Pose, RoiBox};
use crate::nn::{
    join_name, relu_backward, relu_forward, LayerNorm, Linear, LnCache, MhaCache,
    MultiHeadAttention, Params,
};
use crate::numerics::{sigmoid, RngState, Tensor};

/// Supported object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Motorcycle,
    Bicycle,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Car,
        ObjectClass::Pedestrian,
        ObjectClass::Motorcycle,
        ObjectClass::Bicycle,
    ];

    pub fn index(&self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Motorcycle => 2,
            ObjectClass::Bicycle => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain(format!("class index {i} out of range")))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Motorcycle => "motorcycle",
            ObjectClass::Bicycle => "bicycle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(ObjectClass::Car),
            "pedestrian" => Ok(ObjectClass::Pedestrian),
            "motorcycle" => Ok(ObjectClass::Motorcycle),
            "bicycle" => Ok(ObjectClass::Bicycle),
            other => Err(Error::parse(format!("unknown object class '{other}'"))),
        }
    }
}

pub const NUM_CLASSES: usize = 4;

/// One output tuple: category, 3D pose, dimensions, score, and persistent
/// identity once the lifecycle has assigned one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: ObjectClass,
    /// World-frame center (x, y, z) in meters.
    pub position: [f64; 3],
    /// (length, width, height) in meters, strictly positive.
    pub dims: [f64; 3],
    /// Wrapped to (−π, π].
    pub yaw: f64,
    pub score: f64,
    pub track_id: Option<u64>,
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| *d <= 0.0) {
            return Err(Error::domain("detection dims must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::domain(format!("score {} outside [0,1]", self.score)));
        }
        let w = wrap_angle(self.yaw);
        if (w - self.yaw).abs() > 1e-9 {
            return Err(Error::domain(format!("yaw {} not wrapped to (-pi, pi]", self.yaw)));
        }
        Ok(())
    }
}

/// Persistent query state of one tracked object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub track_id: u64,
    pub query_embed: Vec<f64>,
    /// Normalized BEV reference carried between frames.
    pub ref_point: (f64, f64),
    pub last_score: f64,
    /// Frames since last confirmation.
    pub age: u32,
    pub born_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_object_queries: usize,
    pub embed_dim: usize,
    pub score_thresh_new: f64,
    pub score_thresh_keep: f64,
    pub max_age: u32,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thresh_new)
            || !(0.0..=1.0).contains(&self.score_thresh_keep)
            || self.score_thresh_keep > self.score_thresh_new
        {
            return Err(Error::config(
                "thresholds must satisfy 0 <= keep <= new <= 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Which query produced an output row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Object(usize),
    Track(u64),
}

/// Raw decoder output for one query: everything training and lifecycle need.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub source: QuerySource,
    pub embed: Vec<f64>,
    pub class_logits: Vec<f64>,
    /// (du, dv, z, l_raw, w_raw, h_raw, sin_raw, cos_raw)
    pub box_raw: [f64; 8],
    pub ref_point: (f64, f64),
    /// Decoded record regardless of thresholds.
    pub record: DetectionRecord,
}

/// Positions are regressed as a bounded offset around the query's reference
/// point: u = ref_u + REF_OFFSET_SCALE * tanh(du). The offset can never
/// saturate the prediction into a corner of the grid, and an untrained head
/// (du = 0) predicts exactly the reference.
pub const REF_OFFSET_SCALE: f64 = 0.15;

/// Maximum per-frame movement of a carried track reference, in normalized
/// grid units. Bounds drift to physically plausible inter-frame motion.
pub const TRACK_REF_RATE: f64 = 0.025;

/// Carried embeddings blend the fresh decoder output with the previous
/// state; the damping keeps long chains close to the distribution the short
/// training windows cover.
pub const TRACK_EMBED_BLEND: f64 = 0.3;

pub fn blend_track_embed(old: &[f64], new: &[f64]) -> Vec<f64> {
    old.iter()
        .zip(new)
        .map(|(o, n)| (1.0 - TRACK_EMBED_BLEND) * o + TRACK_EMBED_BLEND * n)
        .collect()
}

/// Rate-limited reference update for a persistent track.
pub fn advance_track_ref(old: (f64, f64), predicted: (f64, f64)) -> (f64, f64) {
    let du = (predicted.0 - old.0).clamp(-TRACK_REF_RATE, TRACK_REF_RATE);
    let dv = (predicted.1 - old.1).clamp(-TRACK_REF_RATE, TRACK_REF_RATE);
    ((old.0 + du).clamp(0.01, 0.99), (old.1 + dv).clamp(0.01, 0.99))
}

impl QueryOutput {
    pub fn score(&self) -> f64 {
        self.record.score
    }

    /// Predicted normalized BEV position (after the reference update).
    pub fn predicted_ref(&self) -> (f64, f64) {
        let u = self.ref_point.0 + REF_OFFSET_SCALE * self.box_raw[0].tanh();
        let v = self.ref_point.1 + REF_OFFSET_SCALE * self.box_raw[1].tanh();
        (u.clamp(0.01, 0.99), v.clamp(0.01, 0.99))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn softplus_derivative(x: f64) -> f64 {
    sigmoid(x)
}

const MIN_DIM: f64 = 0.05;

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross: DeformAttnWeights,
    pub ln3: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// Query-based decoder with learnable object queries anchored to a fixed
/// grid of reference points; track queries join with carried embeddings and
/// references. Self-attention runs jointly over object and track queries,
/// then deformable cross-attention reads the fused BEV map.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub object_queries: Tensor,
    /// Fixed (non-learnable) object reference points, normalized BEV coords.
    pub object_refs: Vec<(f64, f64)>,
    pub layers: Vec<DecoderLayer>,
    pub ln_final: LayerNorm,
    pub class_head: Linear,
    pub box_head: Linear,
}

#[derive(Debug)]
pub struct DecoderLayerCache {
    pub x_in: Vec<f64>,
    pub ln1: Vec<LnCache>,
    pub h_self: Vec<f64>,
    pub mha: MhaCache,
    pub x_mid: Vec<f64>,
    pub ln2: Vec<LnCache>,
    pub cross: Vec<MsdaCache>,
    pub x_cross: Vec<f64>,
    pub ln3: Vec<LnCache>,
    pub ffn_h: Vec<Vec<f64>>,
    pub ffn_mask: Vec<Vec<bool>>,
}

#[derive(Debug)]
pub struct HeadCache {
    pub ln: Vec<LnCache>,
    /// Normalized rows the heads consumed, (n_rows, d).
    pub h: Vec<f64>,
}

#[derive(Debug)]
pub struct DecodeCache {
    pub n_rows: usize,
    pub layers: Vec<DecoderLayerCache>,
    /// One per decoder layer; shared final norm + heads applied to each
    /// layer's output for deep supervision. Last entry is the final layer.
    pub heads: Vec<HeadCache>,
    pub bev_map: FeatureMap,
    pub refs: Vec<(f64, f64)>,
}

impl Decoder {
    pub fn new(rng: &mut RngState, cfg: DecoderConfig, cross_heads: usize, cross_points: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let object_queries = Tensor::new(
            vec![cfg.num_object_queries, d],
            (0..cfg.num_object_queries * d)
                .map(|_| rng.normal_scaled(1.0 / (d as f64).sqrt()))
                .collect(),
        )?;
        // Spread object anchors on a near-square grid over the BEV extent.
        let cols = (cfg.num_object_queries as f64).sqrt().ceil() as usize;
        let rows = cfg.num_object_queries.div_ceil(cols);
        let mut object_refs = Vec::with_capacity(cfg.num_object_queries);
        for i in 0..cfg.num_object_queries {
            let r = i / cols;
            let c = i % cols;
            object_refs.push((
                (c as f64 + 0.5) / cols as f64,
                (r as f64 + 0.5) / rows as f64,
            ));
        }
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            layers.push(DecoderLayer {
                ln1: LayerNorm::new(d),
                self_attn: MultiHeadAttention::new(rng, d, cross_heads),
                ln2: LayerNorm::new(d),
                cross: DeformAttnWeights::new(rng, d, d, cross_heads, 1, cross_points, d / cross_heads),
                ln3: LayerNorm::new(d),
                ffn1: Linear::new(rng, d, 2 * d, true),
                ffn2: Linear::new(rng, 2 * d, d, true),
            });
        }
        // Focal-style prior: start every class score near 0.1 so untrained
        // states stay far below the emission thresholds.
        let mut class_head = Linear::new(rng, d, NUM_CLASSES, true);
        let prior = 0.1f64;
        let bias = (prior / (1.0 - prior)).ln();
        class_head
            .b
            .as_mut()
            .expect("bias enabled")
            .set_data(vec![bias; NUM_CLASSES])
            .expect("finite bias");
        Ok(Decoder {
            cfg,
            object_queries,
            object_refs,
            layers,
            ln_final: LayerNorm::new(d),
            class_head,
            box_head: Linear::new(rng, d, 8, true),
        })
    }

    /// Reshapes the fused query grid (n, d) into a (d, H, W) feature map the
    /// cross-attention can sample.
    fn bev_as_map(bev: &BEVQuerySet) -> Result<FeatureMap> {
        let d = bev.embed_dim;
        let (h, w) = (bev.grid_h, bev.grid_w);
        let mut data = vec![0.0; d * h * w];
        for i in 0..h * w {
            for c in 0..d {
                data[c * h * w + i] = bev.queries.data()[i * d + c];
            }
        }
        FeatureMap::new(0, 1.0, Tensor::new(vec![d, h, w], data)?)
    }

    /// Decodes one frame. Records are emitted for track queries scoring at
    /// least `score_thresh_keep` (inheriting their identity) and object
    /// queries scoring at least `score_thresh_new` (provisional, id unset).
    /// Raw outputs cover every query at every decoder layer (deep
    /// supervision); the last layer's outputs drive records and tracking.
    pub fn decode(
        &self,
        bev: &BEVQuerySet,
        tracks: &[TrackState],
        roi: &RoiBox,
        ego_pose: &Pose,
    ) -> Result<(Vec<DetectionRecord>, Vec<Vec<QueryOutput>>, DecodeCache)> {
        let d = self.cfg.embed_dim;
        if bev.embed_dim != d {
            return Err(Error::config("BEV embed dim does not match decoder".to_string()));
        }
        let n_obj = self.cfg.num_object_queries;
        let n_rows = n_obj + tracks.len();
        let mut x = vec![0.0; n_rows * d];
        let mut refs = Vec::with_capacity(n_rows);
        x[..n_obj * d].copy_from_slice(self.object_queries.data());
        refs.extend_from_slice(&self.object_refs);
        for (t, track) in tracks.iter().enumerate() {
            if track.query_embed.len() != d {
                return Err(Error::config("track embed dim mismatch".to_string()));
            }
            x[(n_obj + t) * d..(n_obj + t + 1) * d].copy_from_slice(&track.query_embed);
            refs.push(track.ref_point);
        }
        let bev_map = Self::bev_as_map(bev)?;

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut head_caches = Vec::with_capacity(self.layers.len());
        let mut layer_outputs: Vec<Vec<QueryOutput>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            // Self-attention over all queries (pre-norm, residual).
            let mut h_self = vec![0.0; n_rows * d];
            let mut ln1 = Vec::with_capacity(n_rows);
            for i in 0..n_rows {
                let (h, c) = layer.ln1.forward(&x[i * d..(i + 1) * d]);
                h_self[i * d..(i + 1) * d].copy_from_slice(&h);
                ln1.push(c);
            }
            let (attn_out, mha_cache) = layer.self_attn.forward(&h_self, n_rows);
            for (xi, ai) in x.iter_mut().zip(&attn_out) {
                *xi += ai;
            }
            let x_mid = x.clone();
            // Deformable cross-attention into the BEV map.
            let mut ln2 = Vec::with_capacity(n_rows);
            let mut cross_caches = Vec::with_capacity(n_rows);
            for i in 0..n_rows {
                let (h, c) = layer.ln2.forward(&x[i * d..(i + 1) * d]);
                ln2.push(c);
                let reference = ProjectedRef {
                    levels: vec![refs[i]],
                    valid: true,
                };
                let (out, cache) =
                    msdeform_attn(&h, &reference, std::slice::from_ref(&bev_map), &layer.cross)?;
                for (xi, oi) in x[i * d..(i + 1) * d].iter_mut().zip(&out) {
                    *xi += oi;
                }
                cross_caches.push(cache);
            }
            let x_cross = x.clone();
            // Feed-forward.
            let mut ln3 = Vec::with_capacity(n_rows);
            let mut ffn_h = Vec::with_capacity(n_rows);
            let mut ffn_mask = Vec::with_capacity(n_rows);
            for i in 0..n_rows {
                let (h, c) = layer.ln3.forward(&x[i * d..(i + 1) * d]);
                ln3.push(c);
                let mut hidden = layer.ffn1.forward(&h);
                let mask = relu_forward(&mut hidden);
                let out = layer.ffn2.forward(&hidden);
                for (xi, oi) in x[i * d..(i + 1) * d].iter_mut().zip(&out) {
                    *xi += oi;
                }
                ffn_h.push(hidden);
                ffn_mask.push(mask);
            }
            layer_caches.push(DecoderLayerCache {
                x_in,
                ln1,
                h_self,
                mha: mha_cache,
                x_mid,
                ln2,
                cross: cross_caches,
                x_cross,
                ln3,
                ffn_h,
                ffn_mask,
            });
            // Shared final norm + heads on this layer's output.
            let mut ln = Vec::with_capacity(n_rows);
            let mut h_rows = vec![0.0; n_rows * d];
            let mut outputs = Vec::with_capacity(n_rows);
            for i in 0..n_rows {
                let (h, c) = self.ln_final.forward(&x[i * d..(i + 1) * d]);
                h_rows[i * d..(i + 1) * d].copy_from_slice(&h);
                ln.push(c);
                let class_logits = self.class_head.forward(&h);
                let box_out = self.box_head.forward(&h);
                let box_raw: [f64; 8] = box_out.as_slice().try_into().expect("box head emits 8 values");
                let source = if i < n_obj {
                    QuerySource::Object(i)
                } else {
                    QuerySource::Track(tracks[i - n_obj].track_id)
                };
                outputs.push(build_output(source, h, class_logits, box_raw, refs[i], roi, ego_pose));
            }
            head_caches.push(HeadCache { ln, h: h_rows });
            layer_outputs.push(outputs);
        }
        let mut records = Vec::new();
        for output in layer_outputs.last().expect("at least one layer") {
            match output.source {
                QuerySource::Track(id) => {
                    if output.score() >= self.cfg.score_thresh_keep {
                        let mut rec = output.record.clone();
                        rec.track_id = Some(id);
                        records.push(rec);
                    }
                }
                QuerySource::Object(_) => {
                    if output.score() >= self.cfg.score_thresh_new {
                        records.push(output.record.clone());
                    }
                }
            }
        }
        Ok((
            records,
            layer_outputs,
            DecodeCache {
                n_rows,
                layers: layer_caches,
                heads: head_caches,
                bev_map,
                refs,
            },
        ))
    }

    /// Backward from per-query, per-layer head gradients to the fused BEV
    /// queries. `dlogits[l][row]` / `dbox[l][row]` follow decode's layer
    /// order; returns dL/d(bev queries) as (n, d).
    pub fn backward(
        &mut self,
        cache: &DecodeCache,
        dlogits: &[Vec<Vec<f64>>],
        dbox: &[Vec<Vec<f64>>],
    ) -> Vec<f64> {
        let d = self.cfg.embed_dim;
        let n_rows = cache.n_rows;
        let mut dx = vec![0.0; n_rows * d];
        let mut dbev_map = vec![0.0; cache.bev_map.numel()];
        for (l, (layer, lc)) in self.layers.iter_mut().zip(cache.layers.iter()).enumerate().rev() {
            // Head gradient injected at this layer's output.
            let hc = &cache.heads[l];
            for i in 0..n_rows {
                let h = &hc.h[i * d..(i + 1) * d];
                let mut dh = vec![0.0; d];
                self.class_head.backward(h, &dlogits[l][i], &mut dh);
                self.box_head.backward(h, &dbox[l][i], &mut dh);
                self.ln_final.backward(&hc.ln[i], &dh, &mut dx[i * d..(i + 1) * d]);
            }
            // FFN backward.
            for i in 0..n_rows {
                let dxi = dx[i * d..(i + 1) * d].to_vec();
                let mut dhidden = vec![0.0; layer.ffn1.out_dim];
                layer.ffn2.backward(&lc.ffn_h[i], &dxi, &mut dhidden);
                relu_backward(&lc.ffn_mask[i], &mut dhidden);
                let mut dh = vec![0.0; d];
                let (ln_h, _) = layer.ln3.forward(&lc.x_cross[i * d..(i + 1) * d]);
                layer.ffn1.backward(&ln_h, &dhidden, &mut dh);
                layer.ln3.backward(&lc.ln3[i], &dh, &mut dx[i * d..(i + 1) * d]);
            }
            // Cross-attention backward.
            let mut dfeats = vec![std::mem::take(&mut dbev_map)];
            for i in 0..n_rows {
                let dxi = dx[i * d..(i + 1) * d].to_vec();
                let mut dh = vec![0.0; d];
                msdeform_attn_backward(
                    &mut layer.cross,
                    &lc.cross[i],
                    std::slice::from_ref(&cache.bev_map),
                    &dxi,
                    &mut dh,
                    &mut dfeats,
                );
                layer.ln2.backward(&lc.ln2[i], &dh, &mut dx[i * d..(i + 1) * d]);
            }
            dbev_map = dfeats.pop().expect("one level");
            // Self-attention backward.
            let dxi = dx.clone();
            let mut dh_all = vec![0.0; n_rows * d];
            layer.self_attn.backward(&lc.h_self, &lc.mha, &dxi, &mut dh_all);
            for i in 0..n_rows {
                layer.ln1.backward(&lc.ln1[i], &dh_all[i * d..(i + 1) * d], &mut dx[i * d..(i + 1) * d]);
            }
            let _ = l;
        }
        // dx now holds gradients w.r.t. the initial rows: object query
        // embeddings pick up theirs, track embeddings are detached history.
        {
            let n_obj = self.cfg.num_object_queries;
            let g = self.object_queries.grad_mut();
            for (gi, di) in g.iter_mut().zip(&dx[..n_obj * d]) {
                *gi += di;
            }
        }
        // Fold the BEV map gradient back to (n, d) row-major query layout.
        let (h, w) = (cache.bev_map.height, cache.bev_map.width);
        let mut dbev = vec![0.0; h * w * d];
        for c in 0..d {
            for i in 0..h * w {
                dbev[i * d + c] = dbev_map[c * h * w + i];
            }
        }
        dbev
    }
}

fn build_output(
    source: QuerySource,
    embed: Vec<f64>,
    class_logits: Vec<f64>,
    box_raw: [f64; 8],
    ref_point: (f64, f64),
    roi: &RoiBox,
    ego_pose: &Pose,
) -> QueryOutput {
    let probs: Vec<f64> = class_logits.iter().map(|z| sigmoid(*z)).collect();
    let (best_idx, best_p) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .expect("at least one class");
    let u = ref_point.0 + REF_OFFSET_SCALE * box_raw[0].tanh();
    let v = ref_point.1 + REF_OFFSET_SCALE * box_raw[1].tanh();
    let local = [
        roi.x_min + u * roi.x_extent(),
        roi.y_min + v * roi.y_extent(),
        box_raw[2],
    ];
    let position = ego_pose.to_world(local);
    let dims = [
        softplus(box_raw[3]) + MIN_DIM,
        softplus(box_raw[4]) + MIN_DIM,
        softplus(box_raw[5]) + MIN_DIM,
    ];
    let yaw = wrap_angle(box_raw[6].atan2(box_raw[7]));
    let record = DetectionRecord {
        class: ObjectClass::from_index(best_idx).expect("index in range"),
        position,
        dims,
        yaw,
        score: *best_p,
        track_id: None,
    };
    QueryOutput {
        source,
        embed,
        class_logits,
        box_raw,
        ref_point,
        record,
    }
}

impl Params for Decoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "object_queries"), &mut self.object_queries);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = join_name(prefix, &format!("layer{i}"));
            layer.ln1.visit_params(&join_name(&p, "ln1"), f);
            layer.self_attn.visit_params(&join_name(&p, "self_attn"), f);
            layer.ln2.visit_params(&join_name(&p, "ln2"), f);
            layer.cross.visit_params(&join_name(&p, "cross"), f);
            layer.ln3.visit_params(&join_name(&p, "ln3"), f);
            layer.ffn1.visit_params(&join_name(&p, "ffn1"), f);
            layer.ffn2.visit_params(&join_name(&p, "ffn2"), f);
        }
        self.ln_final.visit_params(&join_name(prefix, "ln_final"), f);
        self.class_head.visit_params(&join_name(prefix, "class_head"), f);
        self.box_head.visit_params(&join_name(prefix, "box_head"), f);
    }
}

// ---------------------------------------------------------------------------
// Lifecycle
// ---------------------------------------------------------------------------

/// Owns the live track set and the monotone id counter for one sequence.
#[derive(Debug, Clone, Default)]
pub struct Tracker {
    pub tracks: Vec<TrackState>,
    next_id: u64,
}

impl Tracker {
    pub fn new() -> Self {
        Tracker {
            tracks: Vec::new(),
            next_id: 1,
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Applies birth/death rules after a decode and assigns fresh ids to
    /// newborn detections (in `records`, matched by position identity with
    /// the outputs). Confirmed tracks reset their age; unconfirmed ones age
    /// and retire past `max_age`. Ids are never reused within a sequence.
    pub fn lifecycle_update(
        &mut self,
        outputs: &[QueryOutput],
        records: &mut [DetectionRecord],
        cfg: &DecoderConfig,
        frame_index: u64,
    ) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tracks {
            if !seen.insert(t.track_id) {
                return Err(Error::integrity(format!("duplicate track id {}", t.track_id)));
            }
        }
        // Update existing tracks from their query outputs.
        let mut kept: Vec<TrackState> = Vec::with_capacity(self.tracks.len());
        for track in &self.tracks {
            let Some(out) = outputs.iter().find(|o| o.source == QuerySource::Track(track.track_id)) else {
                return Err(Error::integrity(format!(
                    "track {} missing from decoder outputs",
                    track.track_id
                )));
            };
            let mut t = track.clone();
            t.query_embed = blend_track_embed(&t.query_embed, &out.embed);
            t.ref_point = advance_track_ref(t.ref_point, out.predicted_ref());
            t.last_score = out.score();
            if out.score() >= cfg.score_thresh_keep {
                t.age = 0;
            } else {
                t.age += 1;
            }
            if t.age <= cfg.max_age {
                kept.push(t);
            }
        }
        // Births: object queries above the spawn threshold, in query order.
        for out in outputs {
            let QuerySource::Object(_) = out.source else { continue };
            if out.score() < cfg.score_thresh_new {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            kept.push(TrackState {
                track_id: id,
                query_embed: out.embed.clone(),
                ref_point: out.predicted_ref(),
                last_score: out.score(),
                age: 0,
                born_at: frame_index,
            });
            // Stamp the id onto the matching provisional record.
            if let Some(rec) = records
                .iter_mut()
                .find(|r| r.track_id.is_none() && r.position == out.record.position && r.class == out.record.class)
            {
                rec.track_id = Some(id);
            }
        }
        self.tracks = kept;
        Ok(())
    }

    /// Training-time spawn: a matched object query becomes a track bound to
    /// a ground-truth identity regardless of score (teacher forcing).
    pub fn spawn_for_training(&mut self, out: &QueryOutput, frame_index: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(TrackState {
            track_id: id,
            query_embed: out.embed.clone(),
            ref_point: out.predicted_ref(),
            last_score: out.score(),
            age: 0,
            born_at: frame_index,
        });
        id
    }

    /// Inserts a track with the given state and a fresh id; used by training
    /// to inject unbound (negative) track queries.
    pub fn spawn_raw(&mut self, query_embed: Vec<f64>, ref_point: (f64, f64), frame_index: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.tracks.push(TrackState {
            track_id: id,
            query_embed,
            ref_point,
            last_score: 0.0,
            age: 0,
            born_at: frame_index,
        });
        id
    }

    /// Training-time refresh of an existing track from this frame's output.
    pub fn refresh_for_training(&mut self, track_id: u64, out: &QueryOutput) {
        if let Some(t) = self.tracks.iter_mut().find(|t| t.track_id == track_id) {
            t.query_embed = blend_track_embed(&t.query_embed.clone(), &out.embed);
            t.ref_point = advance_track_ref(t.ref_point, out.predicted_ref());
            t.last_score = out.score();
            t.age = 0;
        }
    }

    pub fn retire(&mut self, track_id: u64) {
        self.tracks.retain(|t| t.track_id != track_id);
    }
}

// ---------------------------------------------------------------------------
// Frame output assembly / results file format
// ---------------------------------------------------------------------------

/// One frame of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub frame_index: u64,
    /// Ego timestamp in seconds.
    pub t_ego: f64,
    pub records: Vec<DetectionRecord>,
}

/// Serializes per-frame records with the frame timestamp. Every frame is
/// emitted, including empty ones, so frame continuity survives parsing.
pub fn assemble_output(records: Vec<DetectionRecord>, frame_index: u64, t_ego: f64) -> FrameOutput {
    FrameOutput {
        frame_index,
        t_ego,
        records,
    }
}

/// Text layout, one frame block per frame:
///   frame <index> <t_ego> <record_count>
///   <frame> <class> <x> <y> <z> <l> <w> <h> <yaw> <score> <track_id|->
pub fn write_results(frames: &[FrameOutput]) -> String {
    let mut out = String::new();
    for f in frames {
        out.push_str(&format!("frame {} {} {}\n", f.frame_index, f.t_ego, f.records.len()));
        for r in &f.records {
            let tid = r.track_id.map_or("-".to_string(), |t| t.to_string());
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {} {}\n",
                f.frame_index,
                r.class.name(),
                r.position[0],
                r.position[1],
                r.position[2],
                r.dims[0],
                r.dims[1],
                r.dims[2],
                r.yaw,
                r.score,
                tid
            ));
        }
    }
    out
}

pub fn parse_results(text: &str) -> Result<Vec<FrameOutput>> {
    let mut frames: Vec<FrameOutput> = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.first() != Some(&"frame") || parts.len() != 4 {
            return Err(Error::parse(format!("expected frame header, got '{line}'")));
        }
        let frame_index: u64 = parts[1].parse().map_err(|_| Error::parse("bad frame index".to_string()))?;
        let t_ego: f64 = parts[2].parse().map_err(|_| Error::parse("bad frame time".to_string()))?;
        let count: usize = parts[3].parse().map_err(|_| Error::parse("bad record count".to_string()))?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let Some(rline) = lines.next() else {
                return Err(Error::parse("truncated results file".to_string()));
            };
            let f: Vec<&str> = rline.split_whitespace().collect();
            if f.len() != 11 {
                return Err(Error::parse(format!("record line needs 11 fields, got {}", f.len())));
            }
            let rec_frame: u64 = f[0].parse().map_err(|_| Error::parse("bad record frame".to_string()))?;
            if rec_frame != frame_index {
                return Err(Error::parse("record frame does not match header".to_string()));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::parse(format!("bad number '{s}'")))
            };
            let track_id = if f[10] == "-" {
                None
            } else {
                Some(f[10].parse::<u64>().map_err(|_| Error::parse("bad track id".to_string()))?)
            };
            records.push(DetectionRecord {
                class: ObjectClass::parse(f[1])?,
                position: [num(f[2])?, num(f[3])?, num(f[4])?],
                dims: [num(f[5])?, num(f[6])?, num(f[7])?],
                yaw: num(f[8])?,
                score: num(f[9])?,
                track_id,
            });
        }
        frames.push(FrameOutput {
            frame_index,
            t_ego,
            records,
        });
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            num_object_queries: 6,
            embed_dim: 8,
            score_thresh_new: 0.4,
            score_thresh_keep: 0.35,
            max_age: 5,
        }
    }

    fn bev(seed: u64) -> BEVQuerySet {
        let roi = RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap();
        let mut rng = RngState::new(seed);
        let q = Tensor::new(vec![16, 8], (0..16 * 8).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
        BEVQuerySet::from_grid(q, 4, 4, &roi, &Pose::identity(), &[0.5]).unwrap()
    }

    fn roi() -> RoiBox {
        RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap()
    }

    #[test]
    fn threshold_ordering_enforced() {
        let mut c = cfg();
        c.score_thresh_keep = 0.9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn yaw_decoding_follows_atan2() {
        assert_eq!(wrap_angle(0.0f64.atan2(1.0)), 0.0);
        assert!((wrap_angle(1.0f64.atan2(0.0)) - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn fresh_decoder_with_no_tracks_emits_nothing_above_half() {
        // Initial class logits are near zero => scores near 0.5; with a
        // higher threshold nothing is emitted.
        let mut rng = RngState::new(3);
        let mut c = cfg();
        c.score_thresh_new = 0.95;
        c.score_thresh_keep = 0.9;
        let dec = Decoder::new(&mut rng, c, 2, 2).unwrap();
        let (records, layer_outputs, _) = dec.decode(&bev(5), &[], &roi(), &Pose::identity()).unwrap();
        assert!(records.is_empty());
        let outputs = layer_outputs.last().unwrap();
        assert_eq!(outputs.len(), 6);
        for o in outputs {
            o.record.validate().unwrap();
        }
    }

    #[test]
    fn track_query_inherits_identity() {
        let mut rng = RngState::new(7);
        let mut c = cfg();
        // Thresholds at zero: everything is emitted.
        c.score_thresh_new = 0.0;
        c.score_thresh_keep = 0.0;
        let dec = Decoder::new(&mut rng, c, 2, 2).unwrap();
        let track = TrackState {
            track_id: 42,
            query_embed: vec![0.1; 8],
            ref_point: (0.5, 0.5),
            last_score: 0.9,
            age: 0,
            born_at: 0,
        };
        let (records, _, _) = dec.decode(&bev(5), &[track], &roi(), &Pose::identity()).unwrap();
        assert!(records.iter().any(|r| r.track_id == Some(42)));
    }

    #[test]
    fn decode_deterministic_and_single_frame_track_free() {
        let mut rng = RngState::new(11);
        let dec = Decoder::new(&mut rng, cfg(), 2, 2).unwrap();
        let b = bev(9);
        let (r1, o1, _) = dec.decode(&b, &[], &roi(), &Pose::identity()).unwrap();
        let (r2, o2, _) = dec.decode(&b, &[], &roi(), &Pose::identity()).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(o1.len(), o2.len());
        for (a, b) in o1.last().unwrap().iter().zip(o2.last().unwrap()) {
            assert_eq!(a.class_logits, b.class_logits);
            assert_eq!(a.box_raw, b.box_raw);
        }
    }

    fn output_with_score(idx: usize, score: f64) -> QueryOutput {
        let z = (score / (1.0 - score)).ln();
        QueryOutput {
            source: QuerySource::Object(idx),
            embed: vec![0.0; 4],
            class_logits: vec![z, -5.0, -5.0, -5.0],
            box_raw: [0.0; 8],
            ref_point: (0.5, 0.5),
            record: DetectionRecord {
                class: ObjectClass::Car,
                position: [idx as f64, 0.0, 0.0],
                dims: [4.0, 2.0, 1.6],
                yaw: 0.0,
                score,
                track_id: None,
            },
        }
    }

    fn track_output(id: u64, score: f64) -> QueryOutput {
        let mut o = output_with_score(0, score);
        o.source = QuerySource::Track(id);
        o.record.position = [100.0 + id as f64, 0.0, 0.0];
        o
    }

    #[test]
    fn births_get_monotone_ids() {
        let mut tracker = Tracker::new();
        let c = cfg();
        let outs = vec![output_with_score(0, 0.9), output_with_score(1, 0.8)];
        let mut recs: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        tracker.lifecycle_update(&outs, &mut recs, &c, 0).unwrap();
        assert_eq!(tracker.tracks.len(), 2);
        assert_eq!(tracker.tracks[0].track_id, 1);
        assert_eq!(tracker.tracks[1].track_id, 2);
        assert_eq!(recs[0].track_id, Some(1));
        assert_eq!(recs[1].track_id, Some(2));
    }

    #[test]
    fn ids_never_reused_after_retirement() {
        let mut tracker = Tracker::new();
        let c = cfg();
        let outs = vec![output_with_score(0, 0.9)];
        let mut recs: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        tracker.lifecycle_update(&outs, &mut recs, &c, 0).unwrap();
        assert_eq!(tracker.tracks[0].track_id, 1);
        // Track goes silent past max_age.
        for k in 1..=(c.max_age as u64 + 1) {
            let outs = vec![track_output(1, 0.0)];
            let mut recs = Vec::new();
            tracker.lifecycle_update(&outs, &mut recs, &c, k).unwrap();
        }
        assert!(tracker.tracks.is_empty());
        // New birth must take id 2, not 1.
        let outs = vec![output_with_score(0, 0.9)];
        let mut recs: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        tracker.lifecycle_update(&outs, &mut recs, &c, 10).unwrap();
        assert_eq!(tracker.tracks[0].track_id, 2);
    }

    #[test]
    fn unseen_track_retires_after_max_age() {
        let mut tracker = Tracker::new();
        let mut c = cfg();
        c.max_age = 2;
        let outs = vec![output_with_score(0, 0.9)];
        let mut recs: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        tracker.lifecycle_update(&outs, &mut recs, &c, 0).unwrap();
        for k in 1..=2u64 {
            let outs = vec![track_output(1, 0.1)];
            tracker.lifecycle_update(&outs, &mut [], &c, k).unwrap();
            assert_eq!(tracker.tracks.len(), 1, "still alive at age {k}");
        }
        let outs = vec![track_output(1, 0.1)];
        tracker.lifecycle_update(&outs, &mut [], &c, 3).unwrap();
        assert!(tracker.tracks.is_empty());
    }

    #[test]
    fn identity_survives_score_dip() {
        let mut tracker = Tracker::new();
        let mut c = cfg();
        c.max_age = 2;
        // Frame 0: birth at 0.9.
        let outs = vec![output_with_score(0, 0.9)];
        let mut recs: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        tracker.lifecycle_update(&outs, &mut recs, &c, 0).unwrap();
        // Frame 1: dip to 0.2 (below keep): ages but survives.
        let outs = vec![track_output(1, 0.2)];
        tracker.lifecycle_update(&outs, &mut [], &c, 1).unwrap();
        assert_eq!(tracker.tracks.len(), 1);
        assert_eq!(tracker.tracks[0].age, 1);
        // Frame 2: back to 0.9 => confirmed, same id.
        let outs = vec![track_output(1, 0.9)];
        let mut recs = vec![{
            let mut r = outs[0].record.clone();
            r.track_id = Some(1);
            r
        }];
        tracker.lifecycle_update(&outs, &mut recs, &c, 2).unwrap();
        assert_eq!(tracker.tracks.len(), 1);
        assert_eq!(tracker.tracks[0].track_id, 1);
        assert_eq!(tracker.tracks[0].age, 0);
    }

    #[test]
    fn duplicate_track_ids_rejected() {
        let mut tracker = Tracker::new();
        tracker.tracks = vec![
            TrackState {
                track_id: 7,
                query_embed: vec![0.0; 4],
                ref_point: (0.5, 0.5),
                last_score: 0.5,
                age: 0,
                born_at: 0,
            };
            2
        ];
        let err = tracker.lifecycle_update(&[], &mut [], &cfg(), 1);
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn identity_assignment_ignores_record_order() {
        let c = cfg();
        let outs = vec![output_with_score(0, 0.9), output_with_score(1, 0.8)];
        let mut recs_fwd: Vec<DetectionRecord> = outs.iter().map(|o| o.record.clone()).collect();
        let mut recs_rev: Vec<DetectionRecord> = recs_fwd.iter().cloned().rev().collect();
        let mut t1 = Tracker::new();
        t1.lifecycle_update(&outs, &mut recs_fwd, &c, 0).unwrap();
        let mut t2 = Tracker::new();
        t2.lifecycle_update(&outs, &mut recs_rev, &c, 0).unwrap();
        // Same physical detection gets the same id either way.
        let find = |recs: &[DetectionRecord], x: f64| recs.iter().find(|r| r.position[0] == x).unwrap().track_id;
        assert_eq!(find(&recs_fwd, 0.0), find(&recs_rev, 0.0));
        assert_eq!(find(&recs_fwd, 1.0), find(&recs_rev, 1.0));
    }

    #[test]
    fn results_roundtrip_including_empty_frames() {
        let frames = vec![
            assemble_output(vec![], 0, 0.0),
            assemble_output(
                vec![DetectionRecord {
                    class: ObjectClass::Pedestrian,
                    position: [1.25, -3.5, 0.1],
                    dims: [0.6, 0.6, 1.7],
                    yaw: 0.7853981633974483,
                    score: 0.875,
                    track_id: Some(3),
                }],
                1,
                0.2,
            ),
            assemble_output(
                vec![DetectionRecord {
                    class: ObjectClass::Car,
                    position: [0.1, 0.2, 0.3],
                    dims: [4.0, 2.0, 1.5],
                    yaw: -1.5,
                    score: 0.5,
                    track_id: None,
                }],
                2,
                0.4,
            ),
        ];
        let text = write_results(&frames);
        let parsed = parse_results(&text).unwrap();
        assert_eq!(parsed, frames);
        // D_k equals the number of emitted tuples.
        assert_eq!(parsed[1].records.len(), 1);
        assert_eq!(parsed[0].records.len(), 0);
        // Byte-exact re-serialization.
        assert_eq!(write_results(&parsed), text);
    }

    #[test]
    fn decoder_backward_matches_fd_on_bev() {
        let mut rng = RngState::new(31);
        let mut c = cfg();
        c.num_layers = 1;
        c.num_object_queries = 3;
        let dec = Decoder::new(&mut rng, c, 2, 2).unwrap();
        let b = bev(33);
        let track = TrackState {
            track_id: 1,
            query_embed: vec![0.2; 8],
            ref_point: (0.4, 0.6),
            last_score: 0.5,
            age: 0,
            born_at: 0,
        };
        let (_, outs, cache) = dec.decode(&b, &[track.clone()], &roi(), &Pose::identity()).unwrap();
        let n_layers = outs.len();
        let n = outs[0].len();
        let dlogits: Vec<Vec<Vec<f64>>> = (0..n_layers)
            .map(|l| {
                (0..n)
                    .map(|i| (0..NUM_CLASSES).map(|c| ((l + i + c) % 3) as f64 * 0.4 - 0.3).collect())
                    .collect()
            })
            .collect();
        let dbox: Vec<Vec<Vec<f64>>> = (0..n_layers)
            .map(|l| {
                (0..n)
                    .map(|i| (0..8).map(|c| ((l + i * 2 + c) % 5) as f64 * 0.2 - 0.4).collect())
                    .collect()
            })
            .collect();
        let mut probe = dec.clone();
        let dbev = probe.backward(&cache, &dlogits, &dbox);
        let qt = b.queries.clone();
        let err = crate::numerics::grad_check(
            |t| {
                let b2 = b.with_queries(t.clone()).unwrap();
                let (_, outs, _) = dec.decode(&b2, &[track.clone()], &roi(), &Pose::identity()).unwrap();
                let mut acc = 0.0;
                for (l, layer) in outs.iter().enumerate() {
                    for (i, o) in layer.iter().enumerate() {
                        acc += o.class_logits.iter().zip(&dlogits[l][i]).map(|(a, b)| a * b).sum::<f64>();
                        acc += o.box_raw.iter().zip(&dbox[l][i]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Ok(acc)
            },
            &qt,
            &dbev,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
