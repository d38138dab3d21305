//! The end-to-end perception model for one variant: per-view multimodal
//! encoders, dual-layer cross-view fusion, temporal self-attention over the
//! BEV grid, and the query-based detection/tracking decoder. Forward runs
//! per frame; backward (training) flows from the decoder heads to every
//! active weight tensor including the encoders.

use serde::{Deserialize, Serialize};

use crate::attention::fuse::{DualLayerFusion, FuseCache, FusionOrder, ViewFeatures};
use crate::attention::temporal::{align_prev_queries, cell_shift, TemporalCache, TemporalSelfAttn};
use crate::attention::v2x::{BevProjector, CameraProjector, V2xCrossAttnLayer, V2xStats};
use crate::attention::BEVQuerySet;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geom::{Pose, RoiBox};
use crate::imagebev::{normalize_image, ImageEncoder, ImageEncoderCache};
use crate::nn::{join_name, Params};
use crate::numerics::{RngState, Tensor};
use crate::pointpillars::{voxelize, BevBackbone, BevBackboneCache, PillarCache, PillarEncoder};
use crate::sim::AgentFrame;
use crate::tracker::{DecoderConfig, Decoder, DecodeCache, DetectionRecord, QueryOutput, TrackState};

/// Model variants from the baseline matrix: single/multi view crossed with
/// single/multi modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    CetV,
    LetV,
    XetV,
    CetV2x,
    LetV2x,
    XetV2x,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CetV,
        Variant::LetV,
        Variant::XetV,
        Variant::CetV2x,
        Variant::LetV2x,
        Variant::XetV2x,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::CetV => "CET-V",
            Variant::LetV => "LET-V",
            Variant::XetV => "XET-V",
            Variant::CetV2x => "CET-V2X",
            Variant::LetV2x => "LET-V2X",
            Variant::XetV2x => "XET-V2X",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CET-V" => Ok(Variant::CetV),
            "LET-V" => Ok(Variant::LetV),
            "XET-V" => Ok(Variant::XetV),
            "CET-V2X" => Ok(Variant::CetV2x),
            "LET-V2X" => Ok(Variant::LetV2x),
            "XET-V2X" => Ok(Variant::XetV2x),
            other => Err(Error::usage(format!(
                "unknown variant '{other}' (expected one of CET-V, LET-V, XET-V, CET-V2X, LET-V2X, XET-V2X)"
            ))),
        }
    }

    pub fn uses_image(&self) -> bool {
        matches!(self, Variant::CetV | Variant::XetV | Variant::CetV2x | Variant::XetV2x)
    }

    pub fn uses_lidar(&self) -> bool {
        matches!(self, Variant::LetV | Variant::XetV | Variant::LetV2x | Variant::XetV2x)
    }

    pub fn uses_other(&self) -> bool {
        matches!(self, Variant::CetV2x | Variant::LetV2x | Variant::XetV2x)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub query_grid_w: usize,
    pub query_grid_h: usize,
    pub embed_dim: usize,
    pub attn_heads: usize,
    pub attn_points: usize,
    pub attn_head_dim: usize,
    /// Vertical anchor offsets added to the BEV-plane anchor per query.
    pub anchor_z: Vec<f64>,
    pub pillar_voxel: (f64, f64, f64),
    pub pillar_mlp_width: usize,
    pub pillar_point_cap: usize,
    pub bev_stage_blocks: Vec<usize>,
    pub bev_stage_channels: Vec<usize>,
    pub fpn_channels: usize,
    pub image_stage_channels: Vec<usize>,
    pub image_norm_mean: [f64; 3],
    pub image_norm_std: [f64; 3],
    pub temporal_heads: usize,
    pub decoder: DecoderConfig,
    pub decoder_points: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 20x20 query grid with 32 channels, two heads,
    /// two points, toy encoders.
    pub fn desk() -> Self {
        ModelConfig {
            query_grid_w: 20,
            query_grid_h: 20,
            embed_dim: 32,
            attn_heads: 2,
            attn_points: 2,
            attn_head_dim: 16,
            anchor_z: vec![0.5, 1.5, 2.8],
            pillar_voxel: (1.0, 1.0, 4.5),
            pillar_mlp_width: 8,
            pillar_point_cap: 32,
            bev_stage_blocks: vec![1, 1],
            bev_stage_channels: vec![8, 16],
            fpn_channels: 8,
            image_stage_channels: vec![8, 12, 16],
            image_norm_mean: [0.5; 3],
            image_norm_std: [0.5; 3],
            temporal_heads: 2,
            decoder: DecoderConfig {
                num_layers: 2,
                num_object_queries: 30,
                embed_dim: 32,
                score_thresh_new: 0.4,
                score_thresh_keep: 0.35,
                max_age: 5,
            },
            decoder_points: 4,
        }
    }

    /// Full-scale constants kept as a named preset; far too heavy for desk
    /// runs and never exercised by the test suite.
    pub fn paper_scale() -> Self {
        ModelConfig {
            query_grid_w: 200,
            query_grid_h: 200,
            embed_dim: 256,
            attn_heads: 8,
            attn_points: 4,
            attn_head_dim: 32,
            anchor_z: vec![-3.0, 0.0, 1.5],
            pillar_voxel: (0.2, 0.2, 8.0),
            pillar_mlp_width: 64,
            pillar_point_cap: 32,
            bev_stage_blocks: vec![3, 5, 5],
            bev_stage_channels: vec![64, 128, 256],
            fpn_channels: 256,
            image_stage_channels: vec![64, 128, 256, 512],
            image_norm_mean: [0.485, 0.456, 0.406],
            image_norm_std: [0.229, 0.224, 0.225],
            temporal_heads: 8,
            decoder: DecoderConfig {
                num_layers: 6,
                num_object_queries: 900,
                embed_dim: 256,
                score_thresh_new: 0.4,
                score_thresh_keep: 0.35,
                max_age: 5,
            },
            decoder_points: 4,
        }
    }

    pub fn lidar_levels(&self) -> usize {
        self.bev_stage_blocks.len()
    }

    pub fn image_levels(&self) -> usize {
        self.image_stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.decoder.embed_dim {
            return Err(Error::config("decoder embed dim must match model embed dim".to_string()));
        }
        if self.embed_dim % self.temporal_heads != 0 || self.embed_dim % self.attn_heads != 0 {
            return Err(Error::config("embed dim must divide into heads".to_string()));
        }
        self.decoder.validate()
    }
}

/// One view's encoded pyramids for a frame.
#[derive(Debug, Clone, Default)]
pub struct ViewPyramids {
    pub image: Option<Vec<FeatureMap>>,
    pub lidar: Option<Vec<FeatureMap>>,
}

#[derive(Debug, Clone)]
struct ViewProjectors {
    image: Option<CameraProjector>,
    lidar: Option<BevProjector>,
}

struct ViewEncodeCaches {
    image: Option<ImageEncoderCache>,
    pillar: Option<PillarCache>,
    backbone: Option<BevBackboneCache>,
}

/// Everything backward needs from one frame's forward pass.
pub struct FrameGradBundle {
    ego_pyr: ViewPyramids,
    other_pyr: Option<ViewPyramids>,
    ego_proj: ViewProjectors,
    other_proj: Option<ViewProjectors>,
    ego_caches: ViewEncodeCaches,
    other_caches: Option<ViewEncodeCaches>,
    fuse_cache: FuseCache,
    temporal_cache: TemporalCache,
    decode_cache: DecodeCache,
}

pub struct FrameForward {
    /// BEV state after fusion and temporal attention, carried to the next
    /// frame (detached).
    pub bev_out: Tensor,
    pub ego_pose: Pose,
    pub records: Vec<DetectionRecord>,
    /// Final decoder layer outputs (drives tracking and records).
    pub outputs: Vec<QueryOutput>,
    /// Earlier decoder layers' outputs, for deep supervision.
    pub aux_outputs: Vec<Vec<QueryOutput>>,
    pub stats: V2xStats,
    pub grad: Option<FrameGradBundle>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub bev_query_init: Tensor,
    pub ego_img_enc: Option<ImageEncoder>,
    pub other_img_enc: Option<ImageEncoder>,
    pub ego_pillar: Option<PillarEncoder>,
    pub ego_backbone: Option<BevBackbone>,
    pub other_pillar: Option<PillarEncoder>,
    pub other_backbone: Option<BevBackbone>,
    pub fusion: DualLayerFusion,
    pub temporal: TemporalSelfAttn,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed).fork("model-init");
        let d = cfg.embed_dim;
        let nq = cfg.query_grid_w * cfg.query_grid_h;
        let bev_query_init = Tensor::new(
            vec![nq, d],
            (0..nq * d).map(|_| rng.normal_scaled(0.5 / (d as f64).sqrt())).collect(),
        )?;
        let mk_img = |rng: &mut RngState, cfg: &ModelConfig| -> Result<ImageEncoder> {
            ImageEncoder::new(rng, &cfg.image_stage_channels, cfg.fpn_channels)
        };
        let mk_pc = |rng: &mut RngState, cfg: &ModelConfig| -> Result<(PillarEncoder, BevBackbone)> {
            let pe = PillarEncoder::new(rng, cfg.pillar_mlp_width);
            let bb = BevBackbone::new(
                rng,
                cfg.pillar_mlp_width,
                &cfg.bev_stage_blocks,
                &cfg.bev_stage_channels,
                cfg.fpn_channels,
                cfg.pillar_voxel.0,
            )?;
            Ok((pe, bb))
        };
        let ego_img_enc = cfg_if(variant.uses_image(), || mk_img(&mut rng, cfg))?;
        let other_img_enc = cfg_if(variant.uses_image() && variant.uses_other(), || mk_img(&mut rng, cfg))?;
        let (ego_pillar, ego_backbone) = match cfg_if(variant.uses_lidar(), || mk_pc(&mut rng, cfg))? {
            Some((p, b)) => (Some(p), Some(b)),
            None => (None, None),
        };
        let (other_pillar, other_backbone) =
            match cfg_if(variant.uses_lidar() && variant.uses_other(), || mk_pc(&mut rng, cfg))? {
                Some((p, b)) => (Some(p), Some(b)),
                None => (None, None),
            };
        let image_layer = variant.uses_image().then(|| {
            V2xCrossAttnLayer::new(
                &mut rng,
                d,
                cfg.fpn_channels,
                cfg.attn_heads,
                cfg.image_levels(),
                cfg.attn_points,
                cfg.attn_head_dim,
            )
        });
        let lidar_layer = variant.uses_lidar().then(|| {
            V2xCrossAttnLayer::new(
                &mut rng,
                d,
                cfg.fpn_channels,
                cfg.attn_heads,
                cfg.lidar_levels(),
                cfg.attn_points,
                cfg.attn_head_dim,
            )
        });
        let fusion = DualLayerFusion::new(image_layer, lidar_layer)?;
        let temporal = TemporalSelfAttn::new(&mut rng, d, cfg.temporal_heads);
        let decoder = Decoder::new(&mut rng, cfg.decoder.clone(), cfg.attn_heads, cfg.decoder_points)?;
        Ok(Model {
            cfg: cfg.clone(),
            variant,
            bev_query_init,
            ego_img_enc,
            other_img_enc,
            ego_pillar,
            ego_backbone,
            other_pillar,
            other_backbone,
            fusion,
            temporal,
            decoder,
        })
    }

    fn encode_view(
        &self,
        frame: &AgentFrame,
        roi: &RoiBox,
        img_enc: Option<&ImageEncoder>,
        pillar: Option<&PillarEncoder>,
        backbone: Option<&BevBackbone>,
    ) -> Result<(ViewPyramids, ViewProjectors, ViewEncodeCaches)> {
        let mut pyr = ViewPyramids::default();
        let mut projs = ViewProjectors {
            image: None,
            lidar: None,
        };
        let mut caches = ViewEncodeCaches {
            image: None,
            pillar: None,
            backbone: None,
        };
        if let Some(enc) = img_enc {
            let norm = normalize_image(&frame.image, self.cfg.image_norm_mean, self.cfg.image_norm_std)?;
            let (levels, cache) = enc.forward(&norm)?;
            projs.image = Some(CameraProjector {
                agent_pose: frame.pose,
                intrinsics: frame.image.intrinsics,
                img_height: frame.image.height,
                img_width: frame.image.width,
                levels: levels.len(),
            });
            pyr.image = Some(levels);
            caches.image = Some(cache);
        }
        if let (Some(pe), Some(bb)) = (pillar, backbone) {
            let grid = voxelize(&frame.cloud, roi, self.cfg.pillar_voxel, self.cfg.pillar_point_cap)?;
            let (pseudo, pcache) = pe.forward(&grid)?;
            let (levels, bcache) = bb.forward(&pseudo)?;
            projs.lidar = Some(BevProjector {
                agent_pose: frame.pose,
                roi: *roi,
                levels: levels.len(),
            });
            pyr.lidar = Some(levels);
            caches.pillar = Some(pcache);
            caches.backbone = Some(bcache);
        }
        Ok((pyr, projs, caches))
    }

    /// Full forward for one frame. `prev_bev` is the previous frame's
    /// (bev_out, ego pose); history is data, not a gradient path.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frame(
        &self,
        ego: &AgentFrame,
        ego_roi: &RoiBox,
        other: Option<(&AgentFrame, &RoiBox)>,
        prev_bev: Option<(&Tensor, &Pose)>,
        tracks: &[TrackState],
        order: FusionOrder,
        with_grad: bool,
    ) -> Result<FrameForward> {
        let cfg = &self.cfg;
        let (ego_pyr, ego_proj, ego_caches) = self.encode_view(
            ego,
            ego_roi,
            self.ego_img_enc.as_ref(),
            self.ego_pillar.as_ref(),
            self.ego_backbone.as_ref(),
        )?;
        let other_encoded = match (other, self.variant.uses_other()) {
            (Some((frame, roi)), true) => Some(self.encode_view(
                frame,
                roi,
                self.other_img_enc.as_ref(),
                self.other_pillar.as_ref(),
                self.other_backbone.as_ref(),
            )?),
            _ => None,
        };
        let (other_pyr, other_proj, other_caches) = match other_encoded {
            Some((p, pr, c)) => (Some(p), Some(pr), Some(c)),
            None => (None, None, None),
        };

        let query_set = BEVQuerySet::from_grid(
            self.bev_query_init.clone(),
            cfg.query_grid_h,
            cfg.query_grid_w,
            ego_roi,
            &ego.pose,
            &cfg.anchor_z,
        )?;

        let ego_views = view_features(&ego_pyr, &ego_proj);
        let other_views = match (&other_pyr, &other_proj) {
            (Some(p), Some(pr)) => Some(view_features(p, pr)),
            _ => None,
        };
        let (fused, fuse_cache, stats) =
            self.fusion
                .forward(&query_set, order, &ego_views, other_views.as_ref())?;

        let cell_dx = ego_roi.x_extent() / cfg.query_grid_w as f64;
        let cell_dy = ego_roi.y_extent() / cfg.query_grid_h as f64;
        let aligned_prev = match prev_bev {
            Some((prev, prev_pose)) => Some(align_prev_queries(
                prev,
                cfg.query_grid_h,
                cfg.query_grid_w,
                cell_shift(prev_pose, &ego.pose, cell_dx, cell_dy),
            )?),
            None => None,
        };
        let (bev_out, temporal_cache) = self.temporal.forward(&fused.queries, aligned_prev.as_ref())?;

        let bev_for_decode = fused.with_queries(bev_out.clone())?;
        let (records, mut layer_outputs, decode_cache) =
            self.decoder.decode(&bev_for_decode, tracks, ego_roi, &ego.pose)?;
        let outputs = layer_outputs.pop().expect("at least one decoder layer");
        let aux_outputs = layer_outputs;

        let grad = with_grad.then(|| FrameGradBundle {
            ego_pyr,
            other_pyr,
            ego_proj,
            other_proj,
            ego_caches,
            other_caches,
            fuse_cache,
            temporal_cache,
            decode_cache,
        });
        Ok(FrameForward {
            bev_out,
            ego_pose: ego.pose,
            records,
            outputs,
            aux_outputs,
            stats,
            grad,
        })
    }

    /// Backward from per-layer decoder-head gradients through temporal
    /// attention, fusion, and the encoders. Accumulates into every active
    /// parameter.
    pub fn backward_frame(
        &mut self,
        forward: &FrameForward,
        dlogits: &[Vec<Vec<f64>>],
        dbox: &[Vec<Vec<f64>>],
    ) -> Result<()> {
        let bundle = forward
            .grad
            .as_ref()
            .ok_or_else(|| Error::config("forward was run without gradients".to_string()))?;
        let dbev = self.decoder.backward(&bundle.decode_cache, dlogits, dbox);
        let dfused = self.temporal.backward(&bundle.temporal_cache, &dbev);

        let mut dego_img = bundle
            .ego_pyr
            .image
            .as_ref()
            .map(|p| p.iter().map(|l| vec![0.0; l.numel()]).collect::<Vec<_>>());
        let mut dego_lidar = bundle
            .ego_pyr
            .lidar
            .as_ref()
            .map(|p| p.iter().map(|l| vec![0.0; l.numel()]).collect::<Vec<_>>());
        let mut dother_img = bundle
            .other_pyr
            .as_ref()
            .and_then(|v| v.image.as_ref())
            .map(|p| p.iter().map(|l| vec![0.0; l.numel()]).collect::<Vec<_>>());
        let mut dother_lidar = bundle
            .other_pyr
            .as_ref()
            .and_then(|v| v.lidar.as_ref())
            .map(|p| p.iter().map(|l| vec![0.0; l.numel()]).collect::<Vec<_>>());

        let ego_views = view_features(&bundle.ego_pyr, &bundle.ego_proj);
        let other_views = match (&bundle.other_pyr, &bundle.other_proj) {
            (Some(p), Some(pr)) => Some(view_features(p, pr)),
            _ => None,
        };
        let dq0 = self.fusion.backward(
            &bundle.fuse_cache,
            &ego_views,
            other_views.as_ref(),
            &dfused,
            dego_img.as_deref_mut(),
            dother_img.as_deref_mut(),
            dego_lidar.as_deref_mut(),
            dother_lidar.as_deref_mut(),
        );
        self.bev_query_init.add_grad(&dq0);
        drop(ego_views);
        drop(other_views);

        // Ego encoders.
        if let (Some(denc), Some(enc), Some(cache)) =
            (dego_img.as_ref(), self.ego_img_enc.as_mut(), bundle.ego_caches.image.as_ref())
        {
            enc.backward(cache, denc);
        }
        if let (Some(dlev), Some(bb), Some(bcache), Some(pe), Some(pcache)) = (
            dego_lidar.as_ref(),
            self.ego_backbone.as_mut(),
            bundle.ego_caches.backbone.as_ref(),
            self.ego_pillar.as_mut(),
            bundle.ego_caches.pillar.as_ref(),
        ) {
            let dpseudo = bb.backward(bcache, dlev);
            pe.backward(pcache, &dpseudo);
        }
        // Cooperative-view encoders.
        if let Some(ocaches) = bundle.other_caches.as_ref() {
            if let (Some(denc), Some(enc), Some(cache)) =
                (dother_img.as_ref(), self.other_img_enc.as_mut(), ocaches.image.as_ref())
            {
                enc.backward(cache, denc);
            }
            if let (Some(dlev), Some(bb), Some(bcache), Some(pe), Some(pcache)) = (
                dother_lidar.as_ref(),
                self.other_backbone.as_mut(),
                ocaches.backbone.as_ref(),
                self.other_pillar.as_mut(),
                ocaches.pillar.as_ref(),
            ) {
                let dpseudo = bb.backward(bcache, dlev);
                pe.backward(pcache, &dpseudo);
            }
        }
        Ok(())
    }
}

fn view_features<'a>(pyr: &'a ViewPyramids, projs: &'a ViewProjectors) -> ViewFeatures<'a> {
    ViewFeatures {
        image: match (&pyr.image, &projs.image) {
            (Some(p), Some(pr)) => Some((p.as_slice(), pr as &dyn crate::attention::v2x::RefProjector)),
            _ => None,
        },
        lidar: match (&pyr.lidar, &projs.lidar) {
            (Some(p), Some(pr)) => Some((p.as_slice(), pr as &dyn crate::attention::v2x::RefProjector)),
            _ => None,
        },
    }
}

fn cfg_if<T>(cond: bool, f: impl FnOnce() -> Result<T>) -> Result<Option<T>> {
    if cond {
        f().map(Some)
    } else {
        Ok(None)
    }
}

impl Params for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "bev_query_init"), &mut self.bev_query_init);
        if let Some(e) = self.ego_img_enc.as_mut() {
            e.visit_params(&join_name(prefix, "ego_img"), f);
        }
        if let Some(e) = self.other_img_enc.as_mut() {
            e.visit_params(&join_name(prefix, "other_img"), f);
        }
        if let Some(e) = self.ego_pillar.as_mut() {
            e.visit_params(&join_name(prefix, "ego_pillar"), f);
        }
        if let Some(e) = self.ego_backbone.as_mut() {
            e.visit_params(&join_name(prefix, "ego_bev"), f);
        }
        if let Some(e) = self.other_pillar.as_mut() {
            e.visit_params(&join_name(prefix, "other_pillar"), f);
        }
        if let Some(e) = self.other_backbone.as_mut() {
            e.visit_params(&join_name(prefix, "other_bev"), f);
        }
        self.fusion.visit_params(&join_name(prefix, "fusion"), f);
        self.temporal.visit_params(&join_name(prefix, "temporal"), f);
        self.decoder.visit_params(&join_name(prefix, "decoder"), f);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, named tensor table.
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"CBCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every parameter in visitor order: name, shape, f64 LE payload.
pub fn save_checkpoint(model: &mut Model) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |name, t| {
        entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
    });
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, data) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Loads a checkpoint into an already-constructed model; names and shapes
/// must match exactly.
pub fn load_checkpoint(model: &mut Model, bytes: &[u8]) -> Result<()> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::parse("checkpoint truncated".to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse("bad checkpoint magic".to_string()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut table: std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)> = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::parse("bad checkpoint name".to_string()))?;
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        table.insert(name, (shape, data));
    }
    let mut missing: Vec<String> = Vec::new();
    let mut mismatch: Vec<String> = Vec::new();
    model.visit_params("", &mut |name, t| match table.remove(name) {
        Some((shape, data)) => {
            if shape != t.shape() {
                mismatch.push(name.to_string());
            } else if t.set_data(data).is_err() {
                mismatch.push(name.to_string());
            }
        }
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !mismatch.is_empty() || !table.is_empty() {
        return Err(Error::parse(format!(
            "checkpoint mismatch: missing {missing:?}, shape-mismatched {mismatch:?}, extra {:?}",
            table.keys().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::{generate_scenario, ScenarioPreset, ScenarioSpec};

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.query_grid_w = 6;
        cfg.query_grid_h = 6;
        cfg.embed_dim = 16;
        cfg.attn_head_dim = 8;
        cfg.pillar_mlp_width = 6;
        cfg.bev_stage_channels = vec![6, 8];
        cfg.fpn_channels = 6;
        cfg.image_stage_channels = vec![6, 8, 8];
        cfg.decoder.embed_dim = 16;
        cfg.decoder.num_object_queries = 8;
        cfg.decoder.num_layers = 1;
        cfg
    }

    #[test]
    fn variant_matrix_matches_table() {
        use Variant::*;
        let rows: Vec<(Variant, bool, bool, bool)> = vec![
            (CetV, false, false, true),
            (LetV, false, true, false),
            (XetV, false, true, true),
            (LetV2x, true, true, false),
            (CetV2x, true, false, true),
            (XetV2x, true, true, true),
        ];
        for (v, other, lidar, image) in rows {
            assert_eq!(v.uses_other(), other, "{v}");
            assert_eq!(v.uses_lidar(), lidar, "{v}");
            assert_eq!(v.uses_image(), image, "{v}");
        }
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
    }

    #[test]
    fn forward_runs_for_every_variant() {
        let spec = ScenarioSpec {
            preset: ScenarioPreset::Intersection,
            rate_hz: 5.0,
            duration_s: 0.4,
            seed: 11,
        };
        let scenario = generate_scenario(&spec).unwrap();
        let frame = &scenario.frames[0];
        let ego_roi = scenario.agents[0].roi;
        let other_roi = scenario.agents[1].roi;
        for variant in Variant::ALL {
            let model = Model::new(&tiny_cfg(), variant, 3).unwrap();
            let other = variant
                .uses_other()
                .then_some((&frame.agent_frames[1], &other_roi));
            let out = model
                .forward_frame(
                    &frame.agent_frames[0],
                    &ego_roi,
                    other,
                    None,
                    &[],
                    FusionOrder::ImageFirst,
                    false,
                )
                .unwrap();
            assert_eq!(out.outputs.len(), 8, "{variant}");
            assert!(out.bev_out.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ScenarioSpec {
            preset: ScenarioPreset::Intersection,
            rate_hz: 5.0,
            duration_s: 0.4,
            seed: 11,
        };
        let scenario = generate_scenario(&spec).unwrap();
        let frame = &scenario.frames[0];
        let ego_roi = scenario.agents[0].roi;
        let other_roi = scenario.agents[1].roi;
        let model = Model::new(&tiny_cfg(), Variant::XetV2x, 3).unwrap();
        let run = || {
            model
                .forward_frame(
                    &frame.agent_frames[0],
                    &ego_roi,
                    Some((&frame.agent_frames[1], &other_roi)),
                    None,
                    &[],
                    FusionOrder::ImageFirst,
                    false,
                )
                .unwrap()
                .bev_out
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let mut a = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let bytes = save_checkpoint(&mut a);
        let mut b = Model::new(&tiny_cfg(), Variant::XetV2x, 99).unwrap();
        load_checkpoint(&mut b, &bytes).unwrap();
        let again = save_checkpoint(&mut b);
        assert_eq!(bytes, again);
    }

    #[test]
    fn checkpoint_rejects_wrong_variant() {
        let mut a = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let bytes = save_checkpoint(&mut a);
        let mut b = Model::new(&tiny_cfg(), Variant::CetV, 5).unwrap();
        assert!(load_checkpoint(&mut b, &bytes).is_err());
    }

    #[test]
    fn param_names_unique_and_ordered() {
        let mut m = Model::new(&tiny_cfg(), Variant::XetV2x, 5).unwrap();
        let mut names = Vec::new();
        m.visit_params("", &mut |n, _| names.push(n.to_string()));
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter names");
        assert!(names.len() > 40);
    }
}
