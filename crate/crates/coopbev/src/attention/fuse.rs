//! Two cascaded V2X cross-attention layers, one per modality, applied in a
//! configurable order. The default refines image features first, then point
//! cloud features under the updated queries.

use serde::{Deserialize, Serialize};

use crate::attention::v2x::{RefProjector, V2xCrossAttnLayer, V2xLayerCache, V2xStats};
use crate::attention::BEVQuerySet;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::nn::{join_name, Params};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    ImageFirst,
    PointCloudFirst,
}

impl FusionOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionOrder::ImageFirst => "image_first",
            FusionOrder::PointCloudFirst => "pointcloud_first",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image_first" => Ok(FusionOrder::ImageFirst),
            "pointcloud_first" => Ok(FusionOrder::PointCloudFirst),
            other => Err(Error::usage(format!(
                "unknown fusion order '{other}' (expected image_first or pointcloud_first)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One agent's encoded features with their projectors, per modality.
pub struct ViewFeatures<'a> {
    pub image: Option<(&'a [FeatureMap], &'a dyn RefProjector)>,
    pub lidar: Option<(&'a [FeatureMap], &'a dyn RefProjector)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Image,
    Lidar,
}

/// Fusion weights: either modality layer may be absent for single-modality
/// variants, but not both.
#[derive(Debug, Clone)]
pub struct DualLayerFusion {
    pub image_layer: Option<V2xCrossAttnLayer>,
    pub lidar_layer: Option<V2xCrossAttnLayer>,
}

#[derive(Debug)]
pub struct FuseCache {
    stages: Vec<(Modality, V2xLayerCache, bool)>, // bool: other view participated
}

impl DualLayerFusion {
    pub fn new(image_layer: Option<V2xCrossAttnLayer>, lidar_layer: Option<V2xCrossAttnLayer>) -> Result<Self> {
        if image_layer.is_none() && lidar_layer.is_none() {
            return Err(Error::config(
                "dual-layer fusion requires at least one modality layer".to_string(),
            ));
        }
        Ok(DualLayerFusion {
            image_layer,
            lidar_layer,
        })
    }

    fn stage_order(&self, order: FusionOrder) -> Vec<Modality> {
        let seq = match order {
            FusionOrder::ImageFirst => [Modality::Image, Modality::Lidar],
            FusionOrder::PointCloudFirst => [Modality::Lidar, Modality::Image],
        };
        seq.into_iter()
            .filter(|m| match m {
                Modality::Image => self.image_layer.is_some(),
                Modality::Lidar => self.lidar_layer.is_some(),
            })
            .collect()
    }

    /// Runs the configured layers in `order` over the ego view and, when
    /// present, the cooperative view. Returns the fused query set.
    pub fn forward(
        &self,
        q: &BEVQuerySet,
        order: FusionOrder,
        ego: &ViewFeatures<'_>,
        other: Option<&ViewFeatures<'_>>,
    ) -> Result<(BEVQuerySet, FuseCache, V2xStats)> {
        let mut current = q.clone();
        let mut stages = Vec::new();
        let mut stats = V2xStats::default();
        for modality in self.stage_order(order) {
            let (layer, ego_io, other_io) = match modality {
                Modality::Image => (
                    self.image_layer.as_ref().expect("stage order checked"),
                    ego.image,
                    other.and_then(|o| o.image),
                ),
                Modality::Lidar => (
                    self.lidar_layer.as_ref().expect("stage order checked"),
                    ego.lidar,
                    other.and_then(|o| o.lidar),
                ),
            };
            let Some((ego_feats, ego_proj)) = ego_io else {
                return Err(Error::config(format!(
                    "fusion layer for {modality:?} present but ego features missing"
                )));
            };
            let (next, cache, s) = layer.forward(&current, ego_feats, ego_proj, other_io)?;
            stats.queries_without_valid_refs += s.queries_without_valid_refs;
            stages.push((modality, cache, other_io.is_some()));
            current = next;
        }
        Ok((current, FuseCache { stages }, stats))
    }

    /// Backward through both stages in reverse. Returns dL/d input queries
    /// and accumulates feature gradients into the per-modality buffers
    /// (ego image, other image, ego lidar, other lidar — any may be None).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        cache: &FuseCache,
        ego: &ViewFeatures<'_>,
        other: Option<&ViewFeatures<'_>>,
        dout: &[f64],
        mut dego_img: Option<&mut [Vec<f64>]>,
        mut dother_img: Option<&mut [Vec<f64>]>,
        mut dego_lidar: Option<&mut [Vec<f64>]>,
        mut dother_lidar: Option<&mut [Vec<f64>]>,
    ) -> Vec<f64> {
        let mut dq = dout.to_vec();
        for (modality, stage_cache, had_other) in cache.stages.iter().rev() {
            let (layer, ego_io, other_io) = match modality {
                Modality::Image => (
                    self.image_layer.as_mut().expect("stage order checked"),
                    ego.image,
                    other.and_then(|o| o.image),
                ),
                Modality::Lidar => (
                    self.lidar_layer.as_mut().expect("stage order checked"),
                    ego.lidar,
                    other.and_then(|o| o.lidar),
                ),
            };
            let (ego_feats, _) = ego_io.expect("forward validated ego features");
            let other_feats = if *had_other { other_io.map(|(f, _)| f) } else { None };
            let (dego_buf, dother_buf) = match modality {
                Modality::Image => (dego_img.as_deref_mut(), dother_img.as_deref_mut()),
                Modality::Lidar => (dego_lidar.as_deref_mut(), dother_lidar.as_deref_mut()),
            };
            let dego_buf = dego_buf.expect("gradient buffer for an active ego modality");
            dq = layer.backward(stage_cache, ego_feats, other_feats, &dq, dego_buf, dother_buf);
        }
        dq
    }
}

impl Params for DualLayerFusion {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(l) = self.image_layer.as_mut() {
            l.visit_params(&join_name(prefix, "image"), f);
        }
        if let Some(l) = self.lidar_layer.as_mut() {
            l.visit_params(&join_name(prefix, "lidar"), f);
        }
    }
}
