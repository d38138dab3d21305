//! Cross-view, cross-modality BEV fusion: deformable attention over feature
//! pyramids, masked ego/cooperative aggregation per reference point, two
//! cascaded modality layers with a configurable order, and temporal
//! self-attention over the BEV query grid.

pub mod deform;
pub mod fuse;
pub mod temporal;
pub mod v2x;

pub use deform::{msdeform_attn, msdeform_attn_backward, DeformAttnWeights, MsdaCache, ProjectedRef};
pub use fuse::{DualLayerFusion, FuseCache, FusionOrder, ViewFeatures};
pub use temporal::{align_prev_queries, cell_shift, TemporalCache, TemporalSelfAttn};
pub use v2x::{BevProjector, CameraProjector, RefProjector, V2xCrossAttnLayer, V2xLayerCache, V2xStats};

use crate::error::{Error, Result};
use crate::geom::{Pose, RoiBox};
use crate::numerics::Tensor;

/// The learnable BEV query grid together with per-query 3D anchor points.
/// Anchors live in the world frame; projectors map them into each view's
/// normalized feature coordinates.
#[derive(Debug, Clone)]
pub struct BEVQuerySet {
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
    /// (grid_h * grid_w, embed_dim)
    pub queries: Tensor,
    /// Per query: N_ref world-frame anchor points.
    pub ref_points: Vec<Vec<[f64; 3]>>,
}

impl BEVQuerySet {
    /// Builds the query grid over the ego ROI. Each cell gets one anchor on
    /// the BEV plane (z = 0) plus `extra_z` vertical anchors, all at the cell
    /// center in plan. Anchors are mapped into the world frame by `ego_pose`.
    pub fn from_grid(
        queries: Tensor,
        grid_h: usize,
        grid_w: usize,
        roi: &RoiBox,
        ego_pose: &Pose,
        extra_z: &[f64],
    ) -> Result<Self> {
        let shape = queries.shape().to_vec();
        if shape.len() != 2 || shape[0] != grid_h * grid_w {
            return Err(Error::config(format!(
                "query tensor shape {shape:?} does not match {grid_h}x{grid_w} grid"
            )));
        }
        let embed_dim = shape[1];
        let dx = roi.x_extent() / grid_w as f64;
        let dy = roi.y_extent() / grid_h as f64;
        let mut ref_points = Vec::with_capacity(grid_h * grid_w);
        for row in 0..grid_h {
            for col in 0..grid_w {
                let x = roi.x_min + (col as f64 + 0.5) * dx;
                let y = roi.y_min + (row as f64 + 0.5) * dy;
                let mut anchors = Vec::with_capacity(1 + extra_z.len());
                let z_plane = 0.0f64.clamp(roi.z_min, roi.z_max - 1e-9);
                anchors.push(ego_pose.to_world([x, y, z_plane]));
                for z in extra_z {
                    if *z < roi.z_min || *z >= roi.z_max {
                        return Err(Error::config(format!(
                            "anchor z {z} outside ROI z range [{}, {})",
                            roi.z_min, roi.z_max
                        )));
                    }
                    anchors.push(ego_pose.to_world([x, y, *z]));
                }
                ref_points.push(anchors);
            }
        }
        Ok(BEVQuerySet {
            grid_h,
            grid_w,
            embed_dim,
            queries,
            ref_points,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn n_ref(&self) -> usize {
        self.ref_points.first().map_or(0, Vec::len)
    }

    pub fn query(&self, i: usize) -> &[f64] {
        &self.queries.data()[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    /// Replaces embeddings, keeping grid geometry and anchors.
    pub fn with_queries(&self, queries: Tensor) -> Result<Self> {
        if queries.shape() != self.queries.shape() {
            return Err(Error::config("query tensor shape changed".to_string()));
        }
        Ok(BEVQuerySet {
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            embed_dim: self.embed_dim,
            queries,
            ref_points: self.ref_points.clone(),
        })
    }
}
