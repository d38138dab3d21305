//! Point cloud to multi-scale BEV pyramid: pillar voxelization, a shared-MLP
//! pillar encoder with max pooling and dense scatter, and a small strided
//! convolutional backbone fused top-down into a unified channel count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{validate_pyramid, FeatureMap};
use crate::geom::RoiBox;
use crate::nn::{join_name, relu_backward, relu_forward, Conv2d, Fpn, FpnCache, Linear, Params};
use crate::numerics::{RngState, Tensor};

pub const DEFAULT_POINT_CAP: usize = 32;

/// One LiDAR sweep in an agent-local frame. Points are (x, y, z, intensity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
    pub frame: String,
}

impl PointCloud {
    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("point cloud contains non-finite value".to_string()));
            }
            if !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::domain(format!("intensity {} outside [0,1]", p[3])));
            }
        }
        Ok(())
    }
}

/// Sparse pillar partition of a point cloud over a BEV grid.
#[derive(Debug, Clone)]
pub struct PillarGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub voxel: (f64, f64, f64),
    pub roi: RoiBox,
    /// (row, col) -> points; BTreeMap keeps iteration deterministic.
    pub pillars: BTreeMap<(usize, usize), Vec<[f64; 4]>>,
}

impl PillarGrid {
    pub fn pillar_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.roi.x_min + (col as f64 + 0.5) * self.voxel.0,
            self.roi.y_min + (row as f64 + 0.5) * self.voxel.1,
        )
    }

    pub fn point_count(&self) -> usize {
        self.pillars.values().map(Vec::len).sum()
    }
}

fn grid_cells(extent: f64, step: f64, axis: &str) -> Result<usize> {
    let cells = extent / step;
    let rounded = cells.round();
    if (cells - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::config(format!(
            "ROI {axis} extent {extent} is not an integer multiple of voxel {step}"
        )));
    }
    Ok(rounded as usize)
}

/// Partitions in-ROI points into pillars. Pillars exceeding `cap` points are
/// truncated farthest-first: the points most distant from the pillar's plan
/// center are dropped until `cap` remain.
pub fn voxelize(cloud: &PointCloud, roi: &RoiBox, voxel: (f64, f64, f64), cap: usize) -> Result<PillarGrid> {
    cloud.validate()?;
    if voxel.0 <= 0.0 || voxel.1 <= 0.0 || voxel.2 <= 0.0 {
        return Err(Error::config("voxel extents must be positive".to_string()));
    }
    let grid_w = grid_cells(roi.x_extent(), voxel.0, "x")?;
    let grid_h = grid_cells(roi.y_extent(), voxel.1, "y")?;
    grid_cells(roi.z_extent(), voxel.2, "z")?;

    let mut pillars: BTreeMap<(usize, usize), Vec<[f64; 4]>> = BTreeMap::new();
    for p in &cloud.points {
        if !roi.contains([p[0], p[1], p[2]]) {
            continue;
        }
        let col = ((p[0] - roi.x_min) / voxel.0) as usize;
        let row = ((p[1] - roi.y_min) / voxel.1) as usize;
        let col = col.min(grid_w - 1);
        let row = row.min(grid_h - 1);
        pillars.entry((row, col)).or_default().push(*p);
    }

    let mut grid = PillarGrid {
        grid_h,
        grid_w,
        voxel,
        roi: *roi,
        pillars,
    };
    for ((row, col), pts) in grid.pillars.iter_mut() {
        if pts.len() <= cap {
            continue;
        }
        let (cx, cy) = (
            roi.x_min + (*col as f64 + 0.5) * voxel.0,
            roi.y_min + (*row as f64 + 0.5) * voxel.1,
        );
        // Stable sort by distance keeps input order among ties.
        let mut indexed: Vec<(usize, &[f64; 4])> = pts.iter().enumerate().collect();
        indexed.sort_by(|a, b| {
            let da = (a.1[0] - cx).powi(2) + (a.1[1] - cy).powi(2);
            let db = (b.1[0] - cx).powi(2) + (b.1[1] - cy).powi(2);
            da.partial_cmp(&db).unwrap().then(a.0.cmp(&b.0))
        });
        let kept: Vec<[f64; 4]> = indexed.into_iter().take(cap).map(|(_, p)| *p).collect();
        *pts = kept;
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Pillar feature encoder
// ---------------------------------------------------------------------------

/// Per-point augmentation: (x, y, z, intensity, offsets to the pillar point
/// centroid, offsets to the pillar plan center). 9 values total.
pub const PILLAR_INPUT_DIM: usize = 9;

#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub l1: Linear,
    pub l2: Linear,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct PillarCache {
    pub entries: Vec<PillarCacheEntry>,
    pub grid_h: usize,
    pub grid_w: usize,
}

#[derive(Debug, Clone)]
pub struct PillarCacheEntry {
    pub row: usize,
    pub col: usize,
    pub aug: Vec<[f64; PILLAR_INPUT_DIM]>,
    pub h1: Vec<Vec<f64>>,
    pub m1: Vec<Vec<bool>>,
    pub h2: Vec<Vec<f64>>,
    pub m2: Vec<Vec<bool>>,
    /// argmax point index per output channel.
    pub winners: Vec<usize>,
}

impl PillarEncoder {
    pub fn new(rng: &mut RngState, width: usize) -> Self {
        PillarEncoder {
            l1: Linear::new(rng, PILLAR_INPUT_DIM, width, true),
            l2: Linear::new(rng, width, width, true),
            width,
        }
    }

    /// Encodes every occupied pillar and scatters max-pooled features into a
    /// dense (width, grid_h, grid_w) pseudo-image; empty cells stay zero.
    pub fn forward(&self, grid: &PillarGrid) -> Result<(FeatureMap, PillarCache)> {
        let mut pseudo = Tensor::zeros(vec![self.width, grid.grid_h, grid.grid_w]);
        let mut entries = Vec::with_capacity(grid.pillars.len());
        let plane = grid.grid_h * grid.grid_w;
        for ((row, col), pts) in &grid.pillars {
            let n = pts.len();
            let (px, py) = grid.pillar_center(*row, *col);
            let mut cx = 0.0;
            let mut cy = 0.0;
            let mut cz = 0.0;
            for p in pts {
                cx += p[0];
                cy += p[1];
                cz += p[2];
            }
            let inv = 1.0 / n as f64;
            cx *= inv;
            cy *= inv;
            cz *= inv;
            let mut aug = Vec::with_capacity(n);
            let mut h1s = Vec::with_capacity(n);
            let mut m1s = Vec::with_capacity(n);
            let mut h2s = Vec::with_capacity(n);
            let mut m2s = Vec::with_capacity(n);
            let mut pooled = vec![f64::NEG_INFINITY; self.width];
            let mut winners = vec![0usize; self.width];
            for (pi, p) in pts.iter().enumerate() {
                let a = [
                    p[0], p[1], p[2], p[3],
                    p[0] - cx, p[1] - cy, p[2] - cz,
                    p[0] - px, p[1] - py,
                ];
                let mut h1 = self.l1.forward(&a);
                let m1 = relu_forward(&mut h1);
                let mut h2 = self.l2.forward(&h1);
                let m2 = relu_forward(&mut h2);
                for (c, v) in h2.iter().enumerate() {
                    if *v > pooled[c] {
                        pooled[c] = *v;
                        winners[c] = pi;
                    }
                }
                aug.push(a);
                h1s.push(h1);
                m1s.push(m1);
                h2s.push(h2);
                m2s.push(m2);
            }
            let data = pseudo.data_mut();
            for (c, v) in pooled.iter().enumerate() {
                data[c * plane + row * grid.grid_w + col] = *v;
            }
            entries.push(PillarCacheEntry {
                row: *row,
                col: *col,
                aug,
                h1: h1s,
                m1: m1s,
                h2: h2s,
                m2: m2s,
                winners,
            });
        }
        pseudo.validate_finite("pillar pseudo-image")?;
        let map = FeatureMap::new(0, grid.voxel.0, pseudo)?;
        Ok((
            map,
            PillarCache {
                entries,
                grid_h: grid.grid_h,
                grid_w: grid.grid_w,
            },
        ))
    }

    /// Routes pseudo-image gradients through the max pool and shared MLP.
    pub fn backward(&mut self, cache: &PillarCache, dpseudo: &[f64]) {
        let plane = cache.grid_h * cache.grid_w;
        for entry in &cache.entries {
            let base = entry.row * cache.grid_w + entry.col;
            let n = entry.aug.len();
            let mut dh2 = vec![vec![0.0; self.width]; n];
            for c in 0..self.width {
                let g = dpseudo[c * plane + base];
                if g != 0.0 {
                    dh2[entry.winners[c]][c] += g;
                }
            }
            for pi in 0..n {
                if dh2[pi].iter().all(|v| *v == 0.0) {
                    continue;
                }
                let mut d = dh2[pi].clone();
                relu_backward(&entry.m2[pi], &mut d);
                let mut dh1 = vec![0.0; self.width];
                self.l2.backward(&entry.h1[pi], &d, &mut dh1);
                relu_backward(&entry.m1[pi], &mut dh1);
                let mut daug = vec![0.0; PILLAR_INPUT_DIM];
                self.l1.backward(&entry.aug[pi], &dh1, &mut daug);
            }
        }
    }
}

impl Params for PillarEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_params(&join_name(prefix, "l1"), f);
        self.l2.visit_params(&join_name(prefix, "l2"), f);
    }
}

// ---------------------------------------------------------------------------
// BEV backbone: strided conv stages + FPN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BevBackbone {
    pub stages: Vec<Vec<Conv2d>>,
    pub fpn: Fpn,
    pub base_resolution: f64,
}

#[derive(Debug, Clone)]
pub struct BevBackboneCache {
    /// Per conv: (input, h, w, output h, output w, relu mask).
    pub convs: Vec<(Vec<f64>, usize, usize, usize, usize, Vec<bool>)>,
    pub fpn: FpnCache,
}

impl BevBackbone {
    /// `stage_blocks[i]` convolutions per stage (first one strided), producing
    /// `stage_channels[i]` channels. Resolution halves per stage.
    pub fn new(
        rng: &mut RngState,
        in_channels: usize,
        stage_blocks: &[usize],
        stage_channels: &[usize],
        out_channels: usize,
        base_resolution: f64,
    ) -> Result<Self> {
        if stage_blocks.len() != stage_channels.len() || stage_blocks.len() < 2 {
            return Err(Error::config(
                "stage_blocks and stage_channels must have equal length >= 2".to_string(),
            ));
        }
        if stage_blocks.iter().any(|b| *b == 0) {
            return Err(Error::config("stage block counts must be >= 1".to_string()));
        }
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (blocks, cout) in stage_blocks.iter().zip(stage_channels) {
            let mut convs = Vec::new();
            convs.push(Conv2d::new(rng, cin, *cout, 3, 2, 1));
            for _ in 1..*blocks {
                convs.push(Conv2d::new(rng, *cout, *cout, 3, 1, 1));
            }
            cin = *cout;
            stages.push(convs);
        }
        let fpn = Fpn::new(rng, stage_channels, out_channels);
        Ok(BevBackbone {
            stages,
            fpn,
            base_resolution,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self) -> usize {
        self.fpn.out_channels
    }

    pub fn forward(&self, pseudo: &FeatureMap) -> Result<(Vec<FeatureMap>, BevBackboneCache)> {
        let total_stride = 1usize << self.stages.len();
        if pseudo.height < total_stride || pseudo.width < total_stride {
            return Err(Error::config(format!(
                "input {}x{} smaller than total stride {}",
                pseudo.height, pseudo.width, total_stride
            )));
        }
        let mut convs_cache = Vec::new();
        let mut x = pseudo.data.data().to_vec();
        let mut h = pseudo.height;
        let mut w = pseudo.width;
        let mut stage_outputs = Vec::new();
        for stage in &self.stages {
            for conv in stage {
                let (mut y, oh, ow) = conv.forward(&x, h, w)?;
                let mask = relu_forward(&mut y);
                convs_cache.push((x, h, w, oh, ow, mask));
                x = y;
                h = oh;
                w = ow;
            }
            stage_outputs.push((x.clone(), stage.last().unwrap().cout, h, w));
        }
        let (fused, fpn_cache) = self.fpn.forward(stage_outputs)?;
        let mut levels = Vec::new();
        for (i, data) in fused.into_iter().enumerate() {
            let (lh, lw) = fpn_cache.merged[i];
            let t = Tensor::new(vec![self.fpn.out_channels, lh, lw], data)
                .map_err(|e| Error::numeric(format!("backbone level {i}: {e}")))?;
            levels.push(FeatureMap::new((i + 1) as u32, self.base_resolution, t)?);
        }
        validate_pyramid(&levels)?;
        Ok((
            levels,
            BevBackboneCache {
                convs: convs_cache,
                fpn: fpn_cache,
            },
        ))
    }

    /// Returns the gradient w.r.t. the pseudo-image data.
    pub fn backward(&mut self, cache: &BevBackboneCache, dlevels: &[Vec<f64>]) -> Vec<f64> {
        let dstages = self.fpn.backward(&cache.fpn, dlevels);
        // Walk conv caches in reverse, stitching stage boundaries.
        let mut conv_idx = cache.convs.len();
        let mut dcurrent: Vec<f64> = Vec::new();
        for si in (0..self.stages.len()).rev() {
            let mut dy = dstages[si].clone();
            if si + 1 < self.stages.len() {
                // Gradient flowing back from the next stage's first conv.
                for (a, b) in dy.iter_mut().zip(&dcurrent) {
                    *a += b;
                }
            }
            for ci in (0..self.stages[si].len()).rev() {
                conv_idx -= 1;
                let (x, h, w, oh, ow, mask) = &cache.convs[conv_idx];
                relu_backward(mask, &mut dy);
                let mut dx = vec![0.0; x.len()];
                self.stages[si][ci].backward(x, *h, *w, &dy, *oh, *ow, &mut dx);
                dy = dx;
            }
            dcurrent = dy;
        }
        dcurrent
    }
}

impl Params for BevBackbone {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (ci, conv) in stage.iter_mut().enumerate() {
                conv.visit_params(&join_name(prefix, &format!("stage{si}.conv{ci}")), f);
            }
        }
        self.fpn.visit_params(&join_name(prefix, "fpn"), f);
    }
}
