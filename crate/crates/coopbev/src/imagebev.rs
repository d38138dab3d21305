//! Image to multi-scale feature pyramid with a unified channel count. A small
//! plain-convolution encoder stands in for a deep residual backbone; the
//! pyramid contract (strides doubling from a stride-4 stem, shared channels)
//! is what downstream fusion consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{validate_pyramid, FeatureMap};
use crate::geom::Pose;
use crate::nn::{join_name, relu_backward, relu_forward, Conv2d, Fpn, FpnCache, Params};
use crate::numerics::{RngState, Tensor};

/// One camera frame in an agent-local frame. `intrinsics` maps local plan
/// coordinates (x, y, 1) to pixel coordinates (u, v, 1) for the orthographic
/// camera model used by the simulator; `extrinsics` is the camera's pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub height: usize,
    pub width: usize,
    /// (3, height, width) values in [0, 1].
    pub data: Tensor,
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: Pose,
}

impl ImageFrame {
    pub fn channels(&self) -> usize {
        3
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.data.shape();
        if shape != [3, self.height, self.width] {
            return Err(Error::config(format!(
                "image data shape {:?} does not match declared 3x{}x{}",
                shape, self.height, self.width
            )));
        }
        let det = det3(&self.intrinsics);
        if det.abs() < 1e-12 {
            return Err(Error::config("camera intrinsics are not invertible".to_string()));
        }
        Ok(())
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-channel (x − mean) / std.
pub fn normalize_image(img: &ImageFrame, mean: [f64; 3], std: [f64; 3]) -> Result<ImageFrame> {
    if std.iter().any(|s| *s == 0.0) {
        return Err(Error::domain("normalization std must be nonzero".to_string()));
    }
    let plane = img.height * img.width;
    let mut data = img.data.data().to_vec();
    for c in 0..3 {
        let inv = 1.0 / std[c];
        for v in data[c * plane..(c + 1) * plane].iter_mut() {
            *v = (*v - mean[c]) * inv;
        }
    }
    Ok(ImageFrame {
        height: img.height,
        width: img.width,
        data: Tensor::new(vec![3, img.height, img.width], data)?,
        intrinsics: img.intrinsics,
        extrinsics: img.extrinsics,
    })
}

/// Stride-4 stem followed by stride-2 stages; FPN unifies channels. Level i
/// has extent H / (4 · 2^i) and level_id 2 + i so strides read 4, 8, 16, ...
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub stem: Conv2d,
    pub stage_convs: Vec<Conv2d>,
    pub fpn: Fpn,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderCache {
    pub convs: Vec<(Vec<f64>, usize, usize, usize, usize, Vec<bool>)>,
    pub fpn: FpnCache,
}

impl ImageEncoder {
    pub fn new(rng: &mut RngState, stage_channels: &[usize], out_channels: usize) -> Result<Self> {
        if stage_channels.is_empty() {
            return Err(Error::config("image encoder needs at least one stage".to_string()));
        }
        let stem = Conv2d::new(rng, 3, stage_channels[0], 4, 4, 0);
        let mut stage_convs = Vec::new();
        for i in 1..stage_channels.len() {
            stage_convs.push(Conv2d::new(rng, stage_channels[i - 1], stage_channels[i], 3, 2, 1));
        }
        let fpn = Fpn::new(rng, stage_channels, out_channels);
        Ok(ImageEncoder {
            stem,
            stage_convs,
            fpn,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.stage_convs.len() + 1
    }

    pub fn total_stride(&self) -> usize {
        4 << self.stage_convs.len()
    }

    pub fn out_channels(&self) -> usize {
        self.fpn.out_channels
    }

    pub fn forward(&self, img: &ImageFrame) -> Result<(Vec<FeatureMap>, ImageEncoderCache)> {
        img.validate()?;
        let total = self.total_stride() / 2;
        if img.height % total != 0 || img.width % total != 0 {
            return Err(Error::config(format!(
                "image extents {}x{} not divisible by total stride {total}",
                img.height, img.width
            )));
        }
        let mut convs_cache = Vec::new();
        let mut x = img.data.data().to_vec();
        let mut h = img.height;
        let mut w = img.width;
        let mut stage_outputs = Vec::new();
        let (mut y, mut oh, mut ow) = self.stem.forward(&x, h, w)?;
        let mask = relu_forward(&mut y);
        convs_cache.push((x, h, w, oh, ow, mask));
        x = y;
        h = oh;
        w = ow;
        stage_outputs.push((x.clone(), self.stem.cout, h, w));
        for conv in &self.stage_convs {
            let out = conv.forward(&x, h, w)?;
            y = out.0;
            oh = out.1;
            ow = out.2;
            let mask = relu_forward(&mut y);
            convs_cache.push((x, h, w, oh, ow, mask));
            x = y;
            h = oh;
            w = ow;
            stage_outputs.push((x.clone(), conv.cout, h, w));
        }
        let (fused, fpn_cache) = self.fpn.forward(stage_outputs)?;
        let mut levels = Vec::new();
        for (i, data) in fused.into_iter().enumerate() {
            let (lh, lw) = fpn_cache.merged[i];
            let t = Tensor::new(vec![self.fpn.out_channels, lh, lw], data)
                .map_err(|e| Error::numeric(format!("image level {i}: {e}")))?;
            // base resolution 1 px; stride_m counts pixels per cell here.
            levels.push(FeatureMap::new((i + 2) as u32, 1.0, t)?);
        }
        validate_pyramid(&levels)?;
        Ok((
            levels,
            ImageEncoderCache {
                convs: convs_cache,
                fpn: fpn_cache,
            },
        ))
    }

    /// Gradient w.r.t. the input image data, mostly exercised by grad checks.
    pub fn backward(&mut self, cache: &ImageEncoderCache, dlevels: &[Vec<f64>]) -> Vec<f64> {
        let dstages = self.fpn.backward(&cache.fpn, dlevels);
        let n_stages = self.stage_convs.len() + 1;
        let mut dcurrent: Vec<f64> = Vec::new();
        for si in (0..n_stages).rev() {
            let mut dy = dstages[si].clone();
            if si + 1 < n_stages {
                for (a, b) in dy.iter_mut().zip(&dcurrent) {
                    *a += b;
                }
            }
            let (x, h, w, oh, ow, mask) = &cache.convs[si];
            relu_backward(mask, &mut dy);
            let mut dx = vec![0.0; x.len()];
            if si == 0 {
                self.stem.backward(x, *h, *w, &dy, *oh, *ow, &mut dx);
            } else {
                self.stage_convs[si - 1].backward(x, *h, *w, &dy, *oh, *ow, &mut dx);
            }
            dcurrent = dx;
        }
        dcurrent
    }
}

impl Params for ImageEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_params(&join_name(prefix, "stem"), f);
        for (i, conv) in self.stage_convs.iter_mut().enumerate() {
            conv.visit_params(&join_name(prefix, &format!("stage{i}")), f);
        }
        self.fpn.visit_params(&join_name(prefix, "fpn"), f);
    }
}
