use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One level of a multi-scale feature pyramid.
///
/// `data` is laid out (channels, height, width) row-major; row index follows
/// the y axis and column index the x axis of whatever space the map covers.
/// `stride_m` is the metric size of one cell and always equals
/// `base_resolution * 2^level_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level_id: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride_m: f64,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(level_id: u32, base_resolution: f64, data: Tensor) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::config(format!(
                "feature map data must be (channels, height, width), got {shape:?}"
            )));
        }
        let (channels, height, width) = (shape[0], shape[1], shape[2]);
        if height == 0 || width == 0 {
            return Err(Error::config("feature map must have H>=1, W>=1".to_string()));
        }
        Ok(FeatureMap {
            level_id,
            channels,
            height,
            width,
            stride_m: base_resolution * f64::from(1u32 << level_id),
            data,
        })
    }

    pub fn zeros(level_id: u32, base_resolution: f64, channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            level_id,
            channels,
            height,
            width,
            stride_m: base_resolution * f64::from(1u32 << level_id),
            data: Tensor::zeros(vec![channels, height, width]),
        }
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data.data()[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let (h, w) = (self.height, self.width);
        self.data.data_mut()[(c * h + row) * w + col] = v;
    }

    /// Total element count, the basis for feature-level payload accounting.
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// A pyramid is finest-first: level extents strictly decrease.
pub fn validate_pyramid(levels: &[FeatureMap]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::config("empty feature pyramid".to_string()));
    }
    let channels = levels[0].channels;
    for pair in levels.windows(2) {
        if pair[1].height >= pair[0].height || pair[1].width >= pair[0].width {
            return Err(Error::config(
                "pyramid levels must have strictly decreasing extents".to_string(),
            ));
        }
    }
    if levels.iter().any(|l| l.channels != channels) {
        return Err(Error::config("pyramid levels must share one channel count".to_string()));
    }
    Ok(())
}
