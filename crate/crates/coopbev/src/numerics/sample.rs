use crate::error::{Error, Result};
use crate::features::FeatureMap;

/// Weights and cell indices of one bilinear lookup; reused by the backward
/// pass so forward and backward stay in exact agreement.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    /// false when the location fell outside [0,1]^2 and the result is zero.
    pub inside: bool,
    pub x: f64,
    pub y: f64,
    /// Corner cells as (row, col); None encodes a zero-padded neighbour.
    pub cells: [Option<(usize, usize)>; 4],
    /// Matching interpolation weights (w00, w01, w10, w11).
    pub weights: [f64; 4],
}

impl BilinearTap {
    fn zero() -> Self {
        BilinearTap {
            inside: false,
            x: 0.0,
            y: 0.0,
            cells: [None; 4],
            weights: [0.0; 4],
        }
    }
}

/// Resolves a normalized location into corner cells and weights.
///
/// Cell centers sit at ((col+0.5)/W, (row+0.5)/H), so a loc exactly on a cell
/// center reproduces that cell. Locations outside [0,1]^2 produce the zero
/// vector; neighbours past the border are zero-padded.
pub fn bilinear_tap(height: usize, width: usize, loc: (f64, f64)) -> Result<BilinearTap> {
    let (u, v) = loc;
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::domain(format!("non-finite sample location ({u}, {v})")));
    }
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Ok(BilinearTap::zero());
    }
    let x = u * width as f64 - 0.5;
    let y = v * height as f64 - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let col0 = x0 as i64;
    let row0 = y0 as i64;
    let cell = |row: i64, col: i64| -> Option<(usize, usize)> {
        if row < 0 || col < 0 || row >= height as i64 || col >= width as i64 {
            None
        } else {
            Some((row as usize, col as usize))
        }
    };
    Ok(BilinearTap {
        inside: true,
        x,
        y,
        cells: [
            cell(row0, col0),
            cell(row0, col0 + 1),
            cell(row0 + 1, col0),
            cell(row0 + 1, col0 + 1),
        ],
        weights: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    })
}

/// Bilinear interpolation of all channels of `feature` at a normalized
/// location; out-of-range locations return the zero vector.
pub fn bilinear_sample(feature: &FeatureMap, loc: (f64, f64)) -> Result<Vec<f64>> {
    let tap = bilinear_tap(feature.height, feature.width, loc)?;
    let mut out = vec![0.0; feature.channels];
    sample_with_tap(feature, &tap, &mut out);
    Ok(out)
}

pub fn sample_with_tap(feature: &FeatureMap, tap: &BilinearTap, out: &mut [f64]) {
    debug_assert_eq!(out.len(), feature.channels);
    out.iter_mut().for_each(|v| *v = 0.0);
    if !tap.inside {
        return;
    }
    let data = feature.data.data();
    let (h, w) = (feature.height, feature.width);
    for (cell, wt) in tap.cells.iter().zip(tap.weights) {
        let Some((row, col)) = cell else { continue };
        if wt == 0.0 {
            continue;
        }
        let base = row * w + col;
        for (c, o) in out.iter_mut().enumerate() {
            *o += wt * data[c * h * w + base];
        }
    }
}

/// Backward pass of one bilinear lookup.
///
/// Scatters `dout` into `dfeature` (same layout as the feature data) and
/// returns (d/du, d/dv) of `sum(dout[c] * sample[c])` w.r.t. the normalized
/// location. A padded or outside tap contributes nothing.
pub fn sample_backward_with_tap(
    feature: &FeatureMap,
    tap: &BilinearTap,
    dout: &[f64],
    dfeature: &mut [f64],
) -> (f64, f64) {
    if !tap.inside {
        return (0.0, 0.0);
    }
    let data = feature.data.data();
    let (h, w) = (feature.height, feature.width);
    let x0 = tap.x.floor();
    let y0 = tap.y.floor();
    let fx = tap.x - x0;
    let fy = tap.y - y0;
    // d(weight)/dx and d(weight)/dy per corner, in pixel units.
    let dw_dx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    let dw_dy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let mut gx = 0.0;
    let mut gy = 0.0;
    for i in 0..4 {
        let Some((row, col)) = tap.cells[i] else { continue };
        let base = row * w + col;
        let wt = tap.weights[i];
        for (c, g) in dout.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let idx = c * h * w + base;
            dfeature[idx] += wt * g;
            let f = data[idx];
            gx += g * dw_dx[i] * f;
            gy += g * dw_dy[i] * f;
        }
    }
    // Chain rule from pixel coords back to normalized coords.
    (gx * w as f64, gy * h as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn map_2x2(per_channel: &[[f64; 4]]) -> FeatureMap {
        let mut data = Vec::new();
        for ch in per_channel {
            data.extend_from_slice(ch);
        }
        FeatureMap::new(0, 1.0, Tensor::new(vec![per_channel.len(), 2, 2], data).unwrap()).unwrap()
    }

    #[test]
    fn cell_center_returns_cell_value() {
        let m = map_2x2(&[[1.0, 2.0, 3.0, 4.0]]);
        // center of cell (row 0, col 1) is at ((1+0.5)/2, (0+0.5)/2)
        let v = bilinear_sample(&m, (0.75, 0.25)).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_of_four_cells_averages() {
        let m = map_2x2(&[[0.0, 0.0, 4.0, 4.0], [0.0, 4.0, 0.0, 4.0]]);
        let v = bilinear_sample(&m, (0.5, 0.5)).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        assert!((v[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn outside_returns_zero_vector() {
        let m = map_2x2(&[[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(bilinear_sample(&m, (-0.1, 0.5)).unwrap(), vec![0.0]);
        assert_eq!(bilinear_sample(&m, (0.5, 1.2)).unwrap(), vec![0.0]);
    }

    #[test]
    fn non_finite_loc_is_domain_error() {
        let m = map_2x2(&[[1.0, 2.0, 3.0, 4.0]]);
        assert!(bilinear_sample(&m, (f64::NAN, 0.5)).is_err());
    }

    #[test]
    fn linear_in_feature_values() {
        let a = map_2x2(&[[1.0, -2.0, 0.5, 4.0]]);
        let b = map_2x2(&[[0.3, 0.7, -1.0, 2.0]]);
        let loc = (0.63, 0.41);
        let (ca, cb) = (2.5, -1.25);
        let mut combo_data = Vec::new();
        for i in 0..4 {
            combo_data.push(ca * a.data.data()[i] + cb * b.data.data()[i]);
        }
        let combo = map_2x2(&[[combo_data[0], combo_data[1], combo_data[2], combo_data[3]]]);
        let va = bilinear_sample(&a, loc).unwrap()[0];
        let vb = bilinear_sample(&b, loc).unwrap()[0];
        let vc = bilinear_sample(&combo, loc).unwrap()[0];
        assert!((vc - (ca * va + cb * vb)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = map_2x2(&[[1.0, -2.0, 0.5, 4.0], [2.0, 0.0, -1.0, 3.0]]);
        let loc = (0.6, 0.35);
        let dout = [1.0, -0.5];
        let tap = bilinear_tap(m.height, m.width, loc).unwrap();
        let mut dfeat = vec![0.0; m.numel()];
        let (gu, gv) = sample_backward_with_tap(&m, &tap, &dout, &mut dfeat);

        let f = |u: f64, v: f64| -> f64 {
            let s = bilinear_sample(&m, (u, v)).unwrap();
            s[0] * dout[0] + s[1] * dout[1]
        };
        let eps = 1e-6;
        let fd_u = (f(loc.0 + eps, loc.1) - f(loc.0 - eps, loc.1)) / (2.0 * eps);
        let fd_v = (f(loc.0, loc.1 + eps) - f(loc.0, loc.1 - eps)) / (2.0 * eps);
        assert!((gu - fd_u).abs() < 1e-6, "gu {gu} fd {fd_u}");
        assert!((gv - fd_v).abs() < 1e-6, "gv {gv} fd {fd_v}");
    }
}
