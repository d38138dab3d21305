//! Classification and box regression losses with their derivatives.

use crate::error::{Error, Result};

const P_CLAMP: f64 = 1e-7;

/// Focal loss on one predicted probability.
///   y = 1: −alpha · (1−p)^gamma · ln p
///   y = 0: −(1−alpha) · p^gamma · ln (1−p)
/// Probabilities at exactly 0 or 1 are clamped to [1e-7, 1−1e-7].
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> Result<f64> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::domain(format!("focal loss probability {p} outside [0,1]")));
    }
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let loss = if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    };
    Ok(loss)
}

/// dL/dp of `focal_loss`, evaluated at the clamped probability.
pub fn focal_loss_grad(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if y {
        alpha * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - alpha * (1.0 - p).powf(gamma) / p
    } else {
        -(1.0 - alpha) * gamma * p.powf(gamma - 1.0) * (1.0 - p).ln()
            + (1.0 - alpha) * p.powf(gamma) / (1.0 - p)
    }
}

/// Mean absolute difference over the regression targets.
pub fn l1_box_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::config("box vectors must share a nonzero length".to_string()));
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Subgradient of `l1_box_loss` w.r.t. `pred` (sign(0) taken as 0).
pub fn l1_box_loss_grad(pred: &[f64], gt: &[f64], dloss: f64, dpred: &mut [f64]) {
    let n = pred.len() as f64;
    for i in 0..pred.len() {
        let d = pred[i] - gt[i];
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        dpred[i] += dloss * s / n;
    }
}
