//! Average precision over score-ordered greedy center-distance matching.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::{center_distance, EvalConfig};
use crate::sim::gt::GtRecord;
use crate::tracker::{DetectionRecord, ObjectClass};

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// Mean over classes (with ground truth) and thresholds; None when no
    /// class has any ground truth.
    pub mean_ap: Option<f64>,
    /// Per-class AP averaged over thresholds; None marks an undefined class
    /// (zero ground-truth instances).
    pub per_class: BTreeMap<ObjectClass, Option<f64>>,
}

/// Greedy matching per class and threshold: detections in descending score
/// order claim the nearest unmatched same-class ground-truth object in their
/// frame within the distance threshold; duplicates become false positives.
/// AP integrates the interpolated precision envelope over recall.
pub fn compute_map(
    dets: &[Vec<DetectionRecord>],
    gts: &[Vec<GtRecord>],
    cfg: &EvalConfig,
) -> Result<MapResult> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(Error::config(format!(
            "detection frames ({}) and ground-truth frames ({}) must align",
            dets.len(),
            gts.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut defined = Vec::new();
    for class in &cfg.classes {
        let npos: usize = gts.iter().map(|g| g.iter().filter(|r| r.class == *class).count()).sum();
        if npos == 0 {
            per_class.insert(*class, None);
            continue;
        }
        let mut sum_ap = 0.0;
        for thresh in &cfg.match_dist_thresholds {
            sum_ap += ap_single(dets, gts, *class, *thresh, npos);
        }
        let ap = sum_ap / cfg.match_dist_thresholds.len() as f64;
        per_class.insert(*class, Some(ap));
        defined.push(ap);
    }
    let mean_ap = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(MapResult { mean_ap, per_class })
}

fn ap_single(
    dets: &[Vec<DetectionRecord>],
    gts: &[Vec<GtRecord>],
    class: ObjectClass,
    thresh: f64,
    npos: usize,
) -> f64 {
    // (score, frame, det index) sorted by score descending; stable sort keeps
    // insertion order among exact ties.
    let mut order: Vec<(f64, usize, usize)> = Vec::new();
    for (k, frame) in dets.iter().enumerate() {
        for (i, d) in frame.iter().enumerate() {
            if d.class == class {
                order.push((d.score, k, i));
            }
        }
    }
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(order.len());
    for (_, k, i) in &order {
        let det = &dets[*k][*i];
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts[*k].iter().enumerate() {
            if gt.class != class || matched[*k][gi] {
                continue;
            }
            let dist = center_distance(&det.position, &gt.position);
            if dist <= thresh && best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[*k][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    // Precision envelope integrated over recall.
    let n = tp_flags.len();
    if n == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, hit) in tp_flags.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / npos as f64);
    }
    // Envelope: max precision at or beyond each point.
    let mut envelope = precisions.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..n {
        if tp_flags[i] {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}
