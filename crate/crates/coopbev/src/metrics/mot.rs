//! Recall-averaged tracking metrics. For each score threshold, frames are
//! matched greedily by ascending center distance within the tracking match
//! distance (class-aware); misses, false positives, and identity switches
//! normalized by the ground-truth count give a MOTA-style score, and the
//! mean matched distance a MOTP. Both are averaged over sampled recall
//! levels: unreachable levels contribute zero accuracy and are excluded
//! from the distance average.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::{center_distance, EvalConfig};
use crate::sim::gt::GtRecord;
use crate::tracker::DetectionRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct MotResult {
    pub amota: Option<f64>,
    pub amotp: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MotEvents {
    pub tp: usize,
    pub fp: usize,
    pub misses: usize,
    pub id_switches: usize,
    pub dist_sum: f64,
}

/// Replays the sequence at one score threshold and counts events.
pub fn events_at_threshold(
    dets: &[Vec<DetectionRecord>],
    gts: &[Vec<GtRecord>],
    tau: f64,
    match_dist: f64,
) -> Result<MotEvents> {
    let mut ev = MotEvents::default();
    // Last matched detection track id per GT identity.
    let mut last_track: BTreeMap<u64, u64> = BTreeMap::new();
    for (frame_dets, frame_gts) in dets.iter().zip(gts) {
        let active: Vec<&DetectionRecord> = frame_dets.iter().filter(|d| d.score >= tau).collect();
        for d in &active {
            if d.track_id.is_none() {
                return Err(Error::domain(
                    "tracking metrics require track ids on all detections".to_string(),
                ));
            }
        }
        // Candidate pairs within the gate, class-aware, greedy by distance.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (di, d) in active.iter().enumerate() {
            for (gi, g) in frame_gts.iter().enumerate() {
                if d.class != g.class {
                    continue;
                }
                let dist = center_distance(&d.position, &g.position);
                if dist <= match_dist {
                    pairs.push((dist, di, gi));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_used = vec![false; active.len()];
        let mut gt_used = vec![false; frame_gts.len()];
        for (dist, di, gi) in pairs {
            if det_used[di] || gt_used[gi] {
                continue;
            }
            det_used[di] = true;
            gt_used[gi] = true;
            ev.tp += 1;
            ev.dist_sum += dist;
            let gt_id = frame_gts[gi].track_id;
            let det_id = active[di].track_id.expect("checked above");
            if let Some(prev) = last_track.get(&gt_id) {
                if *prev != det_id {
                    ev.id_switches += 1;
                }
            }
            last_track.insert(gt_id, det_id);
        }
        ev.fp += det_used.iter().filter(|u| !**u).count();
        ev.misses += gt_used.iter().filter(|u| !**u).count();
    }
    Ok(ev)
}

/// Sweeps score thresholds to the configured recall levels and averages.
pub fn compute_amota_amotp(
    dets: &[Vec<DetectionRecord>],
    gts: &[Vec<GtRecord>],
    cfg: &EvalConfig,
) -> Result<MotResult> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(Error::config("detection and ground-truth frame counts differ".to_string()));
    }
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Ok(MotResult {
            amota: None,
            amotp: None,
        });
    }
    // Candidate thresholds: every distinct detection score (descending),
    // which covers every reachable operating point.
    let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores.dedup();
    struct Point {
        recall: f64,
        mota: f64,
        motp: Option<f64>,
    }
    let mut points = Vec::with_capacity(scores.len());
    for tau in &scores {
        let ev = events_at_threshold(dets, gts, *tau, cfg.tracking_match_dist)?;
        let recall = ev.tp as f64 / total_gt as f64;
        let mota = 1.0 - (ev.misses + ev.fp + ev.id_switches) as f64 / total_gt as f64;
        points.push(Point {
            recall,
            mota: mota.clamp(0.0, 1.0),
            motp: (ev.tp > 0).then(|| ev.dist_sum / ev.tp as f64),
        });
    }
    let n = cfg.recall_samples;
    let mut amota_sum = 0.0;
    let mut amotp_sum = 0.0;
    let mut amotp_count = 0usize;
    for j in 0..n {
        let target = (j + 1) as f64 / n as f64;
        // Smallest-recall operating point achieving the target.
        let best = points
            .iter()
            .filter(|p| p.recall + 1e-12 >= target)
            .min_by(|a, b| a.recall.partial_cmp(&b.recall).unwrap());
        match best {
            Some(p) => {
                amota_sum += p.mota;
                if let Some(motp) = p.motp {
                    amotp_sum += motp;
                    amotp_count += 1;
                }
            }
            None => {
                // Unreachable recall level: zero accuracy contribution.
            }
        }
    }
    let amota = (amota_sum / n as f64).clamp(0.0, 1.0);
    let amotp = (amotp_count > 0).then(|| amotp_sum / amotp_count as f64);
    Ok(MotResult {
        amota: Some(amota),
        amotp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::ObjectClass;

    fn det(id: u64, pos: [f64; 3], score: f64) -> DetectionRecord {
        DetectionRecord {
            class: ObjectClass::Car,
            position: pos,
            dims: [4.0, 2.0, 1.5],
            yaw: 0.0,
            score,
            track_id: Some(id),
        }
    }

    fn gt(id: u64, pos: [f64; 3]) -> GtRecord {
        GtRecord {
            track_id: id,
            class: ObjectClass::Car,
            position: pos,
            dims: [4.0, 2.0, 1.5],
            yaw: 0.0,
        }
    }

    #[test]
    fn perfect_tracking_scores_one_and_zero() {
        let frames = 10;
        let gts: Vec<Vec<GtRecord>> = (0..frames).map(|k| vec![gt(1, [k as f64, 0.0, 0.0])]).collect();
        let dets: Vec<Vec<DetectionRecord>> =
            (0..frames).map(|k| vec![det(7, [k as f64, 0.0, 0.0], 1.0)]).collect();
        let r = compute_amota_amotp(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.amota, Some(1.0));
        assert_eq!(r.amotp, Some(0.0));
    }

    #[test]
    fn constant_offset_appears_in_amotp() {
        let gts: Vec<Vec<GtRecord>> = (0..5).map(|k| vec![gt(1, [k as f64, 0.0, 0.0])]).collect();
        let dets: Vec<Vec<DetectionRecord>> =
            (0..5).map(|k| vec![det(7, [k as f64 + 0.5, 0.0, 0.0], 1.0)]).collect();
        let r = compute_amota_amotp(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.amota, Some(1.0));
        assert!((r.amotp.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_identity_switch_counted_once() {
        // 10 frames, 1 object; track id changes at frame 5.
        let gts: Vec<Vec<GtRecord>> = (0..10).map(|k| vec![gt(1, [k as f64, 0.0, 0.0])]).collect();
        let dets: Vec<Vec<DetectionRecord>> = (0..10)
            .map(|k| vec![det(if k < 5 { 7 } else { 8 }, [k as f64, 0.0, 0.0], 1.0)])
            .collect();
        let ev = events_at_threshold(&dets, &gts, 0.5, 2.0).unwrap();
        assert_eq!(ev.tp, 10);
        assert_eq!(ev.id_switches, 1);
        assert_eq!(ev.misses, 0);
        assert_eq!(ev.fp, 0);
        let r = compute_amota_amotp(&dets, &gts, &EvalConfig::default()).unwrap();
        // MOTA = 1 - 1/10 at every achieved level.
        assert!((r.amota.unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn empty_gt_reports_undefined() {
        let dets = vec![vec![det(1, [0.0, 0.0, 0.0], 0.9)]];
        let gts = vec![vec![]];
        let r = compute_amota_amotp(&dets, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.amota, None);
        assert_eq!(r.amotp, None);
    }

    #[test]
    fn missing_track_id_is_domain_error() {
        let mut d = det(1, [0.0, 0.0, 0.0], 0.9);
        d.track_id = None;
        let dets = vec![vec![d]];
        let gts = vec![vec![gt(1, [0.0, 0.0, 0.0])]];
        assert!(compute_amota_amotp(&dets, &gts, &EvalConfig::default()).is_err());
    }

    #[test]
    fn recall_cap_limits_amota() {
        // Two objects, only one ever detected: recall caps at 0.5, so all
        // levels above 0.5 contribute zero.
        let gts: Vec<Vec<GtRecord>> = (0..10)
            .map(|k| vec![gt(1, [k as f64, 0.0, 0.0]), gt(2, [k as f64, 10.0, 0.0])])
            .collect();
        let dets: Vec<Vec<DetectionRecord>> =
            (0..10).map(|k| vec![det(7, [k as f64, 0.0, 0.0], 1.0)]).collect();
        let r = compute_amota_amotp(&dets, &gts, &EvalConfig::default()).unwrap();
        let amota = r.amota.unwrap();
        // Reachable half of the levels have MOTA = 1 - 10/20 = 0.5.
        assert!((amota - 0.25).abs() < 1e-9, "amota {amota}");
    }

    #[test]
    fn false_positives_lower_amota() {
        let gts: Vec<Vec<GtRecord>> = (0..10).map(|k| vec![gt(1, [k as f64, 0.0, 0.0])]).collect();
        let clean: Vec<Vec<DetectionRecord>> =
            (0..10).map(|k| vec![det(7, [k as f64, 0.0, 0.0], 1.0)]).collect();
        let mut noisy = clean.clone();
        for (k, frame) in noisy.iter_mut().enumerate() {
            frame.push(det(99, [50.0 + k as f64, 50.0, 0.0], 1.0));
        }
        let a = compute_amota_amotp(&clean, &gts, &EvalConfig::default()).unwrap().amota.unwrap();
        let b = compute_amota_amotp(&noisy, &gts, &EvalConfig::default()).unwrap().amota.unwrap();
        assert!(b < a);
    }
}
