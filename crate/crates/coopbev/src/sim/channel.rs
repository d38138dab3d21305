//! Frame-delay V2X channel: a FIFO that delivers the cooperative agent's
//! frame produced `delay_frames` indices ago, with nothing delivered during
//! warm-up. Order-preserving, no drops, no duplicates.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::sim::AgentFrame;

#[derive(Debug, Clone)]
pub struct LatencyChannel {
    delay_frames: u32,
    queue: VecDeque<AgentFrame>,
    last_pushed: Option<u64>,
}

impl LatencyChannel {
    pub fn new(delay_frames: u32) -> Self {
        LatencyChannel {
            delay_frames,
            queue: VecDeque::new(),
            last_pushed: None,
        }
    }

    pub fn delay_frames(&self) -> u32 {
        self.delay_frames
    }

    /// Pushes the frame produced at index `k` and returns the frame the ego
    /// receives at index `k` (the one produced at k − delay), or None while
    /// the channel is still warming up.
    pub fn channel_step(&mut self, produced: AgentFrame, k: u64) -> Result<Option<AgentFrame>> {
        if produced.frame_index != k {
            return Err(Error::integrity(format!(
                "frame stamped {} pushed at index {k}",
                produced.frame_index
            )));
        }
        if let Some(last) = self.last_pushed {
            if k != last + 1 {
                return Err(Error::integrity(format!(
                    "out-of-order push: index {k} after {last}"
                )));
            }
        }
        self.last_pushed = Some(k);
        self.queue.push_back(produced);
        if k < u64::from(self.delay_frames) {
            return Ok(None);
        }
        let want = k - u64::from(self.delay_frames);
        let front = self.queue.pop_front().expect("queue cannot be empty after push");
        debug_assert_eq!(front.frame_index, want);
        Ok(Some(front))
    }
}

/// Runs the cooperative agent's frames through a fresh channel with the
/// given delay, pairing each ego frame with whatever arrives at its index.
/// Scenarios without a cooperative agent pair every frame with None.
pub fn pair_frames(
    scenario: &crate::sim::scenario::Scenario,
    delay_frames: u32,
) -> Result<Vec<crate::train::step::PairedFrame>> {
    let ego_idx = scenario.ego_index();
    let other_idx = scenario.other_index();
    let mut channel = LatencyChannel::new(delay_frames);
    let mut out = Vec::with_capacity(scenario.frames.len());
    for (k, frame) in scenario.frames.iter().enumerate() {
        let other = match other_idx {
            Some(oi) => channel.channel_step(frame.agent_frames[oi].clone(), k as u64)?,
            None => None,
        };
        out.push(crate::train::step::PairedFrame {
            frame_index: k as u64,
            t: frame.world.t,
            ego: frame.agent_frames[ego_idx].clone(),
            other,
            gt: frame.gt.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::imagebev::ImageFrame;
    use crate::numerics::Tensor;
    use crate::pointpillars::PointCloud;

    fn frame(k: u64) -> AgentFrame {
        AgentFrame {
            agent_id: "rsu".to_string(),
            frame_index: k,
            t: k as f64 * 0.2,
            cloud: PointCloud {
                points: vec![[k as f64, 0.0, 0.0, 0.5]],
                frame: "rsu".to_string(),
            },
            image: ImageFrame {
                height: 1,
                width: 1,
                data: Tensor::new(vec![3, 1, 1], vec![0.0; 3]).unwrap(),
                intrinsics: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                extrinsics: Pose::identity(),
            },
            pose: Pose::identity(),
        }
    }

    #[test]
    fn zero_delay_delivers_same_index() {
        let mut ch = LatencyChannel::new(0);
        for k in 0..5 {
            let got = ch.channel_step(frame(k), k).unwrap().unwrap();
            assert_eq!(got.frame_index, k);
        }
    }

    #[test]
    fn delay_two_delivers_k_minus_two() {
        let mut ch = LatencyChannel::new(2);
        let mut delivered = Vec::new();
        for k in 0..6 {
            if let Some(f) = ch.channel_step(frame(k), k).unwrap() {
                delivered.push(f.frame_index);
            }
        }
        // k=5 delivers the frame from k=3; warm-up yields nothing for k<2.
        assert_eq!(delivered, vec![0, 1, 2, 3]);
    }

    #[test]
    fn warmup_delivers_nothing() {
        let mut ch = LatencyChannel::new(2);
        assert!(ch.channel_step(frame(0), 0).unwrap().is_none());
        assert!(ch.channel_step(frame(1), 1).unwrap().is_none());
        assert!(ch.channel_step(frame(2), 2).unwrap().is_some());
    }

    #[test]
    fn out_of_order_push_is_integrity_error() {
        let mut ch = LatencyChannel::new(1);
        ch.channel_step(frame(0), 0).unwrap();
        assert!(ch.channel_step(frame(2), 2).is_err());
        let mut ch2 = LatencyChannel::new(1);
        assert!(ch2.channel_step(frame(1), 0).is_err());
    }

    #[test]
    fn order_preserved_without_loss_or_duplication() {
        for delay in [0u32, 1, 2, 3] {
            let mut ch = LatencyChannel::new(delay);
            let mut delivered = Vec::new();
            let n = 20;
            for k in 0..n {
                if let Some(f) = ch.channel_step(frame(k), k).unwrap() {
                    delivered.push(f.frame_index);
                }
            }
            let expect: Vec<u64> = (0..n.saturating_sub(u64::from(delay))).collect();
            assert_eq!(delivered, expect, "delay {delay}");
        }
    }
}
