//! V2X cross-attention: per BEV reference point, aggregate deformable
//! attention over the ego view and (when the validity mask allows) the
//! cooperative view, with the 1/(1+M) normalization that keeps the combined
//! weight at one. Masked-off cooperative contributions are skipped entirely,
//! so they are exactly zero bit-for-bit.

use crate::attention::deform::{
    msdeform_attn, msdeform_attn_backward, DeformAttnWeights, MsdaCache, ProjectedRef,
};
use crate::attention::BEVQuerySet;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geom::{Pose, RoiBox};
use crate::nn::{join_name, LayerNorm, LnCache, Params};
use crate::numerics::Tensor;

/// Maps world-frame anchor points into one view's normalized feature space.
pub trait RefProjector {
    fn num_levels(&self) -> usize;
    fn project(&self, world: [f64; 3]) -> ProjectedRef;
}

/// Projector for BEV (LiDAR) pyramids: world → agent frame → ROI-normalized.
/// Valid while the point sits inside the agent's ROI, including its z range.
#[derive(Debug, Clone)]
pub struct BevProjector {
    pub agent_pose: Pose,
    pub roi: RoiBox,
    pub levels: usize,
}

impl RefProjector for BevProjector {
    fn num_levels(&self) -> usize {
        self.levels
    }

    fn project(&self, world: [f64; 3]) -> ProjectedRef {
        let local = self.agent_pose.to_local(world);
        let (u, v) = self.roi.normalize_xy(local[0], local[1]);
        let valid = (0.0..=1.0).contains(&u)
            && (0.0..=1.0).contains(&v)
            && local[2] >= self.roi.z_min
            && local[2] < self.roi.z_max;
        ProjectedRef {
            levels: vec![(u, v); self.levels],
            valid,
        }
    }
}

/// Projector for image pyramids: world → agent frame → pixel via the affine
/// intrinsics → image-normalized. Valid while the pixel is inside the frame.
#[derive(Debug, Clone)]
pub struct CameraProjector {
    pub agent_pose: Pose,
    pub intrinsics: [[f64; 3]; 3],
    pub img_height: usize,
    pub img_width: usize,
    pub levels: usize,
}

impl RefProjector for CameraProjector {
    fn num_levels(&self) -> usize {
        self.levels
    }

    fn project(&self, world: [f64; 3]) -> ProjectedRef {
        let local = self.agent_pose.to_local(world);
        let k = &self.intrinsics;
        let pu = k[0][0] * local[0] + k[0][1] * local[1] + k[0][2];
        let pv = k[1][0] * local[0] + k[1][1] * local[1] + k[1][2];
        let u = pu / self.img_width as f64;
        let v = pv / self.img_height as f64;
        let valid = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
        ProjectedRef {
            levels: vec![(u, v); self.levels],
            valid,
        }
    }
}

/// One cross-attention layer: pre-norm, ego + masked-other deformable
/// aggregation over every reference point, residual add, post-norm.
/// Ego and cooperative views keep separate weights.
#[derive(Debug, Clone)]
pub struct V2xCrossAttnLayer {
    pub ln_pre: LayerNorm,
    pub ln_post: LayerNorm,
    pub w_ego: DeformAttnWeights,
    pub w_other: DeformAttnWeights,
}

#[derive(Debug, Clone, Default)]
pub struct V2xStats {
    /// Queries whose reference points were all outside every view's support.
    pub queries_without_valid_refs: usize,
}

#[derive(Debug, Clone)]
pub struct RefCache {
    pub ego: MsdaCache,
    pub other: Option<MsdaCache>,
}

#[derive(Debug, Clone)]
pub struct QueryCache {
    pub ln_pre: LnCache,
    pub refs: Vec<RefCache>,
    pub ln_post: LnCache,
}

#[derive(Debug, Clone)]
pub struct V2xLayerCache {
    pub per_query: Vec<QueryCache>,
}

impl V2xCrossAttnLayer {
    pub fn new(
        rng: &mut crate::numerics::RngState,
        model_dim: usize,
        feat_channels: usize,
        heads: usize,
        levels: usize,
        points: usize,
        head_dim: usize,
    ) -> Self {
        V2xCrossAttnLayer {
            ln_pre: LayerNorm::new(model_dim),
            ln_post: LayerNorm::new(model_dim),
            w_ego: DeformAttnWeights::new(rng, model_dim, feat_channels, heads, levels, points, head_dim),
            w_other: DeformAttnWeights::new(rng, model_dim, feat_channels, heads, levels, points, head_dim),
        }
    }

    /// `other` carries the cooperative view's features and projector when a
    /// cooperative frame is available; per reference point the validity mask
    /// decides whether that view contributes.
    pub fn forward(
        &self,
        q: &BEVQuerySet,
        ego_feats: &[FeatureMap],
        proj_ego: &dyn RefProjector,
        other: Option<(&[FeatureMap], &dyn RefProjector)>,
    ) -> Result<(BEVQuerySet, V2xLayerCache, V2xStats)> {
        let d = q.embed_dim;
        let n = q.num_queries();
        let mut out = vec![0.0; n * d];
        let mut per_query = Vec::with_capacity(n);
        let mut stats = V2xStats::default();
        for i in 0..n {
            let x = q.query(i);
            let (h, ln_pre_cache) = self.ln_pre.forward(x);
            let mut acc = vec![0.0; d];
            let mut refs = Vec::with_capacity(q.ref_points[i].len());
            let mut any_valid = false;
            for anchor in &q.ref_points[i] {
                let ego_ref = proj_ego.project(*anchor);
                if ego_ref.valid {
                    any_valid = true;
                }
                let (ego_out, ego_cache) = msdeform_attn(&h, &ego_ref, ego_feats, &self.w_ego)?;
                let mut other_cache = None;
                match other {
                    Some((ofeats, oproj)) => {
                        let other_ref = oproj.project(*anchor);
                        if other_ref.valid {
                            any_valid = true;
                            let (o_out, o_cache) = msdeform_attn(&h, &other_ref, ofeats, &self.w_other)?;
                            for ((a, e), o) in acc.iter_mut().zip(&ego_out).zip(&o_out) {
                                *a += 0.5 * (e + o);
                            }
                            other_cache = Some(o_cache);
                        } else {
                            for (a, e) in acc.iter_mut().zip(&ego_out) {
                                *a += e;
                            }
                        }
                    }
                    None => {
                        for (a, e) in acc.iter_mut().zip(&ego_out) {
                            *a += e;
                        }
                    }
                }
                refs.push(RefCache {
                    ego: ego_cache,
                    other: other_cache,
                });
            }
            if !any_valid {
                stats.queries_without_valid_refs += 1;
            }
            let sum: Vec<f64> = x.iter().zip(&acc).map(|(a, b)| a + b).collect();
            let (y, ln_post_cache) = self.ln_post.forward(&sum);
            out[i * d..(i + 1) * d].copy_from_slice(&y);
            per_query.push(QueryCache {
                ln_pre: ln_pre_cache,
                refs,
                ln_post: ln_post_cache,
            });
        }
        let out_t = Tensor::new(vec![n, d], out)
            .map_err(|e| Error::numeric(format!("v2x cross-attention output: {e}")))?;
        Ok((q.with_queries(out_t)?, V2xLayerCache { per_query }, stats))
    }

    /// Accumulates weight grads; returns dL/d input queries and adds feature
    /// grads into the per-level buffers (`dego`, and `dother` when present).
    pub fn backward(
        &mut self,
        cache: &V2xLayerCache,
        ego_feats: &[FeatureMap],
        other_feats: Option<&[FeatureMap]>,
        dout: &[f64],
        dego: &mut [Vec<f64>],
        dother: Option<&mut [Vec<f64>]>,
    ) -> Vec<f64> {
        let n = cache.per_query.len();
        let d = self.ln_pre.dim;
        let mut dq = vec![0.0; n * d];
        let mut dother = dother;
        for (i, qc) in cache.per_query.iter().enumerate() {
            let dy = &dout[i * d..(i + 1) * d];
            let mut dsum = vec![0.0; d];
            self.ln_post.backward(&qc.ln_post, dy, &mut dsum);
            // Residual: dsum flows into the raw query directly.
            for (g, s) in dq[i * d..(i + 1) * d].iter_mut().zip(&dsum) {
                *g += s;
            }
            // And into every reference's attention terms.
            let mut dh = vec![0.0; d];
            let mut scaled = vec![0.0; d];
            for rc in &qc.refs {
                let scale = if rc.other.is_some() { 0.5 } else { 1.0 };
                for (s, v) in scaled.iter_mut().zip(&dsum) {
                    *s = scale * v;
                }
                msdeform_attn_backward(&mut self.w_ego, &rc.ego, ego_feats, &scaled, &mut dh, dego);
                if let (Some(oc), Some(ofeats), Some(dof)) =
                    (rc.other.as_ref(), other_feats, dother.as_deref_mut())
                {
                    msdeform_attn_backward(&mut self.w_other, oc, ofeats, &scaled, &mut dh, dof);
                }
            }
            self.ln_pre.backward(&qc.ln_pre, &dh, &mut dq[i * d..(i + 1) * d]);
        }
        dq
    }
}

impl Params for V2xCrossAttnLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_pre.visit_params(&join_name(prefix, "ln_pre"), f);
        self.ln_post.visit_params(&join_name(prefix, "ln_post"), f);
        self.w_ego.visit_params(&join_name(prefix, "ego"), f);
        self.w_other.visit_params(&join_name(prefix, "other"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn small_query_set(n_side: usize, d: usize, seed: u64) -> BEVQuerySet {
        let roi = RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap();
        let mut rng = RngState::new(seed);
        let q = Tensor::new(
            vec![n_side * n_side, d],
            (0..n_side * n_side * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap();
        BEVQuerySet::from_grid(q, n_side, n_side, &roi, &Pose::identity(), &[0.5, 1.5]).unwrap()
    }

    fn pyramid(channels: usize, seed: u64) -> Vec<FeatureMap> {
        let mut rng = RngState::new(seed);
        let mut levels = Vec::new();
        for (lid, ext) in [(1u32, 8usize), (2u32, 4usize)] {
            let data = (0..channels * ext * ext).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            levels.push(
                FeatureMap::new(lid, 1.0, Tensor::new(vec![channels, ext, ext], data).unwrap()).unwrap(),
            );
        }
        levels
    }

    fn bev_proj() -> BevProjector {
        BevProjector {
            agent_pose: Pose::identity(),
            roi: RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap(),
            levels: 2,
        }
    }

    fn layer(seed: u64, d: usize, c: usize) -> V2xCrossAttnLayer {
        let mut rng = RngState::new(seed);
        let mut l = V2xCrossAttnLayer::new(&mut rng, d, c, 2, 2, 2, d / 2);
        // Non-trivial offset/logit weights for generic behaviour.
        let n_off = l.w_ego.offset.w.numel();
        l.w_ego
            .offset
            .w
            .set_data((0..n_off).map(|i| ((i * 7 % 13) as f64 - 6.0) / 50.0).collect())
            .unwrap();
        let n_log = l.w_ego.logit.w.numel();
        l.w_ego
            .logit
            .w
            .set_data((0..n_log).map(|i| ((i * 3 % 7) as f64 - 3.0) / 12.0).collect())
            .unwrap();
        l
    }

    #[test]
    fn mask_off_is_bit_identical_to_ego_only() {
        let q = small_query_set(3, 8, 1);
        let l = layer(2, 8, 4);
        let ego = pyramid(4, 3);
        let other = pyramid(4, 4);
        let proj = bev_proj();
        // Cooperative projector that never validates: mask M == 0 everywhere.
        #[derive(Debug)]
        struct NeverValid;
        impl RefProjector for NeverValid {
            fn num_levels(&self) -> usize {
                2
            }
            fn project(&self, _world: [f64; 3]) -> ProjectedRef {
                ProjectedRef::invalid(2)
            }
        }
        let (only_ego, _, _) = l.forward(&q, &ego, &proj, None).unwrap();
        let (masked, _, _) = l
            .forward(&q, &ego, &proj, Some((other.as_slice(), &NeverValid)))
            .unwrap();
        assert_eq!(only_ego.queries.data(), masked.queries.data());
    }

    #[test]
    fn identical_other_with_shared_weights_matches_ego_only() {
        let q = small_query_set(3, 8, 5);
        let mut l = layer(6, 8, 4);
        l.w_other = l.w_ego.clone();
        let ego = pyramid(4, 7);
        let proj = bev_proj();
        let (only_ego, _, _) = l.forward(&q, &ego, &proj, None).unwrap();
        let (both, _, _) = l
            .forward(&q, &ego, &proj, Some((ego.as_slice(), &proj as &dyn RefProjector)))
            .unwrap();
        for (a, b) in only_ego.queries.data().iter().zip(both.queries.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn eq4_weights_sum_to_one_for_both_mask_values() {
        for m in [0.0f64, 1.0] {
            let w_ego = 1.0 / (1.0 + m);
            let w_other = m / (1.0 + m);
            assert!((w_ego + w_other - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn no_valid_refs_leaves_residual_and_counts() {
        let q = small_query_set(2, 8, 9);
        let l = layer(10, 8, 4);
        let ego = pyramid(4, 11);
        // Ego projector whose agent sits far away: nothing projects inside.
        let far = BevProjector {
            agent_pose: Pose::new(1000.0, 1000.0, 0.0, 0.0),
            roi: RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap(),
            levels: 2,
        };
        let (out, _, stats) = l.forward(&q, &ego, &far, None).unwrap();
        assert_eq!(stats.queries_without_valid_refs, q.num_queries());
        // Residual-only: output equals ln_post(x + 0) per query.
        for i in 0..q.num_queries() {
            let (expect, _) = l.ln_post.forward(q.query(i));
            let got = &out.queries.data()[i * 8..(i + 1) * 8];
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn masked_other_feature_values_never_read() {
        // With M == 0, changing cooperative feature values cannot change the
        // output bit-for-bit.
        let q = small_query_set(3, 8, 13);
        let l = layer(14, 8, 4);
        let ego = pyramid(4, 15);
        let other_a = pyramid(4, 16);
        let mut other_b = other_a.clone();
        let n = other_b[0].data.numel();
        other_b[0]
            .data
            .set_data((0..n).map(|i| (i as f64) * 10.0).collect())
            .unwrap();
        let proj = bev_proj();
        #[derive(Debug)]
        struct NeverValid;
        impl RefProjector for NeverValid {
            fn num_levels(&self) -> usize {
                2
            }
            fn project(&self, _world: [f64; 3]) -> ProjectedRef {
                ProjectedRef::invalid(2)
            }
        }
        let (a, _, _) = l
            .forward(&q, &ego, &proj, Some((other_a.as_slice(), &NeverValid)))
            .unwrap();
        let (b, _, _) = l
            .forward(&q, &ego, &proj, Some((other_b.as_slice(), &NeverValid)))
            .unwrap();
        assert_eq!(a.queries.data(), b.queries.data());
    }

    #[test]
    fn layer_backward_matches_fd_on_queries_and_features() {
        let q = small_query_set(2, 6, 21);
        let mut rng = RngState::new(22);
        let mut l = V2xCrossAttnLayer::new(&mut rng, 6, 3, 1, 2, 2, 3);
        let n_off = l.w_ego.offset.w.numel();
        l.w_ego
            .offset
            .w
            .set_data((0..n_off).map(|i| ((i * 5 % 11) as f64 - 5.0) / 60.0).collect())
            .unwrap();
        let ego = pyramid(3, 23);
        let other = pyramid(3, 24);
        let proj = bev_proj();
        let oproj = BevProjector {
            agent_pose: Pose::new(2.0, -1.0, 0.0, 0.3),
            roi: RoiBox::new(-8.0, 8.0, -8.0, 8.0, -1.0, 3.0).unwrap(),
            levels: 2,
        };
        let (out, cache, _) = l
            .forward(&q, &ego, &proj, Some((other.as_slice(), &oproj as &dyn RefProjector)))
            .unwrap();
        let dout: Vec<f64> = (0..out.queries.numel())
            .map(|i| ((i * 3 % 7) as f64 - 3.0) / 5.0)
            .collect();
        let mut probe = l.clone();
        let mut dego: Vec<Vec<f64>> = ego.iter().map(|f| vec![0.0; f.numel()]).collect();
        let mut dother: Vec<Vec<f64>> = other.iter().map(|f| vec![0.0; f.numel()]).collect();
        let dq = probe.backward(&cache, &ego, Some(&other), &dout, &mut dego, Some(&mut dother));

        let score = |qs: &BEVQuerySet, e: &[FeatureMap], o: &[FeatureMap]| -> f64 {
            let (out, _, _) = l
                .forward(qs, e, &proj, Some((o, &oproj as &dyn RefProjector)))
                .unwrap();
            out.queries.data().iter().zip(&dout).map(|(a, b)| a * b).sum()
        };

        let qt = q.queries.clone();
        let qerr = crate::numerics::grad_check(
            |t| Ok(score(&q.with_queries(t.clone()).unwrap(), &ego, &other)),
            &qt,
            &dq,
            1e-5,
        )
        .unwrap();
        assert!(qerr < 1e-5, "query grad rel err {qerr}");

        let f0 = other[0].data.clone();
        let ferr = crate::numerics::grad_check(
            |t| {
                let mut o2 = other.clone();
                o2[0] = FeatureMap::new(1, 1.0, t.clone()).unwrap();
                Ok(score(&q, &ego, &o2))
            },
            &f0,
            &dother[0],
            1e-5,
        )
        .unwrap();
        assert!(ferr < 1e-5, "other feature grad rel err {ferr}");
    }
}
