//! Multi-scale deformable attention: each head samples K offset locations per
//! feature level around a projected reference point, weights them with a
//! softmax normalized over levels × points, and mixes heads back into the
//! model dimension. Forward and backward are hand-derived pairs.

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::nn::{join_name, Linear, Params};
use crate::numerics::{
    bilinear_tap, matvec, matvec_backward, sample_backward_with_tap, sample_with_tap,
    softmax_backward, softmax_inplace, BilinearTap, RngState, Tensor,
};

/// A reference point projected into one view's normalized feature space.
/// `valid` is false when the projection leaves the spatial support; invalid
/// references sample exact zeros and contribute nothing.
#[derive(Debug, Clone)]
pub struct ProjectedRef {
    /// Normalized coordinates per level, finest first.
    pub levels: Vec<(f64, f64)>,
    pub valid: bool,
}

impl ProjectedRef {
    pub fn invalid(num_levels: usize) -> Self {
        ProjectedRef {
            levels: vec![(0.0, 0.0); num_levels],
            valid: false,
        }
    }
}

/// Learnable state of one deformable attention operator.
#[derive(Debug, Clone)]
pub struct DeformAttnWeights {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    pub feat_channels: usize,
    /// Per-head value projections, each (head_dim, feat_channels).
    pub w_value: Vec<Tensor>,
    /// Per-head output projections, each (model_dim, head_dim).
    pub w_out: Vec<Tensor>,
    /// Predicts sampling offsets (normalized units) from the query.
    pub offset: Linear,
    /// Predicts attention logits from the query.
    pub logit: Linear,
}

impl DeformAttnWeights {
    pub fn new(
        rng: &mut RngState,
        model_dim: usize,
        feat_channels: usize,
        heads: usize,
        levels: usize,
        points: usize,
        head_dim: usize,
    ) -> Self {
        let std_v = 1.0 / (feat_channels as f64).sqrt();
        let std_o = 1.0 / (head_dim as f64).sqrt();
        let w_value = (0..heads)
            .map(|_| {
                Tensor::new(
                    vec![head_dim, feat_channels],
                    (0..head_dim * feat_channels).map(|_| rng.normal_scaled(std_v)).collect(),
                )
                .expect("finite init")
            })
            .collect();
        let w_out = (0..heads)
            .map(|_| {
                Tensor::new(
                    vec![model_dim, head_dim],
                    (0..model_dim * head_dim).map(|_| rng.normal_scaled(std_o)).collect(),
                )
                .expect("finite init")
            })
            .collect();
        // Offsets start at a small deterministic spread around the reference,
        // logits at zero so attention begins uniform.
        let mut offset = Linear::zeroed(model_dim, heads * levels * points * 2, true);
        {
            let b = offset.b.as_mut().expect("bias present");
            let data = b.data_mut();
            let total = heads * levels * points;
            for idx in 0..total {
                let angle = 2.0 * std::f64::consts::PI * (idx as f64) / (total as f64);
                let k = idx % points;
                let radius = 0.02 * (k as f64 + 1.0);
                data[idx * 2] = radius * angle.cos();
                data[idx * 2 + 1] = radius * angle.sin();
            }
        }
        let logit = Linear::zeroed(model_dim, heads * levels * points, true);
        DeformAttnWeights {
            heads,
            levels,
            points,
            head_dim,
            model_dim,
            feat_channels,
            w_value,
            w_out,
            offset,
            logit,
        }
    }

    /// Identity-style weights for the L=M=K=1 contract tests: value and
    /// output projections are identity, offsets and logits are zero.
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        DeformAttnWeights {
            heads: 1,
            levels: 1,
            points: 1,
            head_dim: dim,
            model_dim: dim,
            feat_channels: dim,
            w_value: vec![Tensor::new(vec![dim, dim], eye.clone()).expect("finite")],
            w_out: vec![Tensor::new(vec![dim, dim], eye).expect("finite")],
            offset: Linear::zeroed(dim, 2, true),
            logit: Linear::zeroed(dim, 1, true),
        }
    }
}

impl Params for DeformAttnWeights {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (m, w) in self.w_value.iter_mut().enumerate() {
            f(&join_name(prefix, &format!("value{m}")), w);
        }
        for (m, w) in self.w_out.iter_mut().enumerate() {
            f(&join_name(prefix, &format!("out{m}")), w);
        }
        self.offset.visit_params(&join_name(prefix, "offset"), f);
        self.logit.visit_params(&join_name(prefix, "logit"), f);
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct MsdaCache {
    pub query: Vec<f64>,
    /// Per head: softmaxed attention over levels*points.
    pub attn: Vec<Vec<f64>>,
    /// Per head: aggregated value vector before the output projection.
    pub head_mix: Vec<Vec<f64>>,
    /// Per (head, level, point): sampling tap.
    pub taps: Vec<BilinearTap>,
    /// Per (head, level, point): sampled feature vector (zeros when invalid).
    pub sampled: Vec<Vec<f64>>,
    /// Per (head, level, point): value-projected sample.
    pub values: Vec<Vec<f64>>,
    /// Which levels were valid for this reference.
    pub level_valid: Vec<bool>,
}

/// Forward pass of Eq.-style deformable attention for a single query and a
/// single projected reference point.
pub fn msdeform_attn(
    query: &[f64],
    reference: &ProjectedRef,
    feats: &[FeatureMap],
    w: &DeformAttnWeights,
) -> Result<(Vec<f64>, MsdaCache)> {
    if feats.len() != w.levels {
        return Err(Error::config(format!(
            "deformable attention configured for {} levels, got {}",
            w.levels,
            feats.len()
        )));
    }
    if reference.levels.len() != w.levels {
        return Err(Error::config(format!(
            "reference has {} levels, weights expect {}",
            reference.levels.len(),
            w.levels
        )));
    }
    if query.len() != w.model_dim {
        return Err(Error::config("query dimension mismatch".to_string()));
    }
    if feats.iter().any(|f| f.channels != w.feat_channels) {
        return Err(Error::config("feature channel mismatch".to_string()));
    }
    let (m_heads, l_levels, k_points) = (w.heads, w.levels, w.points);
    let lk = l_levels * k_points;
    let off_raw = w.offset.forward(query);
    let logit_raw = w.logit.forward(query);

    let mut out = vec![0.0; w.model_dim];
    let mut attn = Vec::with_capacity(m_heads);
    let mut head_mix = Vec::with_capacity(m_heads);
    let mut taps = Vec::with_capacity(m_heads * lk);
    let mut sampled = Vec::with_capacity(m_heads * lk);
    let mut values = Vec::with_capacity(m_heads * lk);
    let mut feat_buf = vec![0.0; w.feat_channels];

    for m in 0..m_heads {
        let mut a: Vec<f64> = logit_raw[m * lk..(m + 1) * lk].to_vec();
        softmax_inplace(&mut a);
        let mut mix = vec![0.0; w.head_dim];
        for l in 0..l_levels {
            let feat = &feats[l];
            for k in 0..k_points {
                let flat = (m * l_levels + l) * k_points + k;
                let tap = if reference.valid {
                    let loc = (
                        reference.levels[l].0 + off_raw[flat * 2],
                        reference.levels[l].1 + off_raw[flat * 2 + 1],
                    );
                    bilinear_tap(feat.height, feat.width, loc)?
                } else {
                    BilinearTap {
                        inside: false,
                        x: 0.0,
                        y: 0.0,
                        cells: [None; 4],
                        weights: [0.0; 4],
                    }
                };
                sample_with_tap(feat, &tap, &mut feat_buf);
                let mut v = vec![0.0; w.head_dim];
                matvec(w.w_value[m].data(), w.head_dim, w.feat_channels, &feat_buf, &mut v);
                let weight = a[l * k_points + k];
                for (mi, vi) in mix.iter_mut().zip(&v) {
                    *mi += weight * vi;
                }
                taps.push(tap);
                sampled.push(feat_buf.clone());
                values.push(v);
            }
        }
        let mut proj = vec![0.0; w.model_dim];
        matvec(w.w_out[m].data(), w.model_dim, w.head_dim, &mix, &mut proj);
        for (o, p) in out.iter_mut().zip(&proj) {
            *o += p;
        }
        attn.push(a);
        head_mix.push(mix);
    }
    Ok((
        out,
        MsdaCache {
            query: query.to_vec(),
            attn,
            head_mix,
            taps,
            sampled,
            values,
            level_valid: vec![reference.valid; l_levels],
        },
    ))
}

/// Backward pass. Accumulates weight gradients into `w`, the query gradient
/// into `dquery`, and per-level feature gradients into `dfeats` (same layout
/// as each level's data).
pub fn msdeform_attn_backward(
    w: &mut DeformAttnWeights,
    cache: &MsdaCache,
    feats: &[FeatureMap],
    dout: &[f64],
    dquery: &mut [f64],
    dfeats: &mut [Vec<f64>],
) {
    let (m_heads, l_levels, k_points) = (w.heads, w.levels, w.points);
    let lk = l_levels * k_points;
    let mut doff = vec![0.0; m_heads * lk * 2];
    let mut dlogits = vec![0.0; m_heads * lk];
    let mut dmix = vec![0.0; w.head_dim];
    let mut dv = vec![0.0; w.head_dim];
    let mut dfeat_vec = vec![0.0; w.feat_channels];
    let mut da = vec![0.0; lk];

    for m in 0..m_heads {
        // Through the output projection.
        dmix.iter_mut().for_each(|x| *x = 0.0);
        {
            let w_out_data = w.w_out[m].data().to_vec();
            matvec_backward(
                &w_out_data,
                w.model_dim,
                w.head_dim,
                &cache.head_mix[m],
                dout,
                w.w_out[m].grad_mut(),
                &mut dmix,
            );
        }
        // Attention weights and values.
        da.iter_mut().for_each(|x| *x = 0.0);
        for l in 0..l_levels {
            for k in 0..k_points {
                let flat = (m * l_levels + l) * k_points + k;
                let idx = l * k_points + k;
                let weight = cache.attn[m][idx];
                da[idx] = crate::numerics::dot(&dmix, &cache.values[flat]);
                if !cache.taps[flat].inside {
                    continue;
                }
                for (dvi, dmi) in dv.iter_mut().zip(&dmix) {
                    *dvi = weight * dmi;
                }
                dfeat_vec.iter_mut().for_each(|x| *x = 0.0);
                {
                    let w_val_data = w.w_value[m].data().to_vec();
                    matvec_backward(
                        &w_val_data,
                        w.head_dim,
                        w.feat_channels,
                        &cache.sampled[flat],
                        &dv,
                        w.w_value[m].grad_mut(),
                        &mut dfeat_vec,
                    );
                }
                let (gu, gv) = sample_backward_with_tap(
                    &feats[l],
                    &cache.taps[flat],
                    &dfeat_vec,
                    &mut dfeats[l],
                );
                doff[flat * 2] += gu;
                doff[flat * 2 + 1] += gv;
            }
        }
        softmax_backward(&cache.attn[m], &da, &mut dlogits[m * lk..(m + 1) * lk]);
    }
    w.offset.backward(&cache.query, &doff, dquery);
    w.logit.backward(&cache.query, &dlogits, dquery);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat_map(level_id: u32, c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = RngState::new(seed);
        let data = (0..c * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        FeatureMap::new(level_id, 1.0, Tensor::new(vec![c, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn identity_config_returns_reference_feature() {
        let dim = 3;
        let feat = feat_map(0, dim, 4, 4, 5);
        let w = DeformAttnWeights::identity(dim);
        // Reference at the center of cell (1, 2).
        let reference = ProjectedRef {
            levels: vec![(2.5 / 4.0, 1.5 / 4.0)],
            valid: true,
        };
        let query = vec![0.0; dim];
        let (out, _) = msdeform_attn(&query, &reference, std::slice::from_ref(&feat), &w).unwrap();
        for (c, o) in out.iter().enumerate() {
            assert!((o - feat.at(c, 1, 2)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_is_offset_independent() {
        let dim = 4;
        let mut rng = RngState::new(7);
        let w = DeformAttnWeights::new(&mut rng, dim, dim, 2, 1, 2, 2);
        let c_val = 0.8;
        let data = vec![c_val; dim * 6 * 6];
        let feat = FeatureMap::new(0, 1.0, Tensor::new(vec![dim, 6, 6], data).unwrap()).unwrap();
        let reference = ProjectedRef {
            levels: vec![(0.5, 0.5)],
            valid: true,
        };
        let query: Vec<f64> = (0..dim).map(|i| 0.1 * i as f64).collect();
        let (out, _) = msdeform_attn(&query, &reference, std::slice::from_ref(&feat), &w).unwrap();
        // Expected: sum_m W_m W'_m const (attention weights sum to 1).
        let const_vec = vec![c_val; dim];
        let mut expect = vec![0.0; dim];
        for m in 0..2 {
            let mut v = vec![0.0; 2];
            matvec(w.w_value[m].data(), 2, dim, &const_vec, &mut v);
            let mut p = vec![0.0; dim];
            matvec(w.w_out[m].data(), dim, 2, &v, &mut p);
            for (e, x) in expect.iter_mut().zip(&p) {
                *e += x;
            }
        }
        for (o, e) in out.iter().zip(&expect) {
            assert!((o - e).abs() < 1e-10, "{o} vs {e}");
        }
    }

    #[test]
    fn invalid_reference_contributes_exact_zero() {
        let dim = 4;
        let mut rng = RngState::new(9);
        let w = DeformAttnWeights::new(&mut rng, dim, dim, 2, 2, 2, 2);
        let feats = vec![feat_map(0, dim, 6, 6, 1), feat_map(1, dim, 3, 3, 2)];
        let reference = ProjectedRef::invalid(2);
        let query: Vec<f64> = (0..dim).map(|i| 0.3 - 0.1 * i as f64).collect();
        let (out, _) = msdeform_attn(&query, &reference, &feats, &w).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_weights_normalize_per_head() {
        let dim = 6;
        let mut rng = RngState::new(11);
        let mut w = DeformAttnWeights::new(&mut rng, dim, dim, 2, 2, 3, 3);
        // Give the logit predictor nonzero weights so the softmax is non-flat.
        let n = w.logit.w.numel();
        w.logit
            .w
            .set_data((0..n).map(|i| ((i % 13) as f64 - 6.0) / 10.0).collect())
            .unwrap();
        let feats = vec![feat_map(0, dim, 6, 6, 1), feat_map(1, dim, 3, 3, 2)];
        let reference = ProjectedRef {
            levels: vec![(0.4, 0.6), (0.4, 0.6)],
            valid: true,
        };
        let query: Vec<f64> = (0..dim).map(|i| (i as f64 - 2.0) / 4.0).collect();
        let (_, cache) = msdeform_attn(&query, &reference, &feats, &w).unwrap();
        for a in &cache.attn {
            let s: f64 = a.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn level_count_mismatch_is_config_error() {
        let dim = 4;
        let mut rng = RngState::new(13);
        let w = DeformAttnWeights::new(&mut rng, dim, dim, 1, 2, 1, 2);
        let feats = vec![feat_map(0, dim, 4, 4, 1)];
        let reference = ProjectedRef {
            levels: vec![(0.5, 0.5), (0.5, 0.5)],
            valid: true,
        };
        assert!(msdeform_attn(&[0.0; 4], &reference, &feats, &w).is_err());
    }

    #[test]
    fn full_gradient_matches_central_differences() {
        let dim = 5;
        let mut rng = RngState::new(21);
        let mut w = DeformAttnWeights::new(&mut rng, dim, 3, 2, 2, 2, 2);
        // Non-zero offset/logit weights exercise every gradient path.
        let n_off = w.offset.w.numel();
        w.offset
            .w
            .set_data((0..n_off).map(|i| ((i * 7 % 11) as f64 - 5.0) / 40.0).collect())
            .unwrap();
        let n_log = w.logit.w.numel();
        w.logit
            .w
            .set_data((0..n_log).map(|i| ((i * 5 % 9) as f64 - 4.0) / 10.0).collect())
            .unwrap();
        let feats = vec![feat_map(0, 3, 6, 6, 31), feat_map(1, 3, 3, 3, 32)];
        let reference = ProjectedRef {
            levels: vec![(0.43, 0.57), (0.43, 0.57)],
            valid: true,
        };
        let query = Tensor::new(vec![dim], vec![0.2, -0.4, 0.7, 0.1, -0.3]).unwrap();
        let dout: Vec<f64> = (0..dim).map(|i| ((i % 3) as f64 - 1.0) * 0.7 + 0.1).collect();

        let (_, cache) = msdeform_attn(query.data(), &reference, &feats, &w).unwrap();
        let mut probe = w.clone();
        let mut dquery = vec![0.0; dim];
        let mut dfeats: Vec<Vec<f64>> = feats.iter().map(|f| vec![0.0; f.numel()]).collect();
        msdeform_attn_backward(&mut probe, &cache, &feats, &dout, &mut dquery, &mut dfeats);

        // d/d query
        let qerr = crate::numerics::grad_check(
            |t| {
                let (o, _) = msdeform_attn(t.data(), &reference, &feats, &w).unwrap();
                Ok(o.iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &query,
            &dquery,
            1e-5,
        )
        .unwrap();
        assert!(qerr < 1e-6, "query grad rel err {qerr}");

        // d/d feature values (level 0)
        let f0 = feats[0].data.clone();
        let ferr = crate::numerics::grad_check(
            |t| {
                let mut feats2 = feats.clone();
                feats2[0] = FeatureMap::new(0, 1.0, t.clone()).unwrap();
                let (o, _) = msdeform_attn(query.data(), &reference, &feats2, &w).unwrap();
                Ok(o.iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &f0,
            &dfeats[0],
            1e-5,
        )
        .unwrap();
        assert!(ferr < 1e-6, "feature grad rel err {ferr}");

        // d/d offset weights
        let off_w = w.offset.w.clone();
        let oerr = crate::numerics::grad_check(
            |t| {
                let mut w2 = w.clone();
                w2.offset.w = t.clone();
                let (o, _) = msdeform_attn(query.data(), &reference, &feats, &w2).unwrap();
                Ok(o.iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &off_w,
            probe.offset.w.grad().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(oerr < 1e-5, "offset grad rel err {oerr}");

        // d/d logit weights
        let log_w = w.logit.w.clone();
        let lerr = crate::numerics::grad_check(
            |t| {
                let mut w2 = w.clone();
                w2.logit.w = t.clone();
                let (o, _) = msdeform_attn(query.data(), &reference, &feats, &w2).unwrap();
                Ok(o.iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &log_w,
            probe.logit.w.grad().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(lerr < 1e-5, "logit grad rel err {lerr}");

        // d/d value projection of head 0
        let val_w = w.w_value[0].clone();
        let verr = crate::numerics::grad_check(
            |t| {
                let mut w2 = w.clone();
                w2.w_value[0] = t.clone();
                let (o, _) = msdeform_attn(query.data(), &reference, &feats, &w2).unwrap();
                Ok(o.iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &val_w,
            probe.w_value[0].grad().unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(verr < 1e-6, "value grad rel err {verr}");
    }
}
