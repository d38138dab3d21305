//! Temporal self-attention over the BEV query grid: each current query
//! attends to itself and to its ego-motion-aligned predecessor from the
//! previous frame. History enters as data; gradients flow only into the
//! current frame's queries and the layer weights.

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::nn::{join_name, LayerNorm, Linear, LnCache, Params};
use crate::numerics::{dot, softmax_backward, softmax_inplace, RngState, Tensor};

/// Integer cell shift that re-indexes the previous BEV grid into the current
/// one after an ego translation. Rotation is not compensated; the presets
/// keep ego yaw fixed between frames.
pub fn cell_shift(prev_pose: &Pose, cur_pose: &Pose, cell_dx: f64, cell_dy: f64) -> (i64, i64) {
    let shift_cols = ((cur_pose.x - prev_pose.x) / cell_dx).round() as i64;
    let shift_rows = ((cur_pose.y - prev_pose.y) / cell_dy).round() as i64;
    (shift_rows, shift_cols)
}

/// Shifts the previous frame's query grid by the ego pose delta, zero-filling
/// cells that fall off the grid. `prev` is (grid_h * grid_w, d).
pub fn align_prev_queries(
    prev: &Tensor,
    grid_h: usize,
    grid_w: usize,
    shift: (i64, i64),
) -> Result<Tensor> {
    let shape = prev.shape();
    if shape.len() != 2 || shape[0] != grid_h * grid_w {
        return Err(Error::config("previous query grid shape mismatch".to_string()));
    }
    let d = shape[1];
    let (shift_rows, shift_cols) = shift;
    let mut out = vec![0.0; prev.numel()];
    for row in 0..grid_h as i64 {
        for col in 0..grid_w as i64 {
            let src_row = row + shift_rows;
            let src_col = col + shift_cols;
            if src_row < 0 || src_col < 0 || src_row >= grid_h as i64 || src_col >= grid_w as i64 {
                continue;
            }
            let dst = (row as usize * grid_w + col as usize) * d;
            let src = (src_row as usize * grid_w + src_col as usize) * d;
            out[dst..dst + d].copy_from_slice(&prev.data()[src..src + d]);
        }
    }
    Tensor::new(vec![grid_h * grid_w, d], out)
}

#[derive(Debug, Clone)]
pub struct TemporalSelfAttn {
    pub ln_pre: LayerNorm,
    pub ln_post: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct TemporalQueryCache {
    pub ln_now: LnCache,
    pub h_now: Vec<f64>,
    pub ln_prev: Option<LnCache>,
    pub h_prev: Option<Vec<f64>>,
    pub q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub vals: Vec<Vec<f64>>,
    /// Per head: softmax over the 1 or 2 keys.
    pub attn: Vec<Vec<f64>>,
    pub mixed: Vec<f64>,
    pub ln_out: LnCache,
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    pub per_query: Vec<TemporalQueryCache>,
}

impl TemporalSelfAttn {
    pub fn new(rng: &mut RngState, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0);
        // Small output init keeps the layer near-identity at the start so
        // long inference chains stay close to the training distribution.
        let mut wo = Linear::new(rng, dim, dim, true);
        let scaled: Vec<f64> = wo.w.data().iter().map(|v| v * 0.2).collect();
        wo.w.set_data(scaled).expect("finite");
        TemporalSelfAttn {
            ln_pre: LayerNorm::new(dim),
            ln_post: LayerNorm::new(dim),
            wq: Linear::new(rng, dim, dim, true),
            wk: Linear::new(rng, dim, dim, true),
            wv: Linear::new(rng, dim, dim, true),
            wo,
            heads,
            dim,
        }
    }

    /// `q_now` and optional `prev_aligned` are (n, dim). On the first frame
    /// (no history) each query attends to itself alone.
    pub fn forward(&self, q_now: &Tensor, prev_aligned: Option<&Tensor>) -> Result<(Tensor, TemporalCache)> {
        let shape = q_now.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::config("temporal attention input shape mismatch".to_string()));
        }
        if let Some(p) = prev_aligned {
            if p.shape() != shape.as_slice() {
                return Err(Error::config("previous queries must match current shape".to_string()));
            }
        }
        let n = shape[0];
        let d = self.dim;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = vec![0.0; n * d];
        let mut per_query = Vec::with_capacity(n);
        for i in 0..n {
            let x = &q_now.data()[i * d..(i + 1) * d];
            let (h_now, ln_now) = self.ln_pre.forward(x);
            let (h_prev, ln_prev) = match prev_aligned {
                Some(p) => {
                    let (h, c) = self.ln_pre.forward(&p.data()[i * d..(i + 1) * d]);
                    (Some(h), Some(c))
                }
                None => (None, None),
            };
            let q = self.wq.forward(&h_now);
            let mut keys = vec![self.wk.forward(&h_now)];
            let mut vals = vec![self.wv.forward(&h_now)];
            if let Some(hp) = &h_prev {
                keys.push(self.wk.forward(hp));
                vals.push(self.wv.forward(hp));
            }
            let mut mixed = vec![0.0; d];
            let mut attn = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let off = head * hd;
                let mut scores: Vec<f64> = keys
                    .iter()
                    .map(|k| scale * dot(&q[off..off + hd], &k[off..off + hd]))
                    .collect();
                softmax_inplace(&mut scores);
                for (j, a) in scores.iter().enumerate() {
                    for (m, v) in mixed[off..off + hd].iter_mut().zip(&vals[j][off..off + hd]) {
                        *m += a * v;
                    }
                }
                attn.push(scores);
            }
            let o = self.wo.forward(&mixed);
            let sum: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (y, ln_out) = self.ln_post.forward(&sum);
            out[i * d..(i + 1) * d].copy_from_slice(&y);
            per_query.push(TemporalQueryCache {
                ln_now,
                h_now,
                ln_prev,
                h_prev,
                q,
                keys,
                vals,
                attn,
                mixed,
                ln_out,
            });
        }
        Ok((Tensor::new(vec![n, d], out)?, TemporalCache { per_query }))
    }

    /// Backward into the current queries only; history is treated as data.
    pub fn backward(&mut self, cache: &TemporalCache, dout: &[f64]) -> Vec<f64> {
        let n = cache.per_query.len();
        let d = self.dim;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dx = vec![0.0; n * d];
        for (i, qc) in cache.per_query.iter().enumerate() {
            let dy = &dout[i * d..(i + 1) * d];
            let mut dsum = vec![0.0; d];
            self.ln_post.backward(&qc.ln_out, dy, &mut dsum);
            for (g, s) in dx[i * d..(i + 1) * d].iter_mut().zip(&dsum) {
                *g += s;
            }
            let mut dmixed = vec![0.0; d];
            self.wo.backward(&qc.mixed, &dsum, &mut dmixed);
            let n_keys = qc.keys.len();
            let mut dq = vec![0.0; d];
            let mut dkeys = vec![vec![0.0; d]; n_keys];
            let mut dvals = vec![vec![0.0; d]; n_keys];
            for head in 0..self.heads {
                let off = head * hd;
                let attn = &qc.attn[head];
                let mut dattn = vec![0.0; n_keys];
                for j in 0..n_keys {
                    dattn[j] = dot(&dmixed[off..off + hd], &qc.vals[j][off..off + hd]);
                    for (dv, g) in dvals[j][off..off + hd].iter_mut().zip(&dmixed[off..off + hd]) {
                        *dv += attn[j] * g;
                    }
                }
                let mut dscores = vec![0.0; n_keys];
                softmax_backward(attn, &dattn, &mut dscores);
                for j in 0..n_keys {
                    let g = dscores[j] * scale;
                    for (a, b) in dq[off..off + hd].iter_mut().zip(&qc.keys[j][off..off + hd]) {
                        *a += g * b;
                    }
                    for (a, b) in dkeys[j][off..off + hd].iter_mut().zip(&qc.q[off..off + hd]) {
                        *a += g * b;
                    }
                }
            }
            let mut dh_now = vec![0.0; d];
            self.wq.backward(&qc.h_now, &dq, &mut dh_now);
            self.wk.backward(&qc.h_now, &dkeys[0], &mut dh_now);
            self.wv.backward(&qc.h_now, &dvals[0], &mut dh_now);
            if let (Some(hp), Some(ln_prev)) = (&qc.h_prev, &qc.ln_prev) {
                let mut dh_prev = vec![0.0; d];
                self.wk.backward(hp, &dkeys[1], &mut dh_prev);
                self.wv.backward(hp, &dvals[1], &mut dh_prev);
                // History is detached: parameter grads accumulate, the input
                // gradient is dropped.
                let mut sink = vec![0.0; d];
                self.ln_pre.backward(ln_prev, &dh_prev, &mut sink);
            }
            self.ln_pre.backward(&qc.ln_now, &dh_now, &mut dx[i * d..(i + 1) * d]);
        }
        dx
    }
}

impl Params for TemporalSelfAttn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln_pre.visit_params(&join_name(prefix, "ln_pre"), f);
        self.ln_post.visit_params(&join_name(prefix, "ln_post"), f);
        self.wq.visit_params(&join_name(prefix, "wq"), f);
        self.wk.visit_params(&join_name(prefix, "wk"), f);
        self.wv.visit_params(&join_name(prefix, "wv"), f);
        self.wo.visit_params(&join_name(prefix, "wo"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queries(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn one_cell_translation_shifts_grid_by_one() {
        let shift = cell_shift(
            &Pose::new(0.0, 0.0, 0.0, 0.0),
            &Pose::new(2.0, 0.0, 0.0, 0.0),
            2.0,
            2.0,
        );
        assert_eq!(shift, (0, 1));
        let d = 2;
        let prev = Tensor::new(
            vec![4, d],
            vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0], // 2x2 grid
        )
        .unwrap();
        let aligned = align_prev_queries(&prev, 2, 2, shift).unwrap();
        // cell (0,0) now shows prev cell (0,1); cell (0,1) is zero-filled.
        assert_eq!(&aligned.data()[0..2], &[2.0, 2.0]);
        assert_eq!(&aligned.data()[2..4], &[0.0, 0.0]);
        assert_eq!(&aligned.data()[4..6], &[4.0, 4.0]);
        assert_eq!(&aligned.data()[6..8], &[0.0, 0.0]);
    }

    #[test]
    fn zero_shift_is_identity() {
        let prev = queries(9, 4, 3);
        let aligned = align_prev_queries(&prev, 3, 3, (0, 0)).unwrap();
        assert_eq!(aligned.data(), prev.data());
    }

    #[test]
    fn cold_start_matches_single_key_attention() {
        let mut rng = RngState::new(5);
        let attn = TemporalSelfAttn::new(&mut rng, 8, 2);
        let q = queries(4, 8, 7);
        let (out, cache) = attn.forward(&q, None).unwrap();
        // With one key the softmax weight is exactly 1, so the mixed vector
        // equals wv(ln(x)) and out = ln_post(x + wo(wv(ln(x)))).
        for (i, qc) in cache.per_query.iter().enumerate() {
            assert_eq!(qc.keys.len(), 1);
            for head in &qc.attn {
                assert_eq!(head.len(), 1);
                assert!((head[0] - 1.0).abs() < 1e-15);
            }
            let x = &q.data()[i * 8..(i + 1) * 8];
            let (h, _) = attn.ln_pre.forward(x);
            let v = attn.wv.forward(&h);
            let o = attn.wo.forward(&v);
            let sum: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (expect, _) = attn.ln_post.forward(&sum);
            for (a, b) in out.data()[i * 8..(i + 1) * 8].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_history_matches_direct_two_key_evaluation() {
        // prev == now with zero ego motion: keys are duplicated, so the
        // attention mix must equal the single-key value mix regardless of
        // scores, and the output is checked against a direct evaluation.
        let mut rng = RngState::new(9);
        let attn = TemporalSelfAttn::new(&mut rng, 8, 2);
        let q = queries(5, 8, 11);
        let aligned = align_prev_queries(&q, 5, 1, (0, 0)).unwrap();
        let (out, _) = attn.forward(&q, Some(&aligned)).unwrap();
        let d = 8;
        let hd = 4;
        let scale = 1.0 / (hd as f64).sqrt();
        for i in 0..5 {
            let x = &q.data()[i * d..(i + 1) * d];
            let (h, _) = attn.ln_pre.forward(x);
            let qv = attn.wq.forward(&h);
            let k = attn.wk.forward(&h);
            let v = attn.wv.forward(&h);
            let mut mixed = vec![0.0; d];
            for head in 0..2 {
                let off = head * hd;
                let s = scale * dot(&qv[off..off + hd], &k[off..off + hd]);
                let mut sc = vec![s, s];
                softmax_inplace(&mut sc);
                for (m, vv) in mixed[off..off + hd].iter_mut().zip(&v[off..off + hd]) {
                    *m += (sc[0] + sc[1]) * vv;
                }
            }
            let o = attn.wo.forward(&mixed);
            let sum: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let (expect, _) = attn.ln_post.forward(&sum);
            for (a, b) in out.data()[i * d..(i + 1) * d].iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_fd_with_history() {
        let mut rng = RngState::new(13);
        let attn = TemporalSelfAttn::new(&mut rng, 6, 2);
        let q = queries(3, 6, 15);
        let prev = queries(3, 6, 16);
        let (out, cache) = attn.forward(&q, Some(&prev)).unwrap();
        let dout: Vec<f64> = (0..out.numel()).map(|i| ((i * 3 % 11) as f64 - 5.0) / 7.0).collect();
        let mut probe = attn.clone();
        let dx = probe.backward(&cache, &dout);
        let err = crate::numerics::grad_check(
            |t| {
                let (o, _) = attn.forward(t, Some(&prev)).unwrap();
                Ok(o.data().iter().zip(&dout).map(|(a, b)| a * b).sum())
            },
            &q,
            &dx,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}
