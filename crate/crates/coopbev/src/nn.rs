//! Hand-rolled trainable layers. Every layer exposes a forward/backward pair;
//! backward accumulates into the layer's parameter gradients and into the
//! caller-provided input gradient. There is no runtime autodiff graph.

use crate::error::{Error, Result};
use crate::numerics::{matvec, matvec_backward, RngState, Tensor};

/// Visits every parameter tensor under a dotted name, in a fixed order.
/// Drives checkpointing, the optimizer, global-norm clipping, and the
/// dead-parameter check.
pub trait Params {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(rng: &mut RngState, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::new(
            vec![out_dim, in_dim],
            (0..in_dim * out_dim).map(|_| rng.normal_scaled(std)).collect(),
        )
        .expect("finite init");
        let b = bias.then(|| Tensor::zeros(vec![out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// All-zero weights; used for offset/logit predictors that should start
    /// as identity-like no-ops.
    pub fn zeroed(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            w: Tensor::zeros(vec![out_dim, in_dim]),
            b: bias.then(|| Tensor::zeros(vec![out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out_dim];
        self.forward_into(x, &mut y);
        y
    }

    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        matvec(self.w.data(), self.out_dim, self.in_dim, x, y);
        if let Some(b) = &self.b {
            for (yi, bi) in y.iter_mut().zip(b.data()) {
                *yi += bi;
            }
        }
    }

    /// Accumulates parameter gradients and adds the input gradient into `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let (out_dim, in_dim) = (self.out_dim, self.in_dim);
        let w = self.w.data().to_vec();
        matvec_backward(&w, out_dim, in_dim, x, dy, self.w.grad_mut(), dx);
        if let Some(b) = self.b.as_mut() {
            let g = b.grad_mut();
            for (gi, di) in g.iter_mut().zip(dy) {
                *gi += di;
            }
        }
    }
}

impl Params for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "w"), &mut self.w);
        if let Some(b) = self.b.as_mut() {
            f(&join_name(prefix, "b"), b);
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::new(vec![dim], vec![1.0; dim]).expect("finite"),
            beta: Tensor::zeros(vec![dim]),
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let n = self.dim as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + self.eps).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
        let y = xhat
            .iter()
            .zip(self.gamma.data().iter().zip(self.beta.data()))
            .map(|(h, (g, b))| h * g + b)
            .collect();
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LnCache, dy: &[f64], dx: &mut [f64]) {
        let n = self.dim as f64;
        let gamma = self.gamma.data().to_vec();
        {
            let gg = self.gamma.grad_mut();
            for i in 0..self.dim {
                gg[i] += dy[i] * cache.xhat[i];
            }
        }
        {
            let gb = self.beta.grad_mut();
            for i in 0..self.dim {
                gb[i] += dy[i];
            }
        }
        let dxhat: Vec<f64> = (0..self.dim).map(|i| dy[i] * gamma[i]).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        for i in 0..self.dim {
            dx[i] += cache.rstd * (dxhat[i] - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat);
        }
    }
}

impl Params for LayerNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &mut [f64]) -> Vec<bool> {
    let mut mask = vec![false; x.len()];
    for (v, m) in x.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu_backward(mask: &[bool], dy: &mut [f64]) {
    for (d, m) in dy.iter_mut().zip(mask) {
        if !*m {
            *d = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d (dense, square kernel)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Tensor, // (cout, cin, k, k)
    pub b: Tensor, // (cout)
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut RngState, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::new(
            vec![cout, cin, k, k],
            (0..cout * cin * k * k).map(|_| rng.normal_scaled(std)).collect(),
        )
        .expect("finite init");
        Conv2d {
            w,
            b: Tensor::zeros(vec![cout]),
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let hh = h + 2 * self.pad;
        let ww = w + 2 * self.pad;
        if hh < self.k || ww < self.k {
            return Err(Error::config(format!(
                "conv input {h}x{w} smaller than kernel {} with pad {}",
                self.k, self.pad
            )));
        }
        Ok(((hh - self.k) / self.stride + 1, (ww - self.k) / self.stride + 1))
    }

    /// Input is (cin, h, w) row-major, output (cout, oh, ow).
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> Result<(Vec<f64>, usize, usize)> {
        let (oh, ow) = self.out_size(h, w)?;
        let mut y = vec![0.0; self.cout * oh * ow];
        let wd = self.w.data();
        let k = self.k;
        for co in 0..self.cout {
            let bias = self.b.data()[co];
            for oy in 0..oh {
                let iy0 = oy * self.stride;
                for ox in 0..ow {
                    let ix0 = ox * self.stride;
                    let mut acc = bias;
                    for ci in 0..self.cin {
                        let wbase = ((co * self.cin + ci) * k) * k;
                        let xbase = ci * h * w;
                        for ky in 0..k {
                            let iy = iy0 + ky;
                            if iy < self.pad || iy >= h + self.pad {
                                continue;
                            }
                            let row = xbase + (iy - self.pad) * w;
                            let wrow = wbase + ky * k;
                            for kx in 0..k {
                                let ix = ix0 + kx;
                                if ix < self.pad || ix >= w + self.pad {
                                    continue;
                                }
                                acc += wd[wrow + kx] * x[row + (ix - self.pad)];
                            }
                        }
                    }
                    y[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Ok((y, oh, ow))
    }

    pub fn backward(
        &mut self,
        x: &[f64],
        h: usize,
        w: usize,
        dy: &[f64],
        oh: usize,
        ow: usize,
        dx: &mut [f64],
    ) {
        let k = self.k;
        let wd = self.w.data().to_vec();
        {
            let gw = self.w.grad_mut();
            for co in 0..self.cout {
                for oy in 0..oh {
                    let iy0 = oy * self.stride;
                    for ox in 0..ow {
                        let g = dy[(co * oh + oy) * ow + ox];
                        if g == 0.0 {
                            continue;
                        }
                        let ix0 = ox * self.stride;
                        for ci in 0..self.cin {
                            let wbase = ((co * self.cin + ci) * k) * k;
                            let xbase = ci * h * w;
                            for ky in 0..k {
                                let iy = iy0 + ky;
                                if iy < self.pad || iy >= h + self.pad {
                                    continue;
                                }
                                let row = xbase + (iy - self.pad) * w;
                                for kx in 0..k {
                                    let ix = ix0 + kx;
                                    if ix < self.pad || ix >= w + self.pad {
                                        continue;
                                    }
                                    let xv = x[row + (ix - self.pad)];
                                    gw[wbase + ky * k + kx] += g * xv;
                                    dx[row + (ix - self.pad)] += g * wd[wbase + ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = self.b.grad_mut();
        for co in 0..self.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    gb[co] += dy[(co * oh + oy) * ow + ox];
                }
            }
        }
    }
}

impl Params for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join_name(prefix, "w"), &mut self.w);
        f(&join_name(prefix, "b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling (FPN top-down path)
// ---------------------------------------------------------------------------

pub fn upsample2x_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h * 2, w * 2);
    let mut y = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                y[(ci * oh + oy) * ow + ox] = x[(ci * h + oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let (oh, ow) = (h * 2, w * 2);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[(ci * h + oy / 2) * w + ox / 2] += dy[(ci * oh + oy) * ow + ox];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Full multi-head self-attention over a small query set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct MhaCache {
    pub n: usize,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Softmaxed attention, one (n x n) block per head.
    pub attn: Vec<f64>,
    pub mixed: Vec<f64>,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut RngState, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim, true),
            wk: Linear::new(rng, dim, dim, true),
            wv: Linear::new(rng, dim, dim, true),
            wo: Linear::new(rng, dim, dim, true),
            heads,
            dim,
        }
    }

    /// Self-attention over `x` = (n, dim) rows. Returns (n, dim) output.
    pub fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, MhaCache) {
        let d = self.dim;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut q = vec![0.0; n * d];
        let mut k = vec![0.0; n * d];
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            self.wq.forward_into(&x[i * d..(i + 1) * d], &mut q[i * d..(i + 1) * d]);
            self.wk.forward_into(&x[i * d..(i + 1) * d], &mut k[i * d..(i + 1) * d]);
            self.wv.forward_into(&x[i * d..(i + 1) * d], &mut v[i * d..(i + 1) * d]);
        }
        let mut attn = vec![0.0; self.heads * n * n];
        let mut mixed = vec![0.0; n * d];
        for hh in 0..self.heads {
            let off = hh * hd;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut attn[(hh * n + i) * n..(hh * n + i + 1) * n];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + hd];
                    *r = scale * crate::numerics::dot(qi, kj);
                }
                crate::numerics::softmax_inplace(row);
                let out = &mut mixed[i * d + off..i * d + off + hd];
                for (j, a) in row.iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
        }
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            self.wo.forward_into(&mixed[i * d..(i + 1) * d], &mut y[i * d..(i + 1) * d]);
        }
        (
            y,
            MhaCache {
                n,
                q,
                k,
                v,
                attn,
                mixed,
            },
        )
    }

    pub fn backward(&mut self, x: &[f64], cache: &MhaCache, dy: &[f64], dx: &mut [f64]) {
        let n = cache.n;
        let d = self.dim;
        let hd = d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dmixed = vec![0.0; n * d];
        for i in 0..n {
            self.wo.backward(
                &cache.mixed[i * d..(i + 1) * d],
                &dy[i * d..(i + 1) * d],
                &mut dmixed[i * d..(i + 1) * d],
            );
        }
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dlogits_row = vec![0.0; n];
        for hh in 0..self.heads {
            let off = hh * hd;
            for i in 0..n {
                let row = &cache.attn[(hh * n + i) * n..(hh * n + i + 1) * n];
                let dout = &dmixed[i * d + off..i * d + off + hd];
                // d attn weights and d v
                let mut dattn = vec![0.0; n];
                for j in 0..n {
                    let vj = &cache.v[j * d + off..j * d + off + hd];
                    dattn[j] = crate::numerics::dot(dout, vj);
                    let dvj = &mut dv[j * d + off..j * d + off + hd];
                    for (dvv, o) in dvj.iter_mut().zip(dout) {
                        *dvv += row[j] * o;
                    }
                }
                crate::numerics::softmax_backward(row, &dattn, &mut dlogits_row[..n]);
                let qi = cache.q[i * d + off..i * d + off + hd].to_vec();
                for j in 0..n {
                    let g = dlogits_row[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let kj = &cache.k[j * d + off..j * d + off + hd];
                    let dqi = &mut dq[i * d + off..i * d + off + hd];
                    for (a, b) in dqi.iter_mut().zip(kj) {
                        *a += g * b;
                    }
                    let dkj = &mut dk[j * d + off..j * d + off + hd];
                    for (a, b) in dkj.iter_mut().zip(&qi) {
                        *a += g * b;
                    }
                }
            }
        }
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let dxi = &mut dx[i * d..(i + 1) * d];
            self.wq.backward(xi, &dq[i * d..(i + 1) * d], dxi);
            self.wk.backward(xi, &dk[i * d..(i + 1) * d], dxi);
            self.wv.backward(xi, &dv[i * d..(i + 1) * d], dxi);
        }
    }
}

impl Params for MultiHeadAttention {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.wq.visit_params(&join_name(prefix, "wq"), f);
        self.wk.visit_params(&join_name(prefix, "wk"), f);
        self.wv.visit_params(&join_name(prefix, "wv"), f);
        self.wo.visit_params(&join_name(prefix, "wo"), f);
    }
}

// ---------------------------------------------------------------------------
// Feature pyramid fusion: 1x1 laterals + top-down nearest upsampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub out_channels: usize,
}

#[derive(Debug, Clone)]
pub struct FpnCache {
    /// Lateral conv inputs (the backbone stage outputs).
    pub inputs: Vec<(Vec<f64>, usize, usize, usize)>, // (data, c, h, w)
    pub merged: Vec<(usize, usize)>,                  // (h, w) per level
}

impl Fpn {
    pub fn new(rng: &mut RngState, in_channels: &[usize], out_channels: usize) -> Self {
        let laterals = in_channels
            .iter()
            .map(|c| Conv2d::new(rng, *c, out_channels, 1, 1, 0))
            .collect();
        Fpn {
            laterals,
            out_channels,
        }
    }

    /// Finest-first inputs; each coarser level must be exactly half the
    /// previous extent. Returns fused maps at the input extents.
    pub fn forward(
        &self,
        inputs: Vec<(Vec<f64>, usize, usize, usize)>,
    ) -> Result<(Vec<Vec<f64>>, FpnCache)> {
        let n = inputs.len();
        if n != self.laterals.len() {
            return Err(Error::config(format!(
                "FPN got {n} levels, configured for {}",
                self.laterals.len()
            )));
        }
        let mut lats = Vec::with_capacity(n);
        let mut dims = Vec::with_capacity(n);
        for (i, (x, _c, h, w)) in inputs.iter().enumerate() {
            let (y, oh, ow) = self.laterals[i].forward(x, *h, *w)?;
            lats.push(y);
            dims.push((oh, ow));
        }
        // Top-down merge, coarsest to finest.
        let mut merged = lats;
        for i in (0..n.saturating_sub(1)).rev() {
            let (ch, cw) = dims[i + 1];
            let up = upsample2x_forward(&merged[i + 1], self.out_channels, ch, cw);
            if up.len() != merged[i].len() {
                return Err(Error::config(
                    "FPN levels are not exact factor-of-two sizes".to_string(),
                ));
            }
            for (m, u) in merged[i].iter_mut().zip(&up) {
                *m += u;
            }
        }
        Ok((
            merged,
            FpnCache {
                inputs,
                merged: dims,
            },
        ))
    }

    /// `douts` are gradients w.r.t. the fused outputs; returns gradients
    /// w.r.t. the stage inputs.
    pub fn backward(&mut self, cache: &FpnCache, douts: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = cache.inputs.len();
        let mut glat: Vec<Vec<f64>> = douts.to_vec();
        // Reverse of the top-down merge: finest to coarsest.
        for i in 0..n.saturating_sub(1) {
            let (ch, cw) = cache.merged[i + 1];
            let mut up_grad = vec![0.0; self.out_channels * ch * cw];
            upsample2x_backward(&glat[i], self.out_channels, ch, cw, &mut up_grad);
            for (g, u) in glat[i + 1].iter_mut().zip(&up_grad) {
                *g += u;
            }
        }
        let mut dinputs = Vec::with_capacity(n);
        for i in 0..n {
            let (x, c, h, w) = &cache.inputs[i];
            let (oh, ow) = cache.merged[i];
            let mut dx = vec![0.0; c * h * w];
            self.laterals[i].backward(x, *h, *w, &glat[i], oh, ow, &mut dx);
            dinputs.push(dx);
        }
        dinputs
    }
}

impl Params for Fpn {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, lat) in self.laterals.iter_mut().enumerate() {
            lat.visit_params(&join_name(prefix, &format!("lateral{i}")), f);
        }
    }
}
