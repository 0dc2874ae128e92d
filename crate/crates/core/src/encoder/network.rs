//! Layer kernels, parameter layout and hand-written backpropagation.
//!
//! Activations are row-major `[channels][time]` buffers of `f64`.
//!
//! ```text
//! x (C x T)
//!  -> depthwise temporal conv, one bank per dilation   (nd*C x T), LeakyReLU
//!  -> spatial conv over S adjacent EEG channels         (H*P x T),  LeakyReLU
//!  -> residual blocks: h + pointwise(LeakyReLU(depthwise(h)))
//!  -> global average pool over time                    (W = H*P)
//!  -> dropout (training only)
//!  -> linear projection                                 (D)
//! ```

use serde::{Deserialize, Serialize};

use super::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub c: usize,
    pub t: usize,
    pub nd: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
struct BlockOffsets {
    dw: usize,
    db: usize,
    pw: usize,
    pb: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub dims: Dims,
    pub segments: Vec<Segment>,
    pub total: usize,
    tw: usize,
    tb: usize,
    sw: usize,
    sb: usize,
    blocks: Vec<BlockOffsets>,
    ow: usize,
    ob: usize,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig, channels: usize, samples: usize) -> Self {
        let s = if cfg.spatial_kernel_channels == 0 { channels } else { cfg.spatial_kernel_channels };
        let p = channels - s + 1;
        let dims = Dims {
            c: channels,
            t: samples,
            nd: cfg.temporal_dilations.len(),
            k: cfg.temporal_kernel,
            s,
            p,
            h: cfg.hidden_width,
            w: cfg.hidden_width * p,
            d: cfg.output_dim,
        };
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            segments.push(Segment { name, offset, shape });
            offset
        };
        let tw = push("temporal.weight".into(), vec![dims.nd, dims.c, dims.k]);
        let tb = push("temporal.bias".into(), vec![dims.nd, dims.c]);
        let sw = push("spatial.weight".into(), vec![dims.h, dims.nd, dims.s]);
        let sb = push("spatial.bias".into(), vec![dims.h]);
        let blocks = (0..cfg.residual_blocks)
            .map(|r| BlockOffsets {
                dw: push(format!("block{r}.depthwise.weight"), vec![dims.w, dims.k]),
                db: push(format!("block{r}.depthwise.bias"), vec![dims.w]),
                pw: push(format!("block{r}.pointwise.weight"), vec![dims.w, dims.w]),
                pb: push(format!("block{r}.pointwise.bias"), vec![dims.w]),
            })
            .collect();
        let ow = push("projection.weight".into(), vec![dims.d, dims.w]);
        let ob = push("projection.bias".into(), vec![dims.d]);
        Self { dims, segments, total, tw, tb, sw, sb, blocks, ow, ob }
    }

    /// Fan-in of every segment, for initialization. Biases report 0.
    pub fn fan_in(&self, seg: &Segment) -> usize {
        let d = &self.dims;
        if seg.name.ends_with(".bias") {
            0
        } else if seg.name.starts_with("temporal") || seg.name.ends_with("depthwise.weight") {
            d.k
        } else if seg.name.starts_with("spatial") {
            d.nd * d.s
        } else {
            d.w
        }
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

/// Valid output range `[lo, hi)` for a tap displaced by `shift` samples.
#[inline]
fn tap_range(shift: isize, t: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

/// Same-length depthwise convolution with zero padding.
fn depthwise_forward(x: &[f64], w: &[f64], b: &[f64], ch: usize, t: usize, k: usize, dil: usize, out: &mut [f64]) {
    let half = (k / 2) as isize;
    for c in 0..ch {
        let xr = &x[c * t..(c + 1) * t];
        let o = &mut out[c * t..(c + 1) * t];
        o.fill(b[c]);
        for j in 0..k {
            let wv = w[c * k + j];
            let shift = (j as isize - half) * dil as isize;
            let (lo, hi) = tap_range(shift, t);
            for tt in lo..hi {
                o[tt] += wv * xr[(tt as isize + shift) as usize];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    ch: usize,
    t: usize,
    k: usize,
    dil: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let half = (k / 2) as isize;
    for c in 0..ch {
        let xr = &x[c * t..(c + 1) * t];
        let go = &dout[c * t..(c + 1) * t];
        db[c] += go.iter().sum::<f64>();
        for j in 0..k {
            let shift = (j as isize - half) * dil as isize;
            let (lo, hi) = tap_range(shift, t);
            let mut acc = 0.0;
            for tt in lo..hi {
                acc += go[tt] * xr[(tt as isize + shift) as usize];
            }
            dw[c * k + j] += acc;
            if let Some(dx) = dx.as_deref_mut() {
                let wv = w[c * k + j];
                let dxr = &mut dx[c * t..(c + 1) * t];
                for tt in lo..hi {
                    dxr[(tt as isize + shift) as usize] += wv * go[tt];
                }
            }
        }
    }
}

fn pointwise_forward(u: &[f64], w: &[f64], b: &[f64], width: usize, t: usize, out: &mut [f64]) {
    for i in 0..width {
        let o = &mut out[i * t..(i + 1) * t];
        o.fill(b[i]);
        for j in 0..width {
            let wv = w[i * width + j];
            if wv == 0.0 {
                continue;
            }
            for (ov, uv) in o.iter_mut().zip(&u[j * t..(j + 1) * t]) {
                *ov += wv * uv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pointwise_backward(
    u: &[f64],
    w: &[f64],
    dout: &[f64],
    width: usize,
    t: usize,
    dw: &mut [f64],
    db: &mut [f64],
    du: &mut [f64],
) {
    for i in 0..width {
        let go = &dout[i * t..(i + 1) * t];
        db[i] += go.iter().sum::<f64>();
        for j in 0..width {
            let ur = &u[j * t..(j + 1) * t];
            dw[i * width + j] += go.iter().zip(ur).map(|(a, b)| a * b).sum::<f64>();
            let wv = w[i * width + j];
            for (d, g) in du[j * t..(j + 1) * t].iter_mut().zip(go) {
                *d += wv * g;
            }
        }
    }
}

pub(crate) struct BlockCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

pub(crate) struct Cache {
    a1_pre: Vec<f64>,
    a1: Vec<f64>,
    s_pre: Vec<f64>,
    blocks: Vec<BlockCache>,
    mask: Option<Vec<f64>>,
    dropped: Vec<f64>,
    pub z: Vec<f64>,
    x: Vec<f64>,
}

pub(crate) struct Network<'a> {
    pub layout: &'a Layout,
    pub params: &'a [f64],
    pub cfg: &'a EncoderConfig,
}

impl Network<'_> {
    fn seg(&self, offset: usize, len: usize) -> &[f64] {
        &self.params[offset..offset + len]
    }

    /// Forward pass keeping every intermediate needed by [`Self::backward`].
    /// `mask` multiplies the pooled features (dropout); `None` is inference.
    pub fn forward(&self, x: &[f64], mask: Option<Vec<f64>>) -> Cache {
        let l = self.layout;
        let Dims { c, t, nd, k, s, p, h, w, d } = l.dims;
        let slope = self.cfg.leaky_relu_slope;
        debug_assert_eq!(x.len(), c * t);

        let mut a1_pre = vec![0.0; nd * c * t];
        for (a, &dil) in self.cfg.temporal_dilations.iter().enumerate() {
            depthwise_forward(
                x,
                self.seg(l.tw + a * c * k, c * k),
                self.seg(l.tb + a * c, c),
                c,
                t,
                k,
                dil,
                &mut a1_pre[a * c * t..(a + 1) * c * t],
            );
        }
        let a1: Vec<f64> = a1_pre.iter().map(|v| leaky(*v, slope)).collect();

        let sw = self.seg(l.sw, h * nd * s);
        let sb = self.seg(l.sb, h);
        let mut s_pre = vec![0.0; w * t];
        for hh in 0..h {
            for pp in 0..p {
                let o = &mut s_pre[(hh * p + pp) * t..(hh * p + pp + 1) * t];
                o.fill(sb[hh]);
                for a in 0..nd {
                    for j in 0..s {
                        let wv = sw[(hh * nd + a) * s + j];
                        let src = &a1[(a * c + pp + j) * t..(a * c + pp + j + 1) * t];
                        for (ov, iv) in o.iter_mut().zip(src) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
        let mut hcur: Vec<f64> = s_pre.iter().map(|v| leaky(*v, slope)).collect();

        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let mut pre = vec![0.0; w * t];
            depthwise_forward(&hcur, self.seg(b.dw, w * k), self.seg(b.db, w), w, t, k, 1, &mut pre);
            let act: Vec<f64> = pre.iter().map(|v| leaky(*v, slope)).collect();
            let mut v = vec![0.0; w * t];
            pointwise_forward(&act, self.seg(b.pw, w * w), self.seg(b.pb, w), w, t, &mut v);
            let next: Vec<f64> = hcur.iter().zip(&v).map(|(a, b)| a + b).collect();
            blocks.push(BlockCache { input: std::mem::replace(&mut hcur, next), pre, act });
        }

        let pooled: Vec<f64> = hcur.chunks_exact(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
        let dropped: Vec<f64> = match &mask {
            Some(m) => pooled.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => pooled.clone(),
        };
        let ow = self.seg(l.ow, d * w);
        let ob = self.seg(l.ob, d);
        let z = (0..d)
            .map(|i| ob[i] + ow[i * w..(i + 1) * w].iter().zip(&dropped).map(|(a, b)| a * b).sum::<f64>())
            .collect();

        Cache { a1_pre, a1, s_pre, blocks, mask, dropped, z, x: x.to_vec() }
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/dz.
    pub fn backward(&self, cache: &Cache, dz: &[f64], grads: &mut [f64]) {
        let l = self.layout;
        let Dims { c, t, nd, k, s, p, h, w, d } = l.dims;
        let slope = self.cfg.leaky_relu_slope;

        let ow = self.seg(l.ow, d * w);
        let mut dpooled = vec![0.0; w];
        for i in 0..d {
            let g = dz[i];
            grads[l.ob + i] += g;
            let row = &mut grads[l.ow + i * w..l.ow + (i + 1) * w];
            for (r, x) in row.iter_mut().zip(&cache.dropped) {
                *r += g * x;
            }
            for (dp, wv) in dpooled.iter_mut().zip(&ow[i * w..(i + 1) * w]) {
                *dp += g * wv;
            }
        }
        if let Some(m) = &cache.mask {
            dpooled.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }

        let mut dh: Vec<f64> = dpooled.iter().flat_map(|g| std::iter::repeat_n(g / t as f64, t)).collect();

        for (b, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            let mut dact = vec![0.0; w * t];
            let (dpw, rest) = grads.split_at_mut(b.pb);
            pointwise_backward(
                &bc.act,
                self.seg(b.pw, w * w),
                &dh,
                w,
                t,
                &mut dpw[b.pw..b.pw + w * w],
                &mut rest[..w],
                &mut dact,
            );
            for (g, x) in dact.iter_mut().zip(&bc.pre) {
                *g *= leaky_grad(*x, slope);
            }
            let (dw_all, rest) = grads.split_at_mut(b.db);
            depthwise_backward(
                &bc.input,
                self.seg(b.dw, w * k),
                &dact,
                w,
                t,
                k,
                1,
                &mut dw_all[b.dw..b.dw + w * k],
                &mut rest[..w],
                Some(&mut dh),
            );
        }

        let mut ds = dh;
        for (g, x) in ds.iter_mut().zip(&cache.s_pre) {
            *g *= leaky_grad(*x, slope);
        }
        let sw = self.seg(l.sw, h * nd * s);
        let mut da1 = vec![0.0; nd * c * t];
        for hh in 0..h {
            for pp in 0..p {
                let go = &ds[(hh * p + pp) * t..(hh * p + pp + 1) * t];
                grads[l.sb + hh] += go.iter().sum::<f64>();
                for a in 0..nd {
                    for j in 0..s {
                        let idx = (hh * nd + a) * s + j;
                        let row = (a * c + pp + j) * t;
                        let src = &cache.a1[row..row + t];
                        grads[l.sw + idx] += go.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                        let wv = sw[idx];
                        for (dv, g) in da1[row..row + t].iter_mut().zip(go) {
                            *dv += wv * g;
                        }
                    }
                }
            }
        }
        for (g, x) in da1.iter_mut().zip(&cache.a1_pre) {
            *g *= leaky_grad(*x, slope);
        }
        for (a, &dil) in self.cfg.temporal_dilations.iter().enumerate() {
            let (dw_all, rest) = grads.split_at_mut(l.tb);
            depthwise_backward(
                &cache.x,
                self.seg(l.tw + a * c * k, c * k),
                &da1[a * c * t..(a + 1) * c * t],
                c,
                t,
                k,
                dil,
                &mut dw_all[l.tw + a * c * k..l.tw + (a + 1) * c * k],
                &mut rest[a * c..(a + 1) * c],
                None,
            );
        }
    }
}
