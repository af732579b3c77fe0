//! Toy conditional score network.
//!
//! Input projection, two single-head attention blocks with tanh
//! feed-forwards, output projection. The attention q/k/v/out projections
//! are the adapter injection sites; q/k/v project the hidden state up to a
//! wider attention dimension so the adapted layers have more output rows
//! than input columns, mirroring the asymmetric projection budget of the
//! backbone this stands in for. Everything is written against explicit
//! analytic backward passes so adapter gradients can be verified by finite
//! differences.

use crate::adapter::{AdapterBank, LayerGradients};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::streams;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Mel bins.
    pub f_dim: usize,
    /// Hidden width of the residual stream.
    pub hidden: usize,
    /// Attention q/k/v width.
    pub attn_dim: usize,
    /// Feed-forward width.
    pub ff_dim: usize,
    pub blocks: usize,
    pub n_codes: usize,
    /// Rows of the training-speaker embedding table.
    pub n_speakers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            f_dim: 16,
            hidden: 32,
            attn_dim: 128,
            ff_dim: 64,
            blocks: 2,
            n_codes: 8,
            n_speakers: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_dim == 0
            || self.hidden < 2
            || self.attn_dim == 0
            || self.ff_dim == 0
            || self.blocks == 0
            || self.n_codes == 0
        {
            return Err(Error::Config(format!("invalid net config {:?}", self)));
        }
        Ok(())
    }

    /// (d, k) of each adapted projection, in layer-index order.
    pub fn adapted_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        for _ in 0..self.blocks {
            dims.push((self.attn_dim, self.hidden)); // q
            dims.push((self.attn_dim, self.hidden)); // k
            dims.push((self.attn_dim, self.hidden)); // v
            dims.push((self.hidden, self.attn_dim)); // out
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock {
    pub wq: Tensor, // [p, h]
    pub wk: Tensor, // [p, h]
    pub wv: Tensor, // [p, h]
    pub wo: Tensor, // [h, p]
    pub ff1_w: Tensor, // [ff, h]
    pub ff1_b: Tensor, // [ff]
    pub ff2_w: Tensor, // [h, ff]
    pub ff2_b: Tensor, // [h]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub cfg: NetConfig,
    pub in_w: Tensor,  // [h, F]
    pub in_b: Tensor,  // [h]
    pub time_w: Tensor, // [h, h]
    pub time_b: Tensor, // [h]
    pub content_emb: Tensor, // [n_codes, h]
    pub speaker_emb: Tensor, // [n_speakers, h]
    pub blocks: Vec<AttnBlock>,
    pub out_w: Tensor, // [F, h]
    pub out_b: Tensor, // [F]
}

fn init_weight(stream: &RngStream, tag: u64, shape: &[usize], fan_in: usize) -> Tensor {
    let mut s = stream.substream(streams::net_init(tag));
    crate::rng::randn::<f64>(&mut s, shape).scale((1.0 / fan_in as f64).sqrt())
}

impl ScoreNet {
    pub fn init(cfg: NetConfig, stream: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let (f, h, p, ff) = (cfg.f_dim, cfg.hidden, cfg.attn_dim, cfg.ff_dim);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for bi in 0..cfg.blocks {
            let t = 100 + 10 * bi as u64;
            blocks.push(AttnBlock {
                wq: init_weight(stream, t, &[p, h], h),
                wk: init_weight(stream, t + 1, &[p, h], h),
                wv: init_weight(stream, t + 2, &[p, h], h),
                wo: init_weight(stream, t + 3, &[h, p], p),
                ff1_w: init_weight(stream, t + 4, &[ff, h], h),
                ff1_b: Tensor::zeros(&[ff]),
                ff2_w: init_weight(stream, t + 5, &[h, ff], ff),
                ff2_b: Tensor::zeros(&[h]),
            });
        }
        Ok(Self {
            cfg,
            in_w: init_weight(stream, 1, &[h, f], f),
            in_b: Tensor::zeros(&[h]),
            time_w: init_weight(stream, 2, &[h, h], h),
            time_b: Tensor::zeros(&[h]),
            content_emb: init_weight(stream, 3, &[cfg.n_codes, h], 4),
            speaker_emb: init_weight(stream, 4, &[cfg.n_speakers.max(1), h], 4),
            blocks,
            out_w: init_weight(stream, 5, &[f, h], h),
            out_b: Tensor::zeros(&[f]),
        })
    }

    /// Frozen base weights of the adapter injection sites, in layer order.
    pub fn adapted_base_weights(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.wq.clone());
            out.push(b.wk.clone());
            out.push(b.wv.clone());
            out.push(b.wo.clone());
        }
        out
    }

    fn base_proj(&self, li: usize) -> &Tensor {
        let b = &self.blocks[li / 4];
        match li % 4 {
            0 => &b.wq,
            1 => &b.wk,
            2 => &b.wv,
            _ => &b.wo,
        }
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![
            &mut self.in_w,
            &mut self.in_b,
            &mut self.time_w,
            &mut self.time_b,
            &mut self.content_emb,
            &mut self.speaker_emb,
        ];
        for b in &mut self.blocks {
            v.push(&mut b.wq);
            v.push(&mut b.wk);
            v.push(&mut b.wv);
            v.push(&mut b.wo);
            v.push(&mut b.ff1_w);
            v.push(&mut b.ff1_b);
            v.push(&mut b.ff2_w);
            v.push(&mut b.ff2_b);
        }
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

/// Gradients for every base parameter, in `param_tensors_mut` order.
#[derive(Clone, Debug)]
pub struct NetGrads {
    pub tensors: Vec<Tensor>,
}

impl NetGrads {
    fn zeros_like(net: &ScoreNet) -> Self {
        let mut net = net.clone();
        let tensors = net
            .param_tensors_mut()
            .into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self { tensors }
    }
}

// indices into NetGrads.tensors
const G_IN_W: usize = 0;
const G_IN_B: usize = 1;
const G_TIME_W: usize = 2;
const G_TIME_B: usize = 3;
const G_CONTENT: usize = 4;
const G_SPEAKER: usize = 5;
const G_BLOCK0: usize = 6;
const BLOCK_STRIDE: usize = 8;

fn g_out_w(blocks: usize) -> usize {
    G_BLOCK0 + BLOCK_STRIDE * blocks
}

/// One forward call's inputs.
#[derive(Clone, Copy)]
pub struct BatchInput<'a> {
    pub x: &'a Tensor,          // [N, F, L]
    pub t: &'a [f64],           // per-speaker timestep
    pub codes: &'a [Vec<u16>],  // [N][L]
    pub lengths: &'a [usize],
    /// Rows into the training-speaker embedding table; None during
    /// adaptation and sampling (embedding zeroed).
    pub speaker_rows: Option<&'a [usize]>,
}

struct BlockCache {
    u_in: Tensor,  // [N, L, h]
    q: Tensor,     // [N, L, p]
    k: Tensor,
    v: Tensor,
    probs: Tensor, // [N, L, L]
    amix: Tensor,  // [N, L, p]
    u_mid: Tensor, // [N, L, h]
    t1: Tensor,    // [N, L, ff]
}

pub struct ForwardCache {
    n: usize,
    l: usize,
    x_frames: Tensor, // [N, L, F]
    time_sin: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    u_final: Tensor, // [N, L, h]
    merged: Option<Vec<Vec<Tensor>>>, // [layer][speaker]
    lengths: Vec<usize>,
    codes: Vec<Vec<u16>>,
    speaker_rows: Option<Vec<usize>>,
}

pub struct BackwardResult {
    pub base: Option<NetGrads>,
    pub adapters: Option<Vec<LayerGradients>>,
}

fn sinusoid(t: f64, h: usize) -> Vec<f64> {
    let half = h / 2;
    let mut out = vec![0.0; h];
    for i in 0..half {
        let exp = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let w = 1000f64.powf(exp);
        out[2 * i] = (w * t).sin();
        out[2 * i + 1] = (w * t).cos();
    }
    out
}

// y[n,l,:] = W x[n,l,:] (+ b)
fn linear_fwd(w: &Tensor, b: Option<&Tensor>, x: &Tensor) -> Tensor {
    let (n, l, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = w.shape()[0];
    debug_assert_eq!(w.shape()[1], i);
    let mut y = Tensor::zeros(&[n, l, o]);
    let wd = w.data();
    for nl in 0..n * l {
        let xr = &x.data()[nl * i..(nl + 1) * i];
        let yr = &mut y.data_mut()[nl * o..(nl + 1) * o];
        for oo in 0..o {
            let wr = &wd[oo * i..(oo + 1) * i];
            let mut acc = 0.0;
            for (a, b_) in wr.iter().zip(xr) {
                acc += a * b_;
            }
            yr[oo] = acc;
        }
        if let Some(b) = b {
            for (yv, bv) in yr.iter_mut().zip(b.data()) {
                *yv += bv;
            }
        }
    }
    y
}

// per-speaker weights: y[n,l,:] = W_n x[n,l,:]
fn linear_fwd_per_speaker(ws: &[Tensor], x: &Tensor) -> Tensor {
    let (n, l, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = ws[0].shape()[0];
    let mut y = Tensor::zeros(&[n, l, o]);
    for sp in 0..n {
        let wd = ws[sp].data();
        for li in 0..l {
            let nl = sp * l + li;
            let xr = &x.data()[nl * i..(nl + 1) * i];
            let yr = &mut y.data_mut()[nl * o..(nl + 1) * o];
            for oo in 0..o {
                let wr = &wd[oo * i..(oo + 1) * i];
                let mut acc = 0.0;
                for (a, b_) in wr.iter().zip(xr) {
                    acc += a * b_;
                }
                yr[oo] = acc;
            }
        }
    }
    y
}

// dx[n,l,:] = W^T dout[n,l,:]; optionally dW += sum_l dout x^T, db += sum dout
fn linear_bwd(
    w: &Tensor,
    x: &Tensor,
    dout: &Tensor,
    mut acc: Option<(&mut Tensor, Option<&mut Tensor>)>,
) -> Tensor {
    let (n, l, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = w.shape()[0];
    let mut dx = Tensor::zeros(&[n, l, i]);
    let wd = w.data();
    for nl in 0..n * l {
        let dor = &dout.data()[nl * o..(nl + 1) * o];
        let xr = &x.data()[nl * i..(nl + 1) * i];
        let dxr = &mut dx.data_mut()[nl * i..(nl + 1) * i];
        for oo in 0..o {
            let g = dor[oo];
            if g == 0.0 {
                continue;
            }
            let wr = &wd[oo * i..(oo + 1) * i];
            for (d, wv) in dxr.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
        if let Some((dw, db)) = acc.as_mut() {
            for oo in 0..o {
                let g = dor[oo];
                if g != 0.0 {
                    let dwr = &mut dw.data_mut()[oo * i..(oo + 1) * i];
                    for (d, xv) in dwr.iter_mut().zip(xr) {
                        *d += g * xv;
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                for (d, g) in db.data_mut().iter_mut().zip(dor) {
                    *d += g;
                }
            }
        }
    }
    dx
}

// per-speaker backward: returns per-speaker dW and dx
fn linear_bwd_per_speaker(ws: &[Tensor], x: &Tensor, dout: &Tensor) -> (Vec<Tensor>, Tensor) {
    let (n, l, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let o = ws[0].shape()[0];
    let mut dx = Tensor::zeros(&[n, l, i]);
    let mut gs = Vec::with_capacity(n);
    for sp in 0..n {
        let wd = ws[sp].data();
        let mut g_sp = Tensor::zeros(&[o, i]);
        for li in 0..l {
            let nl = sp * l + li;
            let dor = &dout.data()[nl * o..(nl + 1) * o];
            let xr = &x.data()[nl * i..(nl + 1) * i];
            let dxr = &mut dx.data_mut()[nl * i..(nl + 1) * i];
            for oo in 0..o {
                let g = dor[oo];
                if g == 0.0 {
                    continue;
                }
                let wr = &wd[oo * i..(oo + 1) * i];
                for (d, wv) in dxr.iter_mut().zip(wr) {
                    *d += g * wv;
                }
                let gr = &mut g_sp.data_mut()[oo * i..(oo + 1) * i];
                for (d, xv) in gr.iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        }
        gs.push(g_sp);
    }
    (gs, dx)
}

impl ScoreNet {
    fn proj_fwd(
        &self,
        li: usize,
        merged: Option<&Vec<Vec<Tensor>>>,
        x: &Tensor,
    ) -> Tensor {
        match merged {
            Some(m) => linear_fwd_per_speaker(&m[li], x),
            None => linear_fwd(self.base_proj(li), None, x),
        }
    }

    /// Score estimate plus the cache needed for the backward pass.
    pub fn forward(
        &self,
        bank: Option<&AdapterBank>,
        input: &BatchInput,
    ) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.cfg;
        let (n, f, l) = match input.x.shape() {
            [n, f, l] => (*n, *f, *l),
            s => return Err(Error::Dim(format!("score input {:?}", s))),
        };
        if f != cfg.f_dim {
            return Err(Error::Dim(format!(
                "input has {} mel bins, net expects {}",
                f, cfg.f_dim
            )));
        }
        if input.t.len() != n || input.codes.len() != n || input.lengths.len() != n {
            return Err(Error::Dim(format!(
                "batch size mismatch: x {}, t {}, codes {}, lengths {}",
                n,
                input.t.len(),
                input.codes.len(),
                input.lengths.len()
            )));
        }
        if let Some(bank) = bank {
            bank.check_speakers(n)?;
        }
        for (sp, codes) in input.codes.iter().enumerate() {
            if codes.len() < l.min(input.lengths[sp]) {
                return Err(Error::Dim(format!(
                    "speaker {} has {} codes for length {}",
                    sp,
                    codes.len(),
                    input.lengths[sp]
                )));
            }
        }

        let h = cfg.hidden;
        // mel [N,F,L] -> frames [N,L,F]
        let mut x_frames = Tensor::zeros(&[n, l, f]);
        for sp in 0..n {
            for ff_ in 0..f {
                for li in 0..l {
                    x_frames.data_mut()[(sp * l + li) * f + ff_] =
                        input.x.data()[(sp * f + ff_) * l + li];
                }
            }
        }

        let mut u = linear_fwd(&self.in_w, Some(&self.in_b), &x_frames);
        let mut time_sin = Vec::with_capacity(n);
        for sp in 0..n {
            let tsin = sinusoid(input.t[sp], h);
            let mut tvec = vec![0.0; h];
            for oo in 0..h {
                let wr = &self.time_w.data()[oo * h..(oo + 1) * h];
                let mut acc = self.time_b.data()[oo];
                for (a, b) in wr.iter().zip(&tsin) {
                    acc += a * b;
                }
                tvec[oo] = acc;
            }
            let spk: Option<&[f64]> = match input.speaker_rows {
                Some(rows) => {
                    let row = rows[sp];
                    if row >= cfg.n_speakers {
                        return Err(Error::Config(format!(
                            "speaker row {} outside embedding table of {}",
                            row, cfg.n_speakers
                        )));
                    }
                    Some(&self.speaker_emb.data()[row * h..(row + 1) * h])
                }
                None => None,
            };
            for li in 0..l {
                let code = input.codes[sp].get(li).copied().unwrap_or(0) as usize;
                if code >= cfg.n_codes {
                    return Err(Error::Config(format!(
                        "content code {} outside vocabulary of {}",
                        code, cfg.n_codes
                    )));
                }
                let crow = &self.content_emb.data()[code * h..(code + 1) * h];
                let ur = &mut u.data_mut()[(sp * l + li) * h..(sp * l + li + 1) * h];
                for j in 0..h {
                    ur[j] += tvec[j] + crow[j];
                    if let Some(spk) = spk {
                        ur[j] += spk[j];
                    }
                }
            }
            time_sin.push(tsin);
        }

        let merged: Option<Vec<Vec<Tensor>>> = match bank {
            Some(bank) => {
                let mut per_layer = Vec::with_capacity(4 * cfg.blocks);
                for li in 0..4 * cfg.blocks {
                    per_layer.push(bank.merged_weights(li)?);
                }
                Some(per_layer)
            }
            None => None,
        };

        let p = cfg.attn_dim;
        let scale = 1.0 / (p as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for bi in 0..cfg.blocks {
            let u_in = u;
            let q = self.proj_fwd(4 * bi, merged.as_ref(), &u_in);
            let k = self.proj_fwd(4 * bi + 1, merged.as_ref(), &u_in);
            let v = self.proj_fwd(4 * bi + 2, merged.as_ref(), &u_in);

            let mut probs = Tensor::zeros(&[n, l, l]);
            let mut amix = Tensor::zeros(&[n, l, p]);
            for sp in 0..n {
                let len = input.lengths[sp].min(l);
                for qi in 0..l {
                    let qr = &q.data()[(sp * l + qi) * p..(sp * l + qi + 1) * p];
                    let prow =
                        &mut probs.data_mut()[(sp * l + qi) * l..(sp * l + qi) * l + l];
                    let mut maxs = f64::NEG_INFINITY;
                    for kj in 0..len {
                        let kr = &k.data()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        let mut acc = 0.0;
                        for (a, b) in qr.iter().zip(kr) {
                            acc += a * b;
                        }
                        let s = acc * scale;
                        prow[kj] = s;
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    let mut z = 0.0;
                    for pv in prow[..len].iter_mut() {
                        *pv = (*pv - maxs).exp();
                        z += *pv;
                    }
                    for pv in prow[..len].iter_mut() {
                        *pv /= z;
                    }
                    // mix values
                    let prow = &probs.data()[(sp * l + qi) * l..(sp * l + qi) * l + l];
                    let ar_start = (sp * l + qi) * p;
                    for kj in 0..len {
                        let w = prow[kj];
                        if w == 0.0 {
                            continue;
                        }
                        let vr = &v.data()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        let ar = &mut amix.data_mut()[ar_start..ar_start + p];
                        for (a, b) in ar.iter_mut().zip(vr) {
                            *a += w * b;
                        }
                    }
                }
            }

            let wo_out = self.proj_fwd(4 * bi + 3, merged.as_ref(), &amix);
            let u_mid = u_in.add(&wo_out)?;
            let z1 = linear_fwd(&self.blocks[bi].ff1_w, Some(&self.blocks[bi].ff1_b), &u_mid);
            let t1 = z1.map(|x| x.tanh());
            let mut u_out = linear_fwd(&self.blocks[bi].ff2_w, Some(&self.blocks[bi].ff2_b), &t1);
            u_out.axpy(1.0, &u_mid)?;

            blocks.push(BlockCache { u_in, q, k, v, probs, amix, u_mid, t1 });
            u = u_out;
        }

        let out_frames = linear_fwd(&self.out_w, Some(&self.out_b), &u);
        // frames [N,L,F] -> mel [N,F,L]
        let mut out = Tensor::zeros(&[n, f, l]);
        for sp in 0..n {
            for li in 0..l {
                for ff_ in 0..f {
                    out.data_mut()[(sp * f + ff_) * l + li] =
                        out_frames.data()[(sp * l + li) * f + ff_];
                }
            }
        }
        out.check_finite("score output")?;

        Ok((
            out,
            ForwardCache {
                n,
                l,
                x_frames,
                time_sin,
                blocks,
                u_final: u,
                merged,
                lengths: input.lengths.to_vec(),
                codes: input.codes.to_vec(),
                speaker_rows: input.speaker_rows.map(|r| r.to_vec()),
            },
        ))
    }

    /// Convenience wrapper returning only the score estimate.
    pub fn score_forward(&self, bank: Option<&AdapterBank>, input: &BatchInput) -> Result<Tensor> {
        Ok(self.forward(bank, input)?.0)
    }

    /// Backward pass from dL/d(score output).
    ///
    /// With a bank, adapter gradients are returned per layer; base-parameter
    /// gradients are only accumulated when `want_base` is set.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dout: &Tensor,
        bank: Option<&AdapterBank>,
        want_base: bool,
    ) -> Result<BackwardResult> {
        let cfg = &self.cfg;
        let (n, l, h, p, f) = (cache.n, cache.l, cfg.hidden, cfg.attn_dim, cfg.f_dim);
        if dout.shape() != [n, f, l] {
            return Err(Error::Dim(format!(
                "backward dout {:?}, expected [{}, {}, {}]",
                dout.shape(),
                n,
                f,
                l
            )));
        }
        let mut base = if want_base { Some(NetGrads::zeros_like(self)) } else { None };
        let mut adapters: Option<Vec<Option<LayerGradients>>> =
            bank.map(|_| (0..4 * cfg.blocks).map(|_| None).collect());

        // mel grad -> frame grad
        let mut ds_frames = Tensor::zeros(&[n, l, f]);
        for sp in 0..n {
            for ff_ in 0..f {
                for li in 0..l {
                    ds_frames.data_mut()[(sp * l + li) * f + ff_] =
                        dout.data()[(sp * f + ff_) * l + li];
                }
            }
        }

        let mut du = {
            if let Some(g) = base.as_mut() {
                let ow = g_out_w(cfg.blocks);
                let mut dw = std::mem::replace(&mut g.tensors[ow], Tensor::zeros(&[0]));
                let mut db = std::mem::replace(&mut g.tensors[ow + 1], Tensor::zeros(&[0]));
                let dx = linear_bwd(
                    &self.out_w,
                    &cache.u_final,
                    &ds_frames,
                    Some((&mut dw, Some(&mut db))),
                );
                g.tensors[ow] = dw;
                g.tensors[ow + 1] = db;
                dx
            } else {
                linear_bwd(&self.out_w, &cache.u_final, &ds_frames, None)
            }
        };

        for bi in (0..cfg.blocks).rev() {
            let bc = &cache.blocks[bi];
            let blk = &self.blocks[bi];

            // FFN: u_out = u_mid + ff2(tanh(ff1(u_mid)))
            let dt1 = if let Some(g) = base.as_mut() {
                let idx = G_BLOCK0 + BLOCK_STRIDE * bi;
                let mut dw = std::mem::replace(&mut g.tensors[idx + 6], Tensor::zeros(&[0]));
                let mut db = std::mem::replace(&mut g.tensors[idx + 7], Tensor::zeros(&[0]));
                let dx = linear_bwd(&blk.ff2_w, &bc.t1, &du, Some((&mut dw, Some(&mut db))));
                g.tensors[idx + 6] = dw;
                g.tensors[idx + 7] = db;
                dx
            } else {
                linear_bwd(&blk.ff2_w, &bc.t1, &du, None)
            };
            let mut dz1 = dt1;
            for (d, t) in dz1.data_mut().iter_mut().zip(bc.t1.data()) {
                *d *= 1.0 - t * t;
            }
            let mut du_mid = if let Some(g) = base.as_mut() {
                let idx = G_BLOCK0 + BLOCK_STRIDE * bi;
                let mut dw = std::mem::replace(&mut g.tensors[idx + 4], Tensor::zeros(&[0]));
                let mut db = std::mem::replace(&mut g.tensors[idx + 5], Tensor::zeros(&[0]));
                let dx = linear_bwd(&blk.ff1_w, &bc.u_mid, &dz1, Some((&mut dw, Some(&mut db))));
                g.tensors[idx + 4] = dw;
                g.tensors[idx + 5] = db;
                dx
            } else {
                linear_bwd(&blk.ff1_w, &bc.u_mid, &dz1, None)
            };
            du_mid.axpy(1.0, &du)?; // residual

            // attention out projection
            let damix = self.proj_bwd(
                4 * bi + 3,
                cache,
                bank,
                &bc.amix,
                &du_mid,
                base.as_mut(),
                adapters.as_mut(),
            )?;

            // attention core
            let scale = 1.0 / (p as f64).sqrt();
            let mut dq = Tensor::zeros(&[n, l, p]);
            let mut dk = Tensor::zeros(&[n, l, p]);
            let mut dv = Tensor::zeros(&[n, l, p]);
            for sp in 0..n {
                let len = cache.lengths[sp].min(l);
                for qi in 0..l {
                    let dar = &damix.data()[(sp * l + qi) * p..(sp * l + qi + 1) * p];
                    let prow = &bc.probs.data()[(sp * l + qi) * l..(sp * l + qi) * l + l];
                    // dp_ij and row dot
                    let mut dp = vec![0.0; len];
                    let mut row_dot = 0.0;
                    for kj in 0..len {
                        let vr = &bc.v.data()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        let mut acc = 0.0;
                        for (a, b) in dar.iter().zip(vr) {
                            acc += a * b;
                        }
                        dp[kj] = acc;
                        row_dot += prow[kj] * acc;
                        // dv_j += p_ij * damix_i
                        let dvr = &mut dv.data_mut()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        let w = prow[kj];
                        if w != 0.0 {
                            for (d, a) in dvr.iter_mut().zip(dar) {
                                *d += w * a;
                            }
                        }
                    }
                    let dqr_start = (sp * l + qi) * p;
                    for kj in 0..len {
                        let dsij = prow[kj] * (dp[kj] - row_dot) * scale;
                        if dsij == 0.0 {
                            continue;
                        }
                        let kr = &bc.k.data()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        {
                            let dqr = &mut dq.data_mut()[dqr_start..dqr_start + p];
                            for (d, b) in dqr.iter_mut().zip(kr) {
                                *d += dsij * b;
                            }
                        }
                        let qr = &bc.q.data()[(sp * l + qi) * p..(sp * l + qi + 1) * p];
                        let dkr = &mut dk.data_mut()[(sp * l + kj) * p..(sp * l + kj + 1) * p];
                        for (d, b) in dkr.iter_mut().zip(qr) {
                            *d += dsij * b;
                        }
                    }
                }
            }

            let dq_in = self.proj_bwd(4 * bi, cache, bank, &bc.u_in, &dq, base.as_mut(), adapters.as_mut())?;
            let dk_in = self.proj_bwd(4 * bi + 1, cache, bank, &bc.u_in, &dk, base.as_mut(), adapters.as_mut())?;
            let dv_in = self.proj_bwd(4 * bi + 2, cache, bank, &bc.u_in, &dv, base.as_mut(), adapters.as_mut())?;

            let mut du_in = du_mid; // residual path
            du_in.axpy(1.0, &dq_in)?;
            du_in.axpy(1.0, &dk_in)?;
            du_in.axpy(1.0, &dv_in)?;
            du = du_in;
        }

        // input projection, time mapping and embeddings
        if let Some(g) = base.as_mut() {
            {
                let mut dw = std::mem::replace(&mut g.tensors[G_IN_W], Tensor::zeros(&[0]));
                let mut db = std::mem::replace(&mut g.tensors[G_IN_B], Tensor::zeros(&[0]));
                let _ = linear_bwd(&self.in_w, &cache.x_frames, &du, Some((&mut dw, Some(&mut db))));
                g.tensors[G_IN_W] = dw;
                g.tensors[G_IN_B] = db;
            }
            for sp in 0..n {
                let mut dtvec = vec![0.0; h];
                for li in 0..l {
                    let dur = &du.data()[(sp * l + li) * h..(sp * l + li + 1) * h];
                    for (d, v) in dtvec.iter_mut().zip(dur) {
                        *d += v;
                    }
                    let code = cache.codes[sp].get(li).copied().unwrap_or(0) as usize;
                    let cr = &mut g.tensors[G_CONTENT].data_mut()[code * h..(code + 1) * h];
                    for (d, v) in cr.iter_mut().zip(dur) {
                        *d += v;
                    }
                }
                let tsin = &cache.time_sin[sp];
                for oo in 0..h {
                    let twr = &mut g.tensors[G_TIME_W].data_mut()[oo * h..(oo + 1) * h];
                    for (d, s) in twr.iter_mut().zip(tsin) {
                        *d += dtvec[oo] * s;
                    }
                    g.tensors[G_TIME_B].data_mut()[oo] += dtvec[oo];
                }
                if let Some(rows) = &cache.speaker_rows {
                    let row = rows[sp];
                    let sr = &mut g.tensors[G_SPEAKER].data_mut()[row * h..(row + 1) * h];
                    for (d, v) in sr.iter_mut().zip(&dtvec) {
                        *d += v;
                    }
                }
            }
        }

        let adapters = match adapters {
            Some(list) => Some(
                list.into_iter()
                    .map(|g| g.expect("every adapted layer visited in backward"))
                    .collect(),
            ),
            None => None,
        };
        Ok(BackwardResult { base, adapters })
    }

    #[allow(clippy::too_many_arguments)]
    fn proj_bwd(
        &self,
        li: usize,
        cache: &ForwardCache,
        bank: Option<&AdapterBank>,
        x: &Tensor,
        dout: &Tensor,
        base: Option<&mut NetGrads>,
        adapters: Option<&mut Vec<Option<LayerGradients>>>,
    ) -> Result<Tensor> {
        match (bank, cache.merged.as_ref()) {
            (Some(bank), Some(merged)) => {
                let (gs, dx) = linear_bwd_per_speaker(&merged[li], x, dout);
                let grads = bank.grads_from_weight_grads(li, &gs)?;
                if let Some(adapters) = adapters {
                    adapters[li] = Some(grads);
                }
                // base weights are frozen during adaptation
                let _ = base;
                Ok(dx)
            }
            _ => {
                let w = self.base_proj(li);
                if let Some(g) = base {
                    let idx = G_BLOCK0 + BLOCK_STRIDE * (li / 4) + (li % 4);
                    let mut dw = std::mem::replace(&mut g.tensors[idx], Tensor::zeros(&[0]));
                    let dx = linear_bwd(w, x, dout, Some((&mut dw, None)));
                    g.tensors[idx] = dw;
                    Ok(dx)
                } else {
                    Ok(linear_bwd(w, x, dout, None))
                }
            }
        }
    }
}
