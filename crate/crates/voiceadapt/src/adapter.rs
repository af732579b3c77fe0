//! Per-speaker low-rank adapter bank.
//!
//! Holds the stacked (or shared) low-rank matrices and the per-speaker scale
//! matrix for every adapted layer, computes merged weights with optional
//! column-norm normalization, and provides the analytic forward/backward for
//! adapted linear layers.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::streams;
use crate::tensor::{column_norms, matmul};
use crate::Tensor;

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SharingMode {
    /// Separate B and A per speaker.
    Batchwise,
    /// One B for all speakers, per-speaker A.
    SharedB,
    /// Per-speaker B, one A for all speakers.
    SharedA,
    /// One adapter for all speakers.
    SharedBoth,
}

impl SharingMode {
    pub fn b_is_shared(self) -> bool {
        matches!(self, SharingMode::SharedB | SharingMode::SharedBoth)
    }

    pub fn a_is_shared(self) -> bool {
        matches!(self, SharingMode::SharedA | SharingMode::SharedBoth)
    }

    pub fn label(self) -> &'static str {
        match self {
            SharingMode::Batchwise => "batchwise",
            SharingMode::SharedB => "shared-b",
            SharingMode::SharedA => "shared-a",
            SharingMode::SharedBoth => "shared-both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "batchwise" => Ok(SharingMode::Batchwise),
            "shared-b" | "shared_b" => Ok(SharingMode::SharedB),
            "shared-a" | "shared_a" => Ok(SharingMode::SharedA),
            "shared-both" | "shared_both" => Ok(SharingMode::SharedBoth),
            other => Err(Error::Config(format!("unknown sharing mode '{}'", other))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub sharing_mode: SharingMode,
    pub scale_enabled: bool,
    pub normalization_enabled: bool,
    pub num_speakers: usize,
    pub freeze_b: bool,
    /// Treat the column norm as a constant in the backward pass.
    pub detach_norm: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            alpha: 8.0,
            sharing_mode: SharingMode::SharedB,
            scale_enabled: true,
            normalization_enabled: true,
            num_speakers: 1,
            freeze_b: false,
            detach_norm: false,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if self.num_speakers < 1 {
            return Err(Error::Config("num_speakers must be >= 1".into()));
        }
        if self.normalization_enabled && !self.scale_enabled {
            return Err(Error::Config(
                "normalization requires the scale matrix".into(),
            ));
        }
        Ok(())
    }
}

/// Adapter state for one adapted linear layer with frozen base weight `w0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLayer {
    pub w0: Tensor,      // [d, k], frozen
    pub b: Tensor,       // [d, r] shared or [N, d, r]
    pub a: Tensor,       // [r, k] shared or [N, r, k]
    pub m: Option<Tensor>, // [N, 1, k] when the scale matrix is enabled
}

impl AdaptedLayer {
    pub fn dims(&self) -> (usize, usize) {
        (self.w0.shape()[0], self.w0.shape()[1])
    }
}

/// Gradients for one layer's trainable parameters.
#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub db: Option<Tensor>,
    pub da: Tensor,
    pub dm: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct AdapterBank {
    config: AdapterConfig,
    speaker_ids: Vec<u64>,
    layers: Vec<AdaptedLayer>,
}

impl AdapterBank {
    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn speaker_ids(&self) -> &[u64] {
        &self.speaker_ids
    }

    pub fn layers(&self) -> &[AdaptedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdaptedLayer] {
        &mut self.layers
    }

    pub fn num_speakers(&self) -> usize {
        self.config.num_speakers
    }

    pub fn set_freeze_b(&mut self, freeze: bool) {
        self.config.freeze_b = freeze;
    }

    pub fn check_speakers(&self, n: usize) -> Result<()> {
        if self.config.num_speakers != n {
            return Err(Error::Compat(format!(
                "bank holds {} speakers but the session has {}",
                self.config.num_speakers, n
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.dims()).collect()
    }

    /// Assemble a bank from explicit parts, checking every shape.
    pub fn from_parts(
        config: AdapterConfig,
        speaker_ids: Vec<u64>,
        layers: Vec<AdaptedLayer>,
    ) -> Result<Self> {
        config.validate()?;
        if speaker_ids.len() != config.num_speakers {
            return Err(Error::Config(format!(
                "from_parts: {} speaker ids for N = {}",
                speaker_ids.len(),
                config.num_speakers
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config("from_parts: empty layer list".into()));
        }
        let n = config.num_speakers;
        let r = config.rank;
        for (li, layer) in layers.iter().enumerate() {
            let (d, k) = layer.dims();
            let b_want: &[usize] = if config.sharing_mode.b_is_shared() {
                &[d, r]
            } else {
                &[n, d, r]
            };
            let a_want: &[usize] = if config.sharing_mode.a_is_shared() {
                &[r, k]
            } else {
                &[n, r, k]
            };
            if layer.b.shape() != b_want || layer.a.shape() != a_want {
                return Err(Error::Dim(format!(
                    "from_parts: layer {} has B {:?} / A {:?}, expected {:?} / {:?}",
                    li,
                    layer.b.shape(),
                    layer.a.shape(),
                    b_want,
                    a_want
                )));
            }
            match (&layer.m, config.scale_enabled) {
                (Some(m), true) if m.shape() == [n, 1, k] => {}
                (None, false) => {}
                _ => {
                    return Err(Error::Dim(format!(
                        "from_parts: layer {} scale matrix inconsistent with config",
                        li
                    )));
                }
            }
        }
        Ok(AdapterBank { config, speaker_ids, layers })
    }

    /// Single-speaker view of the bank (shared parameters are copied).
    pub fn slice_speaker(&self, sp: usize) -> Result<AdapterBank> {
        if sp >= self.config.num_speakers {
            return Err(Error::Dim(format!(
                "slice_speaker: {} out of {}",
                sp, self.config.num_speakers
            )));
        }
        let mut config = self.config;
        config.num_speakers = 1;
        let layers = self
            .layers
            .iter()
            .map(|layer| -> Result<AdaptedLayer> {
                let b = if self.config.sharing_mode.b_is_shared() {
                    layer.b.clone()
                } else {
                    let (d, _) = layer.dims();
                    layer.b.batch_slice(sp)?.reshape(&[1, d, self.config.rank])?
                };
                let a = if self.config.sharing_mode.a_is_shared() {
                    layer.a.clone()
                } else {
                    let (_, k) = layer.dims();
                    layer.a.batch_slice(sp)?.reshape(&[1, self.config.rank, k])?
                };
                let m = match &layer.m {
                    Some(m) => {
                        let (_, k) = layer.dims();
                        Some(m.batch_slice(sp)?.reshape(&[1, 1, k])?)
                    }
                    None => None,
                };
                Ok(AdaptedLayer { w0: layer.w0.clone(), b, a, m })
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterBank::from_parts(config, vec![self.speaker_ids[sp]], layers)
    }

    /// Write a single-speaker bank back into slot `sp`.
    pub fn absorb_speaker(&mut self, sp: usize, solo: &AdapterBank) -> Result<()> {
        if solo.config.num_speakers != 1 || sp >= self.config.num_speakers {
            return Err(Error::Dim(format!(
                "absorb_speaker: solo N = {}, slot {} of {}",
                solo.config.num_speakers, sp, self.config.num_speakers
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(&solo.layers) {
            if self.config.sharing_mode.b_is_shared() {
                dst.b = src.b.clone();
            } else {
                let (d, _) = dst.dims();
                dst.b
                    .set_batch_slice(sp, &src.b.clone().reshape(&[d, self.config.rank])?)?;
            }
            if self.config.sharing_mode.a_is_shared() {
                dst.a = src.a.clone();
            } else {
                let (_, k) = dst.dims();
                dst.a
                    .set_batch_slice(sp, &src.a.clone().reshape(&[self.config.rank, k])?)?;
            }
            if let (Some(dm), Some(sm)) = (dst.m.as_mut(), src.m.as_ref()) {
                let (_, k) = (dm.shape()[0], dm.shape()[2]);
                dm.set_batch_slice(sp, &sm.clone().reshape(&[1, k])?)?;
            }
        }
        Ok(())
    }
}

/// Build a bank over the given frozen base weights.
///
/// B entries are N(0, 1/d), A starts at zero, and the scale matrix starts at
/// the column norms of `w0`, so every speaker's merged weight equals `w0`
/// exactly at initialization.
pub fn init_bank(
    config: &AdapterConfig,
    base_layers: &[Tensor],
    speaker_ids: &[u64],
    stream: &RngStream,
) -> Result<AdapterBank> {
    config.validate()?;
    if base_layers.is_empty() {
        return Err(Error::Config("init_bank: empty layer list".into()));
    }
    if speaker_ids.len() != config.num_speakers {
        return Err(Error::Config(format!(
            "init_bank: {} speaker ids for N = {}",
            speaker_ids.len(),
            config.num_speakers
        )));
    }
    let n = config.num_speakers;
    let r = config.rank;
    let mut layers = Vec::with_capacity(base_layers.len());
    for (li, w0) in base_layers.iter().enumerate() {
        if w0.shape().len() != 2 {
            return Err(Error::Config(format!(
                "init_bank: base layer {} is not 2-D ({:?})",
                li,
                w0.shape()
            )));
        }
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        let std = (1.0 / d as f64).sqrt();
        let b = if config.sharing_mode.b_is_shared() {
            let mut s = stream.substream(streams::bank_b_shared_init(li));
            crate::rng::randn::<f64>(&mut s, &[d, r]).scale(std)
        } else {
            let mut t = Tensor::zeros(&[n, d, r]);
            for (sp, &sid) in speaker_ids.iter().enumerate() {
                let mut s = stream.substream(streams::bank_b_init(li, sid));
                let slice = crate::rng::randn::<f64>(&mut s, &[d, r]).scale(std);
                t.set_batch_slice(sp, &slice)?;
            }
            t
        };
        let a = if config.sharing_mode.a_is_shared() {
            Tensor::zeros(&[r, k])
        } else {
            Tensor::zeros(&[n, r, k])
        };
        let m = if config.scale_enabled {
            // with normalization m starts at the column norms of w0 so the
            // merged weight is exactly w0; without it the merge is m * V,
            // so function preservation needs m = 1
            if config.normalization_enabled {
                let norms = column_norms(w0)?;
                let mut t = Tensor::zeros(&[n, 1, k]);
                for sp in 0..n {
                    t.set_batch_slice(sp, &norms)?;
                }
                Some(t)
            } else {
                Some(Tensor::filled(&[n, 1, k], 1.0))
            }
        } else {
            None
        };
        layers.push(AdaptedLayer { w0: w0.clone(), b, a, m });
    }
    Ok(AdapterBank {
        config: *config,
        speaker_ids: speaker_ids.to_vec(),
        layers,
    })
}

impl AdapterBank {
    fn b_slice(&self, layer: &AdaptedLayer, n: usize) -> Result<Tensor> {
        if self.config.sharing_mode.b_is_shared() {
            Ok(layer.b.clone())
        } else {
            layer.b.batch_slice(n)
        }
    }

    fn a_slice(&self, layer: &AdaptedLayer, n: usize) -> Result<Tensor> {
        if self.config.sharing_mode.a_is_shared() {
            Ok(layer.a.clone())
        } else {
            layer.a.batch_slice(n)
        }
    }

    /// `V = w0 + alpha * B_n A_n` before scale/normalization.
    fn merged_direction(&self, layer_index: usize, n: usize) -> Result<Tensor> {
        let layer = &self.layers[layer_index];
        let b = self.b_slice(layer, n)?;
        let a = self.a_slice(layer, n)?;
        let mut v = layer.w0.clone();
        v.axpy(self.config.alpha, &matmul(&b, &a)?)?;
        Ok(v)
    }

    /// Merged weight for speaker `n` at `layer_index`.
    pub fn merged_weight(&self, layer_index: usize, n: usize) -> Result<Tensor> {
        if n >= self.config.num_speakers {
            return Err(Error::Dim(format!(
                "speaker index {} out of {}",
                n, self.config.num_speakers
            )));
        }
        let v = self.merged_direction(layer_index, n)?;
        if !self.config.scale_enabled {
            return Ok(v);
        }
        let layer = &self.layers[layer_index];
        let m = layer.m.as_ref().expect("scale enabled implies m present");
        let m_n = m.batch_slice(n)?; // [1, k]
        let (d, k) = layer.dims();
        let mut out = v.clone();
        if self.config.normalization_enabled {
            let norms = column_norms(&v)?;
            for j in 0..k {
                let nj = norms.data()[j];
                if nj < NORM_FLOOR {
                    return Err(Error::SingularColumn(format!(
                        "layer {}, speaker {}, column {} has norm {:.3e}",
                        layer_index, n, j, nj
                    )));
                }
                let f = m_n.data()[j] / nj;
                for i in 0..d {
                    out.data_mut()[i * k + j] = v.data()[i * k + j] * f;
                }
            }
        } else {
            for j in 0..k {
                let f = m_n.data()[j];
                for i in 0..d {
                    out.data_mut()[i * k + j] = v.data()[i * k + j] * f;
                }
            }
        }
        Ok(out)
    }

    /// Merged weights for all speakers at a layer.
    pub fn merged_weights(&self, layer_index: usize) -> Result<Vec<Tensor>> {
        (0..self.config.num_speakers)
            .map(|n| self.merged_weight(layer_index, n))
            .collect()
    }

    /// `out[n, t] = W_n x[n, t]` with per-speaker merged weights.
    pub fn adapted_forward(&self, layer_index: usize, x: &Tensor) -> Result<Tensor> {
        let (n, t, k) = match x.shape() {
            [n, t, k] => (*n, *t, *k),
            s => return Err(Error::Dim(format!("adapted_forward: x {:?}", s))),
        };
        self.check_speakers(n)?;
        let (d, kl) = self.layers[layer_index].dims();
        if k != kl {
            return Err(Error::Dim(format!(
                "adapted_forward: x feature dim {} vs layer k {}",
                k, kl
            )));
        }
        let mut out = Tensor::zeros(&[n, t, d]);
        for sp in 0..n {
            let w = self.merged_weight(layer_index, sp)?;
            let x_n = x.batch_slice(sp)?; // [t, k]
            let y = matmul(&x_n, &w.transpose2()?)?; // [t, d]
            out.set_batch_slice(sp, &y)?;
        }
        Ok(out)
    }

    /// Map per-speaker merged-weight gradients to parameter gradients.
    ///
    /// `gs[n]` is dL/dW_merged for speaker n. Shared parameters accumulate
    /// over speakers in index order.
    pub fn grads_from_weight_grads(
        &self,
        layer_index: usize,
        gs: &[Tensor],
    ) -> Result<LayerGradients> {
        let nsp = self.config.num_speakers;
        if gs.len() != nsp {
            return Err(Error::Dim(format!(
                "grads_from_weight_grads: {} grads for {} speakers",
                gs.len(),
                nsp
            )));
        }
        let layer = &self.layers[layer_index];
        let (d, k) = layer.dims();
        let alpha = self.config.alpha;
        let r = self.config.rank;

        let mut da = Tensor::zeros(layer.a.shape());
        let mut db = if self.config.freeze_b {
            None
        } else {
            Some(Tensor::zeros(layer.b.shape()))
        };
        let mut dm = layer.m.as_ref().map(|m| Tensor::zeros(m.shape()));

        for sp in 0..nsp {
            let g = &gs[sp];
            if g.shape() != [d, k] {
                return Err(Error::Dim(format!(
                    "weight grad {:?} for layer dims ({}, {})",
                    g.shape(),
                    d,
                    k
                )));
            }
            // gradient through the merge: G -> (dm_n, dV_n)
            let (dv, dm_n) = self.merge_backward(layer_index, sp, g)?;
            if let (Some(dm_all), Some(dm_n)) = (dm.as_mut(), dm_n) {
                let base = sp * k;
                for j in 0..k {
                    dm_all.data_mut()[base + j] += dm_n[j];
                }
            }
            // V = w0 + alpha B_n A_n
            let b_n = self.b_slice(layer, sp)?;
            let a_n = self.a_slice(layer, sp)?;
            let da_n = matmul(&b_n.transpose2()?, &dv)?.scale(alpha); // [r, k]
            if self.config.sharing_mode.a_is_shared() {
                da.axpy(1.0, &da_n)?;
            } else {
                let base = sp * r * k;
                for (o, v) in da.data_mut()[base..base + r * k]
                    .iter_mut()
                    .zip(da_n.data())
                {
                    *o += *v;
                }
            }
            if let Some(db_all) = db.as_mut() {
                let db_n = matmul(&dv, &a_n.transpose2()?)?.scale(alpha); // [d, r]
                if self.config.sharing_mode.b_is_shared() {
                    db_all.axpy(1.0, &db_n)?;
                } else {
                    let base = sp * d * r;
                    for (o, v) in db_all.data_mut()[base..base + d * r]
                        .iter_mut()
                        .zip(db_n.data())
                    {
                        *o += *v;
                    }
                }
            }
        }
        Ok(LayerGradients { db, da, dm })
    }

    /// Backward through scale/normalization for one speaker:
    /// returns (dL/dV, dL/dm) given G = dL/dW_merged.
    fn merge_backward(
        &self,
        layer_index: usize,
        sp: usize,
        g: &Tensor,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let layer = &self.layers[layer_index];
        let (d, k) = layer.dims();
        if !self.config.scale_enabled {
            return Ok((g.clone(), None));
        }
        let v = self.merged_direction(layer_index, sp)?;
        let m = layer.m.as_ref().unwrap().batch_slice(sp)?; // [1, k]
        let mut dv = Tensor::zeros(&[d, k]);
        let mut dm = vec![0.0; k];
        if self.config.normalization_enabled {
            let norms = column_norms(&v)?;
            for j in 0..k {
                let nj = norms.data()[j];
                if nj < NORM_FLOOR {
                    return Err(Error::SingularColumn(format!(
                        "layer {}, speaker {}, column {} has norm {:.3e}",
                        layer_index, sp, j, nj
                    )));
                }
                let mj = m.data()[j];
                // dot_j = G_j . v_j / ||v_j||
                let mut dot = 0.0;
                for i in 0..d {
                    dot += g.data()[i * k + j] * v.data()[i * k + j];
                }
                dot /= nj;
                dm[j] = dot;
                let f = mj / nj;
                for i in 0..d {
                    let gij = g.data()[i * k + j];
                    let vhat = v.data()[i * k + j] / nj;
                    dv.data_mut()[i * k + j] = if self.config.detach_norm {
                        f * gij
                    } else {
                        f * (gij - dot * vhat)
                    };
                }
            }
        } else {
            for j in 0..k {
                let mj = m.data()[j];
                let mut dot = 0.0;
                for i in 0..d {
                    dot += g.data()[i * k + j] * v.data()[i * k + j];
                    dv.data_mut()[i * k + j] = mj * g.data()[i * k + j];
                }
                dm[j] = dot;
            }
        }
        Ok((dv, Some(dm)))
    }

    /// Full backward of the adapted linear layer.
    ///
    /// Returns the parameter gradients and dL/dx.
    pub fn adapted_backward(
        &self,
        layer_index: usize,
        x: &Tensor,
        dout: &Tensor,
    ) -> Result<(LayerGradients, Tensor)> {
        let (n, t, k) = match x.shape() {
            [n, t, k] => (*n, *t, *k),
            s => return Err(Error::Dim(format!("adapted_backward: x {:?}", s))),
        };
        let (d, kl) = self.layers[layer_index].dims();
        if k != kl || dout.shape() != [n, t, d] {
            return Err(Error::Dim(format!(
                "adapted_backward: x {:?}, dout {:?}, layer ({}, {})",
                x.shape(),
                dout.shape(),
                d,
                kl
            )));
        }
        self.check_speakers(n)?;
        let mut dx = Tensor::zeros(&[n, t, k]);
        let mut gs = Vec::with_capacity(n);
        for sp in 0..n {
            let x_n = x.batch_slice(sp)?; // [t, k]
            let dout_n = dout.batch_slice(sp)?; // [t, d]
            gs.push(matmul(&dout_n.transpose2()?, &x_n)?); // [d, k]
            let w = self.merged_weight(layer_index, sp)?;
            dx.set_batch_slice(sp, &matmul(&dout_n, &w)?)?;
        }
        let grads = self.grads_from_weight_grads(layer_index, &gs)?;
        Ok((grads, dx))
    }
}

/// Per-speaker trainable parameter count as an exact rational.
///
/// `share(x) = x / N` for shared matrices; frozen B contributes nothing;
/// the scale matrix adds `k_l` per speaker.
pub fn param_count(config: &AdapterConfig, layer_dims: &[(usize, usize)]) -> Result<Ratio<i64>> {
    if layer_dims.is_empty() {
        return Err(Error::Config("param_count: empty layer dims".into()));
    }
    config.validate()?;
    let n = config.num_speakers as i64;
    let r = config.rank as i64;
    let mut total = Ratio::from_integer(0i64);
    for &(d, k) in layer_dims {
        let (d, k) = (d as i64, k as i64);
        if !config.freeze_b {
            let b = Ratio::from_integer(r * d);
            total += if config.sharing_mode.b_is_shared() { b / n } else { b };
        }
        let a = Ratio::from_integer(r * k);
        total += if config.sharing_mode.a_is_shared() { a / n } else { a };
        if config.scale_enabled {
            total += Ratio::from_integer(k);
        }
    }
    Ok(total)
}

/// Independent cross-check: enumerate every trainable entry in a bank-shaped
/// layout and divide the shared ones by N.
pub fn param_count_enumerated(
    config: &AdapterConfig,
    layer_dims: &[(usize, usize)],
) -> Result<Ratio<i64>> {
    if layer_dims.is_empty() {
        return Err(Error::Config("param_count: empty layer dims".into()));
    }
    config.validate()?;
    let n = config.num_speakers as i64;
    let r = config.rank as i64;
    let mut total_entries = Ratio::from_integer(0i64);
    for &(d, k) in layer_dims {
        let (d, k) = (d as i64, k as i64);
        if !config.freeze_b {
            let entries = if config.sharing_mode.b_is_shared() {
                Ratio::from_integer(d * r)
            } else {
                Ratio::from_integer(n * d * r)
            };
            total_entries += entries;
        }
        let entries = if config.sharing_mode.a_is_shared() {
            Ratio::from_integer(r * k)
        } else {
            Ratio::from_integer(n * r * k)
        };
        total_entries += entries;
        if config.scale_enabled {
            total_entries += Ratio::from_integer(n * k);
        }
    }
    Ok(total_entries / n)
}
