//! Adaptation loops: batched multi-speaker fine-tuning, the sequential
//! per-speaker baseline, and base-network pretraining.
//!
//! Every random draw a speaker consumes (timestep, corruption noise) comes
//! from a stream keyed by the speaker's id and indexed by the iteration, so
//! the draws are identical whether the speaker trains alone or inside a
//! batch. Combined with the summed per-speaker loss and elementwise Adam
//! this makes batched and sequential adaptation numerically equivalent in
//! the fully per-speaker (batchwise) mode.

use std::time::Instant;

use crate::adapter::{AdapterBank, SharingMode};
use crate::diffusion::{lambda_of, score_loss, score_loss_grad, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{AdamParams, AdamState};
use crate::rng::RngStream;
use crate::scorenet::{BatchInput, ScoreNet};
use crate::streams;
use crate::toytask::SpeakerBatch;
use crate::Tensor;

/// Smallest timestep sampled during training.
pub const T_MIN: f64 = 1e-4;
/// Default adaptation recipe.
pub const DEFAULT_ITERS: usize = 500;
pub const DEFAULT_LR: f64 = 1e-4;

/// One adaptation run's result.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub bank: AdapterBank,
    /// `loss_history[it][n]` is speaker n's masked mean loss at iteration it.
    pub loss_history: Vec<Vec<f64>>,
    pub wall_seconds: f64,
}

/// Timestep for (speaker, iteration): uniform in [T_MIN, 1).
fn draw_t(seed: u64, speaker_id: u64, iter: usize) -> f64 {
    let s = RngStream::new(seed, streams::speaker_time(speaker_id));
    T_MIN + (1.0 - T_MIN) * s.uniform_at(iter as u64)
}

/// Corruption noise for (speaker, iteration) at the speaker's unpadded
/// shape, zero in the padding.
fn draw_eps(
    seed: u64,
    speaker_id: u64,
    iter: usize,
    f: usize,
    len: usize,
    l: usize,
) -> Tensor {
    let s = RngStream::new(seed, streams::speaker_noise(speaker_id));
    let base = (iter * f * len) as u64;
    let mut eps = Tensor::zeros(&[f, l]);
    for fi in 0..f {
        for j in 0..len {
            eps.data_mut()[fi * l + j] = s.normal_at(base + (fi * len + j) as u64);
        }
    }
    eps
}

/// Fine-tune the bank on the batch: per iteration, one (t, eps) draw per
/// speaker, summed per-speaker masked losses, one Adam step over all
/// trainable adapter tensors.
pub fn adapt_batched(
    net: &ScoreNet,
    schedule: &NoiseSchedule<f64>,
    mut bank: AdapterBank,
    batch: &SpeakerBatch,
    iterations: usize,
    lr: f64,
    seed: u64,
) -> Result<AdaptOutcome> {
    let n = batch.n();
    bank.check_speakers(n)?;
    let f = batch.x0.shape()[1];
    let l = batch.max_len();
    let hp = AdamParams::with_lr(lr);

    // one Adam state per trainable tensor
    struct LayerStates {
        b: Option<AdamState<f64>>,
        a: AdamState<f64>,
        m: Option<AdamState<f64>>,
    }
    let mut states: Vec<LayerStates> = bank
        .layers()
        .iter()
        .map(|layer| LayerStates {
            b: if bank.config().freeze_b {
                None
            } else {
                Some(AdamState::new(layer.b.shape()))
            },
            a: AdamState::new(layer.a.shape()),
            m: layer.m.as_ref().map(|m| AdamState::new(m.shape())),
        })
        .collect();

    let start = Instant::now();
    let mut loss_history = Vec::with_capacity(iterations);
    for it in 0..iterations {
        // corrupt each speaker's slice with its own (t, eps)
        let mut ts = Vec::with_capacity(n);
        let mut x_t = Tensor::zeros(&[n, f, l]);
        let mut eps_all = Vec::with_capacity(n);
        for sp in 0..n {
            let sid = batch.speaker_ids[sp];
            let t = draw_t(seed, sid, it);
            let lam = lambda_of(schedule, t)?;
            let eps = draw_eps(seed, sid, it, f, batch.lengths[sp], l);
            let x0_n = batch.x0.batch_slice(sp)?;
            let mut xt_n = x0_n.scale(lam.sqrt());
            xt_n.axpy((1.0 - lam).sqrt(), &eps)?;
            x_t.set_batch_slice(sp, &xt_n)?;
            ts.push(t);
            eps_all.push(eps);
        }

        let input = BatchInput {
            x: &x_t,
            t: &ts,
            codes: &batch.content,
            lengths: &batch.lengths,
            speaker_rows: None,
        };
        let (out, cache) = net.forward(Some(&bank), &input)?;

        let mut losses = Vec::with_capacity(n);
        let mut dout = Tensor::zeros(&[n, f, l]);
        for sp in 0..n {
            let out_n = out.batch_slice(sp)?;
            let mask = batch.mask_row(sp)?;
            let loss = score_loss(schedule, &out_n, &eps_all[sp], ts[sp], &mask)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss is not finite at iteration {}, speaker {}",
                    it, sp
                )));
            }
            losses.push(loss);
            let g = score_loss_grad(schedule, &out_n, &eps_all[sp], ts[sp], &mask)?;
            dout.set_batch_slice(sp, &g)?;
        }

        let grads = net
            .backward(&cache, &dout, Some(&bank), false)?
            .adapters
            .expect("bank present");

        for (li, layer) in bank.layers_mut().iter_mut().enumerate() {
            let st = &mut states[li];
            let g = &grads[li];
            if let (Some(st_b), Some(db)) = (st.b.as_mut(), g.db.as_ref()) {
                st_b.apply(&mut layer.b, db, &hp)?;
            }
            st.a.apply(&mut layer.a, &g.da, &hp)?;
            if let (Some(st_m), Some(dm), Some(m)) =
                (st.m.as_mut(), g.dm.as_ref(), layer.m.as_mut())
            {
                st_m.apply(m, dm, &hp)?;
            }
        }
        loss_history.push(losses);
    }

    Ok(AdaptOutcome {
        bank,
        loss_history,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Sequential baseline: N independent single-speaker runs with the same
/// per-speaker streams they would receive inside a batch. Returns the
/// reassembled bank, the loss histories stacked in speaker order, and the
/// total wall-clock.
pub fn adapt_sequential(
    net: &ScoreNet,
    schedule: &NoiseSchedule<f64>,
    bank: AdapterBank,
    batch: &SpeakerBatch,
    iterations: usize,
    lr: f64,
    seed: u64,
) -> Result<AdaptOutcome> {
    let n = batch.n();
    bank.check_speakers(n)?;
    let f = batch.x0.shape()[1];
    let mut merged = bank.clone();
    let mut per_speaker_hist: Vec<Vec<f64>> = Vec::with_capacity(n);
    let start = Instant::now();
    for sp in 0..n {
        let solo_bank = bank.slice_speaker(sp)?;
        let len = batch.lengths[sp];
        // unpadded single-speaker batch
        let mut x0 = Tensor::zeros(&[1, f, len]);
        let padded = batch.x0.batch_slice(sp)?;
        let l = batch.max_len();
        for fi in 0..f {
            for j in 0..len {
                x0.data_mut()[fi * len + j] = padded.data()[fi * l + j];
            }
        }
        let solo = SpeakerBatch {
            x0,
            lengths: vec![len],
            mask: Tensor::filled(&[1, 1, len], 1.0),
            content: vec![batch.content[sp][..len].to_vec()],
            speaker_ids: vec![batch.speaker_ids[sp]],
        };
        let out = adapt_batched(net, schedule, solo_bank, &solo, iterations, lr, seed)?;
        merged.absorb_speaker(sp, &out.bank)?;
        per_speaker_hist.push(out.loss_history.into_iter().map(|v| v[0]).collect());
    }
    let wall = start.elapsed().as_secs_f64();
    let loss_history = (0..iterations)
        .map(|it| (0..n).map(|sp| per_speaker_hist[sp][it]).collect())
        .collect();
    Ok(AdaptOutcome { bank: merged, loss_history, wall_seconds: wall })
}

/// Freeze the shared B at its current value; only A and the scale matrix
/// keep training.
pub fn freeze_shared_b(bank: &mut AdapterBank) -> Result<()> {
    if bank.config().sharing_mode != SharingMode::SharedB {
        return Err(Error::Config(format!(
            "freeze_shared_b requires shared-b mode, bank is {}",
            bank.config().sharing_mode.label()
        )));
    }
    bank.set_freeze_b(true);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub loss_curve: Vec<f64>,
    /// Moving average of the total loss (window 50).
    pub smoothed: Vec<f64>,
}

/// Train the base network on the multi-speaker batch with Adam.
pub fn pretrain(
    net: &mut ScoreNet,
    schedule: &NoiseSchedule<f64>,
    batch: &SpeakerBatch,
    speaker_rows: &[usize],
    iterations: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainOutcome> {
    let n = batch.n();
    if speaker_rows.len() != n {
        return Err(Error::Dim(format!(
            "pretrain: {} speaker rows for batch of {}",
            speaker_rows.len(),
            n
        )));
    }
    let f = batch.x0.shape()[1];
    let l = batch.max_len();
    let hp = AdamParams::with_lr(lr);
    let mut states: Vec<AdamState<f64>> = {
        let mut probe = net.clone();
        probe
            .param_tensors_mut()
            .iter()
            .map(|t| AdamState::new(t.shape()))
            .collect()
    };

    let mut loss_curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut ts = Vec::with_capacity(n);
        let mut x_t = Tensor::zeros(&[n, f, l]);
        let mut eps_all = Vec::with_capacity(n);
        for sp in 0..n {
            // pretraining draws live in their own stream namespace so they
            // never collide with adaptation draws under the same seed
            let sid = batch.speaker_ids[sp];
            let ts_stream = RngStream::new(seed, streams::pretrain()).substream(2 * sid);
            let eps_stream = RngStream::new(seed, streams::pretrain()).substream(2 * sid + 1);
            let t = T_MIN + (1.0 - T_MIN) * ts_stream.uniform_at(it as u64);
            let lam = lambda_of(schedule, t)?;
            let len = batch.lengths[sp];
            let base = (it * f * len) as u64;
            let mut eps = Tensor::zeros(&[f, l]);
            for fi in 0..f {
                for j in 0..len {
                    eps.data_mut()[fi * l + j] =
                        eps_stream.normal_at(base + (fi * len + j) as u64);
                }
            }
            let x0_n = batch.x0.batch_slice(sp)?;
            let mut xt_n = x0_n.scale(lam.sqrt());
            xt_n.axpy((1.0 - lam).sqrt(), &eps)?;
            x_t.set_batch_slice(sp, &xt_n)?;
            ts.push(t);
            eps_all.push(eps);
        }

        let input = BatchInput {
            x: &x_t,
            t: &ts,
            codes: &batch.content,
            lengths: &batch.lengths,
            speaker_rows: Some(speaker_rows),
        };
        let (out, cache) = net.forward(None, &input)?;

        let mut total = 0.0;
        let mut dout = Tensor::zeros(&[n, f, l]);
        for sp in 0..n {
            let out_n = out.batch_slice(sp)?;
            let mask = batch.mask_row(sp)?;
            let loss = score_loss(schedule, &out_n, &eps_all[sp], ts[sp], &mask)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "pretraining loss is not finite at iteration {}, speaker {}",
                    it, sp
                )));
            }
            total += loss;
            let g = score_loss_grad(schedule, &out_n, &eps_all[sp], ts[sp], &mask)?;
            dout.set_batch_slice(sp, &g)?;
        }

        let grads = net
            .backward(&cache, &dout, None, true)?
            .base
            .expect("base gradients requested");
        for (i, p) in net.param_tensors_mut().into_iter().enumerate() {
            states[i].apply(p, &grads.tensors[i], &hp)?;
        }
        loss_curve.push(total);
    }

    let window = 50usize;
    let smoothed = (0..loss_curve.len())
        .map(|i| {
            let lo = i.saturating_sub(window - 1);
            let s: f64 = loss_curve[lo..=i].iter().sum();
            s / (i - lo + 1) as f64
        })
        .collect();
    Ok(PretrainOutcome { loss_curve, smoothed })
}
