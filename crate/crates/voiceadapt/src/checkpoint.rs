//! Checkpoint formats for adapter banks, score nets and dataset dumps.
//!
//! All three share the container layout from `container`: magic, format
//! version, body checksum, then a config block, a layer/shape table and the
//! little-endian f64 payload. Banks do not store the frozen base weights;
//! loading takes them from the live net and validates dimensions.

use std::path::Path;

use crate::adapter::{AdaptedLayer, AdapterBank, AdapterConfig, SharingMode};
use crate::container::{read_file, write_file, BodyReader, BodyWriter};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scorenet::{NetConfig, ScoreNet};
use crate::toytask::SpeakerBatch;
use crate::Tensor;

pub const MAGIC_BANK: &[u8; 4] = b"NVBK";
pub const MAGIC_NET: &[u8; 4] = b"NVSN";
pub const MAGIC_DATA: &[u8; 4] = b"NVDS";

fn mode_to_u8(mode: SharingMode) -> u8 {
    match mode {
        SharingMode::Batchwise => 0,
        SharingMode::SharedB => 1,
        SharingMode::SharedA => 2,
        SharingMode::SharedBoth => 3,
    }
}

fn mode_from_u8(v: u8, offset: usize) -> Result<SharingMode> {
    match v {
        0 => Ok(SharingMode::Batchwise),
        1 => Ok(SharingMode::SharedB),
        2 => Ok(SharingMode::SharedA),
        3 => Ok(SharingMode::SharedBoth),
        other => Err(Error::Format {
            offset,
            msg: format!("unknown sharing mode byte {}", other),
        }),
    }
}

fn read_flag(r: &mut BodyReader, what: &str) -> Result<bool> {
    let off = r.offset();
    match r.u8(what)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::Format {
            offset: off,
            msg: format!("{}: invalid flag byte {}", what, other),
        }),
    }
}

pub fn save_bank(path: &Path, bank: &AdapterBank) -> Result<()> {
    let cfg = bank.config();
    let mut w = BodyWriter::new();
    w.u32(cfg.rank as u32);
    w.f64(cfg.alpha);
    w.u8(mode_to_u8(cfg.sharing_mode));
    w.u8(cfg.scale_enabled as u8);
    w.u8(cfg.normalization_enabled as u8);
    w.u8(cfg.freeze_b as u8);
    w.u8(cfg.detach_norm as u8);
    w.u32(cfg.num_speakers as u32);
    for &id in bank.speaker_ids() {
        w.u64(id);
    }
    w.u32(bank.layers().len() as u32);
    for layer in bank.layers() {
        let (d, k) = layer.dims();
        w.u32(d as u32);
        w.u32(k as u32);
    }
    for layer in bank.layers() {
        w.f64_slice(layer.b.data());
        w.f64_slice(layer.a.data());
        if let Some(m) = &layer.m {
            w.f64_slice(m.data());
        }
    }
    write_file(path, MAGIC_BANK, &w.into_bytes())
}

/// Load a bank against the live net's frozen base weights.
pub fn load_bank(path: &Path, base_layers: &[Tensor]) -> Result<AdapterBank> {
    let body = read_file(path, MAGIC_BANK)?;
    let mut r = BodyReader::new(&body);
    let rank = r.u32("rank")? as usize;
    let alpha = r.f64("alpha")?;
    let mode_off = r.offset();
    let mode = mode_from_u8(r.u8("sharing mode")?, mode_off)?;
    let scale_enabled = read_flag(&mut r, "scale flag")?;
    let normalization_enabled = read_flag(&mut r, "normalization flag")?;
    let freeze_b = read_flag(&mut r, "freeze flag")?;
    let detach_norm = read_flag(&mut r, "detach flag")?;
    let n = r.u32("speaker count")? as usize;
    let config = AdapterConfig {
        rank,
        alpha,
        sharing_mode: mode,
        scale_enabled,
        normalization_enabled,
        num_speakers: n,
        freeze_b,
        detach_norm,
    };
    config.validate()?;
    let mut speaker_ids = Vec::with_capacity(n);
    for _ in 0..n {
        speaker_ids.push(r.u64("speaker id")?);
    }
    let n_layers = r.u32("layer count")? as usize;
    if n_layers != base_layers.len() {
        return Err(Error::Compat(format!(
            "bank has {} layers but the net has {}",
            n_layers,
            base_layers.len()
        )));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let d = r.u32("layer rows")? as usize;
        let k = r.u32("layer cols")? as usize;
        if base_layers[li].shape() != [d, k] {
            return Err(Error::Compat(format!(
                "layer {}: bank expects ({}, {}), net has {:?}",
                li,
                d,
                k,
                base_layers[li].shape()
            )));
        }
        dims.push((d, k));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (li, &(d, k)) in dims.iter().enumerate() {
        let b_shape: Vec<usize> = if mode.b_is_shared() {
            vec![d, rank]
        } else {
            vec![n, d, rank]
        };
        let a_shape: Vec<usize> = if mode.a_is_shared() {
            vec![rank, k]
        } else {
            vec![n, rank, k]
        };
        let off = r.offset();
        let b = Tensor::new(
            &b_shape,
            r.f64_vec(b_shape.iter().product(), "B payload")?,
        )
        .map_err(|e| Error::Format { offset: off, msg: format!("layer {} B: {}", li, e) })?;
        let off = r.offset();
        let a = Tensor::new(
            &a_shape,
            r.f64_vec(a_shape.iter().product(), "A payload")?,
        )
        .map_err(|e| Error::Format { offset: off, msg: format!("layer {} A: {}", li, e) })?;
        let m = if scale_enabled {
            let off = r.offset();
            Some(
                Tensor::new(&[n, 1, k], r.f64_vec(n * k, "m payload")?).map_err(|e| {
                    Error::Format { offset: off, msg: format!("layer {} m: {}", li, e) }
                })?,
            )
        } else {
            None
        };
        layers.push(AdaptedLayer { w0: base_layers[li].clone(), b, a, m });
    }
    r.finish()?;
    AdapterBank::from_parts(config, speaker_ids, layers)
}

pub fn save_net(path: &Path, net: &ScoreNet) -> Result<()> {
    let cfg = net.cfg;
    let mut w = BodyWriter::new();
    for v in [
        cfg.f_dim,
        cfg.hidden,
        cfg.attn_dim,
        cfg.ff_dim,
        cfg.blocks,
        cfg.n_codes,
        cfg.n_speakers,
    ] {
        w.u32(v as u32);
    }
    let mut probe = net.clone();
    for t in probe.param_tensors_mut() {
        w.f64_slice(t.data());
    }
    write_file(path, MAGIC_NET, &w.into_bytes())
}

pub fn load_net(path: &Path) -> Result<ScoreNet> {
    let body = read_file(path, MAGIC_NET)?;
    let mut r = BodyReader::new(&body);
    let mut vals = [0usize; 7];
    for (v, what) in vals.iter_mut().zip([
        "f_dim",
        "hidden",
        "attn_dim",
        "ff_dim",
        "blocks",
        "n_codes",
        "n_speakers",
    ]) {
        *v = r.u32(what)? as usize;
    }
    let cfg = NetConfig {
        f_dim: vals[0],
        hidden: vals[1],
        attn_dim: vals[2],
        ff_dim: vals[3],
        blocks: vals[4],
        n_codes: vals[5],
        n_speakers: vals[6],
    };
    cfg.validate()?;
    let mut net = ScoreNet::init(cfg, &RngStream::new(0, 0))?;
    for t in net.param_tensors_mut() {
        let off = r.offset();
        let shape = t.shape().to_vec();
        let data = r.f64_vec(t.numel(), "net payload")?;
        *t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: off,
            msg: format!("net tensor: {}", e),
        })?;
    }
    r.finish()?;
    Ok(net)
}

/// Dump one file per speaker: id, mel [F, len], content codes.
pub fn save_dataset(dir: &Path, batch: &SpeakerBatch) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let f = batch.x0.shape()[1];
    let l = batch.max_len();
    let mut paths = Vec::with_capacity(batch.n());
    for sp in 0..batch.n() {
        let id = batch.speaker_ids[sp];
        let len = batch.lengths[sp];
        let mut w = BodyWriter::new();
        w.u64(id);
        w.u32(f as u32);
        w.u32(len as u32);
        for &c in &batch.content[sp][..len] {
            w.u32(c as u32);
        }
        for fi in 0..f {
            for j in 0..len {
                w.f64(batch.x0.data()[(sp * f + fi) * l + j]);
            }
        }
        let path = dir.join(format!("speaker_{:04}.nvds", id));
        write_file(&path, MAGIC_DATA, &w.into_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

pub struct SpeakerData {
    pub id: u64,
    pub mel: Tensor, // [F, len]
    pub codes: Vec<u16>,
}

pub fn load_speaker_data(path: &Path) -> Result<SpeakerData> {
    let body = read_file(path, MAGIC_DATA)?;
    let mut r = BodyReader::new(&body);
    let id = r.u64("speaker id")?;
    let f = r.u32("mel bins")? as usize;
    let len = r.u32("length")? as usize;
    let mut codes = Vec::with_capacity(len);
    for _ in 0..len {
        let off = r.offset();
        let c = r.u32("content code")?;
        if c > u16::MAX as u32 {
            return Err(Error::Format {
                offset: off,
                msg: format!("content code {} out of range", c),
            });
        }
        codes.push(c as u16);
    }
    let off = r.offset();
    let mel = Tensor::new(&[f, len], r.f64_vec(f * len, "mel payload")?).map_err(|e| {
        Error::Format { offset: off, msg: format!("mel: {}", e) }
    })?;
    r.finish()?;
    Ok(SpeakerData { id, mel, codes })
}
