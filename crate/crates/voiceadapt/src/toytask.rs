//! Synthetic speaker task.
//!
//! Generates mel-like arrays with a fixed per-speaker spectral signature,
//! content-driven envelopes and a per-speaker harmonic wobble, plus the
//! time-averaged cosine similarity used as the desk-scale voice metric.
//! Everything is a pure function of (speaker id, seed), so a speaker's data
//! never depends on which batch it appears in.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::streams;
use crate::Tensor;

/// Content vocabulary size, matching the score net's embedding table.
pub const N_CODES: usize = 8;
/// Mel bins of the toy generator.
pub const F_DIM: usize = 16;
/// Frame noise level.
pub const NOISE_SIGMA: f64 = 0.05;
/// Default reference length range (inclusive).
pub const MIN_LEN: usize = 24;
pub const MAX_LEN: usize = 48;

#[derive(Clone, Debug)]
pub struct ToySpeaker {
    pub id: u64,
    /// Unit-norm spectral signature.
    pub signature: Vec<f64>,
    pub harm_amp: f64,
    pub harm_phase: f64,
    /// Cluster label; 0 unless produced by the clustered generator.
    pub cluster: usize,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Deterministic distinct speakers; pairwise signature cosine < 0.9.
pub fn gen_speakers(count: usize, seed: u64) -> Vec<ToySpeaker> {
    assert!(count >= 1, "gen_speakers: count must be >= 1");
    let mut s = RngStream::new(seed, streams::speaker_gen());
    let mut out: Vec<ToySpeaker> = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let signature = loop {
            let mut sig: Vec<f64> = (0..F_DIM).map(|_| s.next_normal()).collect();
            if normalize(&mut sig) < 1e-6 {
                continue;
            }
            if out.iter().all(|sp| cosine(&sig, &sp.signature) < 0.9) {
                break sig;
            }
        };
        let harm_amp = 0.05 + 0.10 * s.next_uniform(0.0, 1.0);
        let harm_phase = 2.0 * std::f64::consts::PI * s.next_uniform(0.0, 1.0);
        out.push(ToySpeaker { id, signature, harm_amp, harm_phase, cluster: 0 });
    }
    out
}

/// Speakers drawn around `n_clusters` signature centroids, for the
/// same-group vs mixed-group analysis. Within-cluster signatures are
/// intentionally similar.
pub fn gen_speaker_clusters(count: usize, n_clusters: usize, seed: u64) -> Vec<ToySpeaker> {
    assert!(count >= 1 && n_clusters >= 1);
    let mut s = RngStream::new(seed, streams::speaker_gen()).substream(77);
    let mut centers = Vec::with_capacity(n_clusters);
    for _ in 0..n_clusters {
        let mut c: Vec<f64> = (0..F_DIM).map(|_| s.next_normal()).collect();
        normalize(&mut c);
        centers.push(c);
    }
    let mut out = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let cluster = (id as usize) % n_clusters;
        let mut sig: Vec<f64> = centers[cluster]
            .iter()
            .map(|c| c + 0.25 * s.next_normal())
            .collect();
        normalize(&mut sig);
        let harm_amp = 0.05 + 0.10 * s.next_uniform(0.0, 1.0);
        let harm_phase = 2.0 * std::f64::consts::PI * s.next_uniform(0.0, 1.0);
        out.push(ToySpeaker { id, signature: sig, harm_amp, harm_phase, cluster });
    }
    out
}

/// Content envelope: positive, varies over bins and codes, independent of
/// the speaker.
pub fn envelope(code: u16, f: usize) -> f64 {
    let fr = f as f64 / F_DIM as f64;
    let c = code as f64;
    0.6 + 0.4 * (2.0 * std::f64::consts::PI * fr * (1.0 + 0.5 * c) + 0.9 * c).sin()
}

/// Frame-level content codes for a speaker: codes held for short runs so
/// attention has temporal structure to use.
pub fn content_codes(speaker_id: u64, length: usize, seed: u64) -> Vec<u16> {
    let mut s = RngStream::new(seed, streams::content(speaker_id));
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let code = s.next_index(N_CODES) as u16;
        for _ in 0..3 {
            if out.len() < length {
                out.push(code);
            }
        }
    }
    out
}

/// One rendered reference: frame j is signature * envelope(code_j) plus the
/// speaker's harmonic wobble and i.i.d. noise of the given sigma.
pub fn render(
    speaker: &ToySpeaker,
    codes: &[u16],
    sigma: f64,
    stream: &mut RngStream,
) -> Result<Tensor> {
    let l = codes.len();
    if l < 4 {
        return Err(Error::Domain(format!("render: length {} < 4", l)));
    }
    let mut x = Tensor::zeros(&[F_DIM, l]);
    for j in 0..l {
        for f in 0..F_DIM {
            let harm = speaker.harm_amp
                * (std::f64::consts::TAU * j as f64 / 8.0 + speaker.harm_phase + 0.7 * f as f64)
                    .sin();
            let noise = if sigma > 0.0 { sigma * stream.next_normal() } else { 0.0 };
            x.data_mut()[f * l + j] =
                speaker.signature[f] * envelope(codes[j], f) + harm + noise;
        }
    }
    Ok(x)
}

/// Padded multi-speaker reference batch.
#[derive(Clone, Debug)]
pub struct SpeakerBatch {
    pub x0: Tensor,            // [N, F, L]
    pub lengths: Vec<usize>,
    pub mask: Tensor,          // [N, 1, L], 1 iff j < lengths[n]
    pub content: Vec<Vec<u16>>, // [N][L], padded with 0
    pub speaker_ids: Vec<u64>,
}

impl SpeakerBatch {
    pub fn n(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.x0.shape()[2]
    }

    /// [1, L] mask row for one speaker.
    pub fn mask_row(&self, n: usize) -> Result<Tensor> {
        self.mask.batch_slice(n)
    }
}

/// Per-speaker reference lengths in [MIN_LEN, MAX_LEN], keyed by speaker id.
pub fn default_lengths(speakers: &[ToySpeaker], seed: u64) -> Vec<usize> {
    let s = RngStream::new(seed, streams::lengths());
    speakers
        .iter()
        .map(|sp| {
            let u = s.uniform_at(sp.id);
            MIN_LEN + (u * (MAX_LEN - MIN_LEN + 1) as f64) as usize
        })
        .collect()
}

/// Render and pad one reference per speaker. Each speaker's render stream is
/// keyed by its id, so the slice for speaker n is identical whether it is
/// rendered alone or inside any batch.
pub fn make_reference_batch(
    speakers: &[ToySpeaker],
    lengths: &[usize],
    seed: u64,
) -> Result<SpeakerBatch> {
    if speakers.is_empty() {
        return Err(Error::Config("make_reference_batch: no speakers".into()));
    }
    if speakers.len() != lengths.len() {
        return Err(Error::Dim(format!(
            "make_reference_batch: {} speakers, {} lengths",
            speakers.len(),
            lengths.len()
        )));
    }
    let n = speakers.len();
    let l = *lengths.iter().max().unwrap();
    let mut x0 = Tensor::zeros(&[n, F_DIM, l]);
    let mut mask = Tensor::zeros(&[n, 1, l]);
    let mut content = Vec::with_capacity(n);
    for (sp, speaker) in speakers.iter().enumerate() {
        let len = lengths[sp];
        let codes = content_codes(speaker.id, len, seed);
        let mut stream = RngStream::new(seed, streams::render(speaker.id));
        let mel = render(speaker, &codes, NOISE_SIGMA, &mut stream)?; // [F, len]
        for f in 0..F_DIM {
            for j in 0..len {
                x0.data_mut()[(sp * F_DIM + f) * l + j] = mel.data()[f * len + j];
            }
        }
        for j in 0..len {
            mask.data_mut()[sp * l + j] = 1.0;
        }
        let mut padded = codes;
        padded.resize(l, 0);
        content.push(padded);
    }
    Ok(SpeakerBatch {
        x0,
        lengths: lengths.to_vec(),
        mask,
        content,
        speaker_ids: speakers.iter().map(|s| s.id).collect(),
    })
}

/// Masked time-average of frames, normalized to unit norm.
pub fn signature_of(mel: &Tensor, mask: &Tensor) -> Result<Vec<f64>> {
    let (f, t) = match mel.shape() {
        [f, t] => (*f, *t),
        s => return Err(Error::Dim(format!("signature_of: mel {:?}", s))),
    };
    if mask.numel() != t {
        return Err(Error::Dim(format!(
            "signature_of: mask {:?} for {} frames",
            mask.shape(),
            t
        )));
    }
    let total: f64 = mask.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("signature_of: all frames masked".into()));
    }
    let mut sig = vec![0.0; f];
    for fi in 0..f {
        let mut acc = 0.0;
        for j in 0..t {
            acc += mel.data()[fi * t + j] * mask.data()[j];
        }
        sig[fi] = acc / total;
    }
    if normalize(&mut sig) < 1e-12 {
        return Err(Error::Degenerate(
            "signature_of: zero time-averaged frame".into(),
        ));
    }
    Ok(sig)
}

/// Cosine similarity of two nonzero vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!(
            "similarity: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Degenerate("similarity: zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
