//! Stream-id layout for the counter-based RNG.
//!
//! Every random decision in the pipeline draws from a stream whose id is a
//! pure function of what the draw is for (speaker id, layer index, purpose),
//! never of batch composition. This is what makes batched and sequential
//! adaptation consume identical noise.

const TAG_SHIFT: u64 = 56;

pub const TAG_NOISE: u64 = 1;
pub const TAG_TIME: u64 = 2;
pub const TAG_BANK_B: u64 = 3;
pub const TAG_BANK_B_SHARED: u64 = 4;
pub const TAG_SPEAKER_GEN: u64 = 5;
pub const TAG_RENDER: u64 = 6;
pub const TAG_CONTENT: u64 = 7;
pub const TAG_SAMPLE: u64 = 8;
pub const TAG_PRETRAIN: u64 = 9;
pub const TAG_NET_INIT: u64 = 10;
pub const TAG_LENGTHS: u64 = 11;

/// Per-speaker corruption noise (epsilon draws).
pub fn speaker_noise(speaker_id: u64) -> u64 {
    (TAG_NOISE << TAG_SHIFT) | (speaker_id & 0x00FF_FFFF_FFFF_FFFF)
}

/// Per-speaker timestep draws.
pub fn speaker_time(speaker_id: u64) -> u64 {
    (TAG_TIME << TAG_SHIFT) | (speaker_id & 0x00FF_FFFF_FFFF_FFFF)
}

/// Per-speaker, per-layer adapter initialization.
pub fn bank_b_init(layer: usize, speaker_id: u64) -> u64 {
    (TAG_BANK_B << TAG_SHIFT) | ((speaker_id & 0xFF_FFFF_FFFF) << 16) | (layer as u64 & 0xFFFF)
}

/// Shared-B initialization (speaker independent).
pub fn bank_b_shared_init(layer: usize) -> u64 {
    (TAG_BANK_B_SHARED << TAG_SHIFT) | (layer as u64 & 0xFFFF)
}

pub fn speaker_gen() -> u64 {
    TAG_SPEAKER_GEN << TAG_SHIFT
}

pub fn render(speaker_id: u64) -> u64 {
    (TAG_RENDER << TAG_SHIFT) | (speaker_id & 0x00FF_FFFF_FFFF_FFFF)
}

pub fn content(speaker_id: u64) -> u64 {
    (TAG_CONTENT << TAG_SHIFT) | (speaker_id & 0x00FF_FFFF_FFFF_FFFF)
}

pub fn sampler(run: u64) -> u64 {
    (TAG_SAMPLE << TAG_SHIFT) | (run & 0x00FF_FFFF_FFFF_FFFF)
}

pub fn pretrain() -> u64 {
    TAG_PRETRAIN << TAG_SHIFT
}

pub fn net_init(which: u64) -> u64 {
    (TAG_NET_INIT << TAG_SHIFT) | (which & 0x00FF_FFFF_FFFF_FFFF)
}

pub fn lengths() -> u64 {
    TAG_LENGTHS << TAG_SHIFT
}
