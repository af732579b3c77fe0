//! Flat key = value experiment configuration.
//!
//! Every run is a pure function of (config, seeds, checkpoints); seeds are
//! always explicit values, never wall-clock derived. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use crate::adapter::{AdapterConfig, SharingMode};
use crate::error::{Error, Result};
use crate::scorenet::NetConfig;

#[derive(Clone, Debug, serde::Serialize)]
pub struct ExperimentConfig {
    // noise schedule
    pub beta0: f64,
    pub beta1: f64,
    // score net
    pub f_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub n_codes: usize,
    /// Training speakers used for pretraining.
    pub pretrain_speakers: usize,
    pub pretrain_iters: usize,
    pub pretrain_lr: f64,
    // adapter
    pub rank: usize,
    pub alpha: f64,
    pub mode: SharingMode,
    pub scale: bool,
    pub norm: bool,
    pub freeze_b: bool,
    pub detach_norm: bool,
    // adaptation
    pub speakers: usize,
    pub iters: usize,
    pub lr: f64,
    // sampling / eval
    pub sample_steps: usize,
    /// Independent sampling runs averaged per evaluation.
    pub eval_reps: usize,
    // experiment sweeps
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    pub bench_reps: usize,
    /// Group experiment: clusters and group size.
    pub group_clusters: usize,
    pub group_size: usize,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            beta0: 0.05,
            beta1: 20.0,
            f_dim: 16,
            hidden: 32,
            attn_dim: 128,
            ff_dim: 64,
            blocks: 2,
            n_codes: 8,
            pretrain_speakers: 8,
            pretrain_iters: 6000,
            pretrain_lr: 3e-3,
            rank: 2,
            alpha: 8.0,
            mode: SharingMode::SharedB,
            scale: true,
            norm: true,
            freeze_b: false,
            detach_norm: false,
            speakers: 8,
            iters: 500,
            lr: 3e-3,
            sample_steps: 50,
            eval_reps: 5,
            seeds: vec![11, 12, 13],
            batch_sizes: vec![1, 2, 4, 8],
            bench_reps: 3,
            group_clusters: 2,
            group_size: 4,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            f_dim: self.f_dim,
            hidden: self.hidden,
            attn_dim: self.attn_dim,
            ff_dim: self.ff_dim,
            blocks: self.blocks,
            n_codes: self.n_codes,
            n_speakers: self.pretrain_speakers,
        }
    }

    /// Adapter configuration for a batch of `n` speakers.
    pub fn adapter_config(&self, n: usize) -> AdapterConfig {
        AdapterConfig {
            rank: self.rank,
            alpha: self.alpha,
            sharing_mode: self.mode,
            scale_enabled: self.scale,
            normalization_enabled: self.norm,
            num_speakers: n,
            freeze_b: self.freeze_b,
            detach_norm: self.detach_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net_config().validate()?;
        self.adapter_config(self.speakers.max(1)).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.f_dim != crate::toytask::F_DIM {
            return Err(Error::Config(format!(
                "f_dim {} does not match the toy generator's {}",
                self.f_dim,
                crate::toytask::F_DIM
            )));
        }
        if self.n_codes < crate::toytask::N_CODES {
            return Err(Error::Config(format!(
                "n_codes {} smaller than the toy generator's vocabulary {}",
                self.n_codes,
                crate::toytask::N_CODES
            )));
        }
        if self.batch_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("batch_sizes must be positive".into()));
        }
        if self.sample_steps == 0 || self.bench_reps == 0 || self.eval_reps == 0 {
            return Err(Error::Config(
                "sample_steps, bench_reps and eval_reps must be positive".into(),
            ));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| {
            Error::Config(format!("line {}: {} '{}' for key '{}'", line, what, value, key))
        };
        macro_rules! num {
            ($field:expr) => {
                $field = value.parse().map_err(|_| bad("invalid number"))?
            };
        }
        match key {
            "beta0" => num!(self.beta0),
            "beta1" => num!(self.beta1),
            "f_dim" => num!(self.f_dim),
            "hidden" => num!(self.hidden),
            "attn_dim" => num!(self.attn_dim),
            "ff_dim" => num!(self.ff_dim),
            "blocks" => num!(self.blocks),
            "n_codes" => num!(self.n_codes),
            "pretrain_speakers" => num!(self.pretrain_speakers),
            "pretrain_iters" => num!(self.pretrain_iters),
            "pretrain_lr" => num!(self.pretrain_lr),
            "rank" => num!(self.rank),
            "alpha" => num!(self.alpha),
            "mode" => self.mode = SharingMode::parse(value)?,
            "scale" => self.scale = parse_bool(value).ok_or_else(|| bad("invalid bool"))?,
            "norm" => self.norm = parse_bool(value).ok_or_else(|| bad("invalid bool"))?,
            "freeze_b" => {
                self.freeze_b = parse_bool(value).ok_or_else(|| bad("invalid bool"))?
            }
            "detach_norm" => {
                self.detach_norm = parse_bool(value).ok_or_else(|| bad("invalid bool"))?
            }
            "speakers" => num!(self.speakers),
            "iters" => num!(self.iters),
            "lr" => num!(self.lr),
            "sample_steps" => num!(self.sample_steps),
            "eval_reps" => num!(self.eval_reps),
            "seeds" => {
                self.seeds = parse_list(value).map_err(|_| bad("invalid seed list"))?
            }
            "batch_sizes" => {
                self.batch_sizes = parse_list(value).map_err(|_| bad("invalid size list"))?
            }
            "bench_reps" => num!(self.bench_reps),
            "group_clusters" => num!(self.group_clusters),
            "group_size" => num!(self.group_size),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("line {}: unknown key '{}'", line, other)))
            }
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{}'", i + 1, line))
            })?;
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
    let items: std::result::Result<Vec<T>, _> =
        v.split(',').map(|s| s.trim().parse::<T>()).collect();
    match items {
        Ok(list) if !list.is_empty() => Ok(list),
        _ => Err(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_keys_comments_and_lists() {
        let cfg = ExperimentConfig::parse(
            "# comment\n\
             speakers = 4\n\
             mode = batchwise  # trailing comment\n\
             scale = off\n\
             norm = off\n\
             seeds = 5, 6, 7\n\
             lr = 0.003\n",
        )
        .unwrap();
        assert_eq!(cfg.speakers, 4);
        assert_eq!(cfg.mode, SharingMode::Batchwise);
        assert!(!cfg.scale);
        assert_eq!(cfg.seeds, vec![5, 6, 7]);
        assert_eq!(cfg.lr, 0.003);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::parse("speekers = 4\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("speakers = four\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("just a line\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_inconsistent_settings() {
        // normalization without the scale matrix
        assert!(ExperimentConfig::parse("scale = off\n").is_err());
        assert!(ExperimentConfig::parse("seeds = \n").is_err());
        assert!(ExperimentConfig::parse("f_dim = 12\n").is_err());
    }
}
