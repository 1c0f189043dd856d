//! Named configuration profiles and the flat key=value config file format.
//!
//! Two built-in profiles: `toy` (small dimensions, runs end to end in
//! minutes) and `faithful` (the full-scale hyper-parameters: 32 layers,
//! spacing 6, width 4096, 32 heads, lr 1e-4, epochs 5/5/2, temperature 0.6,
//! top_p 0.8, target budget 512). A user config file starts from a base
//! profile and overrides individual keys.

use crate::bridge::ModelConfig;
use crate::bridge::sampling::SamplingParams;
use crate::encoders::{EncoderConfig, EncoderShapes};
use crate::error::{Error, Result};
use crate::projector::CondFlavor;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub name: String,
    pub n_layers: usize,
    pub l_spacing: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Used when no vocabulary is at hand (shape audits); training always
    /// substitutes the built vocabulary's true size.
    pub vocab_size_hint: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub encoders: EncoderShapes,
    pub prefix_len: usize,
    pub flavor: CondFlavor,
    pub sampling: SamplingParams,
    /// Generation budget for new tokens.
    pub max_new_tokens: usize,
    pub epochs: [usize; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub synth_secs: f64,
    pub sample_rate: u32,
}

impl Profile {
    pub fn toy() -> Profile {
        Profile {
            name: "toy".into(),
            n_layers: 8,
            l_spacing: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size_hint: 512,
            max_seq_len: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            encoders: EncoderShapes {
                music: EncoderConfig { rows: 25, dim: 32 },
                image: EncoderConfig { rows: 49, dim: 32 },
                video: EncoderConfig { rows: 98, dim: 32 },
            },
            prefix_len: 4,
            flavor: CondFlavor::Vec { dim: 16 },
            sampling: SamplingParams {
                temperature: 0.6,
                top_p: 0.8,
            },
            max_new_tokens: 24,
            epochs: [5, 5, 2],
            lr: 1e-4,
            batch_size: 4,
            seed: 42,
            synth_secs: 2.0,
            sample_rate: 16_000,
        }
    }

    pub fn faithful() -> Profile {
        Profile {
            name: "faithful".into(),
            n_layers: 32,
            l_spacing: 6,
            d_model: 4096,
            n_heads: 32,
            vocab_size_hint: 32_000,
            max_seq_len: 1024,
            lora_rank: 8,
            lora_alpha: 16.0,
            encoders: EncoderShapes {
                music: EncoderConfig {
                    rows: 25,
                    dim: 1024,
                },
                image: EncoderConfig { rows: 197, dim: 768 },
                video: EncoderConfig {
                    rows: 3137,
                    dim: 768,
                },
            },
            prefix_len: 4,
            flavor: CondFlavor::Vec { dim: 512 },
            sampling: SamplingParams {
                temperature: 0.6,
                top_p: 0.8,
            },
            max_new_tokens: 512,
            epochs: [5, 5, 2],
            lr: 1e-4,
            batch_size: 4,
            seed: 42,
            synth_secs: 4.0,
            sample_rate: 16_000,
        }
    }

    /// Resolves a profile name: `toy`, `faithful`, or a config file path.
    pub fn named(name: &str) -> Result<Profile> {
        match name {
            "toy" => Ok(Profile::toy()),
            "faithful" => Ok(Profile::faithful()),
            other => {
                let path = Path::new(other);
                if path.exists() {
                    Profile::from_file(path)
                } else {
                    Err(Error::Config(format!(
                        "unknown profile {other:?}: expected \"toy\", \"faithful\", or a config file path"
                    )))
                }
            }
        }
    }

    /// Parses a flat key=value file. Lines starting with `#` and blank
    /// lines are skipped. The optional `base` key selects the starting
    /// profile (default toy); every other key overrides one field.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Profile> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut profile = match pairs.iter().find(|(k, _)| k == "base") {
            Some((_, v)) if v == "toy" => Profile::toy(),
            Some((_, v)) if v == "faithful" => Profile::faithful(),
            Some((_, v)) => {
                return Err(Error::Config(format!(
                    "base must be \"toy\" or \"faithful\", got {v:?}"
                )))
            }
            None => Profile::toy(),
        };
        profile.name = path.display().to_string();
        for (k, v) in &pairs {
            if k != "base" {
                profile.set_key(k, v)?;
            }
        }
        profile.model_config(profile.vocab_size_hint).validate()?;
        Ok(profile)
    }

    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "n_layers" => self.n_layers = num(key, value)?,
            "l_spacing" => self.l_spacing = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "vocab_size_hint" => self.vocab_size_hint = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "prefix_len" => self.prefix_len = num(key, value)?,
            "enc.music.rows" => self.encoders.music.rows = num(key, value)?,
            "enc.music.dim" => self.encoders.music.dim = num(key, value)?,
            "enc.image.rows" => self.encoders.image.rows = num(key, value)?,
            "enc.image.dim" => self.encoders.image.dim = num(key, value)?,
            "enc.video.rows" => self.encoders.video.rows = num(key, value)?,
            "enc.video.dim" => self.encoders.video.dim = num(key, value)?,
            "flavor" => self.flavor = parse_flavor(value)?,
            "temperature" => self.sampling.temperature = num(key, value)?,
            "top_p" => self.sampling.top_p = num(key, value)?,
            "max_new_tokens" => self.max_new_tokens = num(key, value)?,
            "epochs" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "epochs must be three comma-separated counts, got {value:?}"
                    )));
                }
                for (i, p) in parts.iter().enumerate() {
                    self.epochs[i] = num("epochs", p)?;
                }
            }
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "synth_secs" => self.synth_secs = num(key, value)?,
            "sample_rate" => self.sample_rate = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// The bridge configuration for a concrete vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            l_spacing: self.l_spacing,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab_size,
            max_seq_len: self.max_seq_len,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }
}

/// Flavor syntax: `vec:DIM` or `seq:LENxDIM`.
fn parse_flavor(v: &str) -> Result<CondFlavor> {
    let bad = || Error::Config(format!("invalid flavor {v:?}: use vec:DIM or seq:LENxDIM"));
    if let Some(dim) = v.strip_prefix("vec:") {
        return Ok(CondFlavor::Vec {
            dim: dim.parse().map_err(|_| bad())?,
        });
    }
    if let Some(rest) = v.strip_prefix("seq:") {
        let (len, dim) = rest.split_once('x').ok_or_else(bad)?;
        return Ok(CondFlavor::Seq {
            len: len.parse().map_err(|_| bad())?,
            dim: dim.parse().map_err(|_| bad())?,
        });
    }
    Err(bad())
}
