use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::corpus::TokenizerConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::nn::AdamConfig;
use crate::objective::LossWeights;
use crate::vcn::VcnConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attention_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 128,
            attention_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub n_stages: usize,
    /// Initial learning rate of each stage, shared by generators, encoder and critic.
    pub learning_rates: Vec<f64>,
    pub lr_decay: f64,
    /// Epochs between decays, counted from the start of each stage.
    pub decay_every: usize,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub min_token_freq: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderDims,
    pub gan: GanConfig,
    pub vcn: VcnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_stages: 4,
            learning_rates: vec![3e-4, 3e-4, 2e-4, 1e-4],
            lr_decay: 0.2,
            decay_every: 20,
            batch_sizes: vec![96, 56, 24, 12],
            epochs: vec![50; 4],
            critic_steps: 1,
            split: [0.7, 0.1, 0.2],
            min_token_freq: 1,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderDims::default(),
            gan: GanConfig::default(),
            vcn: VcnConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Two stages at 16 and 32 pixels with narrow networks; runs in CPU-minutes.
    pub fn desk() -> Self {
        Self {
            n_stages: 2,
            learning_rates: vec![1e-3, 1e-3],
            batch_sizes: vec![8, 8],
            epochs: vec![5, 5],
            encoder: EncoderDims {
                embed_dim: 32,
                hidden_dim: 32,
                attention_dim: 16,
            },
            gan: GanConfig {
                base_resolution: 16,
                gen_channels: vec![16, 8],
                disc_channels: vec![16, 8],
                cond_channels: 8,
                ..GanConfig::default()
            },
            vcn: VcnConfig {
                widths: vec![8, 16, 32],
                blocks_per_stage: 1,
                embed_dim: 32,
                ..VcnConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::invalid(format!(
                "unknown preset {other:?} (expected desk or default)"
            ))),
        }
    }

    pub fn gan(&self) -> GanConfig {
        GanConfig {
            n_stages: self.n_stages,
            ..self.gan.clone()
        }
    }

    /// Learning rate for `epoch` (0-based, within the stage): `lr0 * decay^floor(epoch / every)`.
    pub fn learning_rate(&self, stage: usize, epoch: usize) -> f64 {
        let lr0 = self.learning_rates[stage - 1];
        let k = epoch / self.decay_every.max(1);
        (0..k).fold(lr0, |lr, _| lr * self.lr_decay)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let n = self.n_stages;
        if n == 0 {
            p.push("n_stages: must be >= 1".to_string());
        }
        for (key, len) in [
            ("learning_rates", self.learning_rates.len()),
            ("batch_sizes", self.batch_sizes.len()),
            ("epochs", self.epochs.len()),
        ] {
            if len != n {
                p.push(format!("{key}: length {len} != n_stages {n}"));
            }
        }
        for (i, lr) in self.learning_rates.iter().enumerate() {
            if !(lr.is_finite() && *lr > 0.0) {
                p.push(format!("learning_rates[{i}]: must be positive, got {lr}"));
            }
        }
        if let Some(i) = self.batch_sizes.iter().position(|&b| b == 0) {
            p.push(format!("batch_sizes[{i}]: must be >= 1"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            p.push("lr_decay: must be positive".into());
        }
        if self.decay_every == 0 {
            p.push("decay_every: must be >= 1".into());
        }
        if self.critic_steps == 0 {
            p.push("critic_steps: must be >= 1".into());
        }
        if !(self.split.iter().all(|r| r.is_finite() && *r > 0.0)
            && (self.split.iter().sum::<f64>() - 1.0).abs() < 1e-9)
        {
            p.push("split: fractions must be positive and sum to 1".into());
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            p.push("adam: betas must lie in [0, 1)".into());
        }
        if !(self.adam.eps.is_finite() && self.adam.eps > 0.0) {
            p.push("adam.eps: must be positive".into());
        }
        if self.tokenizer.max_sentences == 0 || self.tokenizer.max_tokens == 0 {
            p.push("tokenizer: limits must be >= 1".into());
        }
        let e = self.encoder;
        if e.embed_dim == 0 || e.hidden_dim == 0 || e.attention_dim == 0 {
            p.push("encoder: dimensions must be >= 1".into());
        }
        p.extend(self.weights.problems());
        if n > 0 {
            p.extend(self.gan().problems());
        }
        p.extend(self.vcn.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Parses and validates TOML; every key is optional and defaults to the base config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    /// Like [`TrainConfig::from_toml`] but unset keys fall back to `base`.
    pub fn from_toml_over(text: &str, base: &TrainConfig) -> Result<Self> {
        let mut merged = toml::Value::try_from(base).map_err(|e| Error::Internal(e.to_string()))?;
        let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        merge(&mut merged, overlay);
        let config: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, base: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_over(&text, base).map_err(|e| match e {
            Error::Config(p) => Error::Config(p.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
