//! Run configuration: one TOML document with a section per component.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::DurationDomain;
use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::latent::EncoderConfig;
use crate::losses::LossWeights;
use crate::ode::SolverConfig;
use crate::signal::{MelConfig, SpecSampler, SynthConfig};
use crate::vector_field::VectorFieldConfig;
use crate::wavegen::{DecoderConfig, DiscriminatorConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub generator: AdamConfig,
    pub discriminator: AdamConfig,
    /// Learning rate of the flow-only stage on frozen encoders.
    pub flow: AdamConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let desk = AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        };
        Self {
            generator: desk,
            discriminator: desk,
            flow: desk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Training utterances.
    pub utterances: usize,
    pub held_out: usize,
    pub synth: SynthConfig,
    pub sampler: SpecSampler,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            utterances: 64,
            held_out: 8,
            synth: SynthConfig {
                sample_rate: 8000,
                hop: 16,
                consonants: 3,
            },
            sampler: SpecSampler::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Utterances per step.
    pub batch: usize,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: usize,
    /// Steps before the flow-matching term joins the generator objective.
    pub cfm_warmup_steps: usize,
    /// Let the flow-matching gradient reach the encoders.
    pub cfm_through_encoders: bool,
    /// Steps of flow-only training on frozen encoders after the joint stage.
    pub flow_steps: usize,
    /// Utterances per flow-only step.
    pub flow_batch: usize,
    pub duration_domain: DurationDomain,
    /// Prior sampling temperature at inference.
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            checkpoint_every: 0,
            cfm_warmup_steps: 0,
            cfm_through_encoders: false,
            flow_steps: 1500,
            flow_batch: 8,
            duration_domain: DurationDomain::Log,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub latent: EncoderConfig,
    pub vector_field: VectorFieldConfig,
    pub solver: SolverConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub mel: MelConfig,
    pub losses: LossWeights,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let latent = EncoderConfig::default();
        Self {
            seed: 0,
            vector_field: VectorFieldConfig {
                cond_dim: latent.latent_channels,
                ..VectorFieldConfig::default()
            },
            latent,
            solver: SolverConfig::default(),
            decoder: DecoderConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            mel: MelConfig {
                sample_rate: 8000,
                fft_size: 256,
                hop: 16,
                window: 256,
                n_mels: 24,
                f_min: 0.0,
                f_max: 4000.0,
                log_floor: 1e-5,
            },
            losses: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `text` over the desk defaults; missing keys keep their default.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| err(&e))?;
        merge(&mut base, user);
        let cfg: RunConfig = base.try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical text: every key present, in declaration order.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// First 8 bytes (little-endian) of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> Result<u64> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        Ok(u64::from_le_bytes(b))
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.vector_field.validate()?;
        self.solver.validate()?;
        self.decoder.validate()?;
        self.discriminator.validate()?;
        self.mel.validate()?;
        self.losses.validate()?;
        let hop = self.decoder.hop();
        let synth = &self.dataset.synth;
        if self.mel.hop != hop || synth.hop != hop {
            return Err(Error::Config(format!(
                "decoder hop {hop}, mel hop {} and dataset hop {} must agree",
                self.mel.hop, synth.hop
            )));
        }
        if self.mel.sample_rate != synth.sample_rate {
            return Err(Error::Config(format!(
                "mel sample rate {} differs from dataset rate {}",
                self.mel.sample_rate, synth.sample_rate
            )));
        }
        if self.latent.mel_bands != self.mel.n_mels {
            return Err(Error::Config(format!(
                "encoders expect {} mel bands, analysis produces {}",
                self.latent.mel_bands, self.mel.n_mels
            )));
        }
        let s = &self.dataset.sampler;
        if self.latent.vocab < s.vocab() || synth.consonants != s.consonants {
            return Err(Error::Config(format!(
                "vocabulary {} cannot hold the sampler's {} tokens, or consonant counts differ",
                self.latent.vocab,
                s.vocab()
            )));
        }
        if self.latent.harmonics != s.harmonics {
            return Err(Error::Config(format!(
                "prior predicts {} harmonics, data has {}",
                self.latent.harmonics, s.harmonics
            )));
        }
        if self.vector_field.cond_dim == 0 {
            return Err(Error::Config(
                "the vector field needs the prior mean as conditioning (cond_dim > 0)".into(),
            ));
        }
        if self.train.batch == 0 || self.train.flow_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.train.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if self.dataset.utterances == 0 {
            return Err(Error::Config("dataset needs training utterances".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[train]\nsteps = 3\nwarp = 1\n").unwrap_err();
        assert!(e.to_string().contains("warp"), "{e}");
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[mel]\ncolour = 1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("# desk\nseed = 7\n[train]\nsteps = 3\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.steps, 3);
        assert_eq!(c.mel, RunConfig::default().mel);
        let m = RunConfig::from_toml("[mel]\nlog_floor = 1e-4\n").unwrap();
        assert_eq!(m.mel.hop, RunConfig::default().mel.hop);
    }

    #[test]
    fn key_order_does_not_change_fingerprint() {
        let a = RunConfig::from_toml("seed = 3\n[train]\nsteps = 5\nbatch = 2\n[mel]\nlog_floor = 1e-5\n")
            .unwrap();
        let mut b =
            RunConfig::from_toml("seed = 3\n[mel]\nlog_floor = 1e-5\n[train]\nbatch = 2\nsteps = 5\n")
                .unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.train.steps = 6;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
    }

    #[test]
    fn inconsistent_hops_are_rejected() {
        let mut c = RunConfig::default();
        c.mel.hop = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
