use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{matmul_acc, Stft};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub window: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            fft_size: 1024,
            hop: 256,
            window: 1024,
            n_mels: 80,
            f_min: 0.0,
            f_max: 11025.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    /// Analysis matching a decoder whose upsampling product is 512.
    pub fn full_scale() -> Self {
        Self {
            fft_size: 2048,
            hop: 512,
            window: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.hop == 0 || self.window == 0 || self.n_mels == 0 {
            return Err(Error::Config(
                "mel hop, window and band count must be positive".into(),
            ));
        }
        if self.window > self.fft_size {
            return Err(Error::Config(format!(
                "mel window {} exceeds fft size {}",
                self.window, self.fft_size
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "mel band edges [{}, {}] must satisfy 0 <= f_min < f_max <= {nyquist}",
                self.f_min, self.f_max
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("mel log floor must be positive".into()));
        }
        Ok(())
    }
}

/// Natural-log mel magnitudes, `[bands × frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
}

impl MelSpectrogram {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn bands(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    /// Mean absolute difference to another spectrogram of the same shape.
    pub fn l1(&self, other: &MelSpectrogram) -> Result<f64> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::shape(
                "mel l1",
                format!("{:?} vs {:?}", self.values.shape(), other.values.shape()),
            ));
        }
        Ok(self
            .values
            .zip_map(&other.values, |a, b| (a - b).abs())?
            .mean())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if f >= min_log_hz {
        min_log_mel + (f / min_log_hz).ln() / logstep
    } else {
        f / f_sp
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = 6.4f64.ln() / 27.0;
    if m >= min_log_mel {
        min_log_hz * (logstep * (m - min_log_mel)).exp()
    } else {
        f_sp * m
    }
}

/// Centre frequency of every band (Hz).
pub fn band_centers(cfg: &MelConfig) -> Vec<f64> {
    edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filters on the Slaney mel scale, each scaled to unit area.
pub fn filterbank(cfg: &MelConfig) -> Tensor {
    let bins = cfg.fft_size / 2 + 1;
    let f = edges(cfg);
    let mut w = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let norm = 2.0 / (f[m + 2] - f[m]);
        for k in 0..bins {
            let hz = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
            let lower = (hz - f[m]) / (f[m + 1] - f[m]);
            let upper = (f[m + 2] - hz) / (f[m + 2] - f[m + 1]);
            w[m * bins + k] = norm * lower.min(upper).max(0.0);
        }
    }
    Tensor::matrix(cfg.n_mels, bins, w).expect("filterbank shape")
}

/// A fixed mel analysis that can run on plain buffers or on the tape.
#[derive(Debug, Clone)]
pub struct MelTransform {
    cfg: MelConfig,
    stft: Arc<Stft>,
    filters: Tensor,
}

impl MelTransform {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stft: Arc::new(Stft::new(cfg.fft_size, cfg.hop, cfg.window)),
            filters: filterbank(cfg),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Frames produced for `len` samples without centring.
    pub fn frames(&self, len: usize) -> usize {
        self.stft.frames(len)
    }

    fn centre_pad(&self) -> Result<usize> {
        let d = self.cfg.window.checked_sub(self.cfg.hop).unwrap_or(1);
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "frame-aligned mel needs an even window-hop difference, got {} and {}",
                self.cfg.window, self.cfg.hop
            )));
        }
        Ok(d / 2)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.cfg.window {
            return Err(Error::invalid(format!(
                "signal of {len} samples is shorter than the {}-sample analysis window",
                self.cfg.window
            )));
        }
        Ok(())
    }

    /// Plain analysis: `1 + (L − window)/hop` frames.
    pub fn compute(&self, y: &[f64]) -> Result<MelSpectrogram> {
        self.check_len(y.len())?;
        let frames = self.frames(y.len());
        let mag = self.stft.magnitude(y);
        let bins = self.stft.bins();
        let mut mel = vec![0.0; self.cfg.n_mels * frames];
        matmul_acc(
            self.filters.data(),
            &mag,
            &mut mel,
            self.cfg.n_mels,
            bins,
            frames,
        );
        let floor = self.cfg.log_floor;
        let values = mel.into_iter().map(|v| v.max(floor).ln()).collect();
        MelSpectrogram::new(Tensor::matrix(self.cfg.n_mels, frames, values)?)
    }

    /// Zero-pads `(window − hop)/2` samples on each side so that a signal of
    /// `T·hop` samples yields exactly `T` frames.
    pub fn compute_aligned(&self, y: &[f64]) -> Result<MelSpectrogram> {
        let pad = self.centre_pad()?;
        let mut padded = vec![0.0; y.len() + 2 * pad];
        padded[pad..pad + y.len()].copy_from_slice(y);
        self.compute(&padded)
    }

    /// Differentiable analysis of a `[1 × L]` signal.
    pub fn apply(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        self.check_len(tape.shape(y).get(1).copied().unwrap_or(0))?;
        let mag = tape.stft_magnitude(y, self.stft.clone())?;
        let fb = tape.constant(self.filters.clone());
        let mel = tape.matmul(fb, mag)?;
        let mel = tape.clamp(mel, self.cfg.log_floor, f64::INFINITY)?;
        tape.ln(mel)
    }

    pub fn apply_aligned(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let pad = self.centre_pad()?;
        let padded = tape.pad_cols(y, pad, pad)?;
        self.apply(tape, padded)
    }
}
