//! Synthetic sung phrases with exact durations and pitch ground truth.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dsp_synthesize, DspConfig, Waveform};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::latent::ScoreCondition;

pub fn midi_to_hz(m: f64) -> f64 {
    440.0 * 2f64.powf((m - 69.0) / 12.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSpan {
    pub token: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoteSpec {
    /// MIDI note number.
    pub pitch: f64,
    pub tokens: Vec<TokenSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingingSpec {
    pub notes: Vec<NoteSpec>,
    pub vibrato_rate: f64,
    /// Peak deviation in cents.
    pub vibrato_depth: f64,
    pub vibrato_phase: f64,
    pub harmonic_amps: Vec<f64>,
    pub noise_level: f64,
}

impl SingingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.notes.is_empty() || self.notes.iter().any(|n| n.tokens.is_empty()) {
            return Err(Error::invalid(
                "every phrase needs notes and every note a token",
            ));
        }
        if self
            .notes
            .iter()
            .flat_map(|n| &n.tokens)
            .any(|t| t.frames == 0)
        {
            return Err(Error::invalid("token durations must be at least one frame"));
        }
        if !(self.vibrato_rate >= 0.0 && self.vibrato_depth >= 0.0 && self.noise_level >= 0.0) {
            return Err(Error::invalid(
                "vibrato rate, depth and noise level must be non-negative",
            ));
        }
        if self.harmonic_amps.is_empty() {
            return Err(Error::invalid(
                "at least one harmonic amplitude is required",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub hop: usize,
    /// Token ids below this value are rendered as unvoiced noise bursts.
    pub consonants: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            hop: 256,
            consonants: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub cond: ScoreCondition,
    pub wave: Waveform,
    /// Hz per frame, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub durations: Vec<usize>,
}

/// Spectral envelope of a vowel token evaluated at `freq`.
fn vowel_gain(token: usize, freq: f64) -> f64 {
    let formant = 450.0 + 380.0 * (token % 6) as f64;
    0.2 + (-((freq - formant) / 400.0).powi(2)).exp()
}

pub fn render(spec: &SingingSpec, cfg: &SynthConfig, seed: u64) -> Result<Rendered> {
    spec.validate()?;
    let sr = cfg.sample_rate as f64;
    let k = spec.harmonic_amps.len();
    let mut f0 = Vec::new();
    let mut noise = Vec::new();
    let mut amp_cols: Vec<Vec<f64>> = Vec::new();
    let mut cond = ScoreCondition {
        tokens: vec![],
        pitches: vec![],
        note_durations: vec![],
        note_ids: vec![],
    };
    let mut durations = Vec::new();
    for (ni, note) in spec.notes.iter().enumerate() {
        let note_frames: usize = note.tokens.iter().map(|t| t.frames).sum();
        let base = midi_to_hz(note.pitch);
        let mut in_note = 0usize;
        for tok in &note.tokens {
            cond.tokens.push(tok.token);
            cond.pitches.push(note.pitch);
            cond.note_durations.push(note_frames);
            cond.note_ids.push(ni);
            durations.push(tok.frames);
            let voiced = tok.token >= cfg.consonants;
            for _ in 0..tok.frames {
                let j = f0.len();
                let t = (j as f64 + 0.5) * cfg.hop as f64 / sr;
                if voiced {
                    let cents = spec.vibrato_depth
                        * (2.0 * PI * spec.vibrato_rate * t + spec.vibrato_phase).sin();
                    let f = base * 2f64.powf(cents / 1200.0);
                    let attack = if in_note == 0 { 0.5 } else { 1.0 };
                    f0.push(f);
                    noise.push(spec.noise_level);
                    amp_cols.push(
                        spec.harmonic_amps
                            .iter()
                            .enumerate()
                            .map(|(h, a)| attack * a * vowel_gain(tok.token, (h + 1) as f64 * f))
                            .collect(),
                    );
                } else {
                    f0.push(0.0);
                    noise.push(0.12 + 0.06 * tok.token as f64);
                    amp_cols.push(vec![0.0; k]);
                }
                in_note += 1;
            }
        }
    }
    let t = f0.len();
    let mut amps = vec![0.0; k * t];
    for (j, col) in amp_cols.iter().enumerate() {
        for (h, &a) in col.iter().enumerate() {
            amps[h * t + j] = a;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = dsp_synthesize(
        &f0,
        &Tensor::matrix(k, t, amps)?,
        &noise,
        &DspConfig::new(cfg.sample_rate, cfg.hop),
        &mut rng,
    )?;
    cond.validate()?;
    Ok(Rendered {
        cond,
        wave,
        f0,
        durations,
    })
}

/// Renders every spec with a per-utterance seed derived from `seed`.
pub fn synth_dataset(specs: &[SingingSpec], cfg: &SynthConfig, seed: u64) -> Result<Vec<Rendered>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| render(s, cfg, rng.next_u64()))
        .collect()
}

/// Random phrase generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecSampler {
    pub min_notes: usize,
    pub max_notes: usize,
    pub min_pitch: f64,
    pub max_pitch: f64,
    pub min_note_frames: usize,
    pub max_note_frames: usize,
    pub consonants: usize,
    pub vowels: usize,
    /// Probability that a note opens with a consonant.
    pub consonant_prob: f64,
    pub consonant_frames: usize,
    pub vibrato_rate: [f64; 2],
    pub vibrato_depth: [f64; 2],
    pub harmonics: usize,
    pub noise_level: f64,
}

impl Default for SpecSampler {
    fn default() -> Self {
        Self {
            min_notes: 3,
            max_notes: 5,
            min_pitch: 55.0,
            max_pitch: 67.0,
            min_note_frames: 14,
            max_note_frames: 22,
            consonants: 3,
            vowels: 5,
            consonant_prob: 0.5,
            consonant_frames: 3,
            vibrato_rate: [5.0, 6.0],
            vibrato_depth: [30.0, 60.0],
            harmonics: 8,
            noise_level: 0.01,
        }
    }
}

impl SpecSampler {
    pub fn vocab(&self) -> usize {
        self.consonants + self.vowels
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SingingSpec {
        let n = rng.random_range(self.min_notes..=self.max_notes);
        let notes = (0..n)
            .map(|_| {
                let pitch = rng.random_range(self.min_pitch as i64..=self.max_pitch as i64) as f64;
                let frames = rng.random_range(self.min_note_frames..=self.max_note_frames);
                let vowel = self.consonants + rng.random_range(0..self.vowels);
                let mut tokens = Vec::new();
                let mut left = frames;
                if self.consonants > 0
                    && rng.random_bool(self.consonant_prob)
                    && frames > self.consonant_frames
                {
                    tokens.push(TokenSpan {
                        token: rng.random_range(0..self.consonants),
                        frames: self.consonant_frames,
                    });
                    left -= self.consonant_frames;
                }
                tokens.push(TokenSpan {
                    token: vowel,
                    frames: left,
                });
                NoteSpec { pitch, tokens }
            })
            .collect();
        SingingSpec {
            notes,
            vibrato_rate: rng.random_range(self.vibrato_rate[0]..=self.vibrato_rate[1]),
            vibrato_depth: rng.random_range(self.vibrato_depth[0]..=self.vibrato_depth[1]),
            vibrato_phase: rng.random_range(0.0..2.0 * PI),
            harmonic_amps: (1..=self.harmonics).map(|h| 1.0 / h as f64).collect(),
            noise_level: self.noise_level,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{f0_extract, F0Config};

    fn one_note(pitch: f64, frames: usize, depth: f64, rate: f64) -> SingingSpec {
        SingingSpec {
            notes: vec![NoteSpec {
                pitch,
                tokens: vec![TokenSpan { token: 3, frames }],
            }],
            vibrato_rate: rate,
            vibrato_depth: depth,
            vibrato_phase: 0.0,
            harmonic_amps: vec![1.0],
            noise_level: 0.0,
        }
    }

    #[test]
    fn midi_law() {
        assert_eq!(midi_to_hz(69.0), 440.0);
        assert!((midi_to_hz(81.0) - 880.0).abs() < 1e-12);
    }

    #[test]
    fn a4_note_averages_440() {
        let r = render(&one_note(69.0, 86, 50.0, 5.5), &SynthConfig::default(), 0).unwrap();
        let mean = r.f0.iter().sum::<f64>() / r.f0.len() as f64;
        assert!((mean - 440.0).abs() < 4.4, "{mean}");
    }

    #[test]
    fn constant_pitch_round_trips() {
        let cfg = SynthConfig::default();
        let tracker = F0Config::default();
        for f in [110.0, 220.0, 440.0] {
            let midi = 69.0 + 12.0 * (f / 440.0f64).log2();
            let r = render(&one_note(midi, 60, 0.0, 0.0), &cfg, 1).unwrap();
            let tr = f0_extract(&r.wave.samples, &tracker).unwrap();
            for j in 2..tr.f0.len() - 2 {
                assert!(tr.voiced[j]);
                assert!((tr.f0[j] - f).abs() <= 1.0, "{f}: frame {j} {}", tr.f0[j]);
            }
        }
    }

    #[test]
    fn vibrato_round_trip() {
        let cfg = SynthConfig::default();
        let spec = one_note(57.0, 172, 100.0, 5.0);
        let r = render(&spec, &cfg, 2).unwrap();
        let tr = f0_extract(&r.wave.samples, &F0Config::default()).unwrap();
        let base = midi_to_hz(57.0);
        let inner = &tr.f0[4..tr.f0.len() - 4];
        let cents: Vec<f64> = inner.iter().map(|f| 1200.0 * (f / base).log2()).collect();
        let peak = cents.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        assert!((peak - 100.0).abs() <= 10.0, "{peak}");
        // Upward zero crossings are one vibrato period apart.
        let ups: Vec<usize> = (1..cents.len())
            .filter(|&i| cents[i - 1] < 0.0 && cents[i] >= 0.0)
            .collect();
        let expected = cfg.sample_rate as f64 / (5.0 * cfg.hop as f64);
        for w in ups.windows(2) {
            let period = (w[1] - w[0]) as f64;
            assert!((period - expected).abs() <= 2.0, "{period} vs {expected}");
        }
        assert!(ups.len() >= 2);
    }

    #[test]
    fn dataset_is_deterministic_with_exact_durations() {
        let sampler = SpecSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs: Vec<SingingSpec> = (0..3).map(|_| sampler.sample(&mut rng)).collect();
        let cfg = SynthConfig {
            sample_rate: 8000,
            hop: 16,
            consonants: 3,
        };
        let a = synth_dataset(&specs, &cfg, 7).unwrap();
        let b = synth_dataset(&specs, &cfg, 7).unwrap();
        assert_eq!(a, b);
        for r in &a {
            let t: usize = r.durations.iter().sum();
            assert_eq!(t, r.f0.len());
            assert_eq!(t, r.cond.total_frames());
            assert_eq!(r.wave.len(), t * 16);
        }
    }
}
