//! Signal analysis, synthesis and evaluation metrics.

mod dsp;
mod f0;
mod mel;
mod metrics;
mod synth;
mod wav;

pub use dsp::{dsp_synthesize, dsp_synthesize_var, harmonic_basis, upsample_f0, DspConfig};
pub use f0::{f0_extract, F0Config, F0Track};
pub use mel::{
    band_centers, filterbank, hz_to_mel, mel_to_hz, MelConfig, MelSpectrogram, MelTransform,
};
pub use metrics::{cepstra, dct2, f0_rmse, mcd, F0Rmse, MCD_SCALE};
pub use synth::{
    midi_to_hz, render, synth_dataset, NoteSpec, Rendered, SingingSpec, SpecSampler, SynthConfig,
    TokenSpan,
};
pub use wav::{read_wav, write_wav};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
