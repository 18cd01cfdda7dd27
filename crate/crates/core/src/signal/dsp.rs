//! Toy harmonic-plus-noise synthesizer.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Waveform;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub hop: usize,
    /// Highest frequency any harmonic may reach.
    pub f_max: f64,
    /// Peak level after normalisation; `None` leaves the signal unscaled.
    pub peak: Option<f64>,
}

impl DspConfig {
    pub fn new(sample_rate: u32, hop: usize) -> Self {
        Self {
            sample_rate,
            hop,
            f_max: sample_rate as f64 / 2.0,
            peak: Some(0.9),
        }
    }
}

/// Per-sample f0 from per-frame values (0 = unvoiced). Values are linearly
/// interpolated between the centres of adjacent voiced frames and held
/// elsewhere.
pub fn upsample_f0(f0: &[f64], hop: usize) -> Vec<f64> {
    let t = f0.len();
    let mut out = Vec::with_capacity(t * hop);
    for j in 0..t {
        for n in 0..hop {
            let pos = (n as f64 + 0.5) / hop as f64 - 0.5;
            let (a, b, w) = if pos < 0.0 {
                (j.wrapping_sub(1), j, pos + 1.0)
            } else {
                (j, j + 1, pos)
            };
            let v = if a < t && b < t && f0[a] > 0.0 && f0[b] > 0.0 {
                f0[a] * (1.0 - w) + f0[b] * w
            } else {
                f0[j]
            };
            out.push(v);
        }
    }
    out
}

/// `sin(2π·k·φ[n])` for harmonics `k = 1..=K`, zero where unvoiced; `[K × L]`.
pub fn harmonic_basis(f0: &[f64], harmonics: usize, cfg: &DspConfig) -> Result<Tensor> {
    for (j, &f) in f0.iter().enumerate() {
        if !(f >= 0.0 && f.is_finite()) {
            return Err(Error::invalid(format!("frame {j} has invalid f0 {f}")));
        }
        if f > 0.0 && f * harmonics as f64 >= cfg.f_max {
            return Err(Error::invalid(format!(
                "harmonic {harmonics} of {f:.1} Hz at frame {j} aliases above {} Hz",
                cfg.f_max
            )));
        }
    }
    let per_sample = upsample_f0(f0, cfg.hop);
    let l = per_sample.len();
    let sr = cfg.sample_rate as f64;
    let mut out = vec![0.0; harmonics * l];
    let mut phase = 0.0f64;
    for (n, &f) in per_sample.iter().enumerate() {
        if f > 0.0 {
            for k in 0..harmonics {
                out[k * l + n] = (2.0 * PI * (k + 1) as f64 * phase).sin();
            }
        }
        phase = (phase + f / sr).fract();
    }
    Tensor::matrix(harmonics, l, out)
}

/// `Σ_k a_k·sin(2πkφ) + noise`, with amplitudes `[K × T]` and noise envelope
/// `[T]` held constant across each frame.
pub fn dsp_synthesize(
    f0: &[f64],
    amps: &Tensor,
    noise: &[f64],
    cfg: &DspConfig,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    let (k, t) = amps.dims2()?;
    if t != f0.len() || t != noise.len() {
        return Err(Error::shape(
            "dsp_synthesize",
            format!(
                "f0 has {} frames, amplitudes {t}, noise {}",
                f0.len(),
                noise.len()
            ),
        ));
    }
    let basis = harmonic_basis(f0, k, cfg)?;
    let l = t * cfg.hop;
    let mut y = vec![0.0; l];
    for (n, yn) in y.iter_mut().enumerate() {
        let j = n / cfg.hop;
        let mut s = 0.0;
        for h in 0..k {
            s += amps.at(h, j) * basis.data()[h * l + n];
        }
        let eps: f64 = rng.sample(StandardNormal);
        *yn = s + noise[j] * eps;
    }
    if let Some(peak) = cfg.peak {
        let m = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            let g = peak / m;
            y.iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(Waveform::new(y, cfg.sample_rate))
}

/// Differentiable [`dsp_synthesize`] without peak normalisation: amplitudes
/// `[K × T]` and noise envelope `[1 × T]` are tape variables, `eps` is the
/// per-sample excitation noise.
pub fn dsp_synthesize_var(
    tape: &mut Tape,
    f0: &[f64],
    amps: Var,
    noise: Var,
    eps: &[f64],
    cfg: &DspConfig,
) -> Result<Var> {
    let (k, t) = tape.value(amps).dims2()?;
    let l = t * cfg.hop;
    if t != f0.len() || tape.shape(noise) != [1, t] || eps.len() != l {
        return Err(Error::shape(
            "dsp_synthesize",
            format!(
                "f0 has {} frames, amplitudes {t}, noise {:?}, excitation {}",
                f0.len(),
                tape.shape(noise),
                eps.len()
            ),
        ));
    }
    let hold: Vec<Option<usize>> = (0..l).map(|n| Some(n / cfg.hop)).collect();
    let basis = tape.constant(harmonic_basis(f0, k, cfg)?);
    let a = tape.gather_cols(amps, hold.clone())?;
    let harm = tape.mul(a, basis)?;
    let ones = tape.constant(Tensor::filled(&[1, k], 1.0));
    let harm = tape.matmul(ones, harm)?;
    let nz = tape.gather_cols(noise, hold)?;
    let e = tape.constant(Tensor::row(eps.to_vec())?);
    let nz = tape.mul(nz, e)?;
    tape.add(harm, nz)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn silence_from_zero_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = DspConfig::new(8000, 16);
        let w = dsp_synthesize(
            &[200.0; 4],
            &Tensor::zeros(&[3, 4]),
            &[0.0; 4],
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(w.samples.len(), 64);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_version_matches_unnormalised_synthesis() {
        let cfg = DspConfig {
            peak: None,
            ..DspConfig::new(8000, 16)
        };
        let f0 = [220.0, 230.0, 0.0, 240.0];
        let amps = Tensor::matrix(2, 4, vec![0.5, 0.4, 0.0, 0.3, 0.1, 0.2, 0.0, 0.1]).unwrap();
        let noise = [0.01, 0.02, 0.2, 0.0];
        let w =
            dsp_synthesize(&f0, &amps, &noise, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let mut tape = Tape::inference();
        let a = tape.constant(amps);
        let n = tape.constant(Tensor::row(noise.to_vec()).unwrap());
        let y = dsp_synthesize_var(&mut tape, &f0, a, n, &eps, &cfg).unwrap();
        for (x, y) in w.samples.iter().zip(tape.value(y).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aliasing_is_rejected() {
        let cfg = DspConfig::new(8000, 16);
        assert!(harmonic_basis(&[1000.0], 4, &cfg).is_err());
        assert!(harmonic_basis(&[999.0], 4, &cfg).is_ok());
    }

    #[test]
    fn peak_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = DspConfig::new(8000, 16);
        let w = dsp_synthesize(
            &[220.0; 20],
            &Tensor::filled(&[2, 20], 0.3),
            &[0.01; 20],
            &cfg,
            &mut rng,
        )
        .unwrap();
        let peak = w.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
    }

    #[test]
    fn upsampled_f0_interpolates_voiced_only() {
        let up = upsample_f0(&[100.0, 200.0, 0.0], 4);
        assert_eq!(up.len(), 12);
        assert_eq!(up[0], 100.0);
        assert!(up[3] > 100.0 && up[3] < 150.0);
        assert!(up[4] > 150.0 && up[4] < 200.0);
        assert_eq!(up[7], 200.0);
        assert!(up[8..].iter().all(|&f| f == 0.0));
    }
}
