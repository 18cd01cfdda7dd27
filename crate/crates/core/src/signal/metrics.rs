use std::f64::consts::{LN_10, PI, SQRT_2};

use super::MelSpectrogram;
use crate::error::{Error, Result};

/// `10·√2 / ln 10`: converts a natural-log cepstral distance to decibels.
pub const MCD_SCALE: f64 = 10.0 * SQRT_2 / LN_10;

/// Orthonormal type-II DCT.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s = if k == 0 {
                (1.0 / m).sqrt()
            } else {
                (2.0 / m).sqrt()
            };
            s * x
                .iter()
                .enumerate()
                .map(|(n, &v)| v * (PI * k as f64 * (n as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

/// Per-frame cepstra `[frames][bands]` of a log-mel spectrogram.
pub fn cepstra(x: &MelSpectrogram) -> Vec<Vec<f64>> {
    let v = &x.values;
    (0..x.frames())
        .map(|j| dct2(&(0..x.bands()).map(|b| v.at(b, j)).collect::<Vec<_>>()))
        .collect()
}

/// Mel-cepstral distortion in dB over coefficients `1..=k`.
pub fn mcd(reference: &MelSpectrogram, synth: &MelSpectrogram, k: usize) -> Result<f64> {
    if reference.values.shape() != synth.values.shape() {
        return Err(Error::shape(
            "mcd",
            format!(
                "{:?} vs {:?}",
                reference.values.shape(),
                synth.values.shape()
            ),
        ));
    }
    if k == 0 || k >= reference.bands() {
        return Err(Error::invalid(format!(
            "cepstral order {k} must lie in 1..{}",
            reference.bands()
        )));
    }
    let a = cepstra(reference);
    let b = cepstra(synth);
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(ca, cb)| (1..=k).map(|i| (ca[i] - cb[i]).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(MCD_SCALE * total / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F0Rmse {
    pub cents: f64,
    pub hz: f64,
    pub frames: usize,
}

/// RMSE over frames voiced in both contours.
pub fn f0_rmse(
    f0_ref: &[f64],
    voiced_ref: &[bool],
    f0_syn: &[f64],
    voiced_syn: &[bool],
) -> Result<F0Rmse> {
    let n = f0_ref.len();
    if voiced_ref.len() != n || f0_syn.len() != n || voiced_syn.len() != n {
        return Err(Error::shape(
            "f0_rmse",
            format!(
                "lengths {n}, {}, {}, {}",
                voiced_ref.len(),
                f0_syn.len(),
                voiced_syn.len()
            ),
        ));
    }
    let (mut sc, mut sh, mut count) = (0.0, 0.0, 0usize);
    for i in 0..n {
        if voiced_ref[i] && voiced_syn[i] && f0_ref[i] > 0.0 && f0_syn[i] > 0.0 {
            sc += (1200.0 * (f0_syn[i] / f0_ref[i]).log2()).powi(2);
            sh += (f0_syn[i] - f0_ref[i]).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no frames are voiced in both contours"));
    }
    Ok(F0Rmse {
        cents: (sc / count as f64).sqrt(),
        hz: (sh / count as f64).sqrt(),
        frames: count,
    })
}
