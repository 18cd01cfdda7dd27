//! Normalised-autocorrelation pitch tracking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct F0Config {
    pub sample_rate: u32,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Minimum autocorrelation peak for a frame to count as voiced.
    pub threshold: f64,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            hop: 256,
            f_min: 60.0,
            f_max: 1000.0,
            threshold: 0.5,
        }
    }
}

impl F0Config {
    pub fn with_rate(sample_rate: u32, hop: usize) -> Self {
        Self {
            sample_rate,
            hop,
            ..Self::default()
        }
    }

    fn lags(&self) -> Result<(usize, usize)> {
        let sr = self.sample_rate as f64;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max < sr / 2.0) || self.hop == 0
        {
            return Err(Error::Config(format!(
                "f0 search range [{}, {}] Hz is invalid at {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        Ok((
            (sr / self.f_max).floor().max(2.0) as usize,
            (sr / self.f_min).ceil() as usize,
        ))
    }

    /// Analysis window: two periods of the lowest searchable pitch.
    pub fn window(&self) -> usize {
        2 * (self.sample_rate as f64 / self.f_min).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    /// Hz per frame; 0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

/// One estimate per `hop` samples, centred at `j·hop + hop/2`.
pub fn f0_extract(y: &[f64], cfg: &F0Config) -> Result<F0Track> {
    let (lag_lo, lag_hi) = cfg.lags()?;
    let frames = y.len() / cfg.hop;
    let half = cfg.window() / 2;
    let mut track = F0Track {
        f0: vec![0.0; frames],
        voiced: vec![false; frames],
    };
    let mut r = Vec::new();
    for j in 0..frames {
        let c = j * cfg.hop + cfg.hop / 2;
        let seg = &y[c.saturating_sub(half)..(c + half).min(y.len())];
        let n = seg.len();
        let hi = lag_hi.min(n / 2);
        if hi < lag_lo + 2 {
            continue;
        }
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        if energy < 1e-10 {
            continue;
        }
        // Prefix sums of squares give the per-lag normalisers.
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        for v in seg {
            cum.push(cum.last().unwrap() + v * v);
        }
        r.clear();
        r.resize(hi + 2, 0.0);
        for (tau, rt) in r.iter_mut().enumerate().take(hi + 2).skip(lag_lo - 1) {
            if tau >= n {
                break;
            }
            let dot: f64 = seg[..n - tau]
                .iter()
                .zip(&seg[tau..])
                .map(|(a, b)| a * b)
                .sum();
            let e1 = cum[n - tau];
            let e2 = cum[n] - cum[tau];
            let den = (e1 * e2).sqrt();
            *rt = if den > 0.0 { dot / den } else { 0.0 };
        }
        let peaks: Vec<usize> = (lag_lo..=hi)
            .filter(|&t| r[t] >= r[t - 1] && r[t] > r[t + 1])
            .collect();
        let Some(best) = peaks.iter().map(|&t| r[t]).reduce(f64::max) else {
            continue;
        };
        if best < cfg.threshold {
            continue;
        }
        let tau = *peaks
            .iter()
            .find(|&&t| r[t] >= 0.9 * best)
            .expect("global max is a candidate");
        let (a, b, cc) = (r[tau - 1], r[tau], r[tau + 1]);
        let den = a - 2.0 * b + cc;
        let shift = if den != 0.0 {
            0.5 * (a - cc) / den
        } else {
            0.0
        };
        track.f0[j] = cfg.sample_rate as f64 / (tau as f64 + shift.clamp(-0.5, 0.5));
        track.voiced[j] = true;
    }
    Ok(track)
}
