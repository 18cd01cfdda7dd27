//! Objective metrics of generated audio against the reference recordings.
//!
//! CSV columns: `utterance,mcd_db,f0_rmse_cents,f0_rmse_hz,voiced_frames,mel_l1`.
//! The last row has `utterance = mean`; its `voiced_frames` is the total.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Manifest;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::signal::{f0_extract, f0_rmse, mcd, read_wav, F0Config, MelSpectrogram, MelTransform, Waveform};

/// Cepstral coefficients 1..=K compared by MCD.
pub const MCD_ORDER: usize = 13;

/// One CSV row. `f0_rmse_*` are NaN when no frame is voiced in both signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub utterance: String,
    pub mcd_db: f64,
    pub f0_rmse_cents: f64,
    pub f0_rmse_hz: f64,
    pub voiced_frames: usize,
    pub mel_l1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

pub struct Evaluator {
    mel: MelTransform,
    f0: F0Config,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            mel: MelTransform::new(&cfg.mel)?,
            f0: F0Config::with_rate(cfg.mel.sample_rate, cfg.mel.hop),
        })
    }

    /// Metrics of `generated` against the reference waveform and its mel.
    pub fn utterance(&self, id: &str, reference: &Waveform, ref_mel: &Tensor, generated: &Waveform) -> Result<MetricRow> {
        if generated.sample_rate != reference.sample_rate {
            return Err(Error::invalid(format!(
                "`{id}`: generated audio is {} Hz, reference {} Hz",
                generated.sample_rate, reference.sample_rate
            )));
        }
        let r = MelSpectrogram::new(ref_mel.clone())?;
        let g = self.mel.compute_aligned(&generated.samples)?;
        let fr = f0_extract(&reference.samples, &self.f0)?;
        let fg = f0_extract(&generated.samples, &self.f0)?;
        let (cents, hz, voiced) = match f0_rmse(&fr.f0, &fr.voiced, &fg.f0, &fg.voiced) {
            Ok(e) => (e.cents, e.hz, e.frames),
            Err(Error::Invalid(_)) => {
                log::warn!("`{id}`: no frame is voiced in both signals");
                (f64::NAN, f64::NAN, 0)
            }
            Err(e) => return Err(e),
        };
        Ok(MetricRow {
            utterance: id.to_string(),
            mcd_db: mcd(&r, &g, MCD_ORDER)?,
            f0_rmse_cents: cents,
            f0_rmse_hz: hz,
            voiced_frames: voiced,
            mel_l1: r.l1(&g)?,
        })
    }

    /// Scores every `<id>.wav` in `generated` against the manifest entry
    /// `<id>`. Extra files and an empty intersection are errors.
    pub fn directory(&self, manifest: &Manifest, generated: &Path) -> Result<EvalReport> {
        let mut ids: Vec<String> = std::fs::read_dir(generated)
            .map_err(|e| Error::io(generated, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "wav"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        let mut rows = Vec::with_capacity(ids.len());
        for id in &ids {
            let e = manifest
                .entries
                .iter()
                .find(|e| &e.id == id)
                .ok_or_else(|| Error::invalid(format!("generated `{id}.wav` has no reference in the manifest")))?;
            let reference = read_wav(&manifest.path(&e.wav))?;
            let ref_mel = super::data::read_mel(&manifest.path(&e.mel))?;
            let g = read_wav(&generated.join(format!("{id}.wav")))?;
            rows.push(self.utterance(id, &reference, &ref_mel, &g)?);
        }
        EvalReport::new(rows)
    }
}

impl EvalReport {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("no generated utterance matches a reference"));
        }
        let mean = |f: fn(&MetricRow) -> f64| {
            let v: Vec<f64> = rows.iter().map(f).filter(|v| v.is_finite()).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mean = MetricRow {
            utterance: "mean".into(),
            mcd_db: mean(|r| r.mcd_db),
            f0_rmse_cents: mean(|r| r.f0_rmse_cents),
            f0_rmse_hz: mean(|r| r.f0_rmse_hz),
            voiced_frames: rows.iter().map(|r| r.voiced_frames).sum(),
            mel_l1: mean(|r| r.mel_l1),
        };
        Ok(Self { rows, mean })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for r in self.rows.iter().chain([&self.mean]) {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut rows: Vec<MetricRow> = csv::Reader::from_path(path)
            .map_err(err)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        match rows.pop() {
            Some(mean) if mean.utterance == "mean" => Ok(Self { rows, mean }),
            _ => Err(Error::Format(format!("{}: missing the mean row", path.display()))),
        }
    }

    /// One line in the layout of a results table.
    pub fn summary(&self) -> String {
        format!(
            "utterances {}  MCD {:.3} dB  F0 RMSE {:.1} cents ({:.2} Hz, {} voiced frames)  mel-L1 {:.4}",
            self.rows.len(),
            self.mean.mcd_db,
            self.mean.f0_rmse_cents,
            self.mean.f0_rmse_hz,
            self.mean.voiced_frames,
            self.mean.mel_l1
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::write_wav;

    fn corpus() -> (tempfile::TempDir, RunConfig, Manifest) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.dataset.utterances = 2;
        cfg.dataset.held_out = 2;
        let m = super::super::data::synth_data(&cfg, &dir.path().join("data")).unwrap();
        (dir, cfg, m)
    }

    #[test]
    fn reference_against_itself_is_zero() {
        let (dir, cfg, m) = corpus();
        let gen = dir.path().join("gen");
        std::fs::create_dir_all(&gen).unwrap();
        for e in &m.entries {
            std::fs::copy(m.path(&e.wav), gen.join(format!("{}.wav", e.id))).unwrap();
        }
        let rep = Evaluator::new(&cfg).unwrap().directory(&m, &gen).unwrap();
        assert_eq!(rep.rows.len(), 4);
        for r in rep.rows.iter().chain([&rep.mean]) {
            assert_eq!(r.mcd_db, 0.0, "{r:?}");
            assert_eq!(r.f0_rmse_cents, 0.0, "{r:?}");
            assert_eq!(r.mel_l1, 0.0);
        }
        assert!(rep.mean.voiced_frames > 0);
        let csv = dir.path().join("metrics.csv");
        rep.write_csv(&csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("utterance,mcd_db,f0_rmse_cents,f0_rmse_hz,voiced_frames,mel_l1\n"));
        assert_eq!(EvalReport::read_csv(&csv).unwrap(), rep);
    }

    #[test]
    fn empty_and_unmatched_sets_are_errors() {
        let (dir, cfg, m) = corpus();
        let ev = Evaluator::new(&cfg).unwrap();
        let gen = dir.path().join("gen");
        std::fs::create_dir_all(&gen).unwrap();
        assert!(ev.directory(&m, &gen).is_err());
        write_wav(&gen.join("stranger.wav"), &Waveform::new(vec![0.0; 64], 8000)).unwrap();
        let e = ev.directory(&m, &gen).unwrap_err();
        assert!(e.to_string().contains("stranger"), "{e}");
    }

    #[test]
    fn silence_has_no_f0_error_but_a_finite_mcd() {
        let (_dir, cfg, m) = corpus();
        let e = &m.entries[0];
        let reference = read_wav(&m.path(&e.wav)).unwrap();
        let mel = super::super::data::read_mel(&m.path(&e.mel)).unwrap();
        let silent = Waveform::new(vec![0.0; reference.len()], reference.sample_rate);
        let r = Evaluator::new(&cfg).unwrap().utterance(&e.id, &reference, &mel, &silent).unwrap();
        assert!(r.f0_rmse_cents.is_nan() && r.voiced_frames == 0);
        assert!(r.mcd_db.is_finite() && r.mcd_db > 0.0);
    }
}
