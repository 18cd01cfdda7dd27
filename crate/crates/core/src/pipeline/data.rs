//! Synthetic corpus on disk: per-utterance CSV/WAV files plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::latent::ScoreCondition;
use crate::signal::{midi_to_hz, read_wav, synth_dataset, write_wav, MelTransform, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub score: PathBuf,
    pub wav: PathBuf,
    pub mel: PathBuf,
    pub f0: PathBuf,
    pub durations: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    token: usize,
    pitch: f64,
    note_duration: usize,
    note_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DurationRow {
    token: usize,
    frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct F0Row {
    pub frame: usize,
    pub f0_hz: f64,
    pub voiced: u8,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| csv_err(path, e))
}

pub fn write_score(path: &Path, c: &ScoreCondition) -> Result<()> {
    write_rows(
        path,
        (0..c.len()).map(|i| ScoreRow {
            token: c.tokens[i],
            pitch: c.pitches[i],
            note_duration: c.note_durations[i],
            note_id: c.note_ids[i],
        }),
    )
}

/// Reads a `token,pitch,note_duration,note_id` score file.
pub fn read_score(path: &Path) -> Result<ScoreCondition> {
    let rows: Vec<ScoreRow> = read_rows(path)?;
    let c = ScoreCondition {
        tokens: rows.iter().map(|r| r.token).collect(),
        pitches: rows.iter().map(|r| r.pitch).collect(),
        note_durations: rows.iter().map(|r| r.note_duration).collect(),
        note_ids: rows.iter().map(|r| r.note_id).collect(),
    };
    c.validate()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(c)
}

pub fn write_durations(path: &Path, d: &[usize]) -> Result<()> {
    write_rows(
        path,
        d.iter().enumerate().map(|(token, &frames)| DurationRow { token, frames }),
    )
}

pub fn read_durations(path: &Path) -> Result<Vec<usize>> {
    Ok(read_rows::<DurationRow>(path)?.into_iter().map(|r| r.frames).collect())
}

pub fn write_f0(path: &Path, f0: &[f64], voiced: &[bool]) -> Result<()> {
    write_rows(
        path,
        f0.iter().zip(voiced).enumerate().map(|(frame, (&f0_hz, &v))| F0Row {
            frame,
            f0_hz,
            voiced: v as u8,
        }),
    )
}

pub fn read_f0(path: &Path) -> Result<(Vec<f64>, Vec<bool>)> {
    let rows: Vec<F0Row> = read_rows(path)?;
    Ok((
        rows.iter().map(|r| r.f0_hz).collect(),
        rows.iter().map(|r| r.voiced != 0).collect(),
    ))
}

/// One row per frame: `frame,m0,…,m{M−1}`.
pub fn write_mel(path: &Path, mel: &Tensor) -> Result<()> {
    let (m, t) = mel.dims2()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["frame".to_string()];
    header.extend((0..m).map(|b| format!("m{b}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for j in 0..t {
        let mut rec = vec![j.to_string()];
        rec.extend((0..m).map(|b| format!("{:?}", mel.at(b, j))));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let m = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
    let mut cols = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let col = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if col.len() != m {
            return Err(Error::Format(format!("{}: ragged mel row", path.display())));
        }
        cols.push(col);
    }
    let t = cols.len();
    let mut data = vec![0.0; m * t];
    for (j, col) in cols.iter().enumerate() {
        for (b, &v) in col.iter().enumerate() {
            data[b * t + j] = v;
        }
    }
    Tensor::matrix(m, t, data)
}

impl Manifest {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rows(path, &self.entries)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> = read_rows(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, entries };
        for e in &m.entries {
            for f in [&e.score, &e.wav, &e.mel, &e.f0, &e.durations] {
                if !m.path(f).is_file() {
                    return Err(Error::invalid(format!(
                        "manifest entry `{}` references missing file {}",
                        e.id,
                        m.path(f).display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// A loaded utterance with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub cond: ScoreCondition,
    pub wave: Waveform,
    /// Frame-aligned log-mel `[M × T]`.
    pub mel: Tensor,
    /// Hz per frame, 0 where unvoiced.
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
    pub durations: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.f0.len()
    }

    /// Log-f0 with unvoiced frames filled by linear interpolation between
    /// neighbouring voiced frames (held at the ends); the score pitch is used
    /// when nothing is voiced.
    pub fn continuous_log_f0(&self) -> Vec<f64> {
        let voiced: Vec<usize> = (0..self.frames())
            .filter(|&j| self.voiced[j] && self.f0[j] > 0.0)
            .collect();
        if voiced.is_empty() {
            let per_token = self.cond.pitches.iter().map(|&p| midi_to_hz(p).ln());
            return per_token
                .zip(&self.durations)
                .flat_map(|(v, &d)| std::iter::repeat_n(v, d))
                .collect();
        }
        let lf = |j: usize| self.f0[j].ln();
        let mut out = vec![0.0; self.frames()];
        let mut k = 0;
        for (j, o) in out.iter_mut().enumerate() {
            while k + 1 < voiced.len() && voiced[k + 1] <= j {
                k += 1;
            }
            let (a, b) = (voiced[k], voiced[(k + 1).min(voiced.len() - 1)]);
            *o = if j <= a || a == b {
                lf(a)
            } else {
                let w = (j - a) as f64 / (b - a) as f64;
                (1.0 - w) * lf(a) + w * lf(b)
            };
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

fn load_entry(m: &Manifest, e: &ManifestEntry, cfg: &RunConfig) -> Result<Utterance> {
    let cond = read_score(&m.path(&e.score))?;
    let wave = read_wav(&m.path(&e.wav))?;
    let mel = read_mel(&m.path(&e.mel))?;
    let (f0, voiced) = read_f0(&m.path(&e.f0))?;
    let durations = read_durations(&m.path(&e.durations))?;
    let t = cond.total_frames();
    let hop = cfg.mel.hop;
    let consistent = durations.len() == cond.len()
        && durations.iter().sum::<usize>() == t
        && f0.len() == t
        && mel.cols() == t
        && mel.rows() == cfg.mel.n_mels
        && wave.len() == t * hop
        && wave.sample_rate == cfg.mel.sample_rate;
    if !consistent {
        return Err(Error::invalid(format!(
            "utterance `{}`: score spans {t} frames but durations sum to {}, f0 has {}, \
             mel is {:?}, audio has {} samples at {} Hz",
            e.id,
            durations.iter().sum::<usize>(),
            f0.len(),
            mel.shape(),
            wave.len(),
            wave.sample_rate
        )));
    }
    Ok(Utterance {
        id: e.id.clone(),
        cond,
        wave,
        mel,
        f0,
        voiced,
        durations,
    })
}

impl Dataset {
    pub fn load(m: &Manifest, cfg: &RunConfig) -> Result<Self> {
        let mut d = Dataset::default();
        for e in &m.entries {
            let u = load_entry(m, e, cfg)?;
            match e.split {
                Split::Train => d.train.push(u),
                Split::Test => d.test.push(u),
            }
        }
        Ok(d)
    }
}

/// Renders `dataset.utterances + dataset.held_out` phrases into `dir` and
/// writes `dir/manifest.csv`. The mel file is computed from the quantised WAV.
pub fn synth_data(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ds = &cfg.dataset;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = ds.utterances + ds.held_out;
    let specs: Vec<_> = (0..n).map(|_| ds.sampler.sample(&mut rng)).collect();
    let rendered = synth_dataset(&specs, &ds.synth, cfg.seed ^ 0x5eed)?;
    let mel = MelTransform::new(&cfg.mel)?;
    let mut entries = Vec::with_capacity(n);
    for (i, r) in rendered.iter().enumerate() {
        let split = if i < ds.utterances { Split::Train } else { Split::Test };
        let id = format!("utt{i:04}");
        let file = |ext: &str| PathBuf::from(format!("{id}.{ext}"));
        let e = ManifestEntry {
            id: id.clone(),
            split,
            score: file("score.csv"),
            wav: file("wav"),
            mel: file("mel.csv"),
            f0: file("f0.csv"),
            durations: file("dur.csv"),
        };
        let wav_path = dir.join(&e.wav);
        write_wav(&wav_path, &r.wave)?;
        let wave = read_wav(&wav_path)?;
        write_mel(&dir.join(&e.mel), &mel.compute_aligned(&wave.samples)?.values)?;
        write_score(&dir.join(&e.score), &r.cond)?;
        let voiced: Vec<bool> = r.f0.iter().map(|&f| f > 0.0).collect();
        write_f0(&dir.join(&e.f0), &r.f0, &voiced)?;
        write_durations(&dir.join(&e.durations), &r.durations)?;
        entries.push(e);
    }
    let m = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    m.save(&dir.join("manifest.csv"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.dataset.utterances = 2;
        c.dataset.held_out = 1;
        c
    }

    #[test]
    fn synth_then_load_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        synth_data(&cfg, dir.path()).unwrap();
        let m = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m.ids(Split::Train), ["utt0000", "utt0001"]);
        assert_eq!(m.ids(Split::Test), ["utt0002"]);
        let d = Dataset::load(&m, &cfg).unwrap();
        assert_eq!(d.train.len(), 2);
        let u = &d.test[0];
        let mel = MelTransform::new(&cfg.mel).unwrap();
        let again = mel.compute_aligned(&u.wave.samples).unwrap();
        assert_eq!(again.values, u.mel);
        assert_eq!(u.durations.iter().sum::<usize>(), u.frames());
    }

    #[test]
    fn synth_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_data(&small(), a.path()).unwrap();
        synth_data(&small(), b.path()).unwrap();
        for f in ["utt0001.wav", "utt0001.mel.csv", "manifest.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        synth_data(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("utt0001.f0.csv")).unwrap();
        let e = Manifest::load(&dir.path().join("manifest.csv")).unwrap_err();
        assert!(e.to_string().contains("utt0001"), "{e}");
    }

    #[test]
    fn inconsistent_frames_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        synth_data(&cfg, dir.path()).unwrap();
        write_durations(&dir.path().join("utt0000.dur.csv"), &[1, 2]).unwrap();
        let m = Manifest::load(&dir.path().join("manifest.csv")).unwrap();
        assert!(Dataset::load(&m, &cfg).is_err());
    }

    #[test]
    fn mel_csv_round_trips_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let t = Tensor::matrix(2, 3, vec![0.1, -1e-300, 3.0, f64::MAX, -0.0, 1.0 / 3.0]).unwrap();
        write_mel(&p, &t).unwrap();
        let back = read_mel(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn continuous_log_f0_interpolates_gaps() {
        let u = Utterance {
            id: "x".into(),
            cond: ScoreCondition {
                tokens: vec![0, 3],
                pitches: vec![60.0, 60.0],
                note_durations: vec![5, 5],
                note_ids: vec![0, 0],
            },
            wave: Waveform::new(vec![], 8000),
            mel: Tensor::zeros(&[1, 5]),
            f0: vec![0.0, 100.0, 0.0, 400.0, 0.0],
            voiced: vec![false, true, false, true, false],
            durations: vec![2, 3],
        };
        let l = u.continuous_log_f0();
        let e = [100f64.ln(), 100f64.ln(), 200f64.ln(), 400f64.ln(), 400f64.ln()];
        for (a, b) in l.iter().zip(e) {
            assert!((a - b).abs() < 1e-12);
        }
        let silent = Utterance {
            f0: vec![0.0; 5],
            voiced: vec![false; 5],
            ..u
        };
        assert!(silent
            .continuous_log_f0()
            .iter()
            .all(|&v| (v - midi_to_hz(60.0).ln()).abs() < 1e-12));
    }
}
