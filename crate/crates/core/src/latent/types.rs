use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LOGVAR_MIN: f64 = -14.0;
pub const LOGVAR_MAX: f64 = 6.0;

/// Music-score conditioning, one entry per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreCondition {
    pub tokens: Vec<usize>,
    /// MIDI note number of the note each token belongs to.
    pub pitches: Vec<f64>,
    /// Frame count of the note each token belongs to.
    pub note_durations: Vec<usize>,
    pub note_ids: Vec<usize>,
}

/// One note of a [`ScoreCondition`].
#[derive(Clone, Debug, PartialEq)]
pub struct NoteSpan {
    pub id: usize,
    pub pitch: f64,
    pub frames: usize,
    pub first_token: usize,
    pub tokens: usize,
}

impl ScoreCondition {
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::invalid("score has no tokens"));
        }
        if self.pitches.len() != n || self.note_durations.len() != n || self.note_ids.len() != n {
            return Err(Error::invalid(format!(
                "score columns differ in length: {n} tokens, {} pitches, {} durations, {} note ids",
                self.pitches.len(),
                self.note_durations.len(),
                self.note_ids.len()
            )));
        }
        if self.note_durations.contains(&0) {
            return Err(Error::invalid("note durations must be at least one frame"));
        }
        for i in 1..n {
            let (a, b) = (self.note_ids[i - 1], self.note_ids[i]);
            if b < a {
                return Err(Error::invalid(format!("note ids decrease at position {i}")));
            }
            if a == b
                && (self.note_durations[i] != self.note_durations[i - 1]
                    || self.pitches[i] != self.pitches[i - 1])
            {
                return Err(Error::invalid(format!(
                    "tokens {} and {i} share note {a} but disagree on its pitch or duration",
                    i - 1
                )));
            }
        }
        if self.pitches.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("note pitches must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn notes(&self) -> Vec<NoteSpan> {
        let mut out: Vec<NoteSpan> = Vec::new();
        for i in 0..self.tokens.len() {
            match out.last_mut() {
                Some(last) if last.id == self.note_ids[i] => last.tokens += 1,
                _ => out.push(NoteSpan {
                    id: self.note_ids[i],
                    pitch: self.pitches[i],
                    frames: self.note_durations[i],
                    first_token: i,
                    tokens: 1,
                }),
            }
        }
        out
    }

    pub fn total_frames(&self) -> usize {
        self.notes().iter().map(|n| n.frames).sum()
    }

    /// Note id of every frame.
    pub fn frame_notes(&self) -> Vec<usize> {
        self.notes()
            .iter()
            .flat_map(|n| std::iter::repeat_n(n.id, n.frames))
            .collect()
    }
}

/// Per-frame diagonal Gaussian, `[C × T]` mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussianSeq {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl DiagonalGaussianSeq {
    /// Clamps the log-variance into the supported range.
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.shape() != logvar.shape() || mean.rank() != 2 {
            return Err(Error::shape(
                "gaussian",
                format!(
                    "mean {:?} vs log-variance {:?}",
                    mean.shape(),
                    logvar.shape()
                ),
            ));
        }
        let logvar = logvar.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(Self { mean, logvar })
    }

    pub fn channels(&self) -> usize {
        self.mean.rows()
    }

    pub fn frames(&self) -> usize {
        self.mean.cols()
    }
}

/// A latent trajectory `[C × T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub values: Tensor,
}

impl LatentSeq {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if !values.is_finite() {
            return Err(Error::NonFinite {
                op: "latent".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn frames(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxPrediction {
    pub log_f0: Vec<f64>,
    pub mel: Tensor,
}

/// `z = μ + τ·exp(logvar/2)·ε` with `ε ∼ N(0, I)` drawn from `rng`.
pub fn sample_reparam(
    g: &DiagonalGaussianSeq,
    rng: &mut impl Rng,
    temperature: f64,
) -> Result<LatentSeq> {
    if !(temperature >= 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    let data = g
        .mean
        .data()
        .iter()
        .zip(g.logvar.data())
        .map(|(&m, &lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            if temperature == 0.0 {
                m
            } else {
                m + temperature * (0.5 * lv).exp() * eps
            }
        })
        .collect();
    LatentSeq::new(Tensor::new(g.mean.shape().to_vec(), data)?)
}

/// Differentiable reparameterised draw with caller-supplied noise `eps`.
pub fn sample_reparam_var(
    tape: &mut Tape,
    mean: Var,
    logvar: Var,
    eps: &Tensor,
    temperature: f64,
) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e)?;
    let noise = tape.scale(noise, temperature)?;
    tape.add(mean, noise)
}

/// Closed-form `KL(q ‖ p)`: summed over channels, averaged over frames.
pub fn kl_divergence(q: &DiagonalGaussianSeq, p: &DiagonalGaussianSeq) -> Result<f64> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", q.mean.shape(), p.mean.shape()),
        ));
    }
    let mut s = 0.0;
    for i in 0..q.mean.len() {
        let (mq, lq) = (q.mean.data()[i], q.logvar.data()[i]);
        let (mp, lp) = (p.mean.data()[i], p.logvar.data()[i]);
        s += 0.5 * (lp - lq) + ((lq).exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5;
    }
    Ok(s / q.frames() as f64)
}

/// Tape version of [`kl_divergence`].
pub fn kl_var(tape: &mut Tape, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
    if tape.shape(mq) != tape.shape(mp) {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", tape.shape(mq), tape.shape(mp)),
        ));
    }
    let frames = tape.shape(mq)[1] as f64;
    let dl = tape.sub(lp, lq)?;
    let t1 = tape.scale(dl, 0.5)?;
    let vq = tape.exp(lq)?;
    let dm = tape.sub(mq, mp)?;
    let dm2 = tape.square(dm)?;
    let num = tape.add(vq, dm2)?;
    let neg_lp = tape.scale(lp, -1.0)?;
    let inv = tape.exp(neg_lp)?;
    let t2 = tape.mul(num, inv)?;
    let t2 = tape.scale(t2, 0.5)?;
    let per = tape.add(t1, t2)?;
    let per = tape.add_scalar(per, -0.5)?;
    let s = tape.sum(per)?;
    tape.scale(s, 1.0 / frames)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn g1(mean: f64, var: f64) -> DiagonalGaussianSeq {
        DiagonalGaussianSeq::new(
            Tensor::matrix(1, 1, vec![mean]).unwrap(),
            Tensor::matrix(1, 1, vec![var.ln()]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&g1(0.3, 2.0), &g1(0.3, 2.0)).unwrap(), 0.0);
        assert!((kl_divergence(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let v = kl_divergence(&g1(0.0, 4.0), &g1(0.0, 1.0)).unwrap();
        assert!((v - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);
        assert!((v - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_reduction_sums_channels_and_averages_frames() {
        let q =
            DiagonalGaussianSeq::new(Tensor::filled(&[3, 4], 1.0), Tensor::zeros(&[3, 4])).unwrap();
        let p = DiagonalGaussianSeq::new(Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])).unwrap();
        assert!((kl_divergence(&q, &p).unwrap() - 1.5).abs() < 1e-12);
        let bad = DiagonalGaussianSeq::new(Tensor::zeros(&[3, 5]), Tensor::zeros(&[3, 5])).unwrap();
        assert!(kl_divergence(&q, &bad).is_err());
    }

    #[test]
    fn kl_tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rnd = |rng: &mut ChaCha8Rng| {
            Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let q = DiagonalGaussianSeq::new(rnd(&mut rng), rnd(&mut rng)).unwrap();
        let p = DiagonalGaussianSeq::new(rnd(&mut rng), rnd(&mut rng)).unwrap();
        let mut tape = Tape::inference();
        let v: Vec<Var> = [&q.mean, &q.logvar, &p.mean, &p.logvar]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let k = kl_var(&mut tape, v[0], v[1], v[2], v[3]).unwrap();
        assert!((tape.item(k).unwrap() - kl_divergence(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn logvar_is_clamped() {
        let g = DiagonalGaussianSeq::new(
            Tensor::zeros(&[1, 2]),
            Tensor::row(vec![-20.0, 9.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.logvar.data(), &[LOGVAR_MIN, LOGVAR_MAX]);
    }

    #[test]
    fn zero_temperature_returns_mean() {
        let g =
            DiagonalGaussianSeq::new(Tensor::filled(&[2, 3], 0.7), Tensor::filled(&[2, 3], 1.0))
                .unwrap();
        let z = sample_reparam(&g, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        assert_eq!(z.values, g.mean);
        assert!(sample_reparam(&g, &mut ChaCha8Rng::seed_from_u64(0), -1.0).is_err());
    }

    #[test]
    fn standard_normal_moments_and_determinism() {
        let n = 100_000;
        let g = DiagonalGaussianSeq::new(Tensor::zeros(&[1, n]), Tensor::zeros(&[1, n])).unwrap();
        let a = sample_reparam(&g, &mut ChaCha8Rng::seed_from_u64(11), 1.0).unwrap();
        let b = sample_reparam(&g, &mut ChaCha8Rng::seed_from_u64(11), 1.0).unwrap();
        assert_eq!(a, b);
        let mean = a.values.mean();
        let var = a
            .values
            .data()
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        assert!(
            mean.abs() < 0.02 && (var - 1.0).abs() < 0.05,
            "{mean} {var}"
        );
    }

    #[test]
    fn score_validation() {
        let ok = ScoreCondition {
            tokens: vec![1, 2, 3],
            pitches: vec![60.0, 60.0, 62.0],
            note_durations: vec![5, 5, 3],
            note_ids: vec![0, 0, 1],
        };
        ok.validate().unwrap();
        assert_eq!(ok.total_frames(), 8);
        assert_eq!(ok.frame_notes(), vec![0, 0, 0, 0, 0, 1, 1, 1]);
        let mut bad = ok.clone();
        bad.note_ids = vec![1, 0, 0];
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.note_durations[1] = 4;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.note_durations = vec![0, 0, 3];
        assert!(bad.validate().is_err());
    }
}
