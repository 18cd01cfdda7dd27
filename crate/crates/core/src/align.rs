//! Note-constrained monotonic alignment search.

use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Note id of every token and of every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoteConstraint {
    pub token_notes: Vec<usize>,
    pub frame_notes: Vec<usize>,
}

impl NoteConstraint {
    /// Everything belongs to a single note.
    pub fn single(tokens: usize, frames: usize) -> Self {
        Self {
            token_notes: vec![0; tokens],
            frame_notes: vec![0; frames],
        }
    }

    /// Builds frame note ids from per-note frame counts.
    pub fn from_note_frames(
        token_notes: Vec<usize>,
        note_ids: &[usize],
        note_frames: &[usize],
    ) -> Self {
        let frame_notes = note_ids
            .iter()
            .zip(note_frames)
            .flat_map(|(&id, &n)| std::iter::repeat_n(id, n))
            .collect();
        Self {
            token_notes,
            frame_notes,
        }
    }

    /// `(note id, first token, token count, first frame, frame count)` per note.
    fn notes(&self) -> Result<Vec<(usize, usize, usize, usize, usize)>> {
        let runs = |ids: &[usize], what: &str| -> Result<Vec<(usize, usize, usize)>> {
            let mut out: Vec<(usize, usize, usize)> = Vec::new();
            for (i, &id) in ids.iter().enumerate() {
                match out.last_mut() {
                    Some(last) if last.0 == id => last.2 += 1,
                    Some(last) if last.0 > id => {
                        return Err(Error::invalid(format!(
                            "{what} note ids decrease at position {i}"
                        )));
                    }
                    _ => out.push((id, i, 1)),
                }
            }
            Ok(out)
        };
        let tok = runs(&self.token_notes, "token")?;
        let frm = runs(&self.frame_notes, "frame")?;
        let tok_ids: Vec<usize> = tok.iter().map(|r| r.0).collect();
        let frm_ids: Vec<usize> = frm.iter().map(|r| r.0).collect();
        if tok_ids != frm_ids {
            return Err(Error::invalid(format!(
                "token notes {tok_ids:?} and frame notes {frm_ids:?} differ"
            )));
        }
        let mut out = Vec::with_capacity(tok.len());
        for (t, f) in tok.iter().zip(&frm) {
            if t.2 > f.2 {
                return Err(Error::InfeasibleNote {
                    note: t.0,
                    tokens: t.2,
                    frames: f.2,
                });
            }
            out.push((t.0, t.1, t.2, f.1, f.2));
        }
        Ok(out)
    }
}

/// Monotonic token → frame assignment given by per-token durations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPath {
    durations: Vec<usize>,
}

impl AlignmentPath {
    pub fn new(durations: Vec<usize>) -> Result<Self> {
        if durations.is_empty() || durations.contains(&0) {
            return Err(Error::invalid(format!(
                "durations must be positive, got {durations:?}"
            )));
        }
        Ok(Self { durations })
    }

    pub fn durations(&self) -> &[usize] {
        &self.durations
    }

    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// First frame of each token.
    pub fn starts(&self) -> Vec<usize> {
        self.durations
            .iter()
            .scan(0, |acc, &d| {
                let s = *acc;
                *acc += d;
                Some(s)
            })
            .collect()
    }

    /// Token index covering each frame.
    pub fn frame_tokens(&self) -> Vec<usize> {
        self.durations
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
            .collect()
    }

    /// Sum of covered cells, accumulated in frame order.
    pub fn score(&self, ll: &Tensor) -> f64 {
        self.frame_tokens()
            .iter()
            .enumerate()
            .fold(0.0, |acc, (j, &i)| acc + ll.at(i, j))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub path: AlignmentPath,
    pub score: f64,
}

fn check_inputs(ll: &Tensor, nb: &NoteConstraint) -> Result<(usize, usize)> {
    let (n, t) = ll.dims2()?;
    if nb.token_notes.len() != n || nb.frame_notes.len() != t {
        return Err(Error::shape(
            "align",
            format!(
                "ll is {n}x{t} but constraint has {} tokens and {} frames",
                nb.token_notes.len(),
                nb.frame_notes.len()
            ),
        ));
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite { op: "align".into() });
    }
    nb.notes()?;
    Ok((n, t))
}

/// Dynamic-programming search for the best monotonic path that never lets a
/// token cover a frame of another note. On exact ties the backtrace stays on
/// the current token, which yields the earliest token boundaries.
pub fn mas_align(ll: &Tensor, nb: &NoteConstraint) -> Result<Alignment> {
    let (n, t) = check_inputs(ll, nb)?;
    let neg = f64::NEG_INFINITY;
    let cell = |i: usize, j: usize| {
        if nb.token_notes[i] == nb.frame_notes[j] {
            ll.at(i, j)
        } else {
            neg
        }
    };
    let mut q = vec![neg; n * t];
    q[0] = cell(0, 0);
    for j in 1..t {
        for i in 0..n.min(j + 1) {
            let stay = q[i * t + j - 1];
            let step = if i > 0 { q[(i - 1) * t + j - 1] } else { neg };
            let best = stay.max(step);
            q[i * t + j] = if best == neg { neg } else { cell(i, j) + best };
        }
    }
    let score = q[(n - 1) * t + t - 1];
    if score == neg {
        return Err(Error::invalid(
            "no monotonic path satisfies the note constraint",
        ));
    }
    let mut durations = vec![0usize; n];
    let mut i = n - 1;
    for j in (0..t).rev() {
        durations[i] += 1;
        if j == 0 {
            break;
        }
        if i > 0 && q[i * t + j - 1] < q[(i - 1) * t + j - 1] {
            i -= 1;
        }
    }
    debug_assert_eq!(i, 0);
    Ok(Alignment {
        path: AlignmentPath::new(durations)?,
        score,
    })
}

/// Exhaustive search over all admissible duration vectors. Ties go to the
/// lexicographically smallest `(start[N-1], start[N-2], …)`, matching
/// [`mas_align`].
pub fn brute_force_align(ll: &Tensor, nb: &NoteConstraint) -> Result<Alignment> {
    let (n, t) = check_inputs(ll, nb)?;
    if n > 6 || t > 12 {
        return Err(Error::invalid(format!(
            "brute-force alignment limited to 6 tokens x 12 frames, got {n}x{t}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>, Vec<usize>)> = None;
    let mut durations = vec![0usize; n];
    enumerate(0, 0, n, t, &mut durations, &mut |d| {
        let path = AlignmentPath {
            durations: d.to_vec(),
        };
        let ok = path
            .frame_tokens()
            .iter()
            .enumerate()
            .all(|(j, &i)| nb.token_notes[i] == nb.frame_notes[j]);
        if !ok {
            return;
        }
        let score = path.score(ll);
        let key: Vec<usize> = path.starts().into_iter().rev().collect();
        let better = match &best {
            None => true,
            Some((s, k, _)) => score > *s || (score == *s && key < *k),
        };
        if better {
            best = Some((score, key, d.to_vec()));
        }
    });
    let (score, _, durations) =
        best.ok_or_else(|| Error::invalid("no monotonic path satisfies the note constraint"))?;
    Ok(Alignment {
        path: AlignmentPath::new(durations)?,
        score,
    })
}

fn enumerate(
    i: usize,
    used: usize,
    n: usize,
    t: usize,
    d: &mut Vec<usize>,
    f: &mut impl FnMut(&[usize]),
) {
    if i == n - 1 {
        d[i] = t - used;
        f(d);
        return;
    }
    let remaining_tokens = n - i - 1;
    for k in 1..=(t - used - remaining_tokens) {
        d[i] = k;
        enumerate(i + 1, used + k, n, t, d, f);
    }
}

pub fn durations_from_path(path: &AlignmentPath) -> Vec<usize> {
    path.durations.clone()
}

/// Which form of the duration regression to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationDomain {
    /// `(ln d − d̂)²` with `d̂` a log-duration.
    #[default]
    Log,
    /// `(d − exp(d̂))²`, i.e. the regression in frame units.
    Raw,
}

/// Mean squared duration error; `d_pred` is in the log domain.
pub fn duration_loss(d_mas: &[usize], d_pred: &[f64], domain: DurationDomain) -> Result<f64> {
    if d_mas.len() != d_pred.len() || d_mas.is_empty() {
        return Err(Error::shape(
            "duration_loss",
            format!("{} targets vs {} predictions", d_mas.len(), d_pred.len()),
        ));
    }
    let s: f64 = d_mas
        .iter()
        .zip(d_pred)
        .map(|(&d, &p)| match domain {
            DurationDomain::Log => ((d as f64).ln() - p).powi(2),
            DurationDomain::Raw => (d as f64 - p.exp()).powi(2),
        })
        .sum();
    Ok(s / d_mas.len() as f64)
}

/// `ll[i, j] = log N(z[:, j]; μ[:, i], exp(logvar[:, i]))` for frame
/// statistics `z[C×T]` and token statistics `μ, logvar [C×N]`.
pub fn gaussian_log_likelihood(z: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let (c, t) = z.dims2()?;
    let (c2, n) = mean.dims2()?;
    if c != c2 || mean.shape() != logvar.shape() {
        return Err(Error::shape(
            "gaussian_log_likelihood",
            format!(
                "z {:?}, mean {:?}, logvar {:?}",
                z.shape(),
                mean.shape(),
                logvar.shape()
            ),
        ));
    }
    let mut out = vec![0.0; n * t];
    for i in 0..n {
        for ch in 0..c {
            let mu = mean.at(ch, i);
            let lv = logvar.at(ch, i);
            let inv = (-lv).exp();
            let base = -0.5 * ((2.0 * PI).ln() + lv);
            for j in 0..t {
                let d = z.at(ch, j) - mu;
                out[i * t + j] += base - 0.5 * d * d * inv;
            }
        }
    }
    Tensor::matrix(n, t, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ll(rows: &[&[f64]]) -> Tensor {
        let n = rows.len();
        let t = rows[0].len();
        Tensor::matrix(n, t, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn single_token_takes_everything() {
        let m = ll(&[&[0.5, -1.0, 2.0]]);
        let a = mas_align(&m, &NoteConstraint::single(1, 3)).unwrap();
        assert_eq!(a.path.durations(), &[3]);
        assert_eq!(a.score, 0.5 - 1.0 + 2.0);
    }

    #[test]
    fn two_tokens_pick_better_split() {
        let m = ll(&[&[0.0, -1.0, -5.0], &[-5.0, 0.0, 0.0]]);
        let a = mas_align(&m, &NoteConstraint::single(2, 3)).unwrap();
        assert_eq!(a.path.durations(), &[1, 2]);
        assert_eq!(a.score, 0.0);
        assert_eq!(AlignmentPath::new(vec![2, 1]).unwrap().score(&m), -1.0);
    }

    #[test]
    fn note_constraint_forces_split() {
        let nb = NoteConstraint {
            token_notes: vec![1, 2],
            frame_notes: vec![1, 1, 2],
        };
        for m in [
            ll(&[&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]),
            ll(&[&[-9.0, -9.0, 5.0], &[5.0, 5.0, -9.0]]),
        ] {
            assert_eq!(mas_align(&m, &nb).unwrap().path.durations(), &[2, 1]);
            assert_eq!(
                brute_force_align(&m, &nb).unwrap().path.durations(),
                &[2, 1]
            );
        }
    }

    #[test]
    fn infeasible_note_is_named() {
        let nb = NoteConstraint {
            token_notes: vec![0, 7, 7],
            frame_notes: vec![0, 0, 7],
        };
        let err = mas_align(&Tensor::zeros(&[3, 3]), &nb).unwrap_err();
        assert!(
            matches!(
                err,
                Error::InfeasibleNote {
                    note: 7,
                    tokens: 2,
                    frames: 1
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn all_zero_ties_prefer_earliest_boundaries() {
        let m = Tensor::zeros(&[3, 7]);
        let nb = NoteConstraint::single(3, 7);
        let a = mas_align(&m, &nb).unwrap();
        assert_eq!(a.path.durations(), &[1, 1, 5]);
        assert_eq!(brute_force_align(&m, &nb).unwrap().path, a.path);
    }

    #[test]
    fn brute_force_guard() {
        let m = Tensor::zeros(&[2, 13]);
        assert!(brute_force_align(&m, &NoteConstraint::single(2, 13)).is_err());
    }

    #[test]
    fn mismatched_note_sets_rejected() {
        let nb = NoteConstraint {
            token_notes: vec![0, 1],
            frame_notes: vec![0, 2, 2],
        };
        assert!(mas_align(&Tensor::zeros(&[2, 3]), &nb).is_err());
    }

    #[test]
    fn path_helpers() {
        let p = AlignmentPath::new(vec![1, 2]).unwrap();
        assert_eq!(durations_from_path(&p), vec![1, 2]);
        assert_eq!(p.frame_tokens(), vec![0, 1, 1]);
        assert_eq!(p.starts(), vec![0, 1]);
        assert_eq!(AlignmentPath::new(vec![5]).unwrap().frames(), 5);
        assert!(AlignmentPath::new(vec![2, 0]).is_err());
    }

    #[test]
    fn duration_loss_values() {
        assert_eq!(
            duration_loss(&[3, 1], &[3f64.ln(), 0.0], DurationDomain::Log).unwrap(),
            0.0
        );
        assert!((duration_loss(&[1], &[1.0], DurationDomain::Log).unwrap() - 1.0).abs() < 1e-15);
        assert!(duration_loss(&[1, 2], &[0.0], DurationDomain::Log).is_err());
        assert!((duration_loss(&[2], &[0.0], DurationDomain::Raw).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_ll_matches_direct_formula() {
        let z = Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap();
        let mu = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let lv = Tensor::matrix(2, 1, vec![0.0, 2f64.ln()]).unwrap();
        let v = gaussian_log_likelihood(&z, &mu, &lv)
            .unwrap()
            .item()
            .unwrap();
        let want = -0.5 * (2.0 * PI).ln() - 0.125 + (-0.5 * (4.0 * PI).ln() - 0.25);
        assert!((v - want).abs() < 1e-12);
    }
}
