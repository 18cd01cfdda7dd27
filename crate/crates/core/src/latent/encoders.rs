use rand::Rng;
use serde::{Deserialize, Serialize};

use super::types::{DiagonalGaussianSeq, ScoreCondition, LOGVAR_MAX, LOGVAR_MIN};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::signal::midi_to_hz;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub posterior_blocks: usize,
    pub posterior_kernel: usize,
    /// Block `i` of the posterior stack uses dilation `rate^i`.
    pub posterior_dilation_rate: usize,
    pub token_blocks: usize,
    pub frame_blocks: usize,
    pub prior_kernel: usize,
    pub vocab: usize,
    pub mel_bands: usize,
    /// Harmonic amplitudes predicted for the DSP branch.
    pub harmonics: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            hidden: 32,
            posterior_blocks: 4,
            posterior_kernel: 5,
            posterior_dilation_rate: 1,
            token_blocks: 2,
            frame_blocks: 4,
            prior_kernel: 3,
            vocab: 8,
            mel_bands: 24,
            harmonics: 8,
        }
    }
}

impl EncoderConfig {
    pub fn full_scale() -> Self {
        Self {
            latent_channels: 192,
            hidden: 192,
            posterior_blocks: 16,
            mel_bands: 80,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_channels,
            self.hidden,
            self.posterior_kernel,
            self.posterior_dilation_rate,
            self.prior_kernel,
            self.vocab,
            self.mel_bands,
            self.harmonics,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.posterior_kernel % 2 == 0 || self.prior_kernel % 2 == 0 {
            return Err(Error::Config("encoder kernels must be odd".into()));
        }
        Ok(())
    }
}

fn split_stats(tape: &mut Tape, stats: Var, c: usize) -> Result<(Var, Var)> {
    let mean = tape.slice_rows(stats, 0, c)?;
    let logvar = tape.slice_rows(stats, c, 2 * c)?;
    let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok((mean, logvar))
}

/// Gated residual conv stack over mel frames, `q(z | x)`.
#[derive(Clone, Debug)]
pub struct PosteriorEncoder {
    channels: usize,
    hidden: usize,
    pre: Conv,
    gates: Vec<Conv>,
    res: Vec<Conv>,
    out: Conv,
}

impl PosteriorEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        Ok(Self {
            channels: cfg.latent_channels,
            hidden: h,
            pre: Conv::new("pe.pre", cfg.mel_bands, h, 1),
            gates: (0..cfg.posterior_blocks)
                .map(|i| {
                    Conv::new(format!("pe.block{i}.gate"), h, 2 * h, cfg.posterior_kernel)
                        .dilation(cfg.posterior_dilation_rate.pow(i as u32))
                })
                .collect(),
            res: (0..cfg.posterior_blocks)
                .map(|i| Conv::new(format!("pe.block{i}.res"), h, 2 * h, 1))
                .collect(),
            out: Conv::new("pe.out", h, 2 * cfg.latent_channels, 1),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.pre.init(store, rng, 1.0)?;
        for (g, r) in self.gates.iter().zip(&self.res) {
            g.init(store, rng, 1.0)?;
            r.init(store, rng, 1.0)?;
        }
        self.out.init_zero(store)
    }

    /// `mel[M × T]` → `(mean, logvar)`, both `[C × T]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mel: Var) -> Result<(Var, Var)> {
        let t = tape.value(mel).dims2()?.1;
        if t == 0 {
            return Err(Error::shape("posterior encoder", "no frames"));
        }
        let h = self.hidden;
        let mut x = self.pre.forward(tape, p, mel, t)?;
        let mut skip: Option<Var> = None;
        for (g, r) in self.gates.iter().zip(&self.res) {
            let a = g.forward(tape, p, x, t)?;
            let filt = tape.slice_rows(a, 0, h)?;
            let gate = tape.slice_rows(a, h, 2 * h)?;
            let filt = tape.tanh(filt)?;
            let gate = tape.sigmoid(gate)?;
            let act = tape.mul(filt, gate)?;
            let rs = r.forward(tape, p, act, t)?;
            let res = tape.slice_rows(rs, 0, h)?;
            let sk = tape.slice_rows(rs, h, 2 * h)?;
            x = tape.add(x, res)?;
            skip = Some(match skip {
                Some(s) => tape.add(s, sk)?,
                None => sk,
            });
        }
        let stats = self.out.forward(tape, p, skip.unwrap_or(x), t)?;
        split_stats(tape, stats, self.channels)
    }

    pub fn encode(&self, store: &ParamStore, mel: &Tensor) -> Result<DiagonalGaussianSeq> {
        let mut tape = Tape::inference();
        let p = store.bind_frozen(&mut tape);
        let m = tape.constant(mel.clone());
        let (mean, logvar) = self.forward(&mut tape, &p, m)?;
        DiagonalGaussianSeq::new(tape.value(mean).clone(), tape.value(logvar).clone())
    }
}

/// Everything the prior produces for one utterance, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub mean: Var,
    pub logvar: Var,
    /// Log-duration per token, `[1 × N]`.
    pub log_durations: Var,
    /// `[1 × T]`
    pub log_f0: Var,
    /// `[M × T]`
    pub mel: Var,
    /// Harmonic amplitudes in (0, 1), `[K × T]`.
    pub amps: Var,
    /// Noise level in (0, 1), `[1 × T]`.
    pub noise: Var,
}

/// Plain-tensor prior output with the durations it was expanded by.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorOutput {
    pub gaussian: DiagonalGaussianSeq,
    pub aux: super::types::AuxPrediction,
    pub log_durations: Vec<f64>,
    pub durations: Vec<usize>,
    pub amps: Tensor,
    pub noise: Vec<f64>,
}

fn pitch_feature(midi: f64) -> f64 {
    (midi - 60.0) / 12.0
}

/// `max(1, round(exp(d)))` per token.
pub fn decode_durations(log_d: &[f64]) -> Vec<usize> {
    log_d
        .iter()
        .map(|&d| {
            let v = d.exp().round();
            if v.is_finite() && v >= 1.0 {
                v.min(1e6) as usize
            } else {
                1
            }
        })
        .collect()
}

/// Rescales token durations so each note spans exactly its score length,
/// every token keeping at least one frame. Shares are assigned by largest
/// remainder, ties going to the earlier token.
pub fn fit_to_notes(cond: &ScoreCondition, durations: &[usize]) -> Result<Vec<usize>> {
    cond.validate()?;
    if durations.len() != cond.len() {
        return Err(Error::shape(
            "fit_to_notes",
            format!("{} durations for {} tokens", durations.len(), cond.len()),
        ));
    }
    let mut out = Vec::with_capacity(durations.len());
    for note in cond.notes() {
        if note.tokens > note.frames {
            return Err(Error::InfeasibleNote {
                note: note.id,
                tokens: note.tokens,
                frames: note.frames,
            });
        }
        let w = &durations[note.first_token..note.first_token + note.tokens];
        let total: f64 = w.iter().map(|&d| d.max(1) as f64).sum();
        let share: Vec<f64> = w
            .iter()
            .map(|&d| note.frames as f64 * d.max(1) as f64 / total)
            .collect();
        let mut d: Vec<usize> = share.iter().map(|s| (s.floor() as usize).max(1)).collect();
        let mut sum: usize = d.iter().sum();
        while sum > note.frames {
            let (i, _) = d
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 1)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("tokens ≤ frames");
            d[i] -= 1;
            sum -= 1;
        }
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = share[a] - share[a].floor();
            let rb = share[b] - share[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut k = 0;
        while sum < note.frames {
            d[order[k % order.len()]] += 1;
            sum += 1;
            k += 1;
        }
        out.extend(d);
    }
    Ok(out)
}

/// Token stack, duration head, frame expansion, frame stack and output heads,
/// `p(z | c)`.
#[derive(Clone, Debug)]
pub struct PriorEncoder {
    cfg: EncoderConfig,
    token_in: Conv,
    token_blocks: Vec<Conv>,
    duration: Conv,
    align: Conv,
    frame_in: Conv,
    frame_blocks: Vec<Conv>,
    stats: Conv,
    f0: Conv,
    mel: Conv,
    amps: Conv,
    noise: Conv,
}

const TOKEN_EXTRA: usize = 3;
const FRAME_EXTRA: usize = 3;

impl PriorEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let k = cfg.prior_kernel;
        Ok(Self {
            cfg: cfg.clone(),
            token_in: Conv::new("pr.token_in", cfg.vocab + TOKEN_EXTRA, h, 1),
            token_blocks: (0..cfg.token_blocks)
                .map(|i| Conv::new(format!("pr.token{i}"), h, h, k))
                .collect(),
            duration: Conv::new("pr.duration", h, 1, 1),
            align: Conv::new("pr.align", h, 2 * cfg.latent_channels, 1),
            frame_in: Conv::new("pr.frame_in", h + FRAME_EXTRA, h, 1),
            frame_blocks: (0..cfg.frame_blocks)
                .map(|i| Conv::new(format!("pr.frame{i}"), h, h, k).dilation(1 << (i % 3)))
                .collect(),
            stats: Conv::new("pr.stats", h, 2 * cfg.latent_channels, 1),
            f0: Conv::new("pr.f0", h, 1, 1),
            mel: Conv::new("pr.mel", h, cfg.mel_bands, 1),
            amps: Conv::new("pr.amps", h, cfg.harmonics, 1),
            noise: Conv::new("pr.noise", h, 1, 1),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Output heads for statistics, durations and log-f0 start at zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.token_in.init(store, rng, 1.0)?;
        for c in &self.token_blocks {
            c.init(store, rng, 1.0)?;
        }
        self.duration.init_zero(store)?;
        self.align.init_zero(store)?;
        self.frame_in.init(store, rng, 1.0)?;
        for c in &self.frame_blocks {
            c.init(store, rng, 1.0)?;
        }
        self.stats.init_zero(store)?;
        self.f0.init_zero(store)?;
        self.mel.init(store, rng, 1.0)?;
        self.amps.init(store, rng, 0.1)?;
        self.noise.init(store, rng, 0.1)
    }

    fn token_features(&self, cond: &ScoreCondition) -> Result<Tensor> {
        cond.validate()?;
        let n = cond.len();
        let rows = self.cfg.vocab + TOKEN_EXTRA;
        let mut x = vec![0.0; rows * n];
        let notes = cond.notes();
        for note in &notes {
            for k in 0..note.tokens {
                let j = note.first_token + k;
                let tok = cond.tokens[j];
                if tok >= self.cfg.vocab {
                    return Err(Error::invalid(format!(
                        "token {tok} at position {j} outside vocabulary of {}",
                        self.cfg.vocab
                    )));
                }
                x[tok * n + j] = 1.0;
                let v = self.cfg.vocab;
                x[v * n + j] = pitch_feature(note.pitch);
                x[(v + 1) * n + j] = (note.frames as f64).ln() / 4.0;
                x[(v + 2) * n + j] = k as f64 / note.tokens as f64;
            }
        }
        Tensor::matrix(rows, n, x)
    }

    fn residual_stack(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut h: Var,
        convs: &[Conv],
        segment: usize,
    ) -> Result<Var> {
        for c in convs {
            let y = c.forward(tape, p, h, segment)?;
            let y = tape.leaky_relu(y, 0.1)?;
            h = tape.add(h, y)?;
        }
        Ok(h)
    }

    /// Token hidden states `[H × N]` and log-durations `[1 × N]`.
    pub fn encode_tokens(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cond: &ScoreCondition,
    ) -> Result<(Var, Var)> {
        let n = cond.len();
        let x = tape.constant(self.token_features(cond)?);
        let h = self.token_in.forward(tape, p, x, n)?;
        let h = self.residual_stack(tape, p, h, &self.token_blocks, n)?;
        let d = self.duration.forward(tape, p, h, n)?;
        Ok((h, d))
    }

    /// Token-level `(mean, logvar)` `[C × N]` used to score alignments.
    pub fn token_stats(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<(Var, Var)> {
        let n = tape.value(tokens).dims2()?.1;
        let stats = self.align.forward(tape, p, tokens, n)?;
        split_stats(tape, stats, self.cfg.latent_channels)
    }

    /// Expands token states by `durations` and runs the frame-level stack.
    pub fn expand(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cond: &ScoreCondition,
        tokens: Var,
        log_durations: Var,
        durations: &[usize],
    ) -> Result<PriorVars> {
        if durations.len() != cond.len() || durations.contains(&0) {
            return Err(Error::shape(
                "prior expansion",
                format!(
                    "{} durations for {} tokens, all must be ≥ 1",
                    durations.len(),
                    cond.len()
                ),
            ));
        }
        let t: usize = durations.iter().sum();
        let mut index = Vec::with_capacity(t);
        let mut extra = vec![0.0; FRAME_EXTRA * t];
        let mut note_pos = vec![0usize; cond.len()];
        let notes = cond.notes();
        for note in &notes {
            let mut k = 0;
            for j in note.first_token..note.first_token + note.tokens {
                note_pos[j] = k;
                k += durations[j];
            }
        }
        let mut f = 0;
        let mut frame_pitch = Vec::with_capacity(t);
        for (j, &d) in durations.iter().enumerate() {
            let note = notes
                .iter()
                .find(|n| n.id == cond.note_ids[j])
                .expect("note of token");
            let note_len: usize = durations[note.first_token..note.first_token + note.tokens]
                .iter()
                .sum();
            for k in 0..d {
                index.push(Some(j));
                extra[f] = pitch_feature(cond.pitches[j]);
                extra[t + f] = (k as f64 + 0.5) / d as f64;
                extra[2 * t + f] = (note_pos[j] + k) as f64 / note_len as f64;
                frame_pitch.push(midi_to_hz(cond.pitches[j]).ln());
                f += 1;
            }
        }
        let up = tape.gather_cols(tokens, index)?;
        let extra = tape.constant(Tensor::matrix(FRAME_EXTRA, t, extra)?);
        let x = tape.concat_rows(&[up, extra])?;
        let h = self.frame_in.forward(tape, p, x, t)?;
        let h = self.residual_stack(tape, p, h, &self.frame_blocks, t)?;
        let stats = self.stats.forward(tape, p, h, t)?;
        let (mean, logvar) = split_stats(tape, stats, self.cfg.latent_channels)?;
        let df0 = self.f0.forward(tape, p, h, t)?;
        let base = tape.constant(Tensor::row(frame_pitch)?);
        let log_f0 = tape.add(base, df0)?;
        let mel = self.mel.forward(tape, p, h, t)?;
        let amps = self.amps.forward(tape, p, h, t)?;
        let amps = tape.sigmoid(amps)?;
        let noise = self.noise.forward(tape, p, h, t)?;
        let noise = tape.sigmoid(noise)?;
        Ok(PriorVars {
            mean,
            logvar,
            log_durations,
            log_f0,
            mel,
            amps,
            noise,
        })
    }

    /// Expands by `durations` when given, otherwise by the predicted ones
    /// fitted to the note lengths. Returns the durations actually used.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cond: &ScoreCondition,
        durations: Option<&[usize]>,
    ) -> Result<(PriorVars, Vec<usize>)> {
        let (h, d) = self.encode_tokens(tape, p, cond)?;
        let used = match durations {
            Some(d) => d.to_vec(),
            None => fit_to_notes(cond, &decode_durations(tape.value(d).data()))?,
        };
        let v = self.expand(tape, p, cond, h, d, &used)?;
        Ok((v, used))
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        cond: &ScoreCondition,
        durations: Option<&[usize]>,
    ) -> Result<PriorOutput> {
        let mut tape = Tape::inference();
        let p = store.bind_frozen(&mut tape);
        let (v, used) = self.forward(&mut tape, &p, cond, durations)?;
        let val = |v: Var| tape.value(v).clone();
        Ok(PriorOutput {
            gaussian: DiagonalGaussianSeq::new(val(v.mean), val(v.logvar))?,
            aux: super::types::AuxPrediction {
                log_f0: val(v.log_f0).into_data(),
                mel: val(v.mel),
            },
            log_durations: val(v.log_durations).into_data(),
            durations: used,
            amps: val(v.amps),
            noise: val(v.noise).into_data(),
        })
    }

    pub fn encode_batch(
        &self,
        store: &ParamStore,
        conds: &[ScoreCondition],
        durations: Option<&[Vec<usize>]>,
    ) -> Result<Vec<PriorOutput>> {
        conds
            .iter()
            .enumerate()
            .map(|(i, c)| self.encode(store, c, durations.map(|d| d[i].as_slice())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::GradCheck;
    use crate::nn::randomize;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            latent_channels: 3,
            hidden: 6,
            posterior_blocks: 2,
            token_blocks: 1,
            frame_blocks: 2,
            vocab: 5,
            mel_bands: 4,
            harmonics: 3,
            ..Default::default()
        }
    }

    fn score(tokens: &[usize], notes: &[(usize, f64, usize)]) -> ScoreCondition {
        // notes: (token count, pitch, frames)
        let mut c = ScoreCondition {
            tokens: tokens.to_vec(),
            pitches: vec![],
            note_durations: vec![],
            note_ids: vec![],
        };
        for (i, &(n, p, f)) in notes.iter().enumerate() {
            for _ in 0..n {
                c.pitches.push(p);
                c.note_durations.push(f);
                c.note_ids.push(i);
            }
        }
        c
    }

    fn rand_tensor(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn posterior_zero_head_and_lengths() {
        let pe = PosteriorEncoder::new(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        pe.init(&mut s, &mut rng).unwrap();
        for t in [1, 7, 64] {
            let g = pe.encode(&s, &rand_tensor(4, t, &mut rng)).unwrap();
            assert_eq!(g.mean.shape(), &[3, t]);
            assert!(g
                .mean
                .data()
                .iter()
                .chain(g.logvar.data())
                .all(|&v| v == 0.0));
        }
        assert!(pe.encode(&s, &Tensor::zeros(&[4, 0])).is_err());
    }

    #[test]
    fn posterior_gradients() {
        let pe = PosteriorEncoder::new(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        pe.init(&mut s, &mut rng).unwrap();
        randomize(&mut s, "pe.out", 0.3, &mut rng).unwrap();
        let mel = rand_tensor(4, 9, &mut rng);
        let w = rand_tensor(3, 9, &mut rng);
        let rep = GradCheck::default()
            .run(&s, &[], |tape, p| {
                let m = tape.constant(mel.clone());
                let (mean, lv) = pe.forward(tape, p, m)?;
                let wv = tape.constant(w.clone());
                let a = tape.mul(mean, wv)?;
                let b = tape.square(lv)?;
                let a = tape.sum(a)?;
                let b = tape.sum(b)?;
                tape.add(a, b)
            })
            .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn single_token_expansion() {
        let pr = PriorEncoder::new(&cfg()).unwrap();
        let mut s = ParamStore::new();
        pr.init(&mut s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = score(&[3], &[(1, 60.0, 5)]);
        let out = pr.encode(&s, &c, Some(&[5])).unwrap();
        assert_eq!(out.gaussian.frames(), 5);
        assert_eq!(out.aux.log_f0.len(), 5);
        assert_eq!(out.aux.mel.shape(), &[4, 5]);
        assert_eq!(out.amps.shape(), &[3, 5]);
        assert_eq!(out.noise.len(), 5);
        assert!((out.aux.log_f0[0] - midi_to_hz(60.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_duration_head_decodes_to_one_frame() {
        let pr = PriorEncoder::new(&cfg()).unwrap();
        let mut s = ParamStore::new();
        pr.init(&mut s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = score(&[0, 3, 4], &[(2, 60.0, 6), (1, 62.0, 4)]);
        let out = pr.encode(&s, &c, None).unwrap();
        assert!(out.log_durations.iter().all(|&d| d == 0.0));
        assert_eq!(decode_durations(&out.log_durations), vec![1, 1, 1]);
        assert_eq!(out.durations, vec![3, 3, 4]);
        assert_eq!(out.gaussian.frames(), 10);
    }

    #[test]
    fn unknown_token_is_rejected() {
        let pr = PriorEncoder::new(&cfg()).unwrap();
        let mut s = ParamStore::new();
        pr.init(&mut s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = score(&[7], &[(1, 60.0, 4)]);
        assert!(matches!(pr.encode(&s, &c, None), Err(Error::Invalid(_))));
    }

    #[test]
    fn batch_is_permutation_equivariant() {
        let pr = PriorEncoder::new(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        pr.init(&mut s, &mut rng).unwrap();
        randomize(&mut s, "pr.", 0.4, &mut rng).unwrap();
        let a = score(&[0, 3], &[(2, 60.0, 7)]);
        let b = score(&[4, 1, 2], &[(1, 65.0, 3), (2, 57.0, 5)]);
        let fwd = pr.encode_batch(&s, &[a.clone(), b.clone()], None).unwrap();
        let rev = pr.encode_batch(&s, &[b, a], None).unwrap();
        assert_eq!(fwd[0], rev[1]);
        assert_eq!(fwd[1], rev[0]);
    }

    #[test]
    fn prior_gradients() {
        let pr = PriorEncoder::new(&cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        pr.init(&mut s, &mut rng).unwrap();
        randomize(&mut s, "pr.", 0.4, &mut rng).unwrap();
        let c = score(&[0, 3, 4], &[(2, 60.0, 6), (1, 62.0, 4)]);
        let d = [2, 4, 4];
        let w = rand_tensor(3, 10, &mut rng);
        let rep = GradCheck::default()
            .run(&s, &[], |tape, p| {
                let (v, _) = pr.forward(tape, p, &c, Some(&d))?;
                let wv = tape.constant(w.clone());
                let mut terms = vec![];
                let m = tape.mul(v.mean, wv)?;
                terms.push(tape.sum(m)?);
                let lv = tape.square(v.logvar)?;
                terms.push(tape.sum(lv)?);
                let (h, _) = pr.encode_tokens(tape, p, &c)?;
                let (am, al) = pr.token_stats(tape, p, h)?;
                for x in [v.log_durations, v.log_f0, v.mel, v.amps, v.noise, am, al] {
                    let x2 = tape.square(x)?;
                    terms.push(tape.sum(x2)?);
                }
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                Ok(acc)
            })
            .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn fitting_respects_notes() {
        let c = score(&[0, 3, 4, 1, 3], &[(3, 60.0, 10), (2, 62.0, 3)]);
        let d = fit_to_notes(&c, &[1, 5, 2, 9, 1]).unwrap();
        assert_eq!(d[..3].iter().sum::<usize>(), 10);
        assert_eq!(d[3..].iter().sum::<usize>(), 3);
        assert!(d.iter().all(|&v| v >= 1));
        assert_eq!(d, vec![1, 6, 3, 2, 1]);
        let tight = score(&[0, 3], &[(2, 60.0, 2)]);
        assert_eq!(fit_to_notes(&tight, &[50, 1]).unwrap(), vec![1, 1]);
        let bad = score(&[0, 3, 4], &[(3, 60.0, 2)]);
        assert!(matches!(
            fit_to_notes(&bad, &[1, 1, 1]),
            Err(Error::InfeasibleNote { .. })
        ));
    }

    #[test]
    fn decode_duration_floor() {
        assert_eq!(
            decode_durations(&[0.0, -3.0, 2.0f64.ln(), 10.0f64.ln(), f64::NAN]),
            vec![1, 1, 2, 10, 1]
        );
    }
}
