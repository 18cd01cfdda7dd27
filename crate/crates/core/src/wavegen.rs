//! Waveform decoder and the period / scale / spectrogram discriminators.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::Stft;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvT};
use crate::signal::{harmonic_basis, DspConfig, Waveform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub upsample_rates: Vec<usize>,
    pub upsample_kernels: Vec<usize>,
    pub hidden: usize,
    pub resblock_dilations: Vec<usize>,
    /// Sinusoidal excitation channels built from the pitch condition.
    pub source_harmonics: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            upsample_rates: vec![4, 4],
            upsample_kernels: vec![8, 8],
            hidden: 16,
            resblock_dilations: vec![1, 3],
            source_harmonics: 4,
        }
    }
}

impl DecoderConfig {
    pub fn full_scale() -> Self {
        Self {
            upsample_rates: vec![8, 8, 4, 2],
            upsample_kernels: vec![16, 16, 8, 4],
            hidden: 192,
            ..Self::default()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_rates.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.upsample_rates.is_empty()
            || self.upsample_rates.len() != self.upsample_kernels.len()
        {
            return Err(Error::Config(
                "decoder needs one kernel per upsampling rate".into(),
            ));
        }
        for (&r, &k) in self.upsample_rates.iter().zip(&self.upsample_kernels) {
            if r == 0 || k < r || (k - r) % 2 != 0 {
                return Err(Error::Config(format!(
                    "upsampling kernel {k} must be at least rate {r} with an even difference"
                )));
            }
        }
        if self.hidden == 0 || self.resblock_dilations.contains(&0) {
            return Err(Error::Config(
                "decoder hidden size and dilations must be positive".into(),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.hidden];
        for _ in &self.upsample_rates {
            let last = *w.last().unwrap();
            w.push((last / 2).max(4));
        }
        w
    }
}

/// Normalised pitch feature: octaves relative to 220 Hz.
pub fn pitch_channel(log_f0: &[f64]) -> Vec<f64> {
    log_f0
        .iter()
        .map(|&l| (l - 220f64.ln()) / std::f64::consts::LN_2)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    channels: usize,
    sample_rate: u32,
    pre: Conv,
    ups: Vec<ConvT>,
    res: Vec<Vec<Conv>>,
    amp: Conv,
    post: Conv,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig, channels: usize, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths();
        let ups = (0..cfg.upsample_rates.len())
            .map(|i| {
                ConvT::upsample(
                    format!("dec.up{i}"),
                    w[i],
                    w[i + 1],
                    cfg.upsample_rates[i],
                    cfg.upsample_kernels[i],
                )
            })
            .collect();
        let res = (0..cfg.upsample_rates.len())
            .map(|i| {
                cfg.resblock_dilations
                    .iter()
                    .enumerate()
                    .map(|(j, &d)| {
                        Conv::new(format!("dec.res{i}.{j}"), w[i + 1], w[i + 1], 3).dilation(d)
                    })
                    .collect()
            })
            .collect();
        let last = *w.last().unwrap();
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            sample_rate,
            pre: Conv::new("dec.pre", channels + 1, cfg.hidden, 7),
            ups,
            res,
            amp: Conv::new("dec.amp", last, cfg.source_harmonics.max(1), 1),
            post: Conv::new("dec.post", last, 1, 7),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.pre.init(store, rng, 1.0)?;
        for (u, rs) in self.ups.iter().zip(&self.res) {
            u.init(store, rng, 1.0)?;
            for r in rs {
                r.init(store, rng, 0.5)?;
            }
        }
        self.amp.init(store, rng, 0.5)?;
        self.post.init(store, rng, 0.5)
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        self.pre.init_zero(store)?;
        for (u, rs) in self.ups.iter().zip(&self.res) {
            store.zeros(format!("{}.w", u.name), &[u.cin, u.cout, u.kernel])?;
            store.zeros(format!("{}.b", u.name), &[u.cout])?;
            for r in rs {
                r.init_zero(store)?;
            }
        }
        self.amp.init_zero(store)?;
        self.post.init_zero(store)
    }

    /// `[K × T·hop]` sine bank following `exp(log_f0)`, clamped below aliasing.
    fn source(&self, log_f0: &[f64]) -> Result<Tensor> {
        let k = self.cfg.source_harmonics.max(1);
        let nyq = self.sample_rate as f64 / 2.0;
        let hi = nyq / (k as f64 + 1.0);
        let f0: Vec<f64> = log_f0
            .iter()
            .map(|&l| {
                if l.is_finite() {
                    l.exp().clamp(30f64.min(hi), hi)
                } else {
                    0.0
                }
            })
            .collect();
        let cfg = DspConfig {
            sample_rate: self.sample_rate,
            hop: self.hop(),
            f_max: nyq,
            peak: None,
        };
        let basis = harmonic_basis(&f0, k, &cfg)?;
        if self.cfg.source_harmonics == 0 {
            return Ok(basis.map(|_| 0.0));
        }
        Ok(basis)
    }

    /// `z[C × T]` and per-frame log-f0 → `[1 × T·hop]` in (−1, 1).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, log_f0: &[f64]) -> Result<Var> {
        let (c, t) = tape.value(z).dims2()?;
        if c != self.channels || t != log_f0.len() || t == 0 {
            return Err(Error::shape(
                "decode",
                format!(
                    "latent {c}×{t}, expected {} channels and {} frames",
                    self.channels,
                    log_f0.len()
                ),
            ));
        }
        let pitch = tape.constant(Tensor::row(pitch_channel(log_f0))?);
        let x = tape.concat_rows(&[z, pitch])?;
        let mut h = self.pre.forward(tape, p, x, t)?;
        for (u, rs) in self.ups.iter().zip(&self.res) {
            let a = tape.leaky_relu(h, 0.1)?;
            h = u.forward(tape, p, a)?;
            let len = tape.value(h).dims2()?.1;
            for r in rs {
                let a = tape.leaky_relu(h, 0.1)?;
                let y = r.forward(tape, p, a, len)?;
                h = tape.add(h, y)?;
            }
        }
        let len = t * self.hop();
        let h = tape.leaky_relu(h, 0.1)?;
        let amps = self.amp.forward(tape, p, h, len)?;
        let src = tape.constant(self.source(log_f0)?);
        let harm = tape.mul(amps, src)?;
        let ones = tape.constant(Tensor::filled(&[1, tape.value(harm).rows()], 1.0));
        let harm = tape.matmul(ones, harm)?;
        let post = self.post.forward(tape, p, h, len)?;
        let y = tape.add(harm, post)?;
        tape.tanh(y)
    }

    pub fn decode(&self, store: &ParamStore, z: &Tensor, log_f0: &[f64]) -> Result<Waveform> {
        let mut tape = Tape::inference();
        let p = store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let y = self.forward(&mut tape, &p, zv, log_f0)?;
        Ok(Waveform::new(
            tape.value(y).data().to_vec(),
            self.sample_rate,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub scales: Vec<usize>,
    /// `(fft size, hop)` pairs.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3],
            scales: vec![1, 2],
            resolutions: vec![(64, 16), (128, 32)],
            channels: 8,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() && self.scales.is_empty() && self.resolutions.is_empty() {
            return Err(Error::Config("discriminator suite is empty".into()));
        }
        if self.channels == 0 || self.periods.contains(&0) || self.scales.contains(&0) {
            return Err(Error::Config(
                "discriminator periods, scales and channels must be positive".into(),
            ));
        }
        if self.resolutions.iter().any(|&(n, h)| n < 2 || h == 0) {
            return Err(Error::Config(
                "spectrogram resolutions need fft ≥ 2 and hop ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Period(usize),
    Scale(usize),
    Spectrogram(Arc<Stft>),
}

#[derive(Clone, Debug)]
struct Layer {
    conv: Conv,
    /// Keep every n-th frame of each segment afterwards.
    down: usize,
}

/// One sub-discriminator of the suite.
#[derive(Clone, Debug)]
pub struct SubDiscriminator {
    pub name: String,
    kind: Kind,
    layers: Vec<Layer>,
}

/// Score map and the activations that precede it.
#[derive(Clone, Debug)]
pub struct SubOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// Columns `0, n, 2n, …` of every `segment`-long block.
fn decimate(tape: &mut Tape, x: Var, segment: usize, n: usize) -> Result<(Var, usize)> {
    if n == 1 {
        return Ok((x, segment));
    }
    let len = tape.value(x).dims2()?.1;
    let out_seg = segment.div_ceil(n);
    let index = (0..len / segment)
        .flat_map(|s| (0..out_seg).map(move |j| Some(s * segment + j * n)))
        .collect();
    Ok((tape.gather_cols(x, index)?, out_seg))
}

/// Mean over non-overlapping windows of `n` samples, zero-padded at the end.
fn avg_pool(tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
    let len = tape.value(x).dims2()?.1;
    let out = len.div_ceil(n);
    let mut acc: Option<Var> = None;
    for k in 0..n {
        let idx = (0..out)
            .map(|j| Some(j * n + k).filter(|&i| i < len))
            .collect();
        let g = tape.gather_cols(x, idx)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, g)?,
            None => g,
        });
    }
    tape.scale(acc.expect("n ≥ 1"), 1.0 / n as f64)
}

impl SubDiscriminator {
    fn new(kind: Kind, ch: usize) -> Self {
        let (name, spec): (String, Vec<(usize, usize, usize, usize)>) = match &kind {
            Kind::Period(p) => (
                format!("d.mpd{p}"),
                vec![
                    (1, ch, 5, 3),
                    (ch, 2 * ch, 5, 3),
                    (2 * ch, 2 * ch, 3, 1),
                    (2 * ch, 1, 3, 1),
                ],
            ),
            Kind::Scale(s) => (
                format!("d.msd{s}"),
                vec![
                    (1, ch, 7, 1),
                    (ch, 2 * ch, 5, 2),
                    (2 * ch, 2 * ch, 5, 2),
                    (2 * ch, 1, 3, 1),
                ],
            ),
            Kind::Spectrogram(stft) => (
                format!("d.mrsd{}", stft.fft_size),
                vec![(stft.bins(), ch, 3, 1), (ch, ch, 3, 1), (ch, 1, 3, 1)],
            ),
        };
        let layers = spec
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k, down))| Layer {
                conv: Conv::new(format!("{name}.c{i}"), cin, cout, k),
                down,
            })
            .collect();
        Self { name, kind, layers }
    }

    fn min_len(&self) -> usize {
        match &self.kind {
            Kind::Period(p) => *p,
            Kind::Scale(s) => *s,
            Kind::Spectrogram(stft) => stft.window.len(),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for l in &self.layers {
            l.conv.init(store, rng, 1.0)?;
        }
        Ok(())
    }

    /// `y` is `[1 × L]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<SubOutput> {
        let len = tape.value(y).dims2()?.1;
        if len < self.min_len() {
            return Err(Error::shape(
                "discriminate",
                format!(
                    "{} needs at least {} samples, got {len}",
                    self.name,
                    self.min_len()
                ),
            ));
        }
        let (mut x, mut seg) = match &self.kind {
            Kind::Period(per) => {
                let n = len.div_ceil(*per);
                let index = (0..*per)
                    .flat_map(|ph| (0..n).map(move |j| Some(j * per + ph).filter(|&i| i < len)))
                    .collect();
                (tape.gather_cols(y, index)?, n)
            }
            Kind::Scale(s) => {
                let x = if *s > 1 { avg_pool(tape, y, *s)? } else { y };
                let l = tape.value(x).dims2()?.1;
                (x, l)
            }
            Kind::Spectrogram(stft) => {
                let m = tape.stft_magnitude(y, stft.clone())?;
                let m = tape.add_scalar(m, 1e-3)?;
                let m = tape.ln(m)?;
                let f = tape.value(m).dims2()?.1;
                (m, f)
            }
        };
        let mut features = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.conv.forward(tape, p, x, seg)?;
            if i == last {
                break;
            }
            x = tape.leaky_relu(x, 0.1)?;
            (x, seg) = decimate(tape, x, seg, l.down)?;
            features.push(x);
        }
        Ok(SubOutput { score: x, features })
    }
}

#[derive(Clone, Debug)]
pub struct Discriminators {
    subs: Vec<SubDiscriminator>,
}

impl Discriminators {
    pub fn new(cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let mut subs = Vec::new();
        for &(n, h) in &cfg.resolutions {
            subs.push(SubDiscriminator::new(
                Kind::Spectrogram(Arc::new(Stft::new(n, h, n))),
                ch,
            ));
        }
        for &p in &cfg.periods {
            subs.push(SubDiscriminator::new(Kind::Period(p), ch));
        }
        for &s in &cfg.scales {
            subs.push(SubDiscriminator::new(Kind::Scale(s), ch));
        }
        Ok(Self { subs })
    }

    pub fn subs(&self) -> &[SubDiscriminator] {
        &self.subs
    }

    pub fn min_len(&self) -> usize {
        self.subs
            .iter()
            .map(SubDiscriminator::min_len)
            .max()
            .unwrap_or(0)
    }

    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for d in &self.subs {
            d.init(&mut s, rng)?;
        }
        Ok(s)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Vec<SubOutput>> {
        let len = tape.value(y).dims2()?.1;
        if len < self.min_len() {
            return Err(Error::shape(
                "discriminate",
                format!(
                    "waveform of {len} samples shorter than analysis window {}",
                    self.min_len()
                ),
            ));
        }
        self.subs.iter().map(|d| d.forward(tape, p, y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::GradCheck;

    fn noise(len: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::row((0..len).map(|_| rng.random_range(-0.9..0.9)).collect()).unwrap()
    }

    fn tiny_decoder() -> DecoderConfig {
        DecoderConfig {
            upsample_rates: vec![2, 2],
            upsample_kernels: vec![4, 4],
            hidden: 6,
            resblock_dilations: vec![1],
            source_harmonics: 2,
        }
    }

    #[test]
    fn decode_length_law() {
        let dec = Decoder::new(&DecoderConfig::default(), 3, 8000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        dec.init(&mut s, &mut rng).unwrap();
        for t in [4, 16] {
            let w = dec
                .decode(&s, &Tensor::filled(&[3, t], 0.2), &vec![200f64.ln(); t])
                .unwrap();
            assert_eq!(w.len(), t * 16);
            assert!(w.samples.iter().all(|v| v.abs() < 1.0));
        }
        assert!(dec.decode(&s, &Tensor::zeros(&[3, 4]), &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_params_decode_silence() {
        let dec = Decoder::new(&DecoderConfig::default(), 3, 8000).unwrap();
        let mut s = ParamStore::new();
        dec.init_zero(&mut s).unwrap();
        let w = dec.decode(&s, &Tensor::zeros(&[3, 8]), &[5.0; 8]).unwrap();
        assert!(w.samples.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn decoder_gradients() {
        let dec = Decoder::new(&tiny_decoder(), 2, 8000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        dec.init(&mut s, &mut rng).unwrap();
        let z =
            Tensor::matrix(2, 5, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let target = noise(20, &mut rng);
        let lf0 = [5.3, 5.4, 5.5, 5.45, 5.35];
        let rep = GradCheck::default()
            .run(&s, &[], |tape, p| {
                let zv = tape.constant(z.clone());
                let y = dec.forward(tape, p, zv, &lf0)?;
                let t = tape.constant(target.clone());
                let d = tape.sub(y, t)?;
                let d = tape.square(d)?;
                tape.sum(d)
            })
            .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn suite_is_pure_and_stable() {
        let suite = Discriminators::new(&DiscriminatorConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = suite.init(&mut rng).unwrap();
        let y = noise(256, &mut rng);
        let run = |y: &Tensor| {
            let mut tape = Tape::inference();
            let p = s.bind_frozen(&mut tape);
            let yv = tape.constant(y.clone());
            let outs = suite.forward(&mut tape, &p, yv).unwrap();
            outs.iter()
                .map(|o| {
                    let mut v = vec![tape.value(o.score).clone()];
                    v.extend(o.features.iter().map(|&f| tape.value(f).clone()));
                    v
                })
                .collect::<Vec<_>>()
        };
        let a = run(&y);
        let b = run(&y);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        let counts: Vec<usize> = a.iter().map(Vec::len).collect();
        assert_eq!(
            counts,
            run(&noise(320, &mut rng))
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>()
        );
        for outs in run(&Tensor::zeros(&[1, 256])) {
            assert!(outs.iter().all(Tensor::is_finite));
        }
    }

    #[test]
    fn short_waveform_is_rejected() {
        let suite = Discriminators::new(&DiscriminatorConfig::default()).unwrap();
        let s = suite.init(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::inference();
        let p = s.bind_frozen(&mut tape);
        let y = tape.constant(Tensor::zeros(&[1, 100]));
        assert!(suite.forward(&mut tape, &p, y).is_err());
    }

    #[test]
    fn every_sub_discriminator_has_exact_gradients() {
        let cfg = DiscriminatorConfig {
            channels: 3,
            ..Default::default()
        };
        let suite = Discriminators::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = suite.init(&mut rng).unwrap();
        let y = noise(160, &mut rng);
        for sub in suite.subs() {
            let sub_params = s.subset(&sub.name);
            let rep = GradCheck::default()
                .run(&sub_params, &[], |tape, p| {
                    let yv = tape.constant(y.clone());
                    let o = sub.forward(tape, p, yv)?;
                    let mut acc = tape.square(o.score)?;
                    acc = tape.sum(acc)?;
                    for &f in &o.features {
                        let f = tape.mean(f)?;
                        acc = tape.add(acc, f)?;
                    }
                    Ok(acc)
                })
                .unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{}: {rep:?}", sub.name);
        }
    }
}
