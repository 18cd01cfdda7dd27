//! Verification experiments with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Bound, GradCheck, GradCheckReport, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::flow::{train_cfm, CfmTrainConfig, GaussianPairs, GaussianTransportSpec};
use crate::align::{brute_force_align, mas_align, NoteConstraint};
use crate::latent::{kl_divergence, DiagonalGaussianSeq, PosteriorEncoder, PriorEncoder, ScoreCondition};
use crate::losses::{adv_disc, adv_gen, feature_matching, generator_composite, GenParts, LossWeights};
use crate::signal::{mcd, MelSpectrogram};
use crate::nn::randomize;
use crate::ode::{solve, SolveStats, SolverConfig};
use crate::pipeline::{synth_data, Dataset, InferOptions, Model, RunConfig, MCD_ORDER};
use crate::vector_field::{VectorField, VectorFieldConfig};
use crate::wavegen::{Decoder, Discriminators};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianExperiment {
    pub spec: GaussianTransportSpec,
    pub dims: usize,
    pub steps: usize,
    pub batch: usize,
    pub samples: usize,
    pub seed: u64,
    pub field: VectorFieldConfig,
    pub adam: AdamConfig,
    pub solver: SolverConfig,
}

impl Default for GaussianExperiment {
    fn default() -> Self {
        Self {
            spec: GaussianTransportSpec {
                a: 0.0,
                s: 1.0,
                b: 3.0,
                r: 0.5,
            },
            dims: 8,
            steps: 5000,
            batch: 128,
            samples: 10_000,
            seed: 0,
            field: VectorFieldConfig {
                cond_dim: 0,
                dropout: 0.0,
                ..VectorFieldConfig::default()
            },
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianReport {
    pub loss_curve: Vec<f64>,
    pub loss_floor: f64,
    /// Mean of the last 10% of the loss curve.
    pub final_loss: f64,
    pub grid_mse: f64,
    /// Grid error at t = 0, 0.25, 0.5, 0.75, 1.
    pub grid_mse_by_t: Vec<f64>,
    pub grid_variance: f64,
    pub terminal_mean: Vec<f64>,
    pub terminal_std: Vec<f64>,
    /// Mean over dimensions of the sorted-sample 1-Wasserstein distance.
    pub w1_transported: f64,
    pub w1_prior: f64,
    pub solve: SolveStats,
}

/// Sorted-sample 1-Wasserstein distance between equal-size samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Trains a field on independent Gaussian pairs, then compares it with the
/// closed-form velocity and transports fresh prior samples.
pub fn gaussian_transport(cfg: &GaussianExperiment) -> Result<(GaussianReport, VectorField, ParamStore)> {
    let spec = GaussianTransportSpec::new(cfg.spec.a, cfg.spec.s, cfg.spec.b, cfg.spec.r)?;
    cfg.solver.validate()?;
    let vf = VectorField::new(&cfg.field, cfg.dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = vf.init(&mut rng)?;
    let mut source = GaussianPairs {
        spec,
        dims: cfg.dims,
        batch: cfg.batch,
    };
    let train = CfmTrainConfig {
        steps: cfg.steps,
        seed: rng.random(),
        adam: cfg.adam.clone(),
    };
    let curve = train_cfm(&vf, &mut store, &mut source, &train)?;
    let tail = (curve.len() / 10).max(1).min(curve.len());
    let final_loss = if curve.is_empty() {
        f64::NAN
    } else {
        curve[curve.len() - tail..].iter().sum::<f64>() / tail as f64
    };

    let grid_z: Vec<f64> = (0..=12).map(|i| -3.0 + 0.5 * i as f64).collect();
    let grid_t = [0.0, 0.25, 0.5, 0.75, 1.0];
    let (mut se, mut n, mut oracle_vals) = (0.0, 0usize, Vec::new());
    let mut grid_mse_by_t = Vec::new();
    for &t in &grid_t {
        let sd = spec.var_at(t).sqrt();
        let zs: Vec<f64> = grid_z.iter().map(|k| spec.mean_at(t) + k * sd).collect();
        // Sweep one coordinate at a time with the rest at the path mean.
        let cols = cfg.dims * zs.len();
        let mut z = vec![spec.mean_at(t); cfg.dims * cols];
        for d in 0..cfg.dims {
            for (j, &zj) in zs.iter().enumerate() {
                z[d * cols + d * zs.len() + j] = zj;
            }
        }
        let v = vf.eval(&store, &Tensor::matrix(cfg.dims, cols, z)?, &vec![t; cols], None, 1)?;
        let mut se_t = 0.0;
        for d in 0..cfg.dims {
            for (j, &zj) in zs.iter().enumerate() {
                let o = spec.velocity(t, zj)?;
                se_t += (v.at(d, d * zs.len() + j) - o).powi(2);
                oracle_vals.push(o);
            }
        }
        grid_mse_by_t.push(se_t / cols as f64);
        se += se_t;
        n += cols;
    }
    let grid_mse = se / n as f64;
    let (_, grid_sd) = mean_std(&oracle_vals);

    let m = cfg.samples;
    let z0: Vec<f64> = (0..cfg.dims * m).map(|_| spec.a + spec.s * rng.sample::<f64, _>(StandardNormal)).collect();
    let (z1, stats) = solve(
        |t, z: &[f64]| {
            let zt = Tensor::matrix(cfg.dims, m, z.to_vec())?;
            Ok(vf.eval(&store, &zt, &vec![t; m], None, 1)?.into_data())
        },
        &z0,
        0.0,
        1.0,
        &cfg.solver,
    )?;
    let (mut means, mut stds, mut w1t, mut w1p) = (vec![], vec![], 0.0, 0.0);
    for d in 0..cfg.dims {
        let row = &z1[d * m..(d + 1) * m];
        let (mu, sd) = mean_std(row);
        means.push(mu);
        stds.push(sd);
        let target: Vec<f64> = (0..m).map(|_| spec.b + spec.r * rng.sample::<f64, _>(StandardNormal)).collect();
        w1t += wasserstein1(row, &target);
        w1p += wasserstein1(&z0[d * m..(d + 1) * m], &target);
    }
    let report = GaussianReport {
        loss_floor: spec.loss_floor(),
        final_loss,
        loss_curve: curve,
        grid_mse,
        grid_mse_by_t,
        grid_variance: grid_sd * grid_sd,
        terminal_mean: means,
        terminal_std: stds,
        w1_transported: w1t / cfg.dims as f64,
        w1_prior: w1p / cfg.dims as f64,
        solve: stats,
    };
    Ok((report, vf, store))
}

/// One finite-difference check of the gradient suite.
#[derive(Clone, Debug)]
pub struct GradientCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `Σ w·x` for a fixed random `w`: every output element gets its own weight.
fn project(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let w = uniform(tape.value(x).shape(), rng)?;
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn sum_all(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}

fn check(
    name: &str,
    store: &ParamStore,
    seed: u64,
    coords: usize,
    mut f: impl FnMut(&mut Tape, &Bound, &mut ChaCha8Rng) -> Result<Var>,
) -> Result<GradientCase> {
    let gc = GradCheck {
        mode: Mode::Train,
        seed: Some(seed),
        max_coords_per_tensor: coords,
        ..GradCheck::default()
    };
    let report = gc.run(store, &[], |tape, p| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(tape, p, &mut rng)
    })?;
    Ok(GradientCase {
        name: name.to_string(),
        report,
    })
}

/// Finite-difference checks at the desk dimensions of `cfg` on the vector
/// field, both encoders, the decoder and every sub-discriminator. Parameters
/// are randomized (zero-initialized heads would hide errors) and at most
/// `coords` coordinates are probed per tensor. Dropout is live with a fixed
/// mask seed.
pub fn gradient_suite(cfg: &RunConfig, seed: u64, coords: usize) -> Result<Vec<GradientCase>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.latent.latent_channels;
    let frames = 8;
    let mut out = Vec::new();

    let vf = VectorField::new(&cfg.vector_field, c)?;
    let mut s = vf.init(&mut rng)?;
    randomize(&mut s, "", 0.1, &mut rng)?;
    let z = uniform(&[c, 2 * frames], &mut rng)?;
    let mean = uniform(&[c, 2 * frames], &mut rng)?;
    out.push(check("vector field", &s, seed, coords, |tape, p, r| {
        let zv = tape.constant(z.clone());
        let m = tape.constant(mean.clone());
        let v = vf.forward(tape, p, zv, &[0.2, 0.85], Some(m), frames)?;
        project(tape, v, r)
    })?);

    let pe = PosteriorEncoder::new(&cfg.latent)?;
    let mut s = ParamStore::new();
    pe.init(&mut s, &mut rng)?;
    randomize(&mut s, "", 0.1, &mut rng)?;
    let mel = uniform(&[cfg.latent.mel_bands, frames], &mut rng)?;
    out.push(check("posterior encoder", &s, seed, coords, |tape, p, r| {
        let m = tape.constant(mel.clone());
        let (mu, lv) = pe.forward(tape, p, m)?;
        let a = project(tape, mu, r)?;
        let b = project(tape, lv, r)?;
        tape.add(a, b)
    })?);

    let pr = PriorEncoder::new(&cfg.latent)?;
    let mut s = ParamStore::new();
    pr.init(&mut s, &mut rng)?;
    randomize(&mut s, "", 0.1, &mut rng)?;
    let vowel = cfg.latent.vocab - 1;
    let cond = ScoreCondition {
        tokens: vec![0, vowel, vowel - 1],
        pitches: vec![60.0, 60.0, 64.0],
        note_durations: vec![5, 5, 3],
        note_ids: vec![0, 0, 1],
    };
    let durations = [2, 3, 3];
    out.push(check("prior encoder", &s, seed, coords, |tape, p, r| {
        let (v, _) = pr.forward(tape, p, &cond, Some(&durations))?;
        let (h, _) = pr.encode_tokens(tape, p, &cond)?;
        let (am, al) = pr.token_stats(tape, p, h)?;
        let mut terms = Vec::new();
        for x in [v.mean, v.logvar, v.log_durations, v.log_f0, v.mel, v.amps, v.noise, am, al] {
            terms.push(project(tape, x, r)?);
        }
        sum_all(tape, &terms)
    })?);

    let dec = Decoder::new(&cfg.decoder, c, cfg.mel.sample_rate)?;
    let mut s = ParamStore::new();
    dec.init(&mut s, &mut rng)?;
    let zd = uniform(&[c, 4], &mut rng)?;
    let lf0 = [5.3, 5.4, 5.5, 5.45];
    out.push(check("decoder", &s, seed, coords, |tape, p, r| {
        let zv = tape.constant(zd.clone());
        let y = dec.forward(tape, p, zv, &lf0)?;
        project(tape, y, r)
    })?);

    let discs = Discriminators::new(&cfg.discriminator)?;
    let s = discs.init(&mut rng)?;
    let y = uniform(&[1, 256], &mut rng)?.map(|v| 0.9 * v);
    for sub in discs.subs() {
        let sp = s.subset(&sub.name);
        out.push(check(&format!("discriminator {}", sub.name), &sp, seed, coords, |tape, p, r| {
            let yv = tape.constant(y.clone());
            let o = sub.forward(tape, p, yv)?;
            let mut terms = vec![project(tape, o.score, r)?];
            for &f in &o.features {
                terms.push(project(tape, f, r)?);
            }
            sum_all(tape, &terms)
        })?);
    }
    Ok(out)
}


/// Refined against unrefined inference on the held-out split at one temperature.
#[derive(Clone, Debug, Serialize)]
pub struct RefineOutcome {
    pub temperature: f64,
    /// Held-out utterances where refinement has mel-L1 no larger than without.
    pub wins: usize,
    pub utterances: usize,
    pub mcd_refined: f64,
    pub mcd_unrefined: f64,
    pub l1_refined: f64,
    pub l1_unrefined: f64,
}

impl RefineOutcome {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.utterances.max(1) as f64
    }
}

/// Synthesises the corpus of `cfg` into `dir`, trains jointly and then the
/// flow stage, and compares refined and unrefined inference per temperature.
/// Inference seeds depend only on the utterance index.
pub fn refinement_experiment(cfg: &RunConfig, dir: &std::path::Path, temperatures: &[f64]) -> Result<Vec<RefineOutcome>> {
    let m = synth_data(cfg, dir)?;
    let data = Dataset::load(&m, cfg)?;
    let model = Model::new(cfg)?;
    let mut params = model.init(cfg.seed)?;
    model.train(&mut params, &data.train, |_, _| Ok(()))?;
    model.train_flow(&mut params, &data.train)?;
    let mut out = Vec::new();
    for &temperature in temperatures {
        let mut o = RefineOutcome {
            temperature,
            wins: 0,
            utterances: data.test.len(),
            mcd_refined: 0.0,
            mcd_unrefined: 0.0,
            l1_refined: 0.0,
            l1_unrefined: 0.0,
        };
        let k = data.test.len().max(1) as f64;
        for (i, u) in data.test.iter().enumerate() {
            let reference = MelSpectrogram::new(u.mel.clone())?;
            let score = |refine| -> Result<(f64, f64)> {
                let opts = InferOptions {
                    temperature,
                    refine,
                    seed: 1000 + i as u64,
                };
                let w = model.infer(&params, &u.cond, &opts)?.wave;
                let g = model.mel.compute_aligned(&w.samples)?;
                Ok((reference.l1(&g)?, mcd(&reference, &g, MCD_ORDER)?))
            };
            let (lr, mr) = score(true)?;
            let (lu, mu) = score(false)?;
            o.wins += (lr <= lu) as usize;
            o.l1_refined += lr / k;
            o.l1_unrefined += lu / k;
            o.mcd_refined += mr / k;
            o.mcd_unrefined += mu / k;
        }
        out.push(o);
    }
    Ok(out)
}

/// A computed value next to its closed form.
#[derive(Clone, Debug, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tol: f64,
}

impl OracleCheck {
    fn new(name: &str, value: f64, expected: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            expected,
            tol: 1e-6,
        }
    }

    pub fn passed(&self) -> bool {
        (self.value - self.expected).abs() <= self.tol
    }
}

fn gauss1(mean: f64, var: f64) -> Result<DiagonalGaussianSeq> {
    DiagonalGaussianSeq::new(Tensor::matrix(1, 1, vec![mean])?, Tensor::matrix(1, 1, vec![var.ln()])?)
}

/// KL, MCD, LSGAN, feature-matching and composite-weight values with known
/// answers. Expected values are computed from their closed forms.
pub fn closed_form_checks() -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let q = gauss1(0.3, 2.0)?;
    out.push(OracleCheck::new("KL(q||q)", kl_divergence(&q, &q)?, 0.0));
    out.push(OracleCheck::new("KL(N(1,1)||N(0,1))", kl_divergence(&gauss1(1.0, 1.0)?, &gauss1(0.0, 1.0)?)?, 0.5));
    out.push(OracleCheck::new(
        "KL(N(0,4)||N(0,1))",
        kl_divergence(&gauss1(0.0, 4.0)?, &gauss1(0.0, 1.0)?)?,
        1.5 - 2f64.ln(),
    ));

    let bands = 24;
    let frames = 5;
    let base = Tensor::new(
        vec![bands, frames],
        (0..bands * frames).map(|k| -3.0 + 0.01 * (k % 17) as f64).collect(),
    )?;
    // adding the k = 3 orthonormal DCT basis vector moves c3 by exactly 1
    let shifted = Tensor::new(
        vec![bands, frames],
        (0..bands * frames)
            .map(|k| {
                let b = (k / frames) as f64;
                base.data()[k] + (2.0 / bands as f64).sqrt() * (std::f64::consts::PI * 3.0 * (b + 0.5) / bands as f64).cos()
            })
            .collect(),
    )?;
    let mcd_v = mcd(&MelSpectrogram::new(base)?, &MelSpectrogram::new(shifted)?, 13)?;
    out.push(OracleCheck::new("MCD one coefficient +1", mcd_v, 10.0 * 2f64.sqrt() / 10f64.ln()));

    let mut t = Tape::inference();
    for s in [0.0, 0.5, 1.0] {
        let v = t.constant(Tensor::filled(&[1, 3], s));
        let one = t.constant(Tensor::filled(&[1, 3], 1.0));
        let g = adv_gen(&mut t, &[v])?;
        let d = adv_disc(&mut t, &[one], &[v])?;
        out.push(OracleCheck::new(&format!("LSGAN generator at s={s}"), t.item(g)?, (s - 1.0) * (s - 1.0)));
        out.push(OracleCheck::new(&format!("LSGAN discriminator fake at s={s}"), t.item(d)?, s * s));
    }
    for n in [4, 8, 32] {
        let a = t.constant(Tensor::filled(&[1, n], 0.25));
        let b = t.constant(Tensor::filled(&[1, n], -0.5));
        let fm = feature_matching(&mut t, &[vec![a]], &[vec![b]])?;
        out.push(OracleCheck::new(&format!("feature matching, {n} elements"), t.item(fm)?, 0.75));
    }
    let mut unit = || Some(t.constant(Tensor::scalar(1.0)));
    let parts = GenParts {
        adv: unit(),
        fm: unit(),
        mel: unit(),
        kl: unit(),
        dsp: unit(),
        dur: unit(),
        aux: unit(),
        cfm: unit(),
        extra: vec![],
    };
    let (total, _) = generator_composite(&mut t, &parts, &LossWeights::default())?;
    out.push(OracleCheck::new("composite weight audit", t.item(total)?, 53.0));
    Ok(out)
}

/// `dz/dt = −z` from `z(0) = 1` over the unit interval.
pub fn ode_decay(cfg: &SolverConfig) -> Result<(f64, SolveStats)> {
    let (z, stats) = solve(|_, z: &[f64]| Ok(z.iter().map(|v| -v).collect()), &[1.0], 0.0, 1.0, cfg)?;
    Ok((z[0], stats))
}

/// Integrates a freshly initialised (zero-head) desk vector field from
/// `z0`; returns whether the result is bit-identical to `z0`, and the stats.
pub fn zero_field_solve(cfg: &RunConfig, seed: u64) -> Result<(bool, SolveStats)> {
    let c = cfg.latent.latent_channels;
    let vf = VectorField::new(&cfg.vector_field, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = vf.init(&mut rng)?;
    let frames = 12;
    let z0: Vec<f64> = (0..c * frames).map(|_| rng.sample(StandardNormal)).collect();
    let cond = Tensor::new(vec![c, frames], z0.iter().map(|v| 0.5 * v).collect())?;
    let (z1, stats) = solve(
        |t, z: &[f64]| Ok(vf.eval(&store, &Tensor::matrix(c, frames, z.to_vec())?, &[t], Some(&cond), frames)?.into_data()),
        &z0,
        0.0,
        1.0,
        &cfg.solver,
    )?;
    let same = z0.iter().zip(&z1).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, stats))
}

/// Cell values of the exhaustive alignment sweep.
pub const MAS_GRID: [f64; 3] = [-1.0, 0.0, 1.0];

/// Outcome of comparing the DP against enumeration over many instances.
#[derive(Debug, Default)]
pub struct MasTally {
    pub cases: usize,
    pub infeasible: usize,
    pub mismatches: Vec<String>,
}

impl MasTally {
    fn compare(&mut self, ll: &Tensor, nb: &NoteConstraint) {
        self.cases += 1;
        match (mas_align(ll, nb), brute_force_align(ll, nb)) {
            (Ok(a), Ok(b)) => {
                if a.score.to_bits() != b.score.to_bits() || a.path != b.path {
                    self.mismatches.push(format!("{ll:?} {nb:?}: {a:?} vs {b:?}"));
                }
            }
            (Err(_), Err(_)) => self.infeasible += 1,
            (a, b) => self.mismatches.push(format!("{ll:?} {nb:?}: {a:?} vs {b:?}")),
        }
    }
}

/// Every way of splitting `total` into `parts` positive counts.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 1..=total.saturating_sub(parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn expand(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect()
}

/// Every note constraint on `n` tokens and `t` frames, feasible or not.
pub fn constraints(n: usize, t: usize) -> Vec<NoteConstraint> {
    let mut out = Vec::new();
    for k in 1..=n {
        for tok in compositions(n, k) {
            for frm in compositions(t, k) {
                out.push(NoteConstraint {
                    token_notes: expand(&tok),
                    frame_notes: expand(&frm),
                });
            }
        }
    }
    out
}

/// All ll matrices over `GRID` for N ≤ 3, T ≤ 6 under every note constraint.
/// Only cells some admissible path can visit are swept: token i sits in
/// frames i..=T−N+i and only on frames of its own note. The remaining cells
/// hold a fixed value from the grid.
pub fn mas_exhaustive() -> MasTally {
    let mut tally = MasTally::default();
    for n in 1..=3 {
        for t in n..=6 {
            for nb in constraints(n, t) {
                let cells: Vec<(usize, usize)> = (0..n)
                    .flat_map(|i| (i..=t - n + i).map(move |j| (i, j)))
                    .filter(|&(i, j)| nb.token_notes[i] == nb.frame_notes[j])
                    .collect();
                let mut ll = Tensor::filled(&[n, t], MAS_GRID[2]);
                let total = MAS_GRID.len().pow(cells.len() as u32);
                for code in 0..total {
                    let mut c = code;
                    for &(i, j) in &cells {
                        ll.data_mut()[i * t + j] = MAS_GRID[c % MAS_GRID.len()];
                        c /= MAS_GRID.len();
                    }
                    tally.compare(&ll, &nb);
                }
            }
        }
    }
    tally
}

/// Random instances with N ≤ 4, T ≤ 8. Half the matrices are drawn from the
/// grid so ties are common; the rest are Gaussian.
pub fn mas_random(seed: u64, count: usize) -> Result<MasTally> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = MasTally::default();
    for k in 0..count {
        let n = rng.random_range(1..=4);
        let t = rng.random_range(n..=8);
        let all = constraints(n, t);
        let nb = &all[rng.random_range(0..all.len())];
        let data = (0..n * t)
            .map(|_| {
                if k % 2 == 0 {
                    MAS_GRID[rng.random_range(0..MAS_GRID.len())]
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        tally.compare(&Tensor::matrix(n, t, data)?, nb);
    }
    Ok(tally)
}
