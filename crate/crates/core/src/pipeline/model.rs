//! The full model: encoders, vector field, decoder and discriminators, with
//! the joint training step, the flow-only stage and inference.

use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::data::Utterance;
use crate::align::{gaussian_log_likelihood, mas_align, DurationDomain, NoteConstraint};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::cfm_loss;
use crate::latent::{
    kl_var, sample_reparam, sample_reparam_var, PosteriorEncoder, PriorEncoder, ScoreCondition,
};
use crate::losses::{
    adv_disc, adv_gen, aux_loss, dsp_loss, duration_loss_var, feature_matching,
    generator_composite, mel_recon, GenParts, LossReport,
};
use crate::ode::{solve, SolveStats};
use crate::signal::{DspConfig, MelTransform, Waveform};
use crate::vector_field::VectorField;
use crate::wavegen::{Decoder, Discriminators};

/// Prefix of discriminator parameter names.
pub const DISC_PREFIX: &str = "d.";
/// Prefix of vector-field parameter names.
pub const FIELD_PREFIX: &str = "vf.";

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub gen: ParamStore,
    pub disc: ParamStore,
}

impl Params {
    pub fn to_checkpoint(&self, fingerprint: u64) -> Checkpoint {
        Checkpoint::from_stores(fingerprint, &[&self.gen, &self.disc])
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        for (n, t) in &ck.tensors {
            let dst = if n.starts_with(DISC_PREFIX) {
                &mut disc
            } else {
                &mut gen
            };
            dst.insert(n.clone(), t.clone(), true)?;
        }
        Ok(Self { gen, disc })
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub term: String,
    pub value: f64,
}

/// Writes the training log as `step,term,value`.
pub fn write_log(path: &std::path::Path, log: &[LogRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in log {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &std::path::Path) -> Result<Vec<LogRow>> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(err)
}

/// Token/frame note membership of a score.
pub fn note_constraint(cond: &ScoreCondition) -> NoteConstraint {
    let notes = cond.notes();
    let ids: Vec<usize> = notes.iter().map(|n| n.id).collect();
    let frames: Vec<usize> = notes.iter().map(|n| n.frames).collect();
    NoteConstraint::from_note_frames(cond.note_ids.clone(), &ids, &frames)
}

fn normal(rng: &mut impl Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn batch_mean(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = *xs
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    tape.scale(acc, 1.0 / xs.len() as f64)
}

/// Generator-side terms of one utterance.
struct UttTerms {
    y: Var,
    y_hat: Var,
    mel: Var,
    kl: Var,
    dsp: Var,
    dur: Var,
    aux: Var,
    align: Var,
    cfm: Var,
}

/// What inference produced for one score.
#[derive(Clone, Debug)]
pub struct Inference {
    pub wave: Waveform,
    pub z_prior: Tensor,
    pub z: Tensor,
    pub log_f0: Vec<f64>,
    pub durations: Vec<usize>,
    pub solve: Option<SolveStats>,
    /// Seconds per stage.
    pub timings: Vec<(String, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferOptions {
    pub temperature: f64,
    pub refine: bool,
    pub seed: u64,
}

pub struct Model {
    pub cfg: RunConfig,
    pub posterior: PosteriorEncoder,
    pub prior: PriorEncoder,
    pub field: VectorField,
    pub decoder: Decoder,
    pub discs: Discriminators,
    pub mel: MelTransform,
    dsp: DspConfig,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.latent.latent_channels;
        Ok(Self {
            cfg: cfg.clone(),
            posterior: PosteriorEncoder::new(&cfg.latent)?,
            prior: PriorEncoder::new(&cfg.latent)?,
            field: VectorField::new(&cfg.vector_field, c)?,
            decoder: Decoder::new(&cfg.decoder, c, cfg.mel.sample_rate)?,
            discs: Discriminators::new(&cfg.discriminator)?,
            mel: MelTransform::new(&cfg.mel)?,
            dsp: DspConfig::new(cfg.mel.sample_rate, cfg.mel.hop),
        })
    }

    pub fn init(&self, seed: u64) -> Result<Params> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ParamStore::new();
        self.posterior.init(&mut gen, &mut rng)?;
        self.prior.init(&mut gen, &mut rng)?;
        gen.extend(self.field.init(&mut rng)?)?;
        self.decoder.init(&mut gen, &mut rng)?;
        let disc = self.discs.init(&mut rng)?;
        Ok(Params { gen, disc })
    }

    /// MAS durations of `u` under the current posterior and token statistics.
    fn mas_durations(&self, tape: &Tape, mq: Var, tm: Var, tl: Var, cond: &ScoreCondition) -> Result<Vec<usize>> {
        let ll = gaussian_log_likelihood(tape.value(mq), tape.value(tm), tape.value(tl))?;
        Ok(mas_align(&ll, &note_constraint(cond))?.path.durations().to_vec())
    }

    /// Durations the current model aligns `u` to.
    pub fn align(&self, params: &Params, u: &Utterance) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let p = params.gen.bind_frozen(&mut tape);
        let mel = tape.constant(u.mel.clone());
        let (mq, _) = self.posterior.forward(&mut tape, &p, mel)?;
        let (h, _) = self.prior.encode_tokens(&mut tape, &p, &u.cond)?;
        let (tm, tl) = self.prior.token_stats(&mut tape, &p, h)?;
        self.mas_durations(&tape, mq, tm, tl, &u.cond)
    }

    fn utterance_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        u: &Utterance,
        rng: &mut ChaCha8Rng,
        cfm_on: bool,
    ) -> Result<UttTerms> {
        let tc = &self.cfg.train;
        let c = self.cfg.latent.latent_channels;
        let t = u.frames();
        let mel_true = tape.constant(u.mel.clone());
        let (mq, lq) = self.posterior.forward(tape, p, mel_true)?;
        let (h, log_d) = self.prior.encode_tokens(tape, p, &u.cond)?;
        let (tm, tl) = self.prior.token_stats(tape, p, h)?;
        let d_mas = self.mas_durations(tape, mq, tm, tl, &u.cond)?;
        let pv = self.prior.expand(tape, p, &u.cond, h, log_d, &d_mas)?;

        // Token statistics fitted to the (fixed) posterior means they align.
        let index: Vec<Option<usize>> = d_mas
            .iter()
            .enumerate()
            .flat_map(|(i, &d)| std::iter::repeat_n(Some(i), d))
            .collect();
        let em = tape.gather_cols(tm, index.clone())?;
        let el = tape.gather_cols(tl, index)?;
        let target = tape.detach(mq);
        let diff = tape.sub(target, em)?;
        let d2 = tape.square(diff)?;
        let neg = tape.scale(el, -1.0)?;
        let prec = tape.exp(neg)?;
        let quad = tape.mul(d2, prec)?;
        let nll = tape.add(quad, el)?;
        let nll = tape.mean(nll)?;
        let align = tape.scale(nll, 0.5 * c as f64)?;

        let eps = normal(rng, &[c, t])?;
        let zq = sample_reparam_var(tape, mq, lq, &eps, 1.0)?;
        let kl = kl_var(tape, mq, lq, pv.mean, pv.logvar)?;
        let dur = match tc.duration_domain {
            DurationDomain::Log => duration_loss_var(tape, log_d, &d_mas)?,
            DurationDomain::Raw => {
                let target = tape.constant(Tensor::row(d_mas.iter().map(|&d| d as f64).collect())?);
                let pred = tape.exp(log_d)?;
                let e = tape.sub(pred, target)?;
                let e = tape.square(e)?;
                tape.mean(e)?
            }
        };
        let lf0 = u.continuous_log_f0();
        let lf0_true = tape.constant(Tensor::row(lf0.clone())?);
        let aux = aux_loss(tape, lf0_true, mel_true, pv.log_f0, pv.mel)?;

        let y = tape.constant(Tensor::row(u.wave.samples.clone())?);
        let exc: Vec<f64> = (0..t * self.dsp.hop).map(|_| rng.sample(StandardNormal)).collect();
        let y_dsp = crate::signal::dsp_synthesize_var(tape, &u.f0, pv.amps, pv.noise, &exc, &self.dsp)?;
        let dsp = dsp_loss(tape, &self.mel, y_dsp, y, self.cfg.losses.dsp)?;

        let y_hat = self.decoder.forward(tape, p, zq, &lf0)?;
        let mel = mel_recon(tape, &self.mel, y, y_hat)?;

        let cfm = if cfm_on {
            let (zp, cond) = prior_draw(tape, pv.mean, pv.logvar, rng, 1.0)?;
            let zq_end = if tc.cfm_through_encoders {
                zq
            } else {
                tape.detach(zq)
            };
            let tt = [rng.random::<f64>()];
            cfm_loss(tape, zp, zq_end, &tt, t, |tape, zt, ts| {
                self.field.forward(tape, p, zt, ts, Some(cond), t)
            })?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        Ok(UttTerms {
            y,
            y_hat,
            mel,
            kl,
            dsp,
            dur,
            aux,
            align,
            cfm,
        })
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn train_step(
        &self,
        params: &mut Params,
        batch: &[&Utterance],
        step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossReport, f64)> {
        let cfm_on = step >= self.cfg.train.cfm_warmup_steps;
        let mut gt = Tape::training(rng.next_u64());
        let gp = params.gen.bind(&mut gt);
        let terms = batch
            .iter()
            .map(|u| self.utterance_terms(&mut gt, &gp, u, rng, cfm_on))
            .collect::<Result<Vec<_>>>()?;

        let mut dt = Tape::training(rng.next_u64());
        let dp = params.disc.bind(&mut dt);
        let mut d_losses = Vec::new();
        for tm in &terms {
            let real = dt.constant(gt.value(tm.y).clone());
            let fake = dt.constant(gt.value(tm.y_hat).clone());
            let r = self.discs.forward(&mut dt, &dp, real)?;
            let f = self.discs.forward(&mut dt, &dp, fake)?;
            let rs: Vec<Var> = r.iter().map(|o| o.score).collect();
            let fs: Vec<Var> = f.iter().map(|o| o.score).collect();
            d_losses.push(adv_disc(&mut dt, &rs, &fs)?);
        }
        let d_loss = batch_mean(&mut dt, &d_losses)?;
        let d_value = dt.item(d_loss)?;
        if !d_value.is_finite() {
            return Err(Error::Diverged {
                step,
                report: format!("disc={d_value}"),
            });
        }
        let g = dt.backward(d_loss)?;
        params
            .disc
            .adam_step(&dp.collect(&g), &self.cfg.optimizer.discriminator)?;

        let dq = params.disc.bind_frozen(&mut gt);
        let (mut adv, mut fm) = (Vec::new(), Vec::new());
        for tm in &terms {
            let r = self.discs.forward(&mut gt, &dq, tm.y)?;
            let f = self.discs.forward(&mut gt, &dq, tm.y_hat)?;
            let fs: Vec<Var> = f.iter().map(|o| o.score).collect();
            adv.push(adv_gen(&mut gt, &fs)?);
            let rf: Vec<Vec<Var>> = r.into_iter().map(|o| o.features).collect();
            let ff: Vec<Vec<Var>> = f.into_iter().map(|o| o.features).collect();
            fm.push(feature_matching(&mut gt, &rf, &ff)?);
        }
        let pick = |f: fn(&UttTerms) -> Var| terms.iter().map(f).collect::<Vec<_>>();
        let parts = GenParts {
            adv: Some(batch_mean(&mut gt, &adv)?),
            fm: Some(batch_mean(&mut gt, &fm)?),
            mel: Some(batch_mean(&mut gt, &pick(|t| t.mel))?),
            kl: Some(batch_mean(&mut gt, &pick(|t| t.kl))?),
            dsp: Some(batch_mean(&mut gt, &pick(|t| t.dsp))?),
            dur: Some(batch_mean(&mut gt, &pick(|t| t.dur))?),
            aux: Some(batch_mean(&mut gt, &pick(|t| t.aux))?),
            cfm: Some(batch_mean(&mut gt, &pick(|t| t.cfm))?),
            extra: vec![("align".into(), batch_mean(&mut gt, &pick(|t| t.align))?)],
        };
        let (total, report) = generator_composite(&mut gt, &parts, &self.cfg.losses)?;
        if !report.is_finite() {
            return Err(Error::Diverged {
                step,
                report: report.to_string(),
            });
        }
        let g = gt.backward(total)?;
        params
            .gen
            .adam_step(&gp.collect(&g), &self.cfg.optimizer.generator)?;
        Ok((report, d_value))
    }

    /// Joint adversarial training for `train.steps` steps. `on_checkpoint`
    /// receives the step count and parameters every `checkpoint_every` steps
    /// and after the last step (step 0 when no steps are run).
    pub fn train(
        &self,
        params: &mut Params,
        data: &[Utterance],
        mut on_checkpoint: impl FnMut(usize, &Params) -> Result<()>,
    ) -> Result<Vec<LogRow>> {
        let tc = &self.cfg.train;
        if data.is_empty() {
            return Err(Error::invalid("no training utterances"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7472_6169_6e00);
        let b = tc.batch.min(data.len());
        let mut log = Vec::new();
        let mut last = None;
        for step in 1..=tc.steps {
            let idx = sample_indices(&mut rng, data.len(), b).into_vec();
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
            let (report, d) = self.train_step(params, &batch, step - 1, &mut rng)?;
            log::debug!("step {step}: {report} disc={d}");
            for t in &report.terms {
                log.push(LogRow {
                    step,
                    term: t.name.clone(),
                    value: t.value,
                });
            }
            log.push(LogRow {
                step,
                term: "total".into(),
                value: report.total,
            });
            log.push(LogRow {
                step,
                term: "disc".into(),
                value: d,
            });
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 {
                on_checkpoint(step, params)?;
                last = Some(step);
            }
        }
        if last != Some(tc.steps) {
            on_checkpoint(tc.steps, params)?;
        }
        Ok(log)
    }

    /// Flow-matching training of the vector field alone, with the encoders
    /// frozen. Pairs are a fresh prior draw and a fresh posterior draw of the
    /// same utterance, frame-aligned by its MAS durations. Returns the loss curve.
    pub fn train_flow(&self, params: &mut Params, data: &[Utterance]) -> Result<Vec<f64>> {
        let tc = &self.cfg.train;
        if data.is_empty() {
            return Err(Error::invalid("no training utterances"));
        }
        let mut stats = Vec::with_capacity(data.len());
        for u in data {
            let d = self.align(params, u)?;
            let post = self.posterior.encode(&params.gen, &u.mel)?;
            let prior = self.prior.encode(&params.gen, &u.cond, Some(&d))?;
            stats.push((post, prior.gaussian));
        }
        let mut store = params.gen.subset(FIELD_PREFIX);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x666c_6f77);
        let b = tc.flow_batch.min(data.len());
        let mut curve = Vec::with_capacity(tc.flow_steps);
        for step in 0..tc.flow_steps {
            let mut tape = Tape::training(rng.next_u64());
            let p = store.bind(&mut tape);
            let idx = sample_indices(&mut rng, data.len(), b).into_vec();
            let mut losses = Vec::with_capacity(b);
            for &i in &idx {
                let (q, pr) = &stats[i];
                let t = q.frames();
                let zq = sample_reparam(q, &mut rng, 1.0)?;
                let zp = sample_reparam(pr, &mut rng, 1.0)?;
                let zq = tape.constant(zq.values);
                let zp = tape.constant(zp.values);
                let cond = tape.constant(pr.mean.clone());
                let tt = [rng.random::<f64>()];
                losses.push(cfm_loss(&mut tape, zp, zq, &tt, t, |tape, zt, ts| {
                    self.field.forward(tape, &p, zt, ts, Some(cond), t)
                })?);
            }
            let loss = batch_mean(&mut tape, &losses)?;
            let v = tape.item(loss)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    report: format!("cfm={v}"),
                });
            }
            curve.push(v);
            let g = tape.backward(loss)?;
            store.adam_step(&p.collect(&g), &self.cfg.optimizer.flow)?;
        }
        for (n, t) in store.iter() {
            params.gen.set(n, t.clone())?;
        }
        Ok(curve)
    }

    /// Integrates the vector field from `z0` over t ∈ [0, 1], conditioned on
    /// the prior mean. `segment > 0` solves consecutive blocks of that many
    /// frames independently (the last may be shorter); 0 solves the whole
    /// utterance at once. Stats are summed over blocks, `final_error` is the max.
    pub fn refine(&self, params: &Params, z0: &Tensor, cond: &Tensor, segment: usize) -> Result<(Tensor, SolveStats)> {
        let (c, t) = z0.dims2()?;
        if cond.shape() != z0.shape() {
            return Err(Error::shape("refine", format!("latent {:?}, condition {:?}", z0.shape(), cond.shape())));
        }
        let field = params.gen.subset(FIELD_PREFIX);
        let width = if segment == 0 { t.max(1) } else { segment };
        let mut parts = Vec::new();
        let mut total = SolveStats::default();
        for start in (0..t).step_by(width) {
            let end = (start + width).min(t);
            let n = end - start;
            let z = z0.slice_cols(start, end)?;
            let mean = cond.slice_cols(start, end)?;
            let (z1, st) = solve(
                |tau, z: &[f64]| {
                    let zt = Tensor::matrix(c, n, z.to_vec())?;
                    Ok(self.field.eval(&field, &zt, &[tau], Some(&mean), n)?.into_data())
                },
                z.data(),
                0.0,
                1.0,
                &self.cfg.solver,
            )?;
            total.accepted += st.accepted;
            total.rejected += st.rejected;
            total.rhs_evals += st.rhs_evals;
            total.final_error = total.final_error.max(st.final_error);
            parts.push(Tensor::matrix(c, n, z1)?);
        }
        if parts.is_empty() {
            return Ok((z0.clone(), total));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok((Tensor::concat_cols(&refs)?, total))
    }

    /// Prior encode → sample → optional ODE refinement → decode.
    pub fn infer(&self, params: &Params, cond: &ScoreCondition, opts: &InferOptions) -> Result<Inference> {
        let mut timings = Vec::new();
        let clock = Instant::now();
        let prior = self.prior.encode(&params.gen, cond, None)?;
        timings.push(("prior".to_string(), clock.elapsed().as_secs_f64()));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let z_prior = sample_reparam(&prior.gaussian, &mut rng, opts.temperature)?.values;
        let (z, stats) = if opts.refine {
            let clock = Instant::now();
            let (z1, stats) = self.refine(params, &z_prior, &prior.gaussian.mean, 0)?;
            timings.push(("refine".to_string(), clock.elapsed().as_secs_f64()));
            (z1, Some(stats))
        } else {
            (z_prior.clone(), None)
        };
        let clock = Instant::now();
        let wave = self.decoder.decode(&params.gen, &z, &prior.aux.log_f0)?;
        timings.push(("decode".to_string(), clock.elapsed().as_secs_f64()));
        Ok(Inference {
            wave,
            z_prior,
            z,
            log_f0: prior.aux.log_f0,
            durations: prior.durations,
            solve: stats,
            timings,
        })
    }
}

/// Detached prior sample and detached prior mean.
fn prior_draw(
    tape: &mut Tape,
    mean: Var,
    logvar: Var,
    rng: &mut ChaCha8Rng,
    temperature: f64,
) -> Result<(Var, Var)> {
    let m = tape.value(mean).clone();
    let lv = tape.value(logvar);
    let data = m
        .data()
        .iter()
        .zip(lv.data())
        .map(|(&mu, &l)| mu + temperature * (0.5 * l).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let zp = Tensor::new(m.shape().to_vec(), data)?;
    Ok((tape.constant(zp), tape.constant(m)))
}
