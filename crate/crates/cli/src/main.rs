use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentflow::align::DurationDomain;
use latentflow::autodiff::Tensor;
use latentflow::experiments::{
    closed_form_checks, gaussian_transport, gradient_suite, mas_exhaustive, mas_random, ode_decay,
    zero_field_solve, GaussianExperiment,
};
use latentflow::flow::GaussianTransportSpec;
use latentflow::latent::ScoreCondition;
use latentflow::ode::SolveStats;
use latentflow::pipeline::data::{read_f0, read_mel, read_score};
use latentflow::pipeline::report::{f0_overlay_svg, loss_curves_svg, mel_heatmap_svg, text_summary, Contour};
use latentflow::pipeline::{
    read_log, synth_data, write_log, Checkpoint, Dataset, EvalReport, Evaluator, InferOptions, LogRow, Manifest,
    Model, Params, RunConfig, Split,
};
use latentflow::signal::{f0_extract, read_wav, write_wav, F0Config, MelTransform};

/// Latent flow matching toolkit for a toy singing voice synthesizer.
#[derive(Parser)]
#[command(name = "latentflow", version)]
struct Cli {
    /// TOML run configuration; missing keys take the desk defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic corpus and its manifest.
    SynthData,
    /// MAS durations of manifest utterances under a checkpoint.
    Align(AlignArgs),
    /// Joint adversarial training, then the flow-only stage.
    Train(TrainArgs),
    /// Flow-matching training alone: the Gaussian toy or the field of a checkpoint.
    TrainCfm(TrainCfmArgs),
    /// Refine prior samples through the learned ODE and save the latents.
    Refine(RefineArgs),
    /// Synthesize waveforms from scores.
    Infer(InferArgs),
    /// Objective metrics of generated audio against the references.
    Eval(EvalArgs),
    /// SVG plots and a text summary.
    Report(ReportArgs),
    /// Finite-difference gradient checks of every network.
    Gradcheck(GradcheckArgs),
    /// Closed-form, ODE and alignment checks.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Only this utterance.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    cfm_warmup_steps: Option<usize>,
    #[arg(long)]
    cfm_through_encoders: bool,
    /// Duration loss on raw frame counts instead of log durations.
    #[arg(long)]
    raw_duration_loss: bool,
}

#[derive(Args)]
struct TrainCfmArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Train on N(a, s²) → N(b, r²) pairs instead of a corpus.
    #[arg(long, value_name = "A,S,B,R")]
    toy_gaussian: Option<String>,
    /// Checkpoint whose encoders supply the pairs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output checkpoint; defaults to `<out-dir>/cfm.fmlt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Scores {
    /// One score CSV.
    #[arg(long, conflicts_with = "manifest")]
    score: Option<PathBuf>,
    /// Every held-out utterance of a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    max_step: Option<f64>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scores: Scores,
    #[command(flatten)]
    solver: SolverArgs,
    /// Frames per independently solved block; 0 solves each utterance whole.
    #[arg(long, default_value_t = 0)]
    segment_frames: usize,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    stats_out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scores: Scores,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    temperature: Option<f64>,
    /// Decode the prior sample directly.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of `<id>.wav` files.
    #[arg(long)]
    generated: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Metrics CSV as `label=path`; repeatable.
    #[arg(long, value_parser = labelled)]
    metrics: Vec<(String, PathBuf)>,
    /// Needed for contour and mel plots.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Generated audio directory as `label=dir`; repeatable.
    #[arg(long, value_parser = labelled)]
    compare: Vec<(String, PathBuf)>,
    /// Utterance to plot; defaults to the first held-out one.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 16)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct OracleArgs {
    /// Random alignment instances after the exhaustive sweep.
    #[arg(long, default_value_t = 1000)]
    mas_random: usize,
}

fn labelled(s: &str) -> Result<(String, PathBuf), String> {
    let (l, p) = s.split_once('=').ok_or_else(|| format!("expected label=path, got `{s}`"))?;
    Ok((l.to_string(), PathBuf::from(p)))
}

/// A check that ran but did not meet its tolerance.
#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
        Ok(Self {
            cfg,
            out: cli.out_dir.clone(),
        })
    }

    fn load_params(&self, path: &Path) -> Result<Params> {
        let ck = Checkpoint::load(path, Some(self.cfg.fingerprint()?))?;
        Ok(Params::from_checkpoint(&ck)?)
    }

    fn save(&self, params: &Params, path: &Path) -> Result<()> {
        params.to_checkpoint(self.cfg.fingerprint()?).save(path)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn apply_solver(&mut self, s: &SolverArgs) -> Result<()> {
        let sc = &mut self.cfg.solver;
        if let Some(v) = s.atol {
            sc.atol = v;
        }
        if let Some(v) = s.rtol {
            sc.rtol = v;
        }
        if let Some(v) = s.max_step {
            sc.max_step = v;
        }
        sc.validate()?;
        Ok(())
    }

    /// `(id, score)` pairs from a score file or a manifest's held-out split.
    fn scores(&self, s: &Scores) -> Result<Vec<(String, ScoreCondition)>> {
        match (&s.score, &s.manifest) {
            (Some(p), _) => {
                let id = p
                    .file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.split('.').next().unwrap_or(n).to_string())
                    .unwrap_or_else(|| "score".into());
                Ok(vec![(id, read_score(p)?)])
            }
            (None, Some(m)) => {
                let m = Manifest::load(m)?;
                m.entries
                    .iter()
                    .filter(|e| e.split == Split::Test)
                    .map(|e| Ok((e.id.clone(), read_score(&m.path(&e.score))?)))
                    .collect()
            }
            (None, None) => bail!("give --score or --manifest"),
        }
    }
}

fn load_data(manifest: &Path, cfg: &RunConfig) -> Result<(Manifest, Dataset)> {
    let m = Manifest::load(manifest)?;
    let d = Dataset::load(&m, cfg)?;
    Ok((m, d))
}

fn synth(ctx: &Ctx) -> Result<()> {
    let m = synth_data(&ctx.cfg, &ctx.out)?;
    ctx.cfg.save(&ctx.out.join("config.toml"))?;
    println!(
        "{} training and {} held-out utterances, manifest {}",
        m.ids(Split::Train).len(),
        m.ids(Split::Test).len(),
        ctx.out.join("manifest.csv").display()
    );
    Ok(())
}

fn align(ctx: &Ctx, a: &AlignArgs) -> Result<()> {
    let (_, data) = load_data(&a.manifest, &ctx.cfg)?;
    let model = Model::new(&ctx.cfg)?;
    let params = ctx.load_params(&a.checkpoint)?;
    let dir = ctx.out.join("align");
    fs::create_dir_all(&dir)?;
    let utts: Vec<_> = data
        .train
        .iter()
        .chain(&data.test)
        .filter(|u| a.id.as_ref().is_none_or(|id| &u.id == id))
        .collect();
    if utts.is_empty() {
        bail!("no utterance matches");
    }
    let mut w = csv::Writer::from_path(ctx.out.join("align_error.csv"))?;
    w.write_record(["utterance", "tokens", "mean_abs_frame_error", "exact_tokens"])?;
    let mut total = (0.0, 0usize);
    for u in utts {
        let d = model.align(&params, u)?;
        let mut dw = csv::Writer::from_path(dir.join(format!("{}.csv", u.id)))?;
        dw.write_record(["token_index", "note_id", "frames"])?;
        for (i, f) in d.iter().enumerate() {
            dw.write_record([i.to_string(), u.cond.note_ids[i].to_string(), f.to_string()])?;
        }
        dw.flush()?;
        let err: f64 = d.iter().zip(&u.durations).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / d.len() as f64;
        let exact = d.iter().zip(&u.durations).filter(|(a, b)| a == b).count();
        w.write_record([u.id.clone(), d.len().to_string(), format!("{err:.4}"), exact.to_string()])?;
        total.0 += err;
        total.1 += 1;
    }
    w.flush()?;
    println!(
        "aligned {} utterances into {}; mean absolute duration error {:.3} frames per token",
        total.1,
        dir.display(),
        total.0 / total.1 as f64
    );
    Ok(())
}

fn train(mut ctx: Ctx, a: &TrainArgs) -> Result<()> {
    let tc = &mut ctx.cfg.train;
    if let Some(v) = a.steps {
        tc.steps = v;
    }
    if let Some(v) = a.batch {
        tc.batch = v;
    }
    if let Some(v) = a.flow_steps {
        tc.flow_steps = v;
    }
    if let Some(v) = a.checkpoint_every {
        tc.checkpoint_every = v;
    }
    if let Some(v) = a.cfm_warmup_steps {
        tc.cfm_warmup_steps = v;
    }
    tc.cfm_through_encoders |= a.cfm_through_encoders;
    if a.raw_duration_loss {
        tc.duration_domain = DurationDomain::Raw;
    }
    ctx.cfg.validate()?;
    let (_, data) = load_data(&a.manifest, &ctx.cfg)?;
    let model = Model::new(&ctx.cfg)?;
    let mut params = model.init(ctx.cfg.seed)?;
    let dir = ctx.out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    ctx.cfg.save(&ctx.out.join("config.toml"))?;
    let clock = Instant::now();
    let mut log = model.train(&mut params, &data.train, |step, p| {
        ctx.save(p, &dir.join(format!("step{step:06}.fmlt")))
            .map_err(|e| latentflow::Error::Invalid(e.to_string()))
    })?;
    log::info!("joint stage: {:.1} s", clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    let flow = model.train_flow(&mut params, &data.train)?;
    log::info!("flow stage: {:.1} s", clock.elapsed().as_secs_f64());
    let steps = ctx.cfg.train.steps;
    log.extend(flow.iter().enumerate().map(|(k, &v)| LogRow {
        step: steps + k + 1,
        term: "flow_cfm".into(),
        value: v,
    }));
    write_log(&ctx.out.join("train_log.csv"), &log)?;
    ctx.save(&params, &ctx.out.join("final.fmlt"))?;
    let last = |t: &str| log.iter().rev().find(|r| r.term == t).map(|r| r.value);
    println!(
        "trained {steps} joint + {} flow steps; last total {:?}, last flow cfm {:?}",
        flow.len(),
        last("total"),
        last("flow_cfm")
    );
    Ok(())
}

fn parse_toy(s: &str) -> Result<GaussianTransportSpec> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--toy-gaussian `{s}`"))?;
    let [a, sd, b, r] = v[..] else {
        bail!("--toy-gaussian needs four values a,s,b,r");
    };
    Ok(GaussianTransportSpec::new(a, sd, b, r)?)
}

fn train_cfm(mut ctx: Ctx, a: &TrainCfmArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| ctx.out.join("cfm.fmlt"));
    if let Some(toy) = &a.toy_gaussian {
        let mut exp = GaussianExperiment {
            spec: parse_toy(toy)?,
            seed: ctx.cfg.seed,
            ..GaussianExperiment::default()
        };
        if let Some(v) = a.steps {
            exp.steps = v;
        }
        if let Some(v) = a.batch {
            exp.batch = v;
        }
        let clock = Instant::now();
        let (r, _, store) = gaussian_transport(&exp)?;
        Checkpoint::from_stores(ctx.cfg.fingerprint()?, &[&store]).save(&out)?;
        let f = |x: &[f64]| x.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        println!("steps {}  final loss {:.4}  loss floor {:.4}", exp.steps, r.final_loss, r.loss_floor);
        println!("grid MSE {:.4} of field variance {:.4}", r.grid_mse, r.grid_variance);
        println!("terminal mean [{}]", f(&r.terminal_mean));
        println!("terminal std  [{}]", f(&r.terminal_std));
        println!("W1 transported {:.4}, prior {:.4}", r.w1_transported, r.w1_prior);
        println!("{:.1} s, field saved to {}", clock.elapsed().as_secs_f64(), out.display());
        return Ok(());
    }
    let (Some(ck), Some(manifest)) = (&a.checkpoint, &a.manifest) else {
        bail!("give --toy-gaussian, or --checkpoint and --manifest");
    };
    if let Some(v) = a.steps {
        ctx.cfg.train.flow_steps = v;
    }
    if let Some(v) = a.batch {
        ctx.cfg.train.flow_batch = v;
    }
    let (_, data) = load_data(manifest, &ctx.cfg)?;
    let model = Model::new(&ctx.cfg)?;
    let mut params = ctx.load_params(ck)?;
    let curve = model.train_flow(&mut params, &data.train)?;
    ctx.save(&params, &out)?;
    let tail = &curve[curve.len().saturating_sub(50)..];
    println!(
        "{} flow steps, mean loss of the last {}: {:.4}",
        curve.len(),
        tail.len(),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    );
    Ok(())
}

fn write_stats(path: &Path, rows: &[(String, Option<SolveStats>, Vec<(String, f64)>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut stages: Vec<&str> = Vec::new();
    for (_, _, t) in rows {
        for (s, _) in t {
            if !stages.contains(&s.as_str()) {
                stages.push(s);
            }
        }
    }
    let mut head = vec!["utterance", "accepted", "rejected", "rhs_evals", "final_error"];
    let names: Vec<String> = stages.iter().map(|s| format!("{s}_seconds")).collect();
    head.extend(names.iter().map(String::as_str));
    w.write_record(&head)?;
    for (id, st, t) in rows {
        let mut rec = vec![id.clone()];
        match st {
            Some(s) => rec.extend([
                s.accepted.to_string(),
                s.rejected.to_string(),
                s.rhs_evals.to_string(),
                format!("{:e}", s.final_error),
            ]),
            None => rec.extend(["".into(), "".into(), "".into(), "".into()]),
        }
        for s in &stages {
            rec.push(t.iter().find(|(n, _)| n == s).map(|(_, v)| format!("{v:.6}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn refine(mut ctx: Ctx, a: &RefineArgs) -> Result<()> {
    ctx.apply_solver(&a.solver)?;
    let model = Model::new(&ctx.cfg)?;
    let params = ctx.load_params(&a.checkpoint)?;
    let temperature = a.temperature.unwrap_or(ctx.cfg.train.temperature);
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let mut rows = Vec::new();
    for (i, (id, cond)) in ctx.scores(&a.scores)?.into_iter().enumerate() {
        let opts = InferOptions {
            temperature,
            refine: false,
            seed: ctx.cfg.seed.wrapping_add(i as u64),
        };
        let base = model.infer(&params, &cond, &opts)?;
        let prior = model.prior.encode(&params.gen, &cond, None)?;
        let clock = Instant::now();
        let (z, st) = model.refine(&params, &base.z_prior, &prior.gaussian.mean, a.segment_frames)?;
        let secs = clock.elapsed().as_secs_f64();
        log::info!("{id}: {} accepted, {} rejected steps", st.accepted, st.rejected);
        tensors.push((format!("z_prior/{id}"), base.z_prior));
        tensors.push((format!("z_refined/{id}"), z));
        rows.push((id, Some(st), vec![("refine".to_string(), secs)]));
    }
    let path = ctx.out.join("latents.fmlt");
    Checkpoint {
        fingerprint: ctx.cfg.fingerprint()?,
        tensors,
    }
    .save(&path)?;
    let stats = a.stats_out.clone().unwrap_or_else(|| ctx.out.join("solve_stats.csv"));
    write_stats(&stats, &rows)?;
    println!("refined {} utterances: {}, stats {}", rows.len(), path.display(), stats.display());
    Ok(())
}

fn infer(mut ctx: Ctx, a: &InferArgs) -> Result<()> {
    ctx.apply_solver(&a.solver)?;
    let model = Model::new(&ctx.cfg)?;
    let params = ctx.load_params(&a.checkpoint)?;
    let temperature = a.temperature.unwrap_or(ctx.cfg.train.temperature);
    let mut rows = Vec::new();
    for (i, (id, cond)) in ctx.scores(&a.scores)?.into_iter().enumerate() {
        let opts = InferOptions {
            temperature,
            refine: !a.no_refine,
            seed: ctx.cfg.seed.wrapping_add(i as u64),
        };
        let r = model.infer(&params, &cond, &opts)?;
        write_wav(&ctx.out.join(format!("{id}.wav")), &r.wave)?;
        rows.push((id, r.solve, r.timings));
    }
    write_stats(&ctx.out.join("diagnostics.csv"), &rows)?;
    println!(
        "wrote {} waveforms to {} (temperature {temperature}, {})",
        rows.len(),
        ctx.out.display(),
        if a.no_refine { "unrefined" } else { "refined" }
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let rep = Evaluator::new(&ctx.cfg)?.directory(&m, &a.generated)?;
    let path = ctx.out.join("metrics.csv");
    rep.write_csv(&path)?;
    fs::write(ctx.out.join("summary.txt"), format!("{}\n", rep.summary()))?;
    println!("{}", rep.summary());
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let log = match &a.log {
        Some(p) => read_log(p)?,
        None => Vec::new(),
    };
    fs::write(ctx.out.join("loss_curves.svg"), loss_curves_svg(&log))?;
    let metrics = a
        .metrics
        .iter()
        .map(|(l, p)| Ok((l.as_str(), EvalReport::read_csv(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &EvalReport)> = metrics.iter().map(|(l, r)| (*l, r)).collect();
    let summary = text_summary(&log, &refs);
    fs::write(ctx.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    let Some(mp) = &a.manifest else {
        return Ok(());
    };
    let m = Manifest::load(mp)?;
    let e = match &a.id {
        Some(id) => m.entries.iter().find(|e| &e.id == id),
        None => m.entries.iter().find(|e| e.split == Split::Test),
    }
    .context("no utterance to plot")?;
    let (f0, voiced) = read_f0(&m.path(&e.f0))?;
    let ref_mel = read_mel(&m.path(&e.mel))?;
    fs::write(ctx.out.join("mel_reference.svg"), mel_heatmap_svg(&ref_mel, &format!("{} reference", e.id))?)?;
    let mel = MelTransform::new(&ctx.cfg.mel)?;
    let f0cfg = F0Config::with_rate(ctx.cfg.mel.sample_rate, ctx.cfg.mel.hop);
    let mut tracks = Vec::new();
    for (label, dir) in &a.compare {
        let w = read_wav(&dir.join(format!("{}.wav", e.id)))?;
        let g = mel.compute_aligned(&w.samples)?;
        fs::write(
            ctx.out.join(format!("mel_{label}.svg")),
            mel_heatmap_svg(&g.values, &format!("{} {label}", e.id))?,
        )?;
        tracks.push((label.as_str(), f0_extract(&w.samples, &f0cfg)?));
    }
    let mut contours = vec![Contour {
        label: "reference",
        f0: &f0,
        voiced: &voiced,
    }];
    contours.extend(tracks.iter().map(|(l, t)| Contour {
        label: l,
        f0: &t.f0,
        voiced: &t.voiced,
    }));
    fs::write(ctx.out.join("f0_overlay.svg"), f0_overlay_svg(&contours))?;
    Ok(())
}

fn gradcheck(ctx: &Ctx, a: &GradcheckArgs) -> Result<()> {
    let cases = gradient_suite(&ctx.cfg, ctx.cfg.seed, a.coords)?;
    let mut bad = Vec::new();
    for c in &cases {
        let ok = c.report.max_rel_error <= a.tolerance;
        println!(
            "{} {:<28} {:.3e}  ({} coordinates, {} one-sided)",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.report.coords,
            c.report.one_sided
        );
        if !ok {
            bad.push(c.name.clone());
        }
    }
    if !bad.is_empty() {
        return Err(Failed(format!("gradient check above {:e}: {}", a.tolerance, bad.join(", "))).into());
    }
    Ok(())
}

fn oracle(ctx: &Ctx, a: &OracleArgs) -> Result<()> {
    let mut bad = Vec::new();
    let mut line = |ok: bool, what: String| {
        println!("{} {what}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            bad.push(what);
        }
    };
    for c in closed_form_checks()? {
        line(c.passed(), format!("{} = {:.9} (expected {:.9})", c.name, c.value, c.expected));
    }
    let (z, st) = ode_decay(&ctx.cfg.solver)?;
    line(
        (z - (-1f64).exp()).abs() <= 1e-6 && st.accepted >= 10,
        format!("dz/dt = -z: z(1) = {z:.9} after {} accepted steps", st.accepted),
    );
    let (same, _) = zero_field_solve(&ctx.cfg, ctx.cfg.seed)?;
    line(same, "zero field leaves its input unchanged".into());
    let ex = mas_exhaustive();
    line(
        ex.mismatches.is_empty(),
        format!("MAS exhaustive: {} instances, {} mismatches", ex.cases, ex.mismatches.len()),
    );
    let rnd = mas_random(ctx.cfg.seed, a.mas_random)?;
    line(
        rnd.mismatches.is_empty(),
        format!("MAS random: {} instances, {} mismatches", rnd.cases, rnd.mismatches.len()),
    );
    if !bad.is_empty() {
        return Err(Failed(format!("{} oracle checks failed", bad.len())).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.cmd {
        Cmd::SynthData => synth(&ctx),
        Cmd::Align(a) => align(&ctx, a),
        Cmd::Train(a) => train(ctx, a),
        Cmd::TrainCfm(a) => train_cfm(ctx, a),
        Cmd::Refine(a) => refine(ctx, a),
        Cmd::Infer(a) => infer(ctx, a),
        Cmd::Eval(a) => eval(&ctx, a),
        Cmd::Report(a) => report(&ctx, a),
        Cmd::Gradcheck(a) => gradcheck(&ctx, a),
        Cmd::Oracle(a) => oracle(&ctx, a),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<latentflow::Error>().is_some_and(|e| e.is_numerical()) || c.is::<Failed>()
    });
    if numerical {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATENTFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
