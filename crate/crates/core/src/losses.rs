//! Adversarial, reconstruction and auxiliary objectives and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::signal::MelTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fm: f64,
    pub mel: f64,
    pub dsp: f64,
    pub cfm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fm: 2.0,
            mel: 45.0,
            dsp: 45.0,
            cfm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("fm", self.fm),
            ("mel", self.mel),
            ("dsp", self.dsp),
            ("cfm", self.cfm),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and ≥ 0"
                )));
            }
        }
        Ok(())
    }
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter();
    let first = *it.next().ok_or_else(|| Error::invalid("no terms to sum"))?;
    it.try_fold(first, |acc, &t| tape.add(acc, t))
}

fn check_same(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// `Σ_k mean((s_k − target)²)`
fn lsgan(tape: &mut Tape, scores: &[Var], target: f64) -> Result<Var> {
    let terms = scores
        .iter()
        .map(|&s| {
            let d = tape.add_scalar(s, -target)?;
            let d = tape.square(d)?;
            tape.mean(d)
        })
        .collect::<Result<Vec<_>>>()?;
    sum_all(tape, &terms)
}

/// Generator side of the least-squares objective.
pub fn adv_gen(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return Err(Error::invalid(
            "adversarial loss over an empty discriminator suite",
        ));
    }
    lsgan(tape, fake, 1.0)
}

/// Discriminator side: real scores pulled to 1, fake scores to 0.
pub fn adv_disc(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::invalid(format!(
            "{} real vs {} fake score maps",
            real.len(),
            fake.len()
        )));
    }
    let r = lsgan(tape, real, 1.0)?;
    let f = lsgan(tape, fake, 0.0)?;
    tape.add(r, f)
}

/// `Σ_k Σ_ℓ mean|real − fake|` over intermediate activations.
pub fn feature_matching(tape: &mut Tape, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::invalid(format!(
            "{} vs {} discriminators",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::new();
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(Error::invalid(format!(
                "discriminator {k}: {} vs {} feature maps",
                r.len(),
                f.len()
            )));
        }
        for (&a, &b) in r.iter().zip(f) {
            check_same(tape, "feature_matching", a, b)?;
            let d = tape.sub(a, b)?;
            let d = tape.abs(d)?;
            terms.push(tape.mean(d)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    sum_all(tape, &terms)
}

fn mean_abs(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Mean absolute difference of frame-aligned log-mel spectrograms of `[1 × L]` signals.
pub fn mel_recon(tape: &mut Tape, mel: &MelTransform, y: Var, y_hat: Var) -> Result<Var> {
    check_same(tape, "mel_recon", y, y_hat)?;
    let a = mel.apply_aligned(tape, y)?;
    let b = mel.apply_aligned(tape, y_hat)?;
    mean_abs(tape, a, b)
}

/// `λ · mel_recon(y_dsp, y)`
pub fn dsp_loss(
    tape: &mut Tape,
    mel: &MelTransform,
    y_dsp: Var,
    y: Var,
    weight: f64,
) -> Result<Var> {
    let m = mel_recon(tape, mel, y_dsp, y)?;
    tape.scale(m, weight)
}

/// Log-f0 mean squared error plus mel mean absolute error.
pub fn aux_loss(
    tape: &mut Tape,
    log_f0: Var,
    mel: Var,
    pred_log_f0: Var,
    pred_mel: Var,
) -> Result<Var> {
    check_same(tape, "aux_loss", log_f0, pred_log_f0)?;
    check_same(tape, "aux_loss", mel, pred_mel)?;
    let d = tape.sub(pred_log_f0, log_f0)?;
    let d = tape.square(d)?;
    let f = tape.mean(d)?;
    let m = mean_abs(tape, mel, pred_mel)?;
    tape.add(f, m)
}

/// `mean((ln d − d̂)²)` for predicted log-durations `[1 × N]`.
pub fn duration_loss_var(tape: &mut Tape, log_pred: Var, target: &[usize]) -> Result<Var> {
    if tape.shape(log_pred) != [1, target.len()] || target.contains(&0) {
        return Err(Error::shape(
            "duration_loss",
            format!(
                "{:?} predictions for {} targets",
                tape.shape(log_pred),
                target.len()
            ),
        ));
    }
    let t = tape.constant(Tensor::row(
        target.iter().map(|&d| (d as f64).ln()).collect(),
    )?);
    let d = tape.sub(log_pred, t)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// The terms of the generator objective. `dsp` already carries its weight.
#[derive(Clone, Debug, Default)]
pub struct GenParts {
    pub adv: Option<Var>,
    pub fm: Option<Var>,
    pub mel: Option<Var>,
    pub kl: Option<Var>,
    pub dsp: Option<Var>,
    pub dur: Option<Var>,
    pub aux: Option<Var>,
    pub cfm: Option<Var>,
    /// Additional unit-weight terms.
    pub extra: Vec<(String, Var)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Itemised loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn push(&mut self, name: impl Into<String>, value: f64, weight: f64) {
        self.terms.push(LossTerm {
            name: name.into(),
            value,
            weight,
        });
    }

    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|t| t.value.is_finite())
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "total={}", self.total)?;
        for t in &self.terms {
            write!(f, " {}={}", t.name, t.value)?;
        }
        Ok(())
    }
}

/// Weighted generator objective and its itemised report.
pub fn generator_composite(
    tape: &mut Tape,
    parts: &GenParts,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let named = [
        ("adv", parts.adv, 1.0),
        ("fm", parts.fm, w.fm),
        ("mel", parts.mel, w.mel),
        ("kl", parts.kl, 1.0),
        ("dsp", parts.dsp, 1.0),
        ("dur", parts.dur, 1.0),
        ("aux", parts.aux, 1.0),
        ("cfm", parts.cfm, w.cfm),
    ];
    let mut report = LossReport::default();
    let mut weighted = Vec::new();
    for (name, v, weight) in named {
        let v = v.ok_or_else(|| {
            Error::invalid(format!("generator objective is missing the {name} term"))
        })?;
        report.push(name, tape.item(v)?, weight);
        weighted.push(tape.scale(v, weight)?);
    }
    for (name, v) in &parts.extra {
        report.push(name.clone(), tape.item(*v)?, 1.0);
        weighted.push(*v);
    }
    let total = sum_all(tape, &weighted)?;
    report.total = tape.item(total)?;
    Ok((total, report))
}
