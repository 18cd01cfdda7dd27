//! Velocity estimator built from dilated depthwise-separable conv blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorFieldConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub time_embed_dim: usize,
    /// Channels of the prior-mean projection fed alongside `z_t`; 0 disables it.
    pub cond_dim: usize,
}

impl Default for VectorFieldConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            blocks: 4,
            kernel: 3,
            dilations: vec![3, 5, 7, 9],
            dropout: 0.1,
            time_embed_dim: 16,
            cond_dim: 4,
        }
    }
}

impl VectorFieldConfig {
    pub fn full_scale() -> Self {
        Self {
            hidden: 192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dilations.len() != self.blocks {
            return Err(Error::Config(format!(
                "vector field has {} blocks but {} dilations",
                self.blocks,
                self.dilations.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "vector field dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.hidden == 0 || self.kernel % 2 == 0 || self.dilations.contains(&0) {
            return Err(Error::Config(
                "vector field needs hidden > 0, odd kernel, positive dilations".into(),
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(
                "time embedding dimension must be even and positive".into(),
            ));
        }
        Ok(())
    }

    /// Frames on each side that can influence one output frame.
    pub fn receptive_radius(&self) -> usize {
        self.dilations
            .iter()
            .map(|d| d * (self.kernel - 1) / 2)
            .sum()
    }
}

/// `[sin(t·ω_k), cos(t·ω_k)]` with `ω_k` spaced geometrically over [1, 1000].
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "time embedding dimension {dim} must be even"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                1000f64.powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct VectorField {
    cfg: VectorFieldConfig,
    channels: usize,
    cond_proj: Option<Conv>,
    in_proj: Conv,
    time_proj: Vec<Conv>,
    depthwise: Vec<Conv>,
    pointwise: Vec<Conv>,
    out: Conv,
}

impl VectorField {
    pub fn new(cfg: &VectorFieldConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let cond_proj = (cfg.cond_dim > 0).then(|| Conv::new("vf.cond", channels, cfg.cond_dim, 1));
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            cond_proj,
            in_proj: Conv::new("vf.in", channels + cfg.cond_dim, h, 1),
            time_proj: (0..cfg.blocks)
                .map(|i| Conv::new(format!("vf.block{i}.time"), cfg.time_embed_dim, h, 1))
                .collect(),
            depthwise: cfg
                .dilations
                .iter()
                .enumerate()
                .map(|(i, &d)| {
                    Conv::new(format!("vf.block{i}.dw"), h, h, cfg.kernel)
                        .dilation(d)
                        .groups(h)
                })
                .collect(),
            pointwise: (0..cfg.blocks)
                .map(|i| Conv::new(format!("vf.block{i}.pw"), h, h, 1))
                .collect(),
            out: Conv::new("vf.out", h, channels, 1),
        })
    }

    pub fn config(&self) -> &VectorFieldConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Fresh parameters; the output projection starts at zero so the induced
    /// flow is the identity.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        if let Some(c) = &self.cond_proj {
            c.init(&mut s, rng, 1.0)?;
        }
        self.in_proj.init(&mut s, rng, 1.0)?;
        for i in 0..self.cfg.blocks {
            self.time_proj[i].init(&mut s, rng, 1.0)?;
            self.depthwise[i].init(&mut s, rng, 1.0)?;
            self.pointwise[i].init(&mut s, rng, 1.0)?;
        }
        self.out.init_zero(&mut s)?;
        Ok(s)
    }

    /// `z[C × B·segment]` holds `B` sequences; `t[b]` is the time of sequence
    /// `b`. `cond` is the prior mean laid out like `z`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        t: &[f64],
        cond: Option<Var>,
        segment: usize,
    ) -> Result<Var> {
        let (c, len) = tape.value(z).dims2()?;
        if c != self.channels {
            return Err(Error::shape(
                "vector field",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        if segment == 0 || len % segment != 0 || len / segment != t.len() {
            return Err(Error::shape(
                "vector field",
                format!(
                    "{len} frames do not split into {} sequences of {segment}",
                    t.len()
                ),
            ));
        }
        let x = match (&self.cond_proj, cond) {
            (Some(proj), Some(cv)) => {
                if tape.shape(cv) != tape.shape(z) {
                    return Err(Error::shape(
                        "vector field",
                        format!(
                            "latent {:?} vs conditioning {:?}",
                            tape.shape(z),
                            tape.shape(cv)
                        ),
                    ));
                }
                let cp = proj.forward(tape, p, cv, segment)?;
                tape.concat_rows(&[z, cp])?
            }
            (Some(_), None) => {
                return Err(Error::invalid(
                    "vector field expects a conditioning sequence",
                ))
            }
            (None, _) => z,
        };
        let e = self.cfg.time_embed_dim;
        let b = t.len();
        let mut emb = vec![0.0; e * b];
        for (j, &tj) in t.iter().enumerate() {
            for (k, v) in time_embed(tj, e)?.into_iter().enumerate() {
                emb[k * b + j] = v;
            }
        }
        let emb = tape.constant(Tensor::matrix(e, b, emb)?);
        let spread: Vec<Option<usize>> = (0..len).map(|j| Some(j / segment)).collect();
        let mut h = self.in_proj.forward(tape, p, x, segment)?;
        for i in 0..self.cfg.blocks {
            let te = self.time_proj[i].forward(tape, p, emb, 0)?;
            let te = tape.gather_cols(te, spread.clone())?;
            let hin = tape.add(h, te)?;
            let y = self.depthwise[i].forward(tape, p, hin, segment)?;
            let y = self.pointwise[i].forward(tape, p, y, segment)?;
            let y = tape.leaky_relu(y, 0.1)?;
            let y = tape.dropout(y, self.cfg.dropout)?;
            h = tape.add(hin, y)?;
        }
        self.out.forward(tape, p, h, segment)
    }

    /// Inference-mode evaluation on plain tensors.
    pub fn eval(
        &self,
        store: &ParamStore,
        z: &Tensor,
        t: &[f64],
        cond: Option<&Tensor>,
        segment: usize,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = store.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let cv = cond.map(|c| tape.constant(c.clone()));
        let v = self.forward(&mut tape, &p, zv, t, cv, segment)?;
        Ok(tape.value(v).clone())
    }
}
