//! Small layer descriptors that own no weights: parameters live in a
//! [`ParamStore`] under `<name>.w` / `<name>.b`.

use rand::Rng;

use crate::autodiff::{Bound, Conv1dOpts, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// 1-D convolution with "same" padding, optionally dilated and grouped.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            dilation: 1,
            stride: 1,
            groups: 1,
        }
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    fn weight_shape(&self) -> [usize; 3] {
        [self.cout, self.cin / self.groups, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        self.cin / self.groups * self.kernel
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64) -> Result<()> {
        let std = gain / (self.fan_in() as f64).sqrt();
        store.normal(format!("{}.w", self.name), &self.weight_shape(), std, rng)?;
        store.zeros(format!("{}.b", self.name), &[self.cout])
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.zeros(format!("{}.w", self.name), &self.weight_shape())?;
        store.zeros(format!("{}.b", self.name), &[self.cout])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segment: usize) -> Result<Var> {
        // Pointwise layers never see padding, so segments are irrelevant.
        let segment = if self.kernel == 1 { 0 } else { segment };
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.conv1d(
            x,
            w,
            Some(b),
            Conv1dOpts {
                dilation: self.dilation,
                stride: self.stride,
                groups: self.groups,
                segment,
            },
        )
    }
}

/// Transposed 1-D convolution upsampling by `stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvT {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT {
    /// Output length is exactly `rate·len` when `kernel − rate` is even.
    pub fn upsample(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        rate: usize,
        kernel: usize,
    ) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: rate,
            pad: (kernel - rate) / 2,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng, gain: f64) -> Result<()> {
        let std = gain / ((self.cin * self.kernel / self.stride) as f64).sqrt();
        store.normal(
            format!("{}.w", self.name),
            &[self.cin, self.cout, self.kernel],
            std,
            rng,
        )?;
        store.zeros(format!("{}.b", self.name), &[self.cout])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        tape.conv_transpose1d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Overwrite every parameter under `prefix` with small Gaussian noise.
/// Used by gradient checks so zero-initialised heads still carry signal.
pub fn randomize(store: &mut ParamStore, prefix: &str, std: f64, rng: &mut impl Rng) -> Result<()> {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(str::to_string)
        .collect();
    for name in names {
        let t = store.get(&name)?;
        let data = (0..t.len())
            .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let fresh = Tensor::new(t.shape().to_vec(), data)?;
        store.set(&name, fresh)?;
    }
    Ok(())
}
