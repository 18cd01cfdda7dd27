//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every op pushes a node holding its output value; node ids are assigned in
//! creation order so the record is topologically sorted by construction and
//! `backward` is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::kernels::{self, ConvGeom, ConvTGeom, Stft};
use super::tensor::{dims2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Options for [`Tape::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dOpts {
    pub dilation: usize,
    pub stride: usize,
    pub groups: usize,
    /// Length of independent sequences packed along the time axis (0 = one).
    pub segment: usize,
}

impl Default for Conv1dOpts {
    fn default() -> Self {
        Self {
            dilation: 1,
            stride: 1,
            groups: 1,
            segment: 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    ConvT1d {
        x: Var,
        w: Var,
        geom: ConvTGeom,
    },
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherCols {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    StftMag {
        x: Var,
        stft: Arc<Stft>,
        spec: Vec<Complex64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    check_finite: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::inference()
    }
}

impl Tape {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn inference() -> Self {
        Self::new(Mode::Inference, 0)
    }

    pub fn training(seed: u64) -> Self {
        Self::new(Mode::Train, seed)
    }

    /// Turn NaN/Inf detection on every op on or off.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        dims2(self.shape(v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{op:?}")
                    .split(['(', ' ', '{'])
                    .next()
                    .unwrap_or("op")
                    .to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant copy of `v`'s current value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, mk(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `x[C×T] + bias[C]` broadcast over columns.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, t) = self.dims2(x)?;
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(t).enumerate() {
            row.iter_mut().for_each(|v| *v += b[i]);
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::matrix(c, t, out)?, Op::AddBias { x, bias }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}×{k}]·[{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// 1-D convolution of `x[Cin×L]` with `w[Cout×Cin/groups×K]`, with
    /// symmetric zero padding of `(K−1)·dilation/2` per side.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, opts: Conv1dOpts) -> Result<Var> {
        let (cin, len) = self.dims2(x)?;
        let ws = self.shape(w).to_vec();
        let [cout, cig, kernel] = ws[..] else {
            return Err(Error::shape(
                "conv1d",
                format!("weight must be rank 3, got {ws:?}"),
            ));
        };
        let Conv1dOpts {
            dilation,
            stride,
            groups,
            segment,
        } = opts;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig != cin / groups {
            return Err(Error::shape(
                "conv1d",
                format!("input {cin} channels, weight {ws:?}, groups {groups}"),
            ));
        }
        if (kernel - 1) * dilation % 2 != 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {kernel} × dilation {dilation} has no symmetric padding"),
            ));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                "stride and dilation must be positive",
            ));
        }
        if segment != 0 && (len % segment != 0 || stride != 1) {
            return Err(Error::shape(
                "conv1d",
                format!("segment {segment} with length {len}, stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            cin,
            cout,
            kernel,
            dilation,
            stride,
            groups,
            pad: (kernel - 1) * dilation / 2,
            len,
            segment,
        };
        let lout = geom.out_len();
        if lout == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input length {len} too short"),
            ));
        }
        let mut out = vec![0.0; cout * lout];
        kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &geom, &mut out);
        let rg = self.rg(x) || self.rg(w);
        let y = self.push(
            Tensor::matrix(cout, lout, out)?,
            Op::Conv1d { x, w, geom },
            rg,
        )?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Transposed 1-D convolution of `x[Cin×L]` with `w[Cin×Cout×K]`;
    /// output length `(L−1)·stride − 2·pad + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, len) = self.dims2(x)?;
        let ws = self.shape(w).to_vec();
        let [wcin, cout, kernel] = ws[..] else {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("weight must be rank 3, got {ws:?}"),
            ));
        };
        if wcin != cin || stride == 0 {
            return Err(Error::shape(
                "conv_transpose1d",
                format!("input {cin} channels, weight {ws:?}"),
            ));
        }
        let geom = ConvTGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
            len,
        };
        let lout = geom.out_len();
        if lout == 0 {
            return Err(Error::shape("conv_transpose1d", "empty output"));
        }
        let mut out = vec![0.0; cout * lout];
        kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            &geom,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w);
        let y = self.push(
            Tensor::matrix(cout, lout, out)?,
            Op::ConvT1d { x, w, geom },
            rg,
        )?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Logistic sigmoid, built from `tanh`.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let h = self.scale(a, 0.5)?;
        let t = self.tanh(h)?;
        let s = self.add_scalar(t, 1.0)?;
        self.scale(s, 0.5)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Concatenate along the channel (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let t = self.dims2(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != t {
                return Err(Error::shape("concat_rows", format!("columns {c} vs {t}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::matrix(rows, t, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Concatenate along the time (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&refs)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let rg = self.rg(x);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    /// `out[:, j] = x[:, index[j]]`, or zero where `index[j]` is `None`.
    pub fn gather_cols(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if index.is_empty() {
            return Err(Error::shape("gather_cols", "empty index"));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= c) {
            return Err(Error::shape(
                "gather_cols",
                format!("index {bad} out of {c} columns"),
            ));
        }
        let n = index.len();
        let src = self.value(x).data();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            for (j, idx) in index.iter().enumerate() {
                if let Some(k) = idx {
                    out[i * n + j] = src[i * c + k];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, n, out)?, Op::GatherCols { x, index }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.gather_cols(x, (start..end).map(Some).collect())
    }

    pub fn pad_cols(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let c = self.dims2(x)?.1;
        let index = std::iter::repeat_n(None, left)
            .chain((0..c).map(Some))
            .chain(std::iter::repeat_n(None, right))
            .collect();
        self.gather_cols(x, index)
    }

    /// Inverted dropout: active only in training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} outside [0,1)"
            )));
        }
        if self.mode == Mode::Inference || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let value = self.value(x).zip_map(
            &Tensor::new(self.value(x).shape().to_vec(), mask.clone())?,
            |a, m| a * m,
        )?;
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// Magnitude STFT of a `[1×L]` signal, laid out `[bins × frames]`.
    pub fn stft_magnitude(&mut self, x: Var, stft: Arc<Stft>) -> Result<Var> {
        let (r, len) = self.dims2(x)?;
        if r != 1 {
            return Err(Error::shape(
                "stft_magnitude",
                format!("expected one row, got {r}"),
            ));
        }
        let frames = stft.frames(len);
        if frames == 0 {
            return Err(Error::shape(
                "stft_magnitude",
                format!(
                    "signal of {len} samples shorter than window {}",
                    stft.window.len()
                ),
            ));
        }
        let spec = stft.spectrum(self.value(x).data());
        let mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
        let rg = self.rg(x);
        let bins = stft.bins();
        self.push(
            Tensor::matrix(bins, frames, mag)?,
            Op::StftMag { x, stft, spec },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += k * g)
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::AddBias { x, bias } => {
                acc(*x, &mut |s| add_into(s, g));
                let c = self.nodes[bias.0].value.len();
                let t = g.len() / c;
                acc(*bias, &mut |s| {
                    for (i, row) in g.chunks(t).enumerate() {
                        s[i] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.nodes[a.0].value.shape()).expect("matmul a");
                let n = g.len() / m;
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| kernels::matmul_a_bt_acc(g, bv, s, m, k, n));
                acc(*b, &mut |s| kernels::matmul_at_b_acc(av, g, s, m, k, n));
            }
            Op::Conv1d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| {
                    kernels::conv1d_backward(xv, wv, g, geom, Some(s), None)
                });
                acc(*w, &mut |s| {
                    kernels::conv1d_backward(xv, wv, g, geom, None, Some(s))
                });
            }
            Op::ConvT1d { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| {
                    kernels::conv_transpose1d_backward(xv, wv, g, geom, Some(s), None)
                });
                acc(*w, &mut |s| {
                    kernels::conv_transpose1d_backward(xv, wv, g, geom, None, Some(s))
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * if av[i] > 0.0 { 1.0 } else { *slope };
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / av[i];
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * g[i] * av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        let sign = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, w) = dims2(self.nodes[p.0].value.shape()).expect("concat part");
                    acc(p, &mut |s| {
                        for i in 0..r {
                            add_into(
                                &mut s[i * w..(i + 1) * w],
                                &g[i * total + off..i * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |s| {
                    add_into(&mut s[start * c..start * c + g.len()], g)
                });
            }
            Op::GatherCols { x, index } => {
                let c = self.nodes[x.0].value.cols();
                let n = index.len();
                let r = g.len() / n;
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for (j, idx) in index.iter().enumerate() {
                            if let Some(k) = idx {
                                s[i * c + k] += g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
            Op::StftMag { x, stft, spec } => acc(*x, &mut |s| stft.magnitude_backward(spec, g, s)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Name → node map for parameters bound onto a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub(crate) fn insert(&mut self, name: String, v: Var, trainable: bool) {
        if trainable {
            self.trainable.push((name.clone(), v));
        }
        self.vars.insert(name, v);
    }

    /// Gradient for every trainable bound parameter (zero when unreachable).
    pub fn collect(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|(name, v)| (name.clone(), grads.get(*v)))
            .collect()
    }
}
