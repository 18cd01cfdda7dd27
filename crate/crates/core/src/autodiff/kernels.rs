//! Raw loops shared by the tape ops and the non-differentiable signal code.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub fn matmul_a_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// Geometry of a 1-D convolution over `[channels × len]` inputs.
///
/// When `segment > 0` the time axis is a concatenation of independent
/// sequences of that length and zero padding is applied inside each one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad: usize,
    pub len: usize,
    pub segment: usize,
}

impl ConvGeom {
    fn seg_len(&self) -> usize {
        if self.segment == 0 {
            self.len
        } else {
            self.segment
        }
    }

    fn seg_out(&self) -> usize {
        let l = self.seg_len() + 2 * self.pad;
        let span = self.dilation * (self.kernel - 1) + 1;
        if l < span {
            0
        } else {
            (l - span) / self.stride + 1
        }
    }

    pub fn out_len(&self) -> usize {
        self.seg_out() * (self.len / self.seg_len())
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Calls `f(o, i_abs, k, x_base, y_base, count)` for every contiguous run
    /// where output columns `y_base..y_base+count` (step 1) read input columns
    /// `x_base + stride·j`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let seg_in = self.seg_len();
        let seg_out = self.seg_out();
        let nseg = self.len / seg_in;
        let cig = self.cin_per_group();
        let cog = self.cout_per_group();
        for o in 0..self.cout {
            let g = o / cog;
            for il in 0..cig {
                let i = g * cig + il;
                for k in 0..self.kernel {
                    let off = (k * self.dilation) as isize - self.pad as isize;
                    // valid output j: 0 <= j*stride + off < seg_in
                    let s = self.stride as isize;
                    let j_lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
                    let j_hi_excl = {
                        let lim = seg_in as isize - off; // j*s < lim
                        if lim <= 0 {
                            0
                        } else {
                            ((lim - 1) / s + 1).min(seg_out as isize)
                        }
                    };
                    if j_hi_excl <= j_lo {
                        continue;
                    }
                    for sidx in 0..nseg {
                        let x_base = (sidx * seg_in) as isize + j_lo * s + off;
                        let y_base = sidx * seg_out + j_lo as usize;
                        f(
                            o,
                            i,
                            k,
                            x_base as usize,
                            y_base,
                            (j_hi_excl - j_lo) as usize,
                        );
                    }
                }
            }
        }
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let lout = g.out_len();
    let cig = g.cin_per_group();
    let s = g.stride;
    g.for_each_tap(|o, i, k, xb, yb, n| {
        let wv = w[(o * cig + i % cig) * g.kernel + k];
        if wv == 0.0 {
            return;
        }
        let xrow = &x[i * g.len..(i + 1) * g.len];
        let orow = &mut out[o * lout..(o + 1) * lout];
        if s == 1 {
            for (ov, &xv) in orow[yb..yb + n].iter_mut().zip(&xrow[xb..xb + n]) {
                *ov += wv * xv;
            }
        } else {
            for j in 0..n {
                orow[yb + j] += wv * xrow[xb + j * s];
            }
        }
    });
}

/// Dot product with four independent partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    geom: &ConvGeom,
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let lout = geom.out_len();
    let cig = geom.cin_per_group();
    let s = geom.stride;
    if let Some(gx) = gx {
        geom.for_each_tap(|o, i, k, xb, yb, n| {
            let wv = w[(o * cig + i % cig) * geom.kernel + k];
            let grow = &gout[o * lout..(o + 1) * lout];
            if wv == 0.0 {
                return;
            }
            let xrow = &mut gx[i * geom.len..(i + 1) * geom.len];
            if s == 1 {
                for (xv, &gv) in xrow[xb..xb + n].iter_mut().zip(&grow[yb..yb + n]) {
                    *xv += wv * gv;
                }
            } else {
                for j in 0..n {
                    xrow[xb + j * s] += wv * grow[yb + j];
                }
            }
        });
    }
    if let Some(gw) = gw {
        geom.for_each_tap(|o, i, k, xb, yb, n| {
            let grow = &gout[o * lout..(o + 1) * lout];
            let xrow = &x[i * geom.len..(i + 1) * geom.len];
            let acc = if s == 1 {
                dot(&grow[yb..yb + n], &xrow[xb..xb + n])
            } else {
                (0..n).map(|j| grow[yb + j] * xrow[xb + j * s]).sum()
            };
            gw[(o * cig + i % cig) * geom.kernel + k] += acc;
        });
    }
}

/// Transposed convolution: `x[cin × len]`, `w[cin × cout × kernel]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub len: usize,
}

impl ConvTGeom {
    pub fn out_len(&self) -> usize {
        ((self.len - 1) * self.stride + self.kernel).saturating_sub(2 * self.pad)
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let lout = self.out_len() as isize;
        for i in 0..self.cin {
            for o in 0..self.cout {
                for t in 0..self.len {
                    for k in 0..self.kernel {
                        let y = (t * self.stride + k) as isize - self.pad as isize;
                        if y >= 0 && y < lout {
                            f(i, o, t, k, y as usize);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_transpose1d_forward(x: &[f64], w: &[f64], g: &ConvTGeom, out: &mut [f64]) {
    let lout = g.out_len();
    g.for_each(|i, o, t, k, y| {
        out[o * lout + y] += x[i * g.len + t] * w[(i * g.cout + o) * g.kernel + k];
    });
}

pub fn conv_transpose1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvTGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let lout = g.out_len();
    g.for_each(|i, o, t, k, y| {
        let gy = gout[o * lout + y];
        let widx = (i * g.cout + o) * g.kernel + k;
        if let Some(gx) = gx.as_deref_mut() {
            gx[i * g.len + t] += gy * w[widx];
        }
        if let Some(gw) = gw.as_deref_mut() {
            gw[widx] += gy * x[i * g.len + t];
        }
    });
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed short-time Fourier analysis without centre padding.
pub struct Stft {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .field("window", &self.window.len())
            .finish()
    }
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize, win: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft_size,
            hop,
            window: hann(win),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        let win = self.window.len();
        if len < win {
            0
        } else {
            1 + (len - win) / self.hop
        }
    }

    /// Returns the one-sided spectrum laid out `[bin × frame]`.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex64> {
        let frames = self.frames(x.len());
        let bins = self.bins();
        let mut out = vec![Complex64::new(0.0, 0.0); bins * frames];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let start = f * self.hop;
            for (n, &wv) in self.window.iter().enumerate() {
                buf[n] = Complex64::new(x[start + n] * wv, 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[k * frames + f] = buf[k];
            }
        }
        out
    }

    pub fn magnitude(&self, x: &[f64]) -> Vec<f64> {
        self.spectrum(x).iter().map(|c| c.norm()).collect()
    }

    /// Adds `∂L/∂x` given `∂L/∂|X|` (laid out like [`Stft::spectrum`]).
    pub fn magnitude_backward(&self, spec: &[Complex64], gmag: &[f64], gx: &mut [f64]) {
        let bins = self.bins();
        let frames = spec.len() / bins;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_size];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let mut any = false;
            for k in 0..bins {
                let x = spec[k * frames + f];
                let m = x.norm();
                let g = gmag[k * frames + f];
                if m > 0.0 && g != 0.0 {
                    buf[k] = x * (g / m);
                    any = true;
                }
            }
            if !any {
                continue;
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for (n, &wv) in self.window.iter().enumerate() {
                gx[start + n] += wv * buf[n].re;
            }
        }
    }
}
