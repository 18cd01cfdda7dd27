//! Central finite-difference verification of tape gradients.

use super::params::ParamStore;
use super::tape::{Bound, Mode, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub mode: Mode,
    /// Seed for the tape RNG. Required in training mode, where dropout is live.
    pub seed: Option<u64>,
    /// Upper bound on coordinates probed per tensor (evenly strided).
    pub max_coords_per_tensor: usize,
    /// Central differences worse than this are retried one-sided, for
    /// stencils that straddle a kink (ReLU, clamp) next to the point.
    pub one_sided_above: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            mode: Mode::Inference,
            seed: None,
            max_coords_per_tensor: usize::MAX,
            one_sided_above: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coords: usize,
    /// Coordinates accepted on a one-sided difference.
    pub one_sided: usize,
}

impl GradCheck {
    fn tape(&self) -> Tape {
        Tape::new(self.mode, self.seed.unwrap_or(0))
    }

    /// Compare analytic gradients of `loss_fn` with central differences on the
    /// parameters named in `subset` (all trainable parameters when empty).
    pub fn run<F>(
        &self,
        store: &ParamStore,
        subset: &[&str],
        mut loss_fn: F,
    ) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape, &Bound) -> Result<Var>,
    {
        if self.mode == Mode::Train && self.seed.is_none() {
            return Err(Error::invalid(
                "finite-difference check in training mode needs a fixed seed",
            ));
        }
        let eval = |s: &ParamStore, f: &mut F| -> Result<f64> {
            let mut tape = self.tape();
            let b = s.bind_frozen(&mut tape);
            let l = f(&mut tape, &b)?;
            tape.item(l)
        };
        let base = eval(store, &mut loss_fn)?;
        if eval(store, &mut loss_fn)?.to_bits() != base.to_bits() {
            return Err(Error::invalid("loss function is not deterministic"));
        }

        let mut tape = self.tape();
        let bound = store.bind(&mut tape);
        let loss = loss_fn(&mut tape, &bound)?;
        let grads = tape.backward(loss)?;
        let analytic = bound.collect(&grads);

        let names: Vec<String> = if subset.is_empty() {
            analytic.keys().cloned().collect()
        } else {
            subset.iter().map(|s| s.to_string()).collect()
        };
        let mut names = names;
        names.sort();

        let mut work = store.clone();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords: 0,
            one_sided: 0,
        };
        for name in &names {
            let g = analytic
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let n = g.len();
            let stride = n.div_ceil(self.max_coords_per_tensor.max(1)).max(1);
            for i in (0..n).step_by(stride) {
                let orig = work.get(name)?.data()[i];
                let mut at = |x: f64, f: &mut F| -> Result<f64> {
                    work.get_mut(name)?.data_mut()[i] = x;
                    let v = eval(&work, f);
                    work.get_mut(name)?.data_mut()[i] = orig;
                    v
                };
                let h = self.h;
                let up = at(orig + h, &mut loss_fn)?;
                let down = at(orig - h, &mut loss_fn)?;
                let a = g.data()[i];
                let rel_to = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                let mut rel = rel_to((up - down) / (2.0 * h));
                if rel > self.one_sided_above {
                    // Second-order one-sided stencils.
                    let up2 = at(orig + 2.0 * h, &mut loss_fn)?;
                    let down2 = at(orig - 2.0 * h, &mut loss_fn)?;
                    let fwd = rel_to((-3.0 * base + 4.0 * up - up2) / (2.0 * h));
                    let bwd = rel_to((3.0 * base - 4.0 * down + down2) / (2.0 * h));
                    if fwd.min(bwd) < rel {
                        rel = fwd.min(bwd);
                        report.one_sided += 1;
                    }
                }
                report.coords += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), i));
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row(vec![x, 0.7]).unwrap(), true).unwrap();
        s
    }

    fn leaky(tape: &mut Tape, p: &Bound) -> Result<Var> {
        let x = p.get("x")?;
        let y = tape.leaky_relu(x, 0.1)?;
        let q = tape.square(x)?;
        let z = tape.add(y, q)?;
        tape.sum(z)
    }

    #[test]
    fn kink_inside_the_stencil_falls_back_to_one_side() {
        let gc = GradCheck::default();
        let r = gc.run(&store(3e-8), &[], leaky).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.one_sided, 1);
        let central_only = GradCheck {
            one_sided_above: f64::INFINITY,
            ..GradCheck::default()
        };
        assert!(central_only.run(&store(3e-8), &[], leaky).unwrap().max_rel_error > 0.1);
    }

    #[test]
    fn smooth_points_stay_central() {
        let r = GradCheck::default().run(&store(0.4), &[], leaky).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!((r.coords, r.one_sided), (2, 0));
    }
}
