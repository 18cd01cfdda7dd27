//! Conditional flow matching along straight-line paths.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::vector_field::VectorField;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `(1 − t)·z_p + t·z_q`
pub fn interpolate(zp: &Tensor, zq: &Tensor, t: f64) -> Result<Tensor> {
    same_shape("interpolate", zp, zq)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    zp.zip_map(zq, |a, b| (1.0 - t) * a + t * b)
}

/// `z_q − z_p`
pub fn target_velocity(zp: &Tensor, zq: &Tensor) -> Result<Tensor> {
    same_shape("target_velocity", zp, zq)?;
    zp.zip_map(zq, |a, b| b - a)
}

/// Paired endpoints for `B` sequences packed side by side, one time per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmBatch {
    pub zp: Tensor,
    pub zq: Tensor,
    /// Prior mean, laid out like `zp`.
    pub cond: Option<Tensor>,
    pub t: Vec<f64>,
    pub segment: usize,
}

impl CfmBatch {
    pub fn new(
        zp: Tensor,
        zq: Tensor,
        cond: Option<Tensor>,
        t: Vec<f64>,
        segment: usize,
    ) -> Result<Self> {
        same_shape("cfm batch", &zp, &zq)?;
        if let Some(c) = &cond {
            same_shape("cfm batch", &zp, c)?;
        }
        let len = zp.dims2()?.1;
        if segment == 0 || len % segment != 0 || len / segment != t.len() {
            return Err(Error::shape(
                "cfm batch",
                format!("{len} frames vs {} times of segment {segment}", t.len()),
            ));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("time {bad} outside [0, 1]")));
        }
        Ok(Self {
            zp,
            zq,
            cond,
            t,
            segment,
        })
    }

    /// Draws one `t ∼ U[0, 1]` per sequence.
    pub fn with_random_times(
        zp: Tensor,
        zq: Tensor,
        cond: Option<Tensor>,
        segment: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let n = zp.dims2()?.1 / segment.max(1);
        let t = (0..n).map(|_| rng.random::<f64>()).collect();
        Self::new(zp, zq, cond, t, segment)
    }
}

/// Per-column time weights `[rows × B·segment]`.
pub fn time_matrix(rows: usize, t: &[f64], segment: usize) -> Result<Tensor> {
    let len = t.len() * segment;
    let mut data = vec![0.0; rows * len];
    for r in 0..rows {
        for (j, d) in data[r * len..(r + 1) * len].iter_mut().enumerate() {
            *d = t[j / segment];
        }
    }
    Tensor::matrix(rows, len, data)
}

/// `mean ‖v(z_t, t) − (z_q − z_p)‖²`. Pass constants (or detached vars) as
/// endpoints to keep gradients out of whatever produced them.
pub fn cfm_loss<F>(
    tape: &mut Tape,
    zp: Var,
    zq: Var,
    t: &[f64],
    segment: usize,
    field: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var, &[f64]) -> Result<Var>,
{
    let rows = tape.value(zp).dims2()?.0;
    let u = tape.sub(zq, zp)?;
    let w = tape.constant(time_matrix(rows, t, segment)?);
    let shift = tape.mul(w, u)?;
    let zt = tape.add(zp, shift)?;
    let v = field(tape, zt, t)?;
    let d = tape.sub(v, u)?;
    let d2 = tape.square(d)?;
    tape.mean(d2)
}

/// A source of endpoint pairs for [`train_cfm`].
pub trait PairSource {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<CfmBatch>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfmTrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for CfmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Adam on the flow-matching loss; returns the loss of every step.
pub fn train_cfm(
    vf: &VectorField,
    store: &mut ParamStore,
    source: &mut dyn PairSource,
    cfg: &CfmTrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = source.next_batch(&mut rng)?;
        let mut tape = Tape::training(rng.next_u64());
        let p = store.bind(&mut tape);
        let zp = tape.constant(batch.zp);
        let zq = tape.constant(batch.zq);
        let cond = batch.cond.map(|c| tape.constant(c));
        let loss = cfm_loss(&mut tape, zp, zq, &batch.t, batch.segment, |tape, zt, t| {
            vf.forward(tape, &p, zt, t, cond, batch.segment)
        })?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                report: format!("cfm={value}"),
            });
        }
        curve.push(value);
        let grads = tape.backward(loss)?;
        store.adam_step(&p.collect(&grads), &cfg.adam)?;
    }
    Ok(curve)
}

/// Independent Gaussian endpoints `N(a, s²)` → `N(b, r²)` per coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTransportSpec {
    pub a: f64,
    pub s: f64,
    pub b: f64,
    pub r: f64,
}

impl GaussianTransportSpec {
    pub fn new(a: f64, s: f64, b: f64, r: f64) -> Result<Self> {
        if !(s > 0.0 && r > 0.0) {
            return Err(Error::invalid(format!(
                "standard deviations must be positive, got {s} and {r}"
            )));
        }
        Ok(Self { a, s, b, r })
    }

    pub fn mean_at(&self, t: f64) -> f64 {
        (1.0 - t) * self.a + t * self.b
    }

    pub fn var_at(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) * self.s * self.s + t * t * self.r * self.r
    }

    /// `E[z_q − z_p | z_t = z]`, the minimiser of the flow-matching loss.
    pub fn velocity(&self, t: f64, z: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let den = self.var_at(t);
        if den == 0.0 {
            return Err(Error::invalid("degenerate Gaussian path: zero variance"));
        }
        let num = t * self.r * self.r - (1.0 - t) * self.s * self.s;
        Ok((self.b - self.a) + num / den * (z - self.mean_at(t)))
    }

    /// `Var(z_q − z_p | z_t)`.
    pub fn conditional_variance(&self, t: f64) -> f64 {
        let total = self.s * self.s + self.r * self.r;
        let den = self.var_at(t);
        if den == 0.0 {
            return total;
        }
        let cov = t * self.r * self.r - (1.0 - t) * self.s * self.s;
        total - cov * cov / den
    }

    /// Irreducible flow-matching loss: the conditional variance averaged
    /// over `t ∼ U[0, 1]` (composite Simpson rule).
    pub fn loss_floor(&self) -> f64 {
        let n = 4000;
        let h = 1.0 / n as f64;
        let mut s = self.conditional_variance(0.0) + self.conditional_variance(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * self.conditional_variance(i as f64 * h);
        }
        s * h / 3.0
    }

    /// Where the exact marginal flow sends `z0` at `t = 1`.
    pub fn transport(&self, z0: f64) -> f64 {
        self.b + self.r / self.s * (z0 - self.a)
    }
}

/// Batches of independent Gaussian pairs, one frame per sequence.
#[derive(Clone, Debug)]
pub struct GaussianPairs {
    pub spec: GaussianTransportSpec,
    pub dims: usize,
    pub batch: usize,
}

impl PairSource for GaussianPairs {
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<CfmBatch> {
        let n = self.dims * self.batch;
        let mut draw = |m: f64, sd: f64| -> Vec<f64> {
            (0..n)
                .map(|_| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let zp = Tensor::matrix(self.dims, self.batch, draw(self.spec.a, self.spec.s))?;
        let zq = Tensor::matrix(self.dims, self.batch, draw(self.spec.b, self.spec.r))?;
        CfmBatch::with_random_times(zp, zq, None, 1, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::{solve, SolverConfig};
    use crate::vector_field::VectorFieldConfig;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_endpoints_and_midpoints() {
        let (zp, zq) = (t1(&[0.1, -2.0]), t1(&[3.0, 0.7]));
        assert_eq!(interpolate(&zp, &zq, 0.0).unwrap(), zp);
        assert_eq!(interpolate(&zp, &zq, 1.0).unwrap(), zq);
        assert_eq!(
            interpolate(&t1(&[0.0]), &t1(&[2.0]), 0.25).unwrap().data(),
            &[0.5]
        );
        assert!(interpolate(&zp, &t1(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn interpolation_is_homogeneous_and_its_derivative_is_the_target() {
        let (zp, zq) = (t1(&[0.3, -1.1, 2.0]), t1(&[1.0, 0.5, -0.25]));
        let alpha = 1.7;
        let lhs = interpolate(&zp.map(|v| alpha * v), &zq.map(|v| alpha * v), 0.3).unwrap();
        let rhs = interpolate(&zp, &zq, 0.3).unwrap().map(|v| alpha * v);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = target_velocity(&zp, &zq).unwrap();
        let h = 1e-4;
        let up = interpolate(&zp, &zq, 0.5 + h).unwrap();
        let dn = interpolate(&zp, &zq, 0.5 - h).unwrap();
        for i in 0..3 {
            let fd = (up.data()[i] - dn.data()[i]) / (2.0 * h);
            assert!((fd - u.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn target_velocity_values() {
        assert_eq!(
            target_velocity(&t1(&[2.0]), &t1(&[2.0])).unwrap().data(),
            &[0.0]
        );
        assert_eq!(
            target_velocity(&t1(&[1.0]), &t1(&[3.0])).unwrap().data(),
            &[2.0]
        );
        assert_eq!(
            target_velocity(&t1(&[3.0]), &t1(&[1.0])).unwrap().data(),
            &[-2.0]
        );
    }

    fn loss_with(
        zp: Tensor,
        zq: Tensor,
        t: Vec<f64>,
        field: impl FnOnce(&mut Tape, Var, &[f64]) -> Result<Var>,
    ) -> f64 {
        let mut tape = Tape::inference();
        let segment = zp.cols() / t.len();
        let a = tape.constant(zp);
        let b = tape.constant(zq);
        let l = cfm_loss(&mut tape, a, b, &t, segment, field).unwrap();
        tape.item(l).unwrap()
    }

    #[test]
    fn cfm_loss_reference_values() {
        let zp = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let zq = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        let u = target_velocity(&zp, &zq).unwrap();
        let exact = loss_with(zp.clone(), zq.clone(), vec![0.3, 0.8], |tape, _, _| {
            Ok(tape.constant(u))
        });
        assert_eq!(exact, 0.0);
        let c = 1.5;
        let zero = loss_with(
            Tensor::zeros(&[1, 4]),
            Tensor::filled(&[1, 4], c),
            vec![0.1, 0.5, 0.9, 0.2],
            |tape, zt, _| tape.scale(zt, 0.0),
        );
        assert!((zero - c * c).abs() < 1e-12);
    }

    #[test]
    fn cfm_loss_monte_carlo() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = || {
            Tensor::row(
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
            .unwrap()
        };
        let (zp, zq) = (draw(), draw());
        let t: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let l = loss_with(zp, zq, t, |tape, zt, _| tape.scale(zt, 0.0));
        assert!((l - 2.0).abs() < 0.06, "{l}");
    }

    #[test]
    fn oracle_velocity_values() {
        let g = GaussianTransportSpec::new(0.0, 1.0, 2.0, 1.0).unwrap();
        assert!((g.velocity(0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        for z in [-3.0, 0.0, 5.0] {
            assert!((g.velocity(0.5, z).unwrap() - 2.0).abs() < 1e-15);
        }
        let tiny = GaussianTransportSpec {
            a: 1.0,
            s: 1e-9,
            b: 4.0,
            r: 1e-9,
        };
        assert!((tiny.velocity(0.3, tiny.mean_at(0.3)).unwrap() - 3.0).abs() < 1e-12);
        let degenerate = GaussianTransportSpec {
            a: 0.0,
            s: 0.0,
            b: 1.0,
            r: 0.0,
        };
        assert!(degenerate.velocity(0.5, 0.0).is_err());
        assert!(GaussianTransportSpec::new(0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn oracle_matches_monte_carlo_regression_at_t0() {
        // At t = 0, z_t = z_p and u = z_q − z_p, so E[u | z] = b − a − (z − a).
        let g = GaussianTransportSpec::new(0.0, 1.0, 2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let zp: f64 = rng.sample(StandardNormal);
            let zq = 2.0 + rng.sample::<f64, _>(StandardNormal);
            let u = zq - zp;
            sx += zp;
            sy += u;
            sxx += zp * zp;
            sxy += zp * u;
        }
        let nf = n as f64;
        let slope = (sxy - sx * sy / nf) / (sxx - sx * sx / nf);
        let icpt = (sy - slope * sx) / nf;
        assert!((icpt + slope * 1.0 - g.velocity(0.0, 1.0).unwrap()).abs() < 0.02);
    }

    #[test]
    fn oracle_flow_maps_quantiles() {
        let g = GaussianTransportSpec::new(0.0, 1.0, 3.0, 1.0).unwrap();
        for k in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let z0 = [g.a + k * g.s];
            let (z1, _) = solve(
                |t, z: &[f64]| z.iter().map(|&v| g.velocity(t, v)).collect(),
                &z0,
                0.0,
                1.0,
                &SolverConfig::default(),
            )
            .unwrap();
            assert!((z1[0] - (g.b + k * g.r)).abs() < 1e-3, "{k}: {}", z1[0]);
            assert!((g.transport(z0[0]) - (g.b + k * g.r)).abs() < 1e-12);
        }
    }

    #[test]
    fn floor_is_below_total_variance() {
        let g = GaussianTransportSpec::new(0.0, 1.0, 3.0, 0.5).unwrap();
        let f = g.loss_floor();
        assert!(f > 0.0 && f < 1.25, "{f}");
        assert_eq!(g.conditional_variance(0.0), 0.25);
        assert_eq!(g.conditional_variance(1.0), 1.0);
    }

    fn toy_field() -> (VectorField, ParamStore) {
        let cfg = VectorFieldConfig {
            hidden: 8,
            cond_dim: 0,
            time_embed_dim: 4,
            ..Default::default()
        };
        let vf = VectorField::new(&cfg, 2).unwrap();
        let s = vf.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (vf, s)
    }

    #[test]
    fn zero_steps_leave_params() {
        let (vf, mut store) = toy_field();
        let before = store.clone();
        let mut src = GaussianPairs {
            spec: GaussianTransportSpec::new(0.0, 1.0, 3.0, 0.5).unwrap(),
            dims: 2,
            batch: 4,
        };
        let curve = train_cfm(
            &vf,
            &mut store,
            &mut src,
            &CfmTrainConfig {
                steps: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(curve.is_empty());
        assert_eq!(store, before);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let run = || {
            let (vf, mut store) = toy_field();
            let mut src = GaussianPairs {
                spec: GaussianTransportSpec::new(0.0, 1.0, 3.0, 0.5).unwrap(),
                dims: 2,
                batch: 16,
            };
            let cfg = CfmTrainConfig {
                steps: 150,
                seed: 9,
                adam: AdamConfig {
                    lr: 1e-2,
                    ..Default::default()
                },
            };
            let curve = train_cfm(&vf, &mut store, &mut src, &cfg).unwrap();
            (store, curve)
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let head: f64 = ca[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = ca[ca.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }
}
