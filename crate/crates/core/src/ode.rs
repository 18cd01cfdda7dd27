//! Adaptive Dormand–Prince 5(4) integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Fifth- minus fourth-order weights. The fifth-order weights equal the last
/// row of `A`, so the final stage doubles as the next step's first.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub atol: f64,
    pub rtol: f64,
    pub max_step: f64,
    pub initial_step: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub max_rejected: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            atol: 1e-5,
            rtol: 1e-5,
            max_step: 0.1,
            initial_step: 0.1,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            max_rejected: 1000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step > 0.0 && self.max_step <= 1.0) {
            return Err(Error::Config(format!(
                "solver max_step must lie in (0, 1], got {}",
                self.max_step
            )));
        }
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Config("solver initial_step must be positive".into()));
        }
        if !(self.safety > 0.0
            && self.min_factor > 0.0
            && self.min_factor <= 1.0
            && self.max_factor >= 1.0)
        {
            return Err(Error::Config(
                "solver step-scale factors are inconsistent".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub final_error: f64,
}

#[derive(Clone, Debug)]
pub struct Dopri5Step {
    /// Fifth-order solution at `t + h`.
    pub z: Vec<f64>,
    /// Difference between the fifth- and embedded fourth-order solutions.
    pub error: Vec<f64>,
    /// The seven stage derivatives; `k[6]` is the derivative at the new point.
    pub k: [Vec<f64>; 7],
}

fn check_stage(k: &[f64], stage: usize, t: f64) -> Result<()> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver {
            t,
            reason: format!("stage {} produced a non-finite derivative", stage + 1),
        })
    }
}

/// One Dormand–Prince step. `k1` may carry the derivative at `(t, z)` from
/// the previous step.
pub fn dopri5_step<F>(
    rhs: &mut F,
    z: &[f64],
    t: f64,
    h: f64,
    k1: Option<&[f64]>,
) -> Result<Dopri5Step>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "step size must be positive, got {h}"
        )));
    }
    let n = z.len();
    let mut k: [Vec<f64>; 7] = Default::default();
    k[0] = match k1 {
        Some(k1) => k1.to_vec(),
        None => rhs(t, z)?,
    };
    check_stage(&k[0], 0, t)?;
    let mut y = vec![0.0; n];
    for s in 1..7 {
        for i in 0..n {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(s) {
                acc += A[s][j] * kj[i];
            }
            y[i] = z[i] + h * acc;
        }
        let ts = t + C[s] * h;
        k[s] = rhs(ts, &y)?;
        if k[s].len() != n {
            return Err(Error::shape(
                "dopri5",
                format!("rhs returned {} values for state of {n}", k[s].len()),
            ));
        }
        check_stage(&k[s], s, ts)?;
    }
    // Stage 7 is evaluated at the fifth-order solution itself.
    let znew = y;
    let error = (0..n)
        .map(|i| h * E.iter().zip(&k).map(|(e, kj)| e * kj[i]).sum::<f64>())
        .collect();
    Ok(Dopri5Step { z: znew, error, k })
}

fn error_norm(step: &Dopri5Step, z: &[f64], cfg: &SolverConfig) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let s: f64 = step
        .error
        .iter()
        .zip(z.iter().zip(&step.z))
        .map(|(e, (a, b))| {
            let sc = cfg.atol + cfg.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / z.len() as f64).sqrt()
}

/// Integrate `dz/dt = rhs(t, z)` from `t0` to `t1`.
pub fn solve<F>(
    mut rhs: F,
    z0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(Error::invalid(format!(
            "integration interval [{t0}, {t1}] runs backwards"
        )));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver {
            t: t0,
            reason: "initial state is not finite".into(),
        });
    }
    let mut stats = SolveStats::default();
    let mut z = z0.to_vec();
    let mut t = t0;
    let mut h = cfg.initial_step.min(cfg.max_step);
    let mut k1: Option<Vec<f64>> = None;
    while t < t1 {
        let last = t + h * (1.0 + 1e-9) >= t1;
        let h_try = if last { t1 - t } else { h };
        let step = dopri5_step(&mut rhs, &z, t, h_try, k1.as_deref()).map_err(|e| match e {
            Error::Solver { reason, .. } => Error::Solver { t, reason },
            other => other,
        })?;
        stats.rhs_evals += if k1.is_some() { 6 } else { 7 };
        let err = error_norm(&step, &z, cfg);
        if !err.is_finite() {
            return Err(Error::Solver {
                t,
                reason: "error estimate is not finite".into(),
            });
        }
        let factor = if err == 0.0 {
            cfg.max_factor
        } else {
            (cfg.safety * err.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
        };
        if err <= 1.0 {
            stats.accepted += 1;
            stats.final_error = err;
            t = if last { t1 } else { t + h_try };
            z = step.z;
            let [_, _, _, _, _, _, k7] = step.k;
            k1 = Some(k7);
            h = (h_try * factor).min(cfg.max_step);
        } else {
            stats.rejected += 1;
            if stats.rejected > cfg.max_rejected {
                return Err(Error::Solver {
                    t,
                    reason: format!("more than {} rejected steps", cfg.max_rejected),
                });
            }
            h = h_try * factor;
            if h <= f64::EPSILON * t.abs().max(1.0) {
                return Err(Error::Solver {
                    t,
                    reason: format!("step size underflow ({h:e})"),
                });
            }
            let [k1v, ..] = step.k;
            k1 = Some(k1v);
        }
    }
    Ok((z, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_: f64, z: &[f64]) -> Result<Vec<f64>> {
        Ok(z.iter().map(|v| -v).collect())
    }

    #[test]
    fn step_with_zero_rhs_is_exact() {
        let z = [0.3, -1.7];
        let s = dopri5_step(
            &mut |_, z: &[f64]| Ok(vec![0.0; z.len()]),
            &z,
            0.0,
            0.1,
            None,
        )
        .unwrap();
        assert_eq!(s.z, z);
        assert!(s.error.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn step_with_constant_rhs_is_exact() {
        let s = dopri5_step(&mut |_, _: &[f64]| Ok(vec![2.5]), &[1.0], 0.0, 0.1, None).unwrap();
        assert!((s.z[0] - 1.25).abs() < 1e-15);
        assert!(s.error[0].abs() < 1e-15);
    }

    #[test]
    fn step_on_decay_matches_exponential() {
        let s = dopri5_step(&mut decay, &[1.0], 0.0, 0.1, None).unwrap();
        assert!((s.z[0] - (-0.1f64).exp()).abs() < 1e-9, "{}", s.z[0]);
        // h·e_i ≈ local error of the fourth-order companion, tiny but nonzero.
        assert!(s.error[0] != 0.0 && s.error[0].abs() < 1e-6);
    }

    #[test]
    fn non_finite_stage_is_named() {
        let err = dopri5_step(
            &mut |t, z: &[f64]| Ok(vec![if t > 0.12 { f64::NAN } else { z[0] }]),
            &[1.0],
            0.0,
            0.5,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("stage 3"), "{err}");
    }

    #[test]
    fn zero_field_is_identity_with_ten_steps() {
        let z0 = [0.1, -3.0, 7.25];
        let (z1, stats) = solve(
            |_, z: &[f64]| Ok(vec![0.0; z.len()]),
            &z0,
            0.0,
            1.0,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(z1, z0);
        assert_eq!(stats.accepted, 10);
        assert_eq!(stats.rejected, 0);
    }

    #[test]
    fn decay_reaches_inverse_e() {
        let (z1, stats) = solve(decay, &[1.0], 0.0, 1.0, &SolverConfig::default()).unwrap();
        assert!((z1[0] - (-1.0f64).exp()).abs() <= 1e-6);
        assert!(stats.accepted >= 10);
        assert_eq!(
            stats.rhs_evals,
            7 + 6 * (stats.accepted + stats.rejected - 1)
        );
    }

    fn decay_error(tol: f64, max_step: f64) -> f64 {
        let cfg = SolverConfig {
            atol: tol,
            rtol: tol,
            max_step,
            initial_step: max_step,
            ..Default::default()
        };
        let (z1, _) = solve(decay, &[1.0], 0.0, 1.0, &cfg).unwrap();
        (z1[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn error_decreases_with_tolerance() {
        let errs: Vec<f64> = [1e-3, 1e-5, 1e-7]
            .iter()
            .map(|&t| decay_error(t, 1.0))
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        let capped: Vec<f64> = [1e-3, 1e-5, 1e-7]
            .iter()
            .map(|&t| decay_error(t, 0.1))
            .collect();
        assert!(
            capped[0] >= capped[1] && capped[1] >= capped[2],
            "{capped:?}"
        );
    }

    #[test]
    fn halving_tolerance_never_hurts() {
        for max_step in [0.1, 0.5, 1.0] {
            let mut tol = 1e-2;
            while tol > 1e-9 {
                let a = decay_error(tol, max_step);
                let b = decay_error(tol / 2.0, max_step);
                assert!(b <= a, "tol {tol:e} max_step {max_step}: {a:e} -> {b:e}");
                tol /= 1.7;
            }
        }
    }

    #[test]
    fn stiff_rhs_exhausts_rejections() {
        let cfg = SolverConfig {
            max_rejected: 3,
            ..Default::default()
        };
        let err = solve(
            |_, z: &[f64]| Ok(z.iter().map(|v| -1e6 * v).collect()),
            &[1.0],
            0.0,
            1.0,
            &cfg,
        )
        .unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig {
            max_step: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig {
            atol: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SolverConfig::default().validate().is_ok());
    }
}
