//! Three-stage strong-stability-preserving Runge-Kutta (Shu-Osher form).

use crate::error::{Error, Result};
use crate::snapshot::SnapshotMatrix;

/// Advances `u` by one step of size `dt`.
///
/// `rhs` evaluates the time derivative and `constrain` is applied after every
/// stage (boundary conditions; pass a no-op when there are none).
pub fn ssp_rk3_step<F, C>(u: &[f64], dt: f64, rhs: &mut F, constrain: &C) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    C: Fn(&mut [f64]),
{
    let k0 = rhs(u)?;
    let mut u1: Vec<f64> = u.iter().zip(&k0).map(|(a, k)| a + dt * k).collect();
    constrain(&mut u1);
    let k1 = rhs(&u1)?;
    let mut u2: Vec<f64> = u
        .iter()
        .zip(u1.iter().zip(&k1))
        .map(|(a, (b, k))| 0.75 * a + 0.25 * (b + dt * k))
        .collect();
    constrain(&mut u2);
    let k2 = rhs(&u2)?;
    let mut out: Vec<f64> = u
        .iter()
        .zip(u2.iter().zip(&k2))
        .map(|(a, (b, k))| a / 3.0 + 2.0 / 3.0 * (b + dt * k))
        .collect();
    constrain(&mut out);
    Ok(out)
}

pub fn no_constraint(_: &mut [f64]) {}

/// States saved every `save_every` steps, the initial state included.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: SnapshotMatrix,
    pub steps: Vec<usize>,
    /// Step at which `stop` fired, if it did; the offending state is not saved.
    pub stopped_at: Option<usize>,
}

/// Integrates `u0` for `n_steps` SSP-RK3 steps without constraints. A
/// non-finite state is an instability error; `stop` may end the run early.
pub fn rollout<F, S>(u0: &[f64], dims: &[usize], dt: f64, n_steps: usize, save_every: usize, rhs: &mut F, stop: S) -> Result<Rollout>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    S: Fn(&[f64]) -> bool,
{
    if save_every == 0 {
        return Err(Error::Parameter("save_every must be at least 1".into()));
    }
    let mut states = SnapshotMatrix::new(dims);
    states.push(u0)?;
    let mut steps = vec![0];
    let mut u = u0.to_vec();
    for step in 1..=n_steps {
        u = ssp_rk3_step(&u, dt, rhs, &no_constraint)?;
        if stop(&u) {
            return Ok(Rollout {
                states,
                steps,
                stopped_at: Some(step),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability {
                step,
                detail: "non-finite state".into(),
            });
        }
        if step % save_every == 0 {
            states.push(&u)?;
            steps.push(step);
        }
    }
    Ok(Rollout {
        states,
        steps,
        stopped_at: None,
    })
}
