//! Dormand–Prince 5(4) with step-size control on the embedded error estimate.

use serde::{Deserialize, Serialize};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order weights are the last row of A (FSAL); these are fifth minus fourth
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub steps: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RkFailure<E> {
    /// The right-hand side failed.
    Rhs(E),
    /// Step size fell below resolution; the last accepted state is returned.
    Underflow { t: f64, y: Vec<f64>, h: f64 },
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction), landing exactly on
/// each of `outputs` (which must be monotone in the direction of integration and lie
/// in `[t0, t1]`). Every accepted step is reported when `outputs` is `None`.
pub fn dopri5<E>(
    mut f: impl FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: f64,
    outputs: Option<&[f64]>,
) -> Result<(Vec<(f64, Vec<f64>)>, Stats), RkFailure<E>> {
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let n = y0.len();
    let mut stats = Stats::default();
    let mut out = vec![(t0, y0.to_vec())];
    if t1 == t0 {
        return Ok((out, stats));
    }
    let mut targets: Vec<f64> = outputs.map(|o| o.iter().copied().filter(|&s| (s - t0) * dir > 0.0).collect()).unwrap_or_default();
    if targets.last().is_none_or(|&s| s != t1) {
        targets.push(t1);
    }
    let record_all = outputs.is_none();

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k0 = f(t, &y).map_err(RkFailure::Rhs)?;
    stats.evaluations += 1;
    let mut h = dir * initial_step(&y, &k0, tol, (t1 - t0).abs());
    let mut next = 0;
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    while next < targets.len() {
        let target = targets[next];
        let hit = (t + h - target) * dir >= 0.0;
        let step = if hit { target - t } else { h };
        if hit && step.abs() <= 1e-14 * t.abs().max(1.0) {
            // already on the target up to rounding
            t = target;
            out.push((t, y.clone()));
            next += 1;
            continue;
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(RkFailure::Underflow { t, y, h });
        }
        k[0].clone_from(&k0);
        for s in 1..7 {
            for i in 0..n {
                stage[i] = y[i] + step * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            k[s] = f(t + C[s] * step, &stage).map_err(RkFailure::Rhs)?;
        }
        stats.evaluations += 6;
        // stage 6 was evaluated at the fifth-order solution
        let y_new = stage.clone();
        let mut err = 0.0f64;
        for i in 0..n {
            let e = step * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = tol * (1.0 + y[i].abs().max(y_new[i].abs()));
            let r = (e / sc).abs();
            err = if r.is_nan() { f64::INFINITY } else { err.max(r) };
        }
        if err <= 1.0 {
            stats.steps += 1;
            t = if hit { target } else { t + step };
            y = y_new;
            k0 = k[6].clone();
            if hit {
                next += 1;
                out.push((t, y.clone()));
            } else if record_all {
                out.push((t, y.clone()));
            }
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            // a step shortened to hit a target says nothing about the next one
            if !hit {
                h *= grow;
            } else if grow < 1.0 {
                h = h.abs().min(step.abs() * grow) * dir;
            }
        } else {
            stats.rejected += 1;
            h = step * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    Ok((out, stats))
}

fn initial_step(y: &[f64], f0: &[f64], tol: f64, span: f64) -> f64 {
    let d0 = y.iter().map(|x| x.abs()).fold(0.0, f64::max) + 1.0;
    let d1 = f0.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let h = if d1 < 1e-10 { 0.1 } else { 0.01 * d0 / d1 };
    (h * tol.powf(0.2) / 1e-1f64.powf(0.2)).min(span).max(1e-6 * span)
}
