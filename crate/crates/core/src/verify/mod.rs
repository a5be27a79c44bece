//! Checks by direct integration of the Hamiltonian flow, independent of the
//! fixed-point machinery: conjugacy of flows, approach to the quasi-periodic orbit,
//! the Lagrangian pull-back, backward extension, and the divergent-drift
//! counterexample.

pub mod rk;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, Lattice};
use crate::hamiltonian::{Flow, ModelError, TimeProfile};
use crate::solver::{SolverError, TorusFamily};
use rk::{dopri5, RkFailure, Stats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("integration stalled at t = {t} (step {h:e})")]
    Underflow { t: f64, q: Vec<f64>, p: Vec<f64>, h: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("integrable drift {0}: the torus exists, use solve_torus_field")]
    IntegrableDrift(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    /// continuous lift
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

/// Samples in increasing time, whichever way the integration ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: Vec<Sample>,
    backward: bool,
    pub stats: Stats,
    pub tol: f64,
}

impl Trajectory {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn start(&self) -> &Sample {
        if self.backward { self.samples.last() } else { self.samples.first() }.expect("nonempty")
    }

    pub fn end(&self) -> &Sample {
        if self.backward { self.samples.first() } else { self.samples.last() }.expect("nonempty")
    }

    pub fn is_backward(&self) -> bool {
        self.backward
    }
}

fn run(flow: &Flow, q0: &[f64], p0: &[f64], t0: f64, t1: f64, tol: f64, outputs: Option<&[f64]>) -> Result<Trajectory> {
    let n = flow.dim();
    if q0.len() != n || p0.len() != n {
        return Err(VerifyError::Invalid(format!("state must have {n} + {n} components")));
    }
    if !(tol > 0.0) || !t0.is_finite() || !t1.is_finite() {
        return Err(VerifyError::Invalid("tolerance and times must be finite, tol > 0".into()));
    }
    let y0: Vec<f64> = q0.iter().chain(p0.iter()).copied().collect();
    let rhs = |t: f64, y: &[f64]| -> std::result::Result<Vec<f64>, ModelError> {
        let (dq, dp) = flow.vector_field(&y[..n], &y[n..], t)?;
        Ok(dq.into_iter().chain(dp).collect())
    };
    let (out, stats) = dopri5(rhs, t0, &y0, t1, tol, outputs).map_err(|e| match e {
        RkFailure::Rhs(m) => VerifyError::Model(m),
        RkFailure::Underflow { t, y, h } => VerifyError::Underflow { t, q: y[..n].to_vec(), p: y[n..].to_vec(), h },
    })?;
    let mut samples: Vec<Sample> = out.into_iter().map(|(t, y)| Sample { t, q: y[..n].to_vec(), p: y[n..].to_vec() }).collect();
    let backward = t1 < t0;
    if backward {
        samples.reverse();
    }
    Ok(Trajectory { samples, backward, stats, tol })
}

/// Adaptive RK5(4) on the Hamiltonian field, recording every accepted step.
pub fn integrate(flow: &Flow, q0: &[f64], p0: &[f64], t0: f64, t1: f64, tol: f64) -> Result<Trajectory> {
    run(flow, q0, p0, t0, t1, tol, None)
}

/// As [`integrate`], landing exactly on `times` (monotone from `t0`); ends at the last one.
pub fn integrate_at(flow: &Flow, q0: &[f64], p0: &[f64], t0: f64, times: &[f64], tol: f64) -> Result<Trajectory> {
    let t1 = *times.last().ok_or_else(|| VerifyError::Invalid("no output times".into()))?;
    let dir = (t1 - t0).signum();
    if times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
        return Err(VerifyError::Invalid("output times must be strictly monotone".into()));
    }
    run(flow, q0, p0, t0, t1, tol, Some(times))
}

/// Per-component wrap-around in `q`, Euclidean in `p`.
pub fn phase_distance(q1: &[f64], p1: &[f64], q2: &[f64], p2: &[f64]) -> f64 {
    let dq: f64 = q1
        .iter()
        .zip(q2)
        .map(|(a, b)| {
            let d = (a - b).rem_euclid(1.0);
            d.min(1.0 - d).powi(2)
        })
        .sum();
    let dp: f64 = p1.iter().zip(p2).map(|(a, b)| (a - b).powi(2)).sum();
    (dq + dp).sqrt()
}

/// Infinity-norm of the Jacobian of the vector field, by central differences.
pub fn local_lipschitz(flow: &Flow, q: &[f64], p: &[f64], t: f64) -> Result<f64> {
    let n = flow.dim();
    let y: Vec<f64> = q.iter().chain(p).copied().collect();
    let mut rows = vec![0.0f64; 2 * n];
    for j in 0..2 * n {
        let h = 1e-6 * (1.0 + y[j].abs());
        let mut col = [0.0f64; 2].map(|_| Vec::new());
        for (s, sign) in [1.0, -1.0].iter().enumerate() {
            let mut z = y.clone();
            z[j] += sign * h;
            let (dq, dp) = flow.vector_field(&z[..n], &z[n..], t)?;
            col[s] = dq.into_iter().chain(dp).collect();
        }
        for i in 0..2 * n {
            rows[i] += ((col[0][i] - col[1][i]) / (2.0 * h)).abs();
        }
    }
    Ok(rows.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub q: Vec<f64>,
    pub defect: f64,
    /// `(t, distance)` at the sample times
    pub curve: Vec<(f64, f64)>,
    pub lipschitz: f64,
    pub stats: Stats,
}

/// `sup_t dist(psi^t(phi^{t0}(q)), phi^t(q + omega (t - t0)))` over `samples` equally
/// spaced times in `(t0, t1]`.
pub fn conjugacy_defect(flow: &Flow, y: &TorusFamily, q: &[f64], t0: f64, t1: f64, tol: f64, samples: usize) -> Result<ConjugacyReport> {
    if t0 < y.upsilon_prime() || t1 <= t0 || samples == 0 {
        return Err(VerifyError::Invalid(format!("need upsilon' = {} <= t0 < t1 and samples > 0", y.upsilon_prime())));
    }
    let omega = flow.model().omega();
    let times: Vec<f64> = (1..=samples).map(|k| t0 + (t1 - t0) * k as f64 / samples as f64).collect();
    let (x0, p0) = y.embed(q, t0)?;
    let traj = integrate_at(flow, &x0, &p0, t0, &times, tol)?;
    let mut curve = Vec::with_capacity(traj.samples.len());
    let mut lipschitz = 0.0f64;
    for s in &traj.samples {
        let shifted: Vec<f64> = q.iter().zip(omega).map(|(x, w)| x + w * (s.t - t0)).collect();
        let (xe, pe) = y.embed(&shifted, s.t)?;
        curve.push((s.t, phase_distance(&s.q, &s.p, &xe, &pe)));
        lipschitz = lipschitz.max(local_lipschitz(flow, &s.q, &s.p, s.t)?);
    }
    let defect = curve.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(ConjugacyReport { q: q.to_vec(), defect, curve, lipschitz, stats: traj.stats })
}

/// A posteriori bound `10 tol + residual * T * exp(L T)` for the conjugacy defect.
pub fn gronwall_bound(tol: f64, residual: f64, horizon: f64, lipschitz: f64) -> f64 {
    10.0 * tol + residual * horizon * (lipschitz * horizon).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSweep {
    pub reports: Vec<ConjugacyReport>,
    pub max_defect: f64,
    /// largest over smallest defect
    pub spread: f64,
}

/// [`conjugacy_defect`] from `phases` equally spaced diagonal starting points.
pub fn conjugacy_sweep(flow: &Flow, y: &TorusFamily, phases: usize, t0: f64, t1: f64, tol: f64, samples: usize) -> Result<PhaseSweep> {
    let n = flow.dim();
    let reports = (0..phases)
        .into_par_iter()
        .map(|k| {
            let q: Vec<f64> = (0..n).map(|i| ((k as f64 + 0.5) / phases as f64 * (1.0 + 0.37 * i as f64)).fract()).collect();
            conjugacy_defect(flow, y, &q, t0, t1, tol, samples)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_defect = reports.iter().map(|r| r.defect).fold(0.0, f64::max);
    let min_defect = reports.iter().map(|r| r.defect).fold(f64::INFINITY, f64::min);
    let spread = if max_defect == 0.0 { 1.0 } else { max_defect / min_defect.max(f64::MIN_POSITIVE) };
    Ok(PhaseSweep { reports, max_defect, spread })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticCurve {
    pub times: Vec<f64>,
    /// distance of the trajectory to `(q + omega (t - t0), 0)`
    pub distance: Vec<f64>,
    /// distance of the trajectory to `phi^t(q + omega (t - t0))`
    pub conjugacy: Vec<f64>,
    /// `|phi^t - phi_0|` at the shifted phase
    pub embedding_offset: Vec<f64>,
    /// `sup_t distance / (bbar + abar)`
    pub envelope_ratio: f64,
}

impl AsymptoticCurve {
    /// Triangle inequality `distance <= conjugacy + offset` at every sample.
    pub fn chain_holds(&self, slack: f64) -> bool {
        (0..self.times.len()).all(|i| self.distance[i] <= self.conjugacy[i] + self.embedding_offset[i] + slack)
    }
}

/// `d(t)` on a log-spaced grid of `points` times in `(t0, t0 + horizon]`.
pub fn asymptotic_defect(flow: &Flow, y: &TorusFamily, q: &[f64], t0: f64, horizon: f64, tol: f64, points: usize) -> Result<AsymptoticCurve> {
    if t0 < y.upsilon_prime() || !(horizon > 0.0) || points < 2 {
        return Err(VerifyError::Invalid("need t0 >= upsilon', horizon > 0 and at least two points".into()));
    }
    let omega = flow.model().omega();
    let lo = (horizon * 1e-3).ln();
    let hi = horizon.ln();
    let times: Vec<f64> =
        (0..points).map(|k| t0 + (lo + (hi - lo) * k as f64 / (points - 1) as f64).exp()).collect();
    let (x0, p0) = y.embed(q, t0)?;
    let traj = integrate_at(flow, &x0, &p0, t0, &times, tol)?;
    let zero = vec![0.0; q.len()];
    let mut curve = AsymptoticCurve {
        times: Vec::new(),
        distance: Vec::new(),
        conjugacy: Vec::new(),
        embedding_offset: Vec::new(),
        envelope_ratio: 0.0,
    };
    for s in traj.samples.iter().skip(1) {
        let shifted: Vec<f64> = q.iter().zip(omega).map(|(x, w)| x + w * (s.t - t0)).collect();
        let (xe, pe) = y.embed(&shifted, s.t)?;
        let d = phase_distance(&s.q, &s.p, &shifted, &zero);
        let env = y.env_a().tail(s.t) + y.env_b().tail(s.t);
        curve.times.push(s.t);
        curve.distance.push(d);
        curve.conjugacy.push(phase_distance(&s.q, &s.p, &xe, &pe));
        curve.embedding_offset.push(phase_distance(&xe, &pe, &shifted, &zero));
        curve.envelope_ratio = curve.envelope_ratio.max(d / env);
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianDefect {
    pub t: f64,
    pub value: f64,
    /// number of pairs `i < j`; zero means the check is vacuous
    pub pairs: usize,
}

impl LagrangianDefect {
    pub fn is_vacuous(&self) -> bool {
        self.pairs == 0
    }
}

/// `max_{i<j, q} |d_i V . d_j U - d_j V . d_i U|` with `U = id + u`, `V = v`.
pub fn lagrangian_defect(y: &TorusFamily, t: f64) -> Result<LagrangianDefect> {
    let n = y.dim();
    let pairs = n * (n - 1) / 2;
    if pairs == 0 {
        return Ok(LagrangianDefect { t, value: 0.0, pairs });
    }
    let u = y.u().at(t)?;
    let v = y.v().at(t)?;
    let lattice = Lattice::for_band(n, 2 * y.u().band().max(1));
    // grad[k][i] = d_i of component k, sampled on the lattice
    let grad = |fs: &[crate::field::FourierField]| -> Result<Vec<Vec<Vec<f64>>>> {
        fs.iter().map(|f| (0..n).map(|i| Ok(lattice.values(&f.differentiate(i)?))).collect()).collect()
    };
    let du = grad(&u)?;
    let dv = grad(&v)?;
    let mut value = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            // the identity part of dU contributes the curl of v; forming it spectrally
            // keeps the rounding floor proportional to |v| instead of to 1
            let curl = lattice.values(&v[j].differentiate(i)?.sub(&v[i].differentiate(j)?)?);
            for (x, c) in curl.iter().enumerate() {
                let mut a = *c;
                for k in 0..n {
                    a += dv[k][i][x] * du[k][j][x] - dv[k][j][x] * du[k][i][x];
                }
                value = value.max(a.abs());
            }
        }
    }
    Ok(LagrangianDefect { t, value, pairs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardExtension {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// distance after flowing back up to `upsilon'` against `phi^{upsilon'}`
    pub round_trip: f64,
}

/// `phi^t(q) = psi^t_{upsilon'} phi^{upsilon'}(q - omega (t - upsilon'))` for `t <= upsilon'`.
pub fn extend_backward(flow: &Flow, y: &TorusFamily, t: f64, q: &[f64], tol: f64) -> Result<BackwardExtension> {
    let up = y.upsilon_prime();
    if t > up {
        return Err(VerifyError::Invalid(format!("t = {t} lies above upsilon' = {up}")));
    }
    let omega = flow.model().omega();
    let base: Vec<f64> = q.iter().zip(omega).map(|(x, w)| x - w * (t - up)).collect();
    let (x0, p0) = y.embed(&base, up)?;
    if t == up {
        return Ok(BackwardExtension { t, q: x0, p: p0, round_trip: 0.0 });
    }
    let back = integrate(flow, &x0, &p0, up, t, tol)?;
    let e = back.end().clone();
    let forth = integrate(flow, &e.q, &e.p, t, up, tol)?;
    let f = forth.end();
    let round_trip = phase_distance(&f.q, &f.p, &x0, &p0);
    Ok(BackwardExtension { t, q: e.q, p: e.p, round_trip })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    DivergentDrift,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::DivergentDrift => "no asymptotic torus: divergent drift",
            Verdict::Inconclusive => "inconclusive: drift increments decay within the horizon",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetCurve {
    pub omega: f64,
    pub t0: f64,
    /// elapsed times `t` (the flow runs from `t0` to `t0 + t`)
    pub times: Vec<f64>,
    /// `int_{t0}^{t0+t} Phat`, closed form
    pub offset: Vec<f64>,
    /// `psi(q) - q - omega t` on the lift, by integrating the vector field
    pub integrated: Vec<f64>,
    /// offset gained over successive doublings of `t`
    pub doubling_increments: Vec<f64>,
    pub verdict: Verdict,
}

impl OffsetCurve {
    pub fn max_discrepancy(&self) -> f64 {
        self.offset.iter().zip(&self.integrated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// The lift offset of `q' = omega + Phat(t)` for a positive, non-integrable `Phat`.
pub fn counterexample_divergence(omega: f64, phat: &TimeProfile, t0: f64, horizon: f64, points: usize, tol: f64) -> Result<OffsetCurve> {
    if phat.is_integrable() {
        return Err(VerifyError::IntegrableDrift(format!("{phat:?}")));
    }
    if !(horizon > 1.0) || points < 2 || t0 < 0.0 {
        return Err(VerifyError::Invalid("need horizon > 1, t0 >= 0 and at least two points".into()));
    }
    let probe = sampled_min(phat, t0, t0 + horizon);
    if !(probe > 0.0) {
        return Err(VerifyError::Invalid("drift profile must stay positive".into()));
    }
    let hi = horizon.ln();
    let times: Vec<f64> = (0..points).map(|k| (hi * k as f64 / (points - 1) as f64).exp()).collect();
    let offset: Vec<f64> = times.iter().map(|t| phat.integral(t0, t0 + t)).collect();

    let abs_times: Vec<f64> = times.iter().map(|t| t0 + t).collect();
    let (out, _) = dopri5(|t, _: &[f64]| Ok::<_, ()>(vec![omega + phat.eval(t)]), t0, &[0.0], t0 + horizon, tol, Some(&abs_times))
        .map_err(|_| VerifyError::Invalid("drift integration failed".into()))?;
    let integrated: Vec<f64> = out.iter().skip(1).zip(&times).map(|((_, y), t)| y[0] - omega * t).collect();

    let mut doubling_increments = Vec::new();
    let mut s = 1.0;
    while 2.0 * s <= horizon {
        doubling_increments.push(phat.integral(t0 + s, t0 + 2.0 * s));
        s *= 2.0;
    }
    // a summable tail would show geometrically shrinking increments
    let verdict = match doubling_increments.as_slice() {
        [.., a, b] if *b >= 0.9 * a && *b > 0.0 => Verdict::DivergentDrift,
        _ => Verdict::Inconclusive,
    };
    Ok(OffsetCurve { omega, t0, times, offset, integrated, doubling_increments, verdict })
}

fn sampled_min(p: &TimeProfile, a: f64, b: f64) -> f64 {
    (0..=64).map(|k| p.eval(a + (b - a) * k as f64 / 64.0)).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay::DecayFn;
    use crate::field::FourierField;
    use crate::hamiltonian::{HamiltonianModel, PTaylor, SpaceTimeField};

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    fn free(n: usize) -> HamiltonianModel {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let omega: Vec<f64> = (0..n).map(|i| golden() / (1 + i) as f64).collect();
        HamiltonianModel::new(omega, SpaceTimeField::zero(), vec![SpaceTimeField::zero(); n], PTaylor::kinetic(n), env.clone(), env, 0.0)
            .unwrap()
    }

    fn pendulum() -> HamiltonianModel {
        // autonomous: a = 0.05 cos 2 pi q with a constant profile
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let a = SpaceTimeField::term(TimeProfile::Constant(0.05), FourierField::cos_mode(1, 2, &[1], 1.0).unwrap());
        HamiltonianModel::new(vec![golden()], a, vec![SpaceTimeField::zero()], PTaylor::kinetic(1), env.clone(), env, 0.0).unwrap()
    }

    #[test]
    fn zero_section_is_invariant() {
        let flow = free(1).flow().unwrap();
        let tr = integrate(&flow, &[0.3], &[0.0], 1.0, 11.0, 1e-10).unwrap();
        let e = tr.end();
        assert_eq!(e.t, 11.0);
        assert!((e.q[0] - 0.3 - golden() * 10.0).abs() < 1e-9);
        assert_eq!(e.p[0], 0.0);
        assert!(tr.samples().windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn energy_conserved_for_autonomous_model() {
        let flow = pendulum().flow().unwrap();
        let tol = 1e-10;
        let tr = integrate(&flow, &[0.1], &[0.2], 0.0, 1.0, tol).unwrap();
        let h0 = flow.energy(&[0.1], &[0.2], 0.0).unwrap();
        for s in tr.samples() {
            assert!((flow.energy(&s.q, &s.p, s.t).unwrap() - h0).abs() <= 100.0 * tol);
        }
    }

    #[test]
    fn time_reversal_round_trip() {
        let flow = pendulum().flow().unwrap();
        let tol = 1e-10;
        let fwd = integrate(&flow, &[0.1], &[0.2], 0.0, 3.0, tol).unwrap();
        let e = fwd.end();
        let back = integrate(&flow, &e.q, &e.p, 3.0, 0.0, tol).unwrap();
        assert!(back.is_backward());
        let b = back.end();
        assert_eq!(b.t, 0.0);
        assert!(phase_distance(&b.q, &b.p, &[0.1], &[0.2]) <= 100.0 * tol);
    }

    #[test]
    fn lift_is_continuous() {
        let flow = free(1).flow().unwrap();
        let tr = integrate(&flow, &[0.9], &[0.0], 0.0, 30.0, 1e-9).unwrap();
        assert!(tr.end().q[0] > 10.0);
        assert!(tr.samples().windows(2).all(|w| (w[1].q[0] - w[0].q[0]).abs() < 0.5 || w[1].t - w[0].t > 0.5 / golden()));
    }

    #[test]
    fn zero_torus_of_free_model() {
        let m = free(2);
        let flow = m.flow().unwrap();
        let y = TorusFamily::zero(vec![0.0, 1.0, 2.0, 3.0, 4.0], 2, 4, m.env_a().clone(), m.env_b().clone());
        let tol = 1e-10;
        let c = conjugacy_defect(&flow, &y, &[0.2, 0.7], 0.0, 5.0, tol, 10).unwrap();
        assert!(c.defect <= 100.0 * tol);
        let a = asymptotic_defect(&flow, &y, &[0.2, 0.7], 0.0, 5.0, tol, 8).unwrap();
        assert!(a.distance.iter().all(|d| *d <= 100.0 * tol));
        assert!(a.chain_holds(1e-12));
        let l = lagrangian_defect(&y, 2.5).unwrap();
        assert_eq!((l.value, l.pairs), (0.0, 1));
        let b = extend_backward(&flow, &y, -3.0, &[0.2, 0.7], tol).unwrap();
        assert!(b.round_trip <= 100.0 * tol);
        // flowing the zero section back keeps p = 0 and lands on q itself
        assert!(phase_distance(&b.q, &b.p, &[0.2, 0.7], &[0.0, 0.0]) <= 100.0 * tol);
        let same = extend_backward(&flow, &y, 0.0, &[0.2, 0.7], tol).unwrap();
        assert_eq!(same.q, vec![0.2, 0.7]);
        assert!(extend_backward(&flow, &y, 1.0, &[0.2, 0.7], tol).is_err());
    }

    #[test]
    fn one_dimensional_lagrangian_check_is_vacuous() {
        let m = free(1);
        let y = TorusFamily::zero(vec![0.0, 1.0, 2.0, 3.0], 1, 4, m.env_a().clone(), m.env_b().clone());
        assert!(lagrangian_defect(&y, 1.0).unwrap().is_vacuous());
    }

    #[test]
    fn distance_wraps_on_the_torus() {
        assert!((phase_distance(&[0.95], &[0.0], &[0.05], &[0.0]) - 0.1).abs() < 1e-12);
        assert!((phase_distance(&[3.25], &[0.3], &[0.25], &[0.0]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn log_law_counterexample() {
        let phat = TimeProfile::ShiftedPower { scale: 1.0, shift: 1.0, power: 1.0 };
        let c = counterexample_divergence(golden(), &phat, 0.0, 10f64.exp() - 1.0, 40, 1e-12).unwrap();
        for (t, o) in c.times.iter().zip(&c.offset) {
            assert!((o - (1.0 + t).ln()).abs() < 1e-9);
        }
        assert!((c.offset.last().unwrap() - 10.0).abs() < 1e-9);
        assert!(c.max_discrepancy() < 1e-7, "{}", c.max_discrepancy());
        assert_eq!(c.verdict, Verdict::DivergentDrift);
        assert_eq!(c.verdict.to_string(), "no asymptotic torus: divergent drift");
        // each doubling of the elapsed time adds about log 2
        let last = *c.doubling_increments.last().unwrap();
        assert!((last - 2f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn constant_drift_is_linear_and_integrable_drift_rejected() {
        let c = counterexample_divergence(0.1, &TimeProfile::Constant(0.25), 2.0, 16.0, 5, 1e-12).unwrap();
        for (t, o) in c.times.iter().zip(&c.offset) {
            assert!((o - 0.25 * t).abs() < 1e-12);
        }
        assert_eq!(c.verdict, Verdict::DivergentDrift);
        let exp = TimeProfile::Decay(DecayFn::exponential(1.0, 1.0).unwrap());
        assert!(matches!(counterexample_divergence(0.1, &exp, 0.0, 10.0, 5, 1e-10), Err(VerifyError::IntegrableDrift(_))));
    }
}
