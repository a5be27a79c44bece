//! Scenario documents and the check-decay → solve → certify → verify pipeline.

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay::{check_sharp, SharpReport};
use crate::field::{holder_norm, FourierField};
use crate::hamiltonian::{HamiltonianModel, SpaceTimeField, TimeProfile};
use crate::solver::{
    certify_decay, solve_torus, torus_field_model, Escalation, IterationTrace, SolverConfig, SolverError, Status, TorusFamily, Trend,
};
use crate::verify::{
    asymptotic_defect, conjugacy_sweep, counterexample_divergence, extend_backward, gronwall_bound, lagrangian_defect, VerifyError,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub problem: Problem,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: Vec<Check>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Seed for randomized property checks.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    Hamiltonian {
        model: HamiltonianModel,
    },
    /// `dq/dt = omega + P(q, t)` with `|P^t| <= envelope(t)`.
    TorusField {
        omega: Vec<f64>,
        p: Vec<SpaceTimeField>,
        envelope: TimeProfile,
        #[serde(default)]
        upsilon: f64,
    },
    Counterexample {
        omega: f64,
        phat: TimeProfile,
        #[serde(default)]
        t0: f64,
        horizon: f64,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
}

fn default_points() -> usize {
    60
}

fn default_tol() -> f64 {
    1e-11
}

fn default_factor() -> f64 {
    100.0
}

fn default_samples() -> usize {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    Residual { max: f64 },
    Iterations { max: usize },
    /// Largest of the last two contraction ratios.
    Contraction { max_ratio: f64 },
    ZeroTorus,
    /// Relative change of `C_u`, `C_v` when the node count doubles.
    DecayStability { max_change: f64 },
    Conjugacy {
        horizon: f64,
        phases: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        max_defect: f64,
    },
    Asymptotic {
        horizon: f64,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default)]
        q: Option<Vec<f64>>,
        #[serde(default)]
        max_ratio: Option<f64>,
    },
    Lagrangian,
    Backward {
        offset: f64,
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_factor")]
        factor: f64,
    },
    /// Majorant submultiplicativity and the calibrated Cauchy estimate on seeded random fields.
    NormProperties {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Divergence { max_discrepancy: f64 },
}

impl Check {
    fn label(&self) -> &'static str {
        match self {
            Check::Residual { .. } => "residual",
            Check::Iterations { .. } => "iterations",
            Check::Contraction { .. } => "contraction",
            Check::ZeroTorus => "zero_torus",
            Check::DecayStability { .. } => "decay_stability",
            Check::Conjugacy { .. } => "conjugacy",
            Check::Asymptotic { .. } => "asymptotic",
            Check::Lagrangian => "lagrangian",
            Check::Backward { .. } => "backward",
            Check::NormProperties { .. } => "norm_properties",
            Check::Divergence { .. } => "divergence",
        }
    }

    /// Runs at the solve stage (no trajectories).
    fn is_solver_check(&self) -> bool {
        matches!(self, Check::Residual { .. } | Check::Iterations { .. } | Check::Contraction { .. } | Check::ZeroTorus | Check::DecayStability { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    CheckDecay,
    Solve,
    Verify,
    Counterexample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    CheckDecay,
    Solve,
    Certify,
    Verify,
    Counterexample,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Parse => "parse",
            Stage::CheckDecay => "check-decay",
            Stage::Solve => "solve",
            Stage::Certify => "certify",
            Stage::Verify => "verify",
            Stage::Counterexample => "counterexample",
            Stage::Report => "report",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureClass {
    Input,
    Numerical,
}

#[derive(Debug, Error)]
#[error("{stage} stage: {message}")]
pub struct RunError {
    pub stage: Stage,
    pub class: FailureClass,
    pub message: String,
}

impl RunError {
    fn input(stage: Stage, message: impl Into<String>) -> Self {
        RunError { stage, class: FailureClass::Input, message: message.into() }
    }

    fn solver(stage: Stage, e: SolverError) -> Self {
        let class = match e {
            SolverError::Failed { .. } | SolverError::He(_) => FailureClass::Numerical,
            _ => FailureClass::Input,
        };
        RunError { stage, class, message: e.to_string() }
    }

    fn verify(stage: Stage, e: VerifyError) -> Self {
        let class = match e {
            VerifyError::Invalid(_) | VerifyError::IntegrableDrift(_) | VerifyError::Model(_) => FailureClass::Input,
            _ => FailureClass::Numerical,
        };
        RunError { stage, class, message: e.to_string() }
    }
}

type Result<T> = std::result::Result<T, RunError>;

impl Scenario {
    /// Parses a scenario; schema errors carry the offending field and line/column.
    pub fn from_json(text: &str) -> Result<Scenario> {
        let sc: Scenario = serde_json::from_str(text).map_err(|e| RunError::input(Stage::Parse, format!("line {} column {}: {e}", e.line(), e.column())))?;
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<()> {
        let counter = matches!(self.problem, Problem::Counterexample { .. });
        for (i, c) in self.checks.iter().enumerate() {
            let ok = match c {
                Check::Divergence { .. } => counter,
                Check::NormProperties { .. } => true,
                _ => !counter,
            };
            if !ok {
                return Err(RunError::input(Stage::Parse, format!("checks[{i}]: '{}' does not apply to this problem kind", c.label())));
            }
        }
        if let Problem::TorusField { omega, p, .. } = &self.problem {
            if omega.len() != p.len() {
                return Err(RunError::input(Stage::Parse, format!("problem.p: expected {} components, found {}", omega.len(), p.len())));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check: String,
    pub passed: bool,
    pub value: f64,
    /// `None` for checks without a numeric acceptance threshold.
    pub threshold: Option<f64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySection {
    /// Whether the decay data fits the problem: condition (#) for tori, divergence for counterexamples.
    pub holds: bool,
    pub sharp: Option<SharpReport>,
    pub integrable: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSection {
    pub status: Status,
    pub iterations: usize,
    pub residual: f64,
    pub upsilon_prime: f64,
    pub t_max: f64,
    pub lambda: f64,
    pub big_upsilon: f64,
    pub envelope_scale: (f64, f64),
    pub ratios: Vec<f64>,
    pub escalations: Vec<Escalation>,
    pub zero_torus: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSection {
    pub c_u: f64,
    pub c_v: f64,
    pub u_trend: Trend,
    pub v_trend: Trend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleSection {
    pub verdict: String,
    pub omega: f64,
    pub t0: f64,
    pub horizon: f64,
    pub final_offset: f64,
    pub max_discrepancy: f64,
    pub doubling_increments: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mode: Mode,
    pub problem: String,
    pub seed: u64,
    pub decay: Option<DecaySection>,
    pub solve: Option<SolveSection>,
    pub certificate: Option<CertificateSection>,
    pub counterexample: Option<CounterexampleSection>,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

/// A table written to `curves/<name>.csv` and plotted against its first column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub log_y: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub summary: Summary,
    pub curves: Vec<Curve>,
    pub torus: Option<TorusFamily>,
    pub trace: Option<IterationTrace>,
}

fn outcome(check: &Check, passed: bool, value: f64, threshold: f64, detail: String) -> CheckOutcome {
    let threshold = threshold.is_finite().then_some(threshold);
    CheckOutcome { check: check.label().to_string(), passed, value, threshold, detail }
}

pub fn run(sc: &Scenario, mode: Mode) -> Result<RunOutput> {
    sc.validate()?;
    let kind = match &sc.problem {
        Problem::Hamiltonian { .. } => "hamiltonian",
        Problem::TorusField { .. } => "torus_field",
        Problem::Counterexample { .. } => "counterexample",
    };
    let mut out = RunOutput {
        summary: Summary {
            name: sc.name.clone(),
            mode,
            problem: kind.to_string(),
            seed: sc.seed,
            decay: None,
            solve: None,
            certificate: None,
            counterexample: None,
            checks: Vec::new(),
            passed: false,
        },
        curves: Vec::new(),
        torus: None,
        trace: None,
    };
    let model = match &sc.problem {
        Problem::Counterexample { omega, phat, t0, horizon, points, tol } => {
            out.summary.decay = Some(DecaySection {
                holds: !phat.is_integrable(),
                sharp: None,
                integrable: phat.is_integrable(),
                note: if phat.is_integrable() {
                    "drift profile is integrable: a torus exists, use a torus_field problem".into()
                } else {
                    "drift profile is not integrable".into()
                },
            });
            if mode == Mode::CheckDecay {
                out.summary.passed = !phat.is_integrable();
                return Ok(out);
            }
            counterexample_stage(sc, &mut out, *omega, phat, *t0, *horizon, *points, *tol)?;
            return Ok(finish(out));
        }
        _ if mode == Mode::Counterexample => {
            return Err(RunError::input(Stage::Parse, format!("problem.kind: '{kind}' scenario has no counterexample to run")));
        }
        Problem::Hamiltonian { model } => model.clone(),
        Problem::TorusField { omega, p, envelope, upsilon } => {
            torus_field_model(omega, p, envelope, *upsilon).map_err(|e| RunError::solver(Stage::CheckDecay, e))?
        }
    };

    let sharp = check_sharp(model.env_a(), model.env_b(), model.upsilon(), 256).map_err(|e| RunError::input(Stage::CheckDecay, e.to_string()))?;
    out.summary.decay = Some(DecaySection {
        holds: sharp.holds,
        integrable: true,
        note: if sharp.holds { "condition (#) holds".into() } else { "condition (#) fails".into() },
        sharp: Some(sharp.clone()),
    });
    if mode == Mode::CheckDecay || !sharp.holds {
        out.summary.passed = sharp.holds;
        return Ok(out);
    }

    let cfg = &sc.solver;
    let (y, trace) = solve_torus(&model, cfg).map_err(|e| RunError::solver(Stage::Solve, e))?;
    let ratios = trace.ratios();
    out.summary.solve = Some(SolveSection {
        status: trace.status,
        iterations: trace.iterations,
        residual: trace.residual,
        upsilon_prime: trace.upsilon_prime,
        t_max: trace.t_max,
        lambda: trace.lambda,
        big_upsilon: trace.big_upsilon,
        envelope_scale: trace.envelope_scale,
        ratios: ratios.clone(),
        escalations: trace.escalations.clone(),
        zero_torus: y.is_zero(),
    });
    out.curves.push(Curve {
        name: "residual_history".into(),
        columns: vec!["step".into(), "residual".into(), "delta".into()],
        rows: trace.steps.iter().map(|s| vec![s.step as f64, s.residual_f1.max(s.residual_f2), s.delta]).collect(),
        log_y: true,
    });

    let cert = certify_decay(&y, y.env_a(), y.env_b(), &cfg.norm).map_err(|e| RunError::solver(Stage::Certify, e))?;
    out.summary.certificate = Some(CertificateSection { c_u: cert.c_u, c_v: cert.c_v, u_trend: cert.u_trend, v_trend: cert.v_trend });
    out.curves.push(Curve {
        name: "decay".into(),
        columns: vec!["t".into(), "u_over_bbar".into(), "v_over_abar".into()],
        rows: y.nodes().iter().enumerate().map(|(i, t)| vec![*t, cert.u_ratios[i], cert.v_ratios[i]]).collect(),
        log_y: false,
    });

    let flow = model.flow().map_err(|e| RunError::input(Stage::Verify, e.to_string()))?;
    for check in &sc.checks {
        if mode == Mode::Solve && !check.is_solver_check() {
            continue;
        }
        let stage = if check.is_solver_check() { Stage::Certify } else { Stage::Verify };
        let o = match check {
            Check::Residual { max } => {
                outcome(check, trace.residual <= *max, trace.residual, *max, format!("status {:?} after {} iterations", trace.status, trace.iterations))
            }
            Check::Iterations { max } => outcome(check, trace.iterations <= *max, trace.iterations as f64, *max as f64, String::new()),
            Check::Contraction { max_ratio } => {
                let trailing = ratios.iter().rev().take(2).cloned().fold(0.0, f64::max);
                outcome(check, trailing <= *max_ratio, trailing, *max_ratio, format!("ratios {ratios:?}"))
            }
            Check::ZeroTorus => {
                let ok = y.is_zero() && trace.iterations == 0 && trace.residual == 0.0;
                outcome(check, ok, trace.residual, 0.0, format!("u = v = 0: {}", y.is_zero()))
            }
            Check::DecayStability { max_change } => {
                let fine = SolverConfig { nodes: 2 * cfg.nodes, ..cfg.clone() };
                let (y2, _) = solve_torus(&model, &fine).map_err(|e| RunError::solver(stage, e))?;
                let c2 = certify_decay(&y2, y2.env_a(), y2.env_b(), &cfg.norm).map_err(|e| RunError::solver(stage, e))?;
                let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) };
                let change = rel(cert.c_u, c2.c_u).max(rel(cert.c_v, c2.c_v));
                let bounded = [cert.u_trend, cert.v_trend, c2.u_trend, c2.v_trend].iter().all(|t| *t == Trend::Bounded);
                let finite = cert.c_u.is_finite() && cert.c_v.is_finite();
                outcome(
                    check,
                    finite && bounded && change <= *max_change,
                    change,
                    *max_change,
                    format!("C_u {:.6e} -> {:.6e}, C_v {:.6e} -> {:.6e} at {} nodes", cert.c_u, c2.c_u, cert.c_v, c2.c_v, fine.nodes),
                )
            }
            Check::Conjugacy { horizon, phases, tol, max_defect } => {
                let up = y.upsilon_prime();
                let sweep = conjugacy_sweep(&flow, &y, *phases, up, up + horizon, *tol, 80).map_err(|e| RunError::verify(stage, e))?;
                let l = sweep.reports.iter().map(|r| r.lipschitz).fold(0.0, f64::max);
                let bound = gronwall_bound(*tol, trace.residual, *horizon, l);
                if let Some(first) = sweep.reports.first() {
                    let rows = (0..first.curve.len())
                        .map(|i| vec![first.curve[i].0, sweep.reports.iter().map(|r| r.curve[i].1).fold(0.0, f64::max)])
                        .collect();
                    out.curves.push(Curve { name: "conjugacy".into(), columns: vec!["t".into(), "max_defect".into()], rows, log_y: true });
                }
                outcome(
                    check,
                    sweep.max_defect <= *max_defect,
                    sweep.max_defect,
                    *max_defect,
                    format!("{phases} phases, spread {:.3}, measured L {l:.4}, a-posteriori bound {bound:.3e}", sweep.spread),
                )
            }
            Check::Asymptotic { horizon, points, tol, q, max_ratio } => {
                let q = q.clone().unwrap_or_else(|| vec![0.3; model.dim()]);
                let curve = asymptotic_defect(&flow, &y, &q, y.upsilon_prime(), *horizon, *tol, *points).map_err(|e| RunError::verify(stage, e))?;
                let chain = curve.chain_holds(1e-9);
                let limit = max_ratio.unwrap_or(f64::INFINITY);
                let ok = chain && curve.envelope_ratio.is_finite() && curve.envelope_ratio <= limit;
                out.curves.push(Curve {
                    name: "asymptotic".into(),
                    columns: vec!["t".into(), "distance".into(), "conjugacy".into(), "embedding_offset".into()],
                    rows: (0..curve.times.len())
                        .map(|i| vec![curve.times[i], curve.distance[i], curve.conjugacy[i], curve.embedding_offset[i]])
                        .collect(),
                    log_y: true,
                });
                outcome(check, ok, curve.envelope_ratio, limit, format!("chain inequality holds: {chain}"))
            }
            Check::Lagrangian => lagrangian_check(check, &y, &mut out.curves).map_err(|e| RunError::verify(stage, e))?,
            Check::Backward { offset, tol, factor } => {
                let t = y.upsilon_prime() - offset;
                let mut worst = 0.0f64;
                for q0 in [0.0, 0.3, 0.77] {
                    let q = vec![q0; model.dim()];
                    worst = worst.max(extend_backward(&flow, &y, t, &q, *tol).map_err(|e| RunError::verify(stage, e))?.round_trip);
                }
                outcome(check, worst <= factor * tol, worst, factor * tol, format!("round trip from t = {t:.4}"))
            }
            Check::NormProperties { samples } => norm_properties(check, sc.seed, *samples),
            Check::Divergence { .. } => unreachable!("validated"),
        };
        out.summary.checks.push(o);
    }
    out.torus = Some(y);
    out.trace = Some(trace);
    Ok(finish(out))
}

fn finish(mut out: RunOutput) -> RunOutput {
    let decay_ok = out.summary.decay.as_ref().is_none_or(|d| d.holds);
    let solve_ok = out.summary.solve.as_ref().is_none_or(|s| s.status != Status::Failed);
    out.summary.passed = decay_ok && solve_ok && out.summary.checks.iter().all(|c| c.passed);
    out
}

#[allow(clippy::too_many_arguments)]
fn counterexample_stage(sc: &Scenario, out: &mut RunOutput, omega: f64, phat: &TimeProfile, t0: f64, horizon: f64, points: usize, tol: f64) -> Result<()> {
    let curve = counterexample_divergence(omega, phat, t0, horizon, points, tol).map_err(|e| RunError::verify(Stage::Counterexample, e))?;
    out.summary.counterexample = Some(CounterexampleSection {
        verdict: curve.verdict.to_string(),
        omega,
        t0,
        horizon,
        final_offset: *curve.offset.last().unwrap_or(&0.0),
        max_discrepancy: curve.max_discrepancy(),
        doubling_increments: curve.doubling_increments.clone(),
    });
    out.curves.push(Curve {
        name: "lift_offset".into(),
        columns: vec!["t".into(), "offset".into(), "integrated".into()],
        rows: (0..curve.times.len()).map(|i| vec![curve.times[i], curve.offset[i], curve.integrated[i]]).collect(),
        log_y: false,
    });
    for check in &sc.checks {
        let o = match check {
            Check::Divergence { max_discrepancy } => {
                let gap = curve.max_discrepancy();
                let ok = gap <= *max_discrepancy && curve.verdict == crate::verify::Verdict::DivergentDrift;
                outcome(check, ok, gap, *max_discrepancy, curve.verdict.to_string())
            }
            Check::NormProperties { samples } => norm_properties(check, sc.seed, *samples),
            _ => unreachable!("validated"),
        };
        out.summary.checks.push(o);
    }
    Ok(())
}

fn lagrangian_check(check: &Check, y: &TorusFamily, curves: &mut Vec<Curve>) -> std::result::Result<CheckOutcome, VerifyError> {
    let c1 = |fs: &[FourierField]| fs.iter().try_fold(0.0f64, |m, f| Ok::<f64, VerifyError>(m.max(holder_norm(f, 1.0)?)));
    let (mut rows, mut sup_ratio, mut sup_bound, mut under, mut vacuous) = (Vec::new(), 0.0f64, 0.0f64, true, false);
    for &t in y.nodes() {
        let d = lagrangian_defect(y, t)?;
        vacuous = d.is_vacuous();
        let w = y.env_a().tail(t) + y.env_b().tail(t);
        // |V|_{C1} |U - U0|_{C1} + |U0|_{C1} |V - V0|_{C1} with U0 = id, V0 = 0
        let v = c1(&y.v().at(t)?)?;
        let bound = v * c1(&y.u().at(t)?)? + v;
        under &= d.value <= bound;
        sup_ratio = sup_ratio.max(d.value / w);
        sup_bound = sup_bound.max(bound / w);
        rows.push(vec![t, d.value, d.value / w, bound]);
    }
    curves.push(Curve {
        name: "lagrangian".into(),
        columns: vec!["t".into(), "defect".into(), "ratio".into(), "proof_bound".into()],
        rows,
        log_y: true,
    });
    if vacuous {
        return Ok(outcome(check, true, 0.0, f64::INFINITY, "vacuous for n = 1 (no pairs i < j)".into()));
    }
    let ok = under && sup_ratio.is_finite() && sup_ratio <= sup_bound;
    Ok(outcome(check, ok, sup_ratio, sup_bound, format!("defect below the proof bound at every node: {under}")))
}

fn random_field(rng: &mut ChaCha8Rng, dim: usize, band: usize) -> FourierField {
    let mut f = FourierField::zeros(dim, band);
    for _ in 0..rng.gen_range(1..=5) {
        let k: Vec<i64> = (0..dim).map(|_| rng.gen_range(-(band as i64)..=band as i64)).collect();
        let c = num_complex::Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let neg: Vec<i64> = k.iter().map(|x| -x).collect();
        let a = f.coeff(&k);
        f.set_coeff(&k, a + c).expect("in band");
        let b = f.coeff(&neg);
        f.set_coeff(&neg, b + c.conj()).expect("in band");
    }
    f
}

fn norm_properties(check: &Check, seed: u64, samples: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mult, mut cauchy) = (0.0f64, 0.0f64);
    let mut failed = None;
    for _ in 0..samples {
        let dim = rng.gen_range(1..=2);
        let (f, g, h) = (random_field(&mut rng, dim, 4), random_field(&mut rng, dim, 4), random_field(&mut rng, dim, 6));
        let s = rng.gen_range(0.05..0.3);
        let sigma = rng.gen_range(0.01..s);
        let axis = rng.gen_range(0..dim);
        let ratios = (|| -> std::result::Result<(f64, f64), crate::field::FieldError> {
            let m = f.multiply(&g)?.analytic_norm(s)? / (f.analytic_norm(s)? * g.analytic_norm(s)?);
            let c = h.differentiate(axis)?.analytic_norm(s - sigma)? * std::f64::consts::E * sigma / h.analytic_norm(s)?;
            Ok((m, c))
        })();
        match ratios {
            Ok((m, c)) => {
                mult = mult.max(m);
                cauchy = cauchy.max(c);
            }
            Err(e) => failed = Some(e.to_string()),
        }
    }
    let worst = mult.max(cauchy);
    let detail = match failed {
        Some(e) => format!("norm evaluation failed: {e}"),
        None => format!("max |fg|/(|f||g|) {mult:.6}, max Cauchy ratio {cauchy:.6} over {samples} samples"),
    };
    outcome(check, worst <= 1.0 + 1e-12 && detail.starts_with("max"), worst, 1.0, detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_errors_name_the_field() {
        let e = Scenario::from_json(r#"{"name": "x", "problem": {"kind": "hamiltonian", "modle": {}}}"#).unwrap_err();
        assert_eq!(e.stage, Stage::Parse);
        assert!(e.message.contains("modle"), "{}", e.message);
        assert!(e.message.contains("line 1"));
    }

    #[test]
    fn misplaced_checks_are_rejected() {
        let text = r#"{"name": "c", "problem": {"kind": "counterexample", "omega": 0.6, "phat": {"kind": "shifted_power", "shift": 1, "power": 1}, "horizon": 100},
            "checks": [{"kind": "lagrangian"}]}"#;
        let e = Scenario::from_json(text).unwrap_err();
        assert!(e.message.contains("checks[0]"), "{}", e.message);
    }

    #[test]
    fn counterexample_scenario_reports_divergence() {
        let text = r#"{"name": "c", "problem": {"kind": "counterexample", "omega": 0.6, "phat": {"kind": "shifted_power", "shift": 1, "power": 1}, "horizon": 1000},
            "checks": [{"kind": "divergence", "max_discrepancy": 1e-6}]}"#;
        let sc = Scenario::from_json(text).unwrap();
        let out = run(&sc, Mode::Verify).unwrap();
        assert!(out.summary.passed);
        assert_eq!(out.summary.counterexample.unwrap().verdict, "no asymptotic torus: divergent drift");
        assert!(matches!(run(&sc, Mode::CheckDecay).unwrap().summary.decay, Some(DecaySection { integrable: false, .. })));
    }

    #[test]
    fn non_integrable_torus_field_is_an_input_error() {
        let text = r#"{"name": "t", "problem": {"kind": "torus_field", "omega": [0.6],
            "p": [{"form": "separable", "terms": [{"profile": {"kind": "shifted_power", "shift": 1, "power": 1}, "field": {"dim": 1, "band": 0, "coeffs": [[[0], 1, 0]]}}]}],
            "envelope": {"kind": "shifted_power", "shift": 1, "power": 1}}}"#;
        let sc = Scenario::from_json(text).unwrap();
        let e = run(&sc, Mode::Solve).unwrap_err();
        assert_eq!((e.stage, e.class), (Stage::CheckDecay, FailureClass::Input));
        assert!(e.message.contains("not integrable"));
    }
}
