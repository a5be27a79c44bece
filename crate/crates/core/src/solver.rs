//! The torus functional `F = (F1, F2)`, its frozen linearisation at zero and the
//! quasi-Newton iteration `y <- y - DF(0)^{-1} F(y)`.
//!
//! Writing `F = R + L` with `L y = (mbar0 v - grad u . Omega, grad v . Omega)` the
//! linear part at zero, the step is `y_{j+1} = -DF(0)^{-1} R(y_j)`: algebraically the
//! same map, but the transport operator is only ever inverted, never applied to an
//! iterate. The stencil-based `eval_f` is kept for the reported residual.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay::{check_sharp, choose_upsilon, DecayError, DecayFn, Weight};
use crate::field::{weighted_time_norm, FieldError, FourierField, GridField, Lattice, NormKind, NormSpec, PointBasis};
use crate::hamiltonian::{monomial, monomial_dp, HamiltonianModel, ModelError, ModelSlice, PTaylor, SpaceTimeField};
use crate::homological::{solve_transport, HeError};
use crate::timegrid::{nodes as make_nodes, NodeLayout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error("condition (#) fails for the envelopes (lambda_min = {lambda_min})")]
    Sharp { lambda_min: f64 },
    #[error("drift envelope is not integrable ({0}); no asymptotic torus exists, see counterexample_divergence")]
    NonIntegrableDrift(String),
    #[error("solver failed ({kind:?}): {message}")]
    Failed { kind: FailureKind, message: String, trace: Box<IterationTrace> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    He(#[from] HeError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Decay(#[from] DecayError),
}

type Result<T> = std::result::Result<T, SolverError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    HorizonExhausted,
    Invariant,
    MaxIterations,
    ResidualFloor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub norm: NormKind,
    pub band: usize,
    pub nodes: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub contraction_cap: f64,
    pub budget: f64,
    pub t_max: Option<f64>,
    pub upsilon_prime: Option<f64>,
    pub max_escalations: usize,
    /// Radius of the ball `|y| <= p_ball` in the product norm.
    pub p_ball: f64,
    pub normalize_envelopes: bool,
    /// `T_max` default: both tails down to this fraction of their value at `upsilon'`.
    pub tail_ratio: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            norm: NormKind::default(),
            band: 16,
            nodes: 200,
            tol: 1e-8,
            max_iter: 50,
            contraction_cap: 0.5,
            budget: 0.01,
            t_max: None,
            upsilon_prime: None,
            max_escalations: 8,
            p_ball: 1.0,
            normalize_envelopes: true,
            tail_ratio: 1e-3,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        let bad = |m: &str| Err(SolverError::Config(m.into()));
        if self.band == 0 {
            return bad("band must be positive");
        }
        if self.nodes < 8 {
            return bad("need at least 8 time intervals");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.contraction_cap > 0.0 && self.contraction_cap < 1.0) {
            return bad("contraction_cap must lie in (0, 1)");
        }
        if !(self.budget > 0.0) || !(self.p_ball > 0.0) || !(self.tail_ratio > 0.0 && self.tail_ratio < 1.0) {
            return bad("budget, p_ball and tail_ratio must be positive (tail_ratio < 1)");
        }
        Ok(())
    }
}

/// `phi^t(q) = (q + u(q,t), v(q,t))` on `[upsilon', T_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusFamily {
    u: GridField,
    v: GridField,
    upsilon_prime: f64,
    env_a: DecayFn,
    env_b: DecayFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub min_det: f64,
    pub sup_u: f64,
    pub sup_v: f64,
}

impl TorusFamily {
    pub fn zero(nodes: Vec<f64>, dim: usize, band: usize, env_a: DecayFn, env_b: DecayFn) -> Self {
        let u = GridField::zeros(nodes.clone(), dim, band, dim, Weight::Tail(env_b.clone()));
        let v = GridField::zeros(nodes.clone(), dim, band, dim, Weight::Tail(env_a.clone()));
        TorusFamily { u, v, upsilon_prime: nodes[0], env_a, env_b }
    }

    pub fn new(u: GridField, v: GridField, env_a: DecayFn, env_b: DecayFn) -> Result<Self> {
        if u.nodes() != v.nodes() || u.components() != u.dim() || v.components() != v.dim() || u.dim() != v.dim() {
            return Err(SolverError::Config("u and v must be R^n-valued on a shared grid".into()));
        }
        let y = TorusFamily {
            upsilon_prime: u.t_min(),
            u: u.with_envelope(Weight::Tail(env_b.clone())),
            v: v.with_envelope(Weight::Tail(env_a.clone())),
            env_a,
            env_b,
        };
        let rep = y.invariants();
        if rep.min_det < 0.1 || rep.sup_u > 0.25 {
            return Err(SolverError::Field(FieldError::NotNearIdentity(rep.sup_u)));
        }
        Ok(y)
    }

    pub fn u(&self) -> &GridField {
        &self.u
    }

    pub fn v(&self) -> &GridField {
        &self.v
    }

    pub fn upsilon_prime(&self) -> f64 {
        self.upsilon_prime
    }

    pub fn env_a(&self) -> &DecayFn {
        &self.env_a
    }

    pub fn env_b(&self) -> &DecayFn {
        &self.env_b
    }

    pub fn dim(&self) -> usize {
        self.u.dim()
    }

    pub fn nodes(&self) -> &[f64] {
        self.u.nodes()
    }

    pub fn is_zero(&self) -> bool {
        self.u.is_zero() && self.v.is_zero()
    }

    /// `phi^t(q)`; past `T_max` the envelope tail model is used.
    pub fn embed(&self, q: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = self.u.at(t)?;
        let v = self.v.at(t)?;
        let x = q.iter().zip(u.iter()).map(|(x, f)| x + f.eval(q)).collect();
        let p = v.iter().map(|f| f.eval(q)).collect();
        Ok((x, p))
    }

    /// Minimum of `det(I + d_q u)` and the sups of `u`, `v` over the collocation lattice.
    pub fn invariants(&self) -> InvariantReport {
        let n = self.dim();
        let lattice = Lattice::for_band(n, 2 * self.u.band().max(1));
        let per_node: Vec<(f64, f64, f64)> = (0..self.nodes().len())
            .into_par_iter()
            .map(|i| {
                let u = self.u.slice(i);
                let v = self.v.slice(i);
                let jac: Vec<Vec<f64>> = (0..n)
                    .flat_map(|r| (0..n).map(move |c| (r, c)))
                    .map(|(r, c)| lattice.values(&u[r].differentiate(c).expect("axis in range")))
                    .collect();
                let mut min_det = f64::INFINITY;
                for p in 0..lattice.len() {
                    let m: Vec<f64> = (0..n * n).map(|e| jac[e][p] + if e / n == e % n { 1.0 } else { 0.0 }).collect();
                    min_det = min_det.min(determinant(&m, n));
                }
                let sup = |fs: &[FourierField]| {
                    fs.iter().map(|f| lattice.values(f).iter().fold(0.0f64, |m, x| m.max(x.abs()))).fold(0.0, f64::max)
                };
                (min_det, sup(u), sup(v))
            })
            .collect();
        per_node.iter().fold(InvariantReport { min_det: f64::INFINITY, sup_u: 0.0, sup_v: 0.0 }, |r, x| InvariantReport {
            min_det: r.min_det.min(x.0),
            sup_u: r.sup_u.max(x.1),
            sup_v: r.sup_v.max(x.2),
        })
    }

    /// `max(|u|_{sigma, bbar}, |v|_{sigma, abar})`.
    pub fn product_norm(&self, norm: &NormKind) -> Result<f64> {
        let nu = weighted_time_norm(&self.u, &NormSpec::new(*norm, Weight::Tail(self.env_b.clone())))?;
        let nv = weighted_time_norm(&self.v, &NormSpec::new(*norm, Weight::Tail(self.env_a.clone())))?;
        Ok(nu.max(nv))
    }

    fn difference(&self, other: &TorusFamily) -> Result<TorusFamily> {
        Ok(TorusFamily { u: self.u.sub(&other.u)?, v: self.v.sub(&other.v)?, ..self.clone() })
    }
}

pub(crate) fn determinant(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            let mut a = m.to_vec();
            let mut det = 1.0;
            for c in 0..n {
                let p = (c..n).max_by(|&i, &j| a[i * n + c].abs().partial_cmp(&a[j * n + c].abs()).unwrap()).unwrap();
                if a[p * n + c] == 0.0 {
                    return 0.0;
                }
                if p != c {
                    for k in 0..n {
                        a.swap(p * n + k, c * n + k);
                    }
                    det = -det;
                }
                det *= a[c * n + c];
                for r in c + 1..n {
                    let f = a[r * n + c] / a[c * n + c];
                    for k in c..n {
                        a[r * n + k] -= f * a[c * n + k];
                    }
                }
            }
            det
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    EscalatedUpsilon,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub upsilon_prime: f64,
    /// `|y_j - y_{j-1}|` in the product norm.
    pub delta: f64,
    pub y_norm: f64,
    pub residual_f1: f64,
    pub residual_f2: f64,
    /// `F(y_j)` with the transport applied exactly: `R(y_j) - R(y_{j-1})`.
    pub consistent_residual: f64,
    /// `delta_j / delta_{j-1}`.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub from: f64,
    pub to: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub steps: Vec<StepRecord>,
    pub status: Status,
    pub escalations: Vec<Escalation>,
    pub upsilon_prime: f64,
    pub t_max: f64,
    pub lambda: f64,
    pub big_upsilon: f64,
    /// Declared envelopes are multiplied by these factors before solving.
    pub envelope_scale: (f64, f64),
    /// Iterations of the final attempt.
    pub iterations: usize,
    pub residual: f64,
}

impl IterationTrace {
    /// `ratio[j] = |dy_{j+1}| / |dy_j|` within the final attempt.
    pub fn ratios(&self) -> Vec<f64> {
        self.steps.iter().filter(|s| s.upsilon_prime == self.upsilon_prime).filter_map(|s| s.ratio).collect()
    }
}

/// Model sampled on a time grid.
struct Sampled {
    omega: Vec<f64>,
    nodes: Vec<f64>,
    band: usize,
    slices: Vec<ModelSlice>,
    mbar0: Option<GridField>,
    env_a: DecayFn,
    env_b: DecayFn,
    lattice: Lattice,
    basis_band: usize,
}

impl Sampled {
    fn new(model: &HamiltonianModel, nodes: Vec<f64>, band: usize) -> Result<Self> {
        let slices: Vec<ModelSlice> = nodes
            .par_iter()
            .map(|t| model.slice(*t, band))
            .collect::<std::result::Result<_, ModelError>>()?;
        let n = model.dim();
        let mut basis_band = 0;
        for s in &slices {
            let fields = s.b.iter().chain(s.da.iter()).chain(s.db.iter().flatten());
            let q = s.q.iter().flat_map(|t| std::iter::once(&t.c).chain(t.dc.iter()));
            basis_band = fields.chain(q).map(|f| f.band()).fold(basis_band, usize::max);
        }
        let mbar0 = if slices.iter().all(|s| s.mbar0.iter().all(|f| f.is_zero())) {
            None
        } else {
            let mb = slices.iter().flat_map(|s| s.mbar0.iter()).map(|f| f.band()).max().unwrap_or(0);
            let s = slices.iter().map(|s| s.mbar0.iter().map(|f| f.rebanded(mb)).collect()).collect();
            Some(GridField::new(nodes.clone(), s, Weight::One)?)
        };
        Ok(Sampled {
            omega: model.omega().to_vec(),
            band,
            lattice: Lattice::for_band(n, 2 * band),
            basis_band,
            slices,
            mbar0,
            nodes,
            env_a: model.env_a().clone(),
            env_b: model.env_b().clone(),
        })
    }

    fn dim(&self) -> usize {
        self.omega.len()
    }

    /// `N1 = b o u~ + d_p Q(u~, v)`, `N2 = d_q a o u~ + (d_q b o u~)^T v + d_q Q(u~, v)`
    /// and `mbar0 v`, on the band.
    fn nonlinear(&self, y: &TorusFamily) -> Result<(GridField, GridField, GridField)> {
        let n = self.dim();
        let per_node: Vec<std::result::Result<[Vec<FourierField>; 3], FieldError>> = (0..self.nodes.len())
            .into_par_iter()
            .map(|i| self.nonlinear_slice(&self.slices[i], y.u.slice(i), y.v.slice(i), self.mbar0.as_ref().map(|m| m.slice(i))))
            .collect();
        let mut n1 = Vec::with_capacity(per_node.len());
        let mut n2 = Vec::with_capacity(per_node.len());
        let mut mv = Vec::with_capacity(per_node.len());
        for r in per_node {
            let [a, b, c] = r?;
            n1.push(a);
            n2.push(b);
            mv.push(c);
        }
        let _ = n;
        Ok((
            GridField::new(self.nodes.clone(), n1, Weight::Decay(self.env_b.clone()))?,
            GridField::new(self.nodes.clone(), n2, Weight::Decay(self.env_a.clone()))?,
            GridField::new(self.nodes.clone(), mv, Weight::Decay(self.env_b.clone()))?,
        ))
    }

    fn nonlinear_slice(
        &self,
        ms: &ModelSlice,
        u: &[FourierField],
        v: &[FourierField],
        mbar0: Option<&[FourierField]>,
    ) -> std::result::Result<[Vec<FourierField>; 3], FieldError> {
        let n = self.dim();
        let lat = &self.lattice;
        let len = lat.len();
        let uvals: Vec<Vec<f64>> = u.iter().map(|f| lat.values(f)).collect();
        let sup = uvals.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        if sup >= 0.25 {
            return Err(FieldError::NotNearIdentity(sup));
        }
        let vvals: Vec<Vec<f64>> = v.iter().map(|f| lat.values(f)).collect();
        let points: Vec<Vec<f64>> = (0..len)
            .map(|p| lat.point(p).iter().enumerate().map(|(d, x)| x + uvals[d][p]).collect())
            .collect();
        let basis = PointBasis::new(&points, self.basis_band);
        let at = |f: &FourierField| -> Option<Vec<f64>> { if f.is_zero() { None } else { Some(basis.eval(f)) } };
        let mut n1 = vec![vec![0.0; len]; n];
        let mut n2 = vec![vec![0.0; len]; n];
        for i in 0..n {
            if let Some(b) = at(&ms.b[i]) {
                n1[i].iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
            if let Some(da) = at(&ms.da[i]) {
                n2[i].iter_mut().zip(da).for_each(|(x, y)| *x += y);
            }
            for j in 0..n {
                if let Some(db) = at(&ms.db[j][i]) {
                    for p in 0..len {
                        n2[i][p] += db[p] * vvals[j][p];
                    }
                }
            }
        }
        let v_zero = v.iter().all(|f| f.is_zero());
        if !v_zero {
            let mut pv = vec![0.0; n];
            for term in &ms.q {
                let c = at(&term.c);
                let dc: Vec<Option<Vec<f64>>> = term.dc.iter().map(at).collect();
                for p in 0..len {
                    for (d, x) in pv.iter_mut().enumerate() {
                        *x = vvals[d][p];
                    }
                    let mono = monomial(&pv, &term.alpha);
                    for i in 0..n {
                        if let Some(c) = &c {
                            n1[i][p] += c[p] * monomial_dp(&pv, &term.alpha, i);
                        }
                        if let Some(dc) = &dc[i] {
                            n2[i][p] += dc[p] * mono;
                        }
                    }
                }
            }
        }
        let mut mv = vec![vec![0.0; len]; n];
        if let (Some(m), false) = (mbar0, v_zero) {
            for i in 0..n {
                for j in 0..n {
                    let f = &m[i * n + j];
                    if f.is_zero() {
                        continue;
                    }
                    let vals = lat.values(f);
                    for p in 0..len {
                        mv[i][p] += vals[p] * vvals[j][p];
                    }
                }
            }
        }
        let project = |vals: Vec<Vec<f64>>| -> Vec<FourierField> { vals.iter().map(|v| lat.project(v, self.band)).collect() };
        Ok([project(n1), project(n2), project(mv)])
    }

    /// `DF(0)^{-1}(z, g) = (he(mbar0 he(g) - z), he(g))`.
    fn inverse(&self, z: &GridField, g: &GridField) -> Result<(GridField, GridField)> {
        let v_hat = solve_transport(g, &self.omega)?;
        let rhs = match &self.mbar0 {
            None => z.scale(-1.0),
            Some(m) => product(m, &v_hat, self.band, Weight::Decay(self.env_b.clone()))?.sub(z)?,
        };
        let u_hat = solve_transport(&rhs.with_envelope(Weight::Decay(self.env_b.clone())), &self.omega)?;
        Ok((u_hat, v_hat))
    }

    fn family(&self, u: GridField, v: GridField) -> TorusFamily {
        TorusFamily {
            u: u.with_envelope(Weight::Tail(self.env_b.clone())),
            v: v.with_envelope(Weight::Tail(self.env_a.clone())),
            upsilon_prime: self.nodes[0],
            env_a: self.env_a.clone(),
            env_b: self.env_b.clone(),
        }
    }
}

/// Matrix-vector product `m v` formed in Fourier space, rebanded to `band`.
fn product(m: &GridField, v: &GridField, band: usize, envelope: Weight) -> Result<GridField> {
    let n = v.components();
    let slices: Vec<Vec<FourierField>> = (0..v.nodes().len())
        .into_par_iter()
        .map(|i| {
            let (ms, vs) = (m.slice(i), v.slice(i));
            (0..n)
                .map(|r| {
                    let mut acc = FourierField::zeros(v.dim(), band);
                    for c in 0..n {
                        if !ms[r * n + c].is_zero() && !vs[c].is_zero() {
                            acc.add_assign_scaled(1.0, &ms[r * n + c].multiply(&vs[c])?.rebanded(band));
                        }
                    }
                    Ok(acc)
                })
                .collect::<std::result::Result<Vec<_>, FieldError>>()
        })
        .collect::<std::result::Result<_, FieldError>>()?;
    Ok(GridField::new(v.nodes().to_vec(), slices, envelope)?)
}

/// Linear bound `|u_hat| <= C Upsilon Lambda |g| + |z|` as measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEstimate {
    pub u_norm: f64,
    pub v_norm: f64,
    pub z_norm: f64,
    pub g_norm: f64,
    /// Measured `sup |m v| / (|m| |v|)` over the nodes.
    pub c_bar: f64,
    pub lambda: f64,
    pub big_upsilon: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizedSolution {
    pub u_hat: GridField,
    pub v_hat: GridField,
    pub estimate: LinearEstimate,
}

/// Solves `grad v . Omega = g`, `grad u . Omega = mbar0 v - z` for decaying `(u, v)`.
/// `z` must carry a `Decay(b)` envelope and `g` a `Decay(a)` envelope with (a, b)
/// satisfying condition (#); `mbar0` is the row-major `n x n` matrix field.
pub fn invert_linearized(
    mbar0: &GridField,
    z: &GridField,
    g: &GridField,
    omega: &[f64],
    norm: &NormKind,
    big_upsilon: f64,
) -> Result<LinearizedSolution> {
    let (env_b, env_a) = match (z.envelope(), g.envelope()) {
        (Weight::Decay(b), Weight::Decay(a)) => (b.clone(), a.clone()),
        _ => return Err(SolverError::Config("z and g need decay envelopes".into())),
    };
    let n = g.components();
    if z.components() != n || mbar0.components() != n * n || z.nodes() != g.nodes() || mbar0.nodes() != g.nodes() {
        return Err(SolverError::Config("z, g and mbar0 must share the grid and be n, n, n*n valued".into()));
    }
    let sharp = check_sharp(&env_a, &env_b, g.t_min(), 128)?;
    if !sharp.holds {
        return Err(SolverError::Sharp { lambda_min: sharp.lambda_min });
    }
    let band = g.band().max(z.band());
    let v_hat = solve_transport(g, omega)?;
    let mv = if mbar0.is_zero() {
        GridField::zeros(g.nodes().to_vec(), g.dim(), band, n, Weight::Decay(env_b.clone()))
    } else {
        product(mbar0, &v_hat, band, Weight::Decay(env_b.clone()))?
    };
    let rhs = mv.sub(&z.rebanded(band))?;
    let u_hat = solve_transport(&rhs, omega)?;

    let c_bar = if mbar0.is_zero() {
        0.0
    } else {
        let per_node: Vec<f64> = (0..g.nodes().len())
            .into_par_iter()
            .map(|i| {
                let m = norm.norm(mbar0.slice(i)).unwrap_or(0.0);
                let v = norm.norm(v_hat.slice(i)).unwrap_or(0.0);
                let p = norm.norm(mv.slice(i)).unwrap_or(0.0);
                if m * v > 0.0 { p / (m * v) } else { 0.0 }
            })
            .collect();
        per_node.into_iter().fold(0.0, f64::max)
    };
    let w = |f: &GridField, weight: Weight| weighted_time_norm(f, &NormSpec::new(*norm, weight));
    let u_norm = w(&u_hat, Weight::Tail(env_b.clone()))?;
    let v_norm = w(&v_hat, Weight::Tail(env_a.clone()))?;
    let z_norm = w(z, Weight::Decay(env_b))?;
    let g_norm = w(g, Weight::Decay(env_a))?;
    let lambda = sharp.lambda_min.max(0.0);
    let holds = v_norm <= g_norm * (1.0 + 1e-6) + 1e-300 && u_norm <= (c_bar * big_upsilon * lambda * g_norm + z_norm) * (1.0 + 1e-6) + 1e-300;
    Ok(LinearizedSolution {
        u_hat,
        v_hat,
        estimate: LinearEstimate { u_norm, v_norm, z_norm, g_norm, c_bar, lambda, big_upsilon, holds },
    })
}

/// `(F1, F2)` at `y`, with the time derivative from five-point stencils.
pub fn eval_f(model: &HamiltonianModel, y: &TorusFamily) -> Result<(GridField, GridField)> {
    if model.dim() != y.dim() {
        return Err(SolverError::Config("torus and model dimensions differ".into()));
    }
    let model = model.with_envelopes(y.env_a.clone(), y.env_b.clone());
    let sampled = Sampled::new(&model, y.nodes().to_vec(), y.u.band())?;
    eval_f_sampled(&sampled, y)
}

fn eval_f_sampled(s: &Sampled, y: &TorusFamily) -> Result<(GridField, GridField)> {
    let (n1, n2, _) = s.nonlinear(y)?;
    let f1 = n1.sub(&y.u.transport(&s.omega)?.rebanded(s.band))?;
    let f2 = n2.add(&y.v.transport(&s.omega)?.rebanded(s.band))?;
    Ok((f1, f2))
}

fn residual_norms(s: &Sampled, f1: &GridField, f2: &GridField, norm: &NormKind) -> Result<(f64, f64)> {
    let r1 = weighted_time_norm(f1, &NormSpec::new(*norm, Weight::Decay(s.env_b.clone())))?;
    let r2 = weighted_time_norm(f2, &NormSpec::new(*norm, Weight::Decay(s.env_a.clone())))?;
    Ok((r1, r2))
}

fn default_t_max(a: &DecayFn, b: &DecayFn, start: f64, ratio: f64) -> f64 {
    let reach = |d: &DecayFn| {
        let target = ratio * d.tail(start);
        let mut hi = start + 1.0;
        while d.tail(hi) > target {
            hi = start + 2.0 * (hi - start);
        }
        let mut lo = start;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if d.tail(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    reach(a).max(reach(b))
}

fn combo_max(b: &DecayFn, lambda: f64, t: f64) -> f64 {
    b.tail(t).max(lambda * b.eval(t)).max(lambda * lambda * b.eval(t) * b.tail(t))
}

fn layout_for(a: &DecayFn, b: &DecayFn) -> NodeLayout {
    if a.is_polynomial() || b.is_polynomial() {
        NodeLayout::Geometric
    } else {
        NodeLayout::Uniform
    }
}

enum Attempt {
    Done(TorusFamily),
    /// Retry from a later start; `kind` is reported if no later start is available.
    Escalate(String, FailureKind),
}

/// Quasi-Newton iteration from `y = 0` with contraction monitoring and
/// escalation of the start time.
pub fn solve_torus(model: &HamiltonianModel, cfg: &SolverConfig) -> Result<(TorusFamily, IterationTrace)> {
    cfg.validate()?;
    let (model, scale) = if cfg.normalize_envelopes {
        let (m, cert) = model.normalized(&cfg.norm)?;
        (m, (cert.scale_a, cert.scale_b))
    } else {
        (model.clone(), (1.0, 1.0))
    };
    let (env_a, env_b) = (model.env_a().clone(), model.env_b().clone());
    let sharp = check_sharp(&env_a, &env_b, model.upsilon(), 256)?;
    if !sharp.holds {
        return Err(SolverError::Sharp { lambda_min: sharp.lambda_min });
    }
    let lambda = sharp.lambda_min.max(1e-12);
    let big_upsilon = model.big_upsilon();
    let mut upsilon_prime = match cfg.upsilon_prime {
        Some(u) => u.max(model.upsilon()),
        None => choose_upsilon(&env_a, &env_b, lambda, cfg.budget / big_upsilon)?.max(model.upsilon()),
    };
    let t_max = cfg.t_max.unwrap_or_else(|| default_t_max(&env_a, &env_b, upsilon_prime, cfg.tail_ratio));
    if !(t_max > upsilon_prime) {
        return Err(SolverError::Config(format!("T_max = {t_max} must exceed upsilon' = {upsilon_prime}")));
    }
    let mut trace = IterationTrace {
        steps: Vec::new(),
        status: Status::Failed,
        escalations: Vec::new(),
        upsilon_prime,
        t_max,
        lambda,
        big_upsilon,
        envelope_scale: scale,
        iterations: 0,
        residual: f64::NAN,
    };
    let layout = layout_for(&env_a, &env_b);
    loop {
        let grid = make_nodes(layout, upsilon_prime, t_max, cfg.nodes);
        let sampled = Sampled::new(&model, grid, cfg.band)?;
        trace.upsilon_prime = upsilon_prime;
        match iterate(&sampled, cfg, &mut trace)? {
            Attempt::Done(y) => {
                trace.status = if trace.escalations.is_empty() { Status::Converged } else { Status::EscalatedUpsilon };
                return Ok((y, trace));
            }
            Attempt::Escalate(reason, kind) => {
                if trace.escalations.len() >= cfg.max_escalations {
                    return Err(fail(kind, format!("{reason}; escalation limit reached"), trace));
                }
                let beta = combo_max(&env_b, lambda, upsilon_prime);
                let next = choose_upsilon(&env_a, &env_b, lambda, beta / 2.0).unwrap_or(f64::INFINITY).max(upsilon_prime);
                let min_width = 16.0 * (t_max - upsilon_prime) / cfg.nodes as f64;
                if !(next + min_width < t_max) || next <= upsilon_prime {
                    return Err(fail(
                        kind,
                        format!("{reason}; no room left below T_max = {t_max} (next upsilon' = {next})"),
                        trace,
                    ));
                }
                trace.escalations.push(Escalation { from: upsilon_prime, to: next, reason });
                upsilon_prime = next;
            }
        }
    }
}

fn fail(kind: FailureKind, message: String, mut trace: IterationTrace) -> SolverError {
    trace.status = Status::Failed;
    SolverError::Failed { kind, message, trace: Box::new(trace) }
}

fn iterate(s: &Sampled, cfg: &SolverConfig, trace: &mut IterationTrace) -> Result<Attempt> {
    let n = s.dim();
    // analytic iterates are measured on the reduced strip where outputs are quoted
    let norm = cfg.norm.reporting();
    let mut y = TorusFamily::zero(s.nodes.clone(), n, s.band, s.env_a.clone(), s.env_b.clone());
    let (mut n1, mut n2, mut mv) = s.nonlinear(&y)?;
    let (r1, r2) = residual_norms(s, &n1, &n2, &norm)?;
    trace.steps.push(StepRecord {
        step: 0,
        upsilon_prime: s.nodes[0],
        delta: 0.0,
        y_norm: 0.0,
        residual_f1: r1,
        residual_f2: r2,
        consistent_residual: r1.max(r2),
        ratio: None,
    });
    trace.iterations = 0;
    trace.residual = r1.max(r2);
    if r1.max(r2) <= cfg.tol {
        return Ok(Attempt::Done(y));
    }
    let mut prev_delta: Option<f64> = None;
    let mut over_cap = 0;
    let floor = 1e-3 * cfg.tol;
    for step in 1..=cfg.max_iter {
        let z = n1.sub(&mv)?;
        let (u_hat, v_hat) = s.inverse(&z, &n2)?;
        let next = s.family(u_hat.scale(-1.0), v_hat.scale(-1.0));
        let inv = next.invariants();
        if inv.min_det < 0.1 || inv.sup_u >= 0.25 {
            // the unweighted torus shrinks with a later start
            return Ok(Attempt::Escalate(
                format!("step {step}: min det(I + du) = {:.3e}, sup|u| = {:.3e}", inv.min_det, inv.sup_u),
                FailureKind::Invariant,
            ));
        }
        let delta = next.difference(&y)?.product_norm(&norm)?;
        let y_norm = next.product_norm(&norm)?;
        let (m1, m2, mv_next) = s.nonlinear(&next)?;
        let consistent = {
            let c1 = m1.sub(&mv_next)?.sub(&z)?;
            let c2 = m2.sub(&n2)?;
            let (a, b) = residual_norms(s, &c1, &c2, &norm)?;
            a.max(b)
        };
        y = next;
        n1 = m1;
        n2 = m2;
        mv = mv_next;
        let (f1, f2) = eval_f_sampled(s, &y)?;
        let (r1, r2) = residual_norms(s, &f1, &f2, &norm)?;
        let ratio = prev_delta.filter(|p| *p > floor).map(|p| delta / p);
        trace.steps.push(StepRecord {
            step,
            upsilon_prime: s.nodes[0],
            delta,
            y_norm,
            residual_f1: r1,
            residual_f2: r2,
            consistent_residual: consistent,
            ratio,
        });
        trace.iterations = step;
        trace.residual = r1.max(r2);
        if y_norm > cfg.p_ball {
            return Ok(Attempt::Escalate(
                format!("step {step}: |y| = {y_norm:.3e} left the ball of radius {}", cfg.p_ball),
                FailureKind::HorizonExhausted,
            ));
        }
        match ratio {
            Some(r) if r > cfg.contraction_cap && delta > floor => {
                over_cap += 1;
                if over_cap >= 2 {
                    return Ok(Attempt::Escalate(
                        format!("step {step}: contraction ratio {r:.3} above {}", cfg.contraction_cap),
                        FailureKind::HorizonExhausted,
                    ));
                }
            }
            _ => over_cap = 0,
        }
        prev_delta = Some(delta);
        if r1.max(r2) <= cfg.tol && delta <= cfg.tol {
            return Ok(Attempt::Done(y));
        }
        if delta <= 1e-13 * y_norm {
            return Err(fail(
                FailureKind::ResidualFloor,
                format!(
                    "iteration settled at step {step} but the stencil residual {:.3e} exceeds tol {:.1e}; refine the time grid",
                    r1.max(r2),
                    cfg.tol
                ),
                trace.clone(),
            ));
        }
    }
    Err(fail(
        FailureKind::MaxIterations,
        format!("no convergence in {} iterations (residual {:.3e})", cfg.max_iter, trace.residual),
        trace.clone(),
    ))
}

/// Companion `a`-envelope for a lifted torus field: same rate, or one extra power.
fn companion_envelope(p: &DecayFn) -> Result<DecayFn> {
    use crate::decay::Continuation;
    Ok(match p.asymptotic_law() {
        Continuation::Exponential { .. } => p.clone(),
        Continuation::Polynomial { power, scale } => DecayFn::polynomial(power + 1.0, scale)?,
    })
}

/// Torus-field path: `dq/dt = omega + P(q, t)` lifted to `H = omega.p + P.p`.
/// Returns `psi^t = id + u^t`.
pub fn solve_torus_field(omega: &[f64], p: &GridField, cfg: &SolverConfig) -> Result<(GridField, IterationTrace)> {
    let env = p
        .envelope()
        .as_integrable()
        .ok_or_else(|| SolverError::NonIntegrableDrift(format!("{:?}", p.envelope())))?;
    let n = omega.len();
    if p.dim() != n || p.components() != n {
        return Err(SolverError::Config(format!("P must be an R^{n}-valued field on T^{n}")));
    }
    let b = (0..n).map(|c| SpaceTimeField::Sampled { grid: p.component(c) }).collect();
    let env_a = companion_envelope(&env)?;
    let model = HamiltonianModel::new(omega.to_vec(), SpaceTimeField::zero(), b, PTaylor { terms: vec![] }, env_a, env, p.t_min())?;
    let (y, trace) = solve_torus(&model, cfg)?;
    Ok((y.u, trace))
}

/// The lifted Hamiltonian `omega.p + P.p` for a separable drift with a declared profile envelope.
pub fn torus_field_model(
    omega: &[f64],
    p: &[SpaceTimeField],
    envelope: &crate::hamiltonian::TimeProfile,
    upsilon: f64,
) -> Result<HamiltonianModel> {
    let env = envelope.as_decay().map_err(|e| match e {
        DecayError::NonIntegrable(m) => SolverError::NonIntegrableDrift(m),
        other => SolverError::Decay(other),
    })?;
    let env_a = companion_envelope(&env)?;
    Ok(HamiltonianModel::new(omega.to_vec(), SpaceTimeField::zero(), p.to_vec(), PTaylor { terms: vec![] }, env_a, env, upsilon)?)
}

/// Same as [`solve_torus_field`] for separable drifts with a declared profile envelope.
pub fn solve_torus_field_profile(
    omega: &[f64],
    p: &[SpaceTimeField],
    envelope: &crate::hamiltonian::TimeProfile,
    upsilon: f64,
    cfg: &SolverConfig,
) -> Result<(GridField, IterationTrace)> {
    let model = torus_field_model(omega, p, envelope, upsilon)?;
    let (y, trace) = solve_torus(&model, cfg)?;
    Ok((y.u, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Bounded,
    Growing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayCertificate {
    pub c_u: f64,
    pub c_v: f64,
    pub u_trend: Trend,
    pub v_trend: Trend,
    /// Per-node ratios `|u^t| / bbar(t)` and `|v^t| / abar(t)`.
    pub u_ratios: Vec<f64>,
    pub v_ratios: Vec<f64>,
}

fn ratios(f: &GridField, weight: &Weight, norm: &NormKind) -> Result<Vec<f64>> {
    f.nodes()
        .par_iter()
        .zip(f.slices().par_iter())
        .map(|(t, s)| Ok(norm.norm(s)? / weight.eval(*t)))
        .collect()
}

fn trend(r: &[f64]) -> Trend {
    let n = r.len();
    let tail = &r[n - n / 4..];
    let rising = tail.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    if rising && r[n - 1] > 2.0 * r[n / 2] && r[n - 1] > 1e-300 {
        Trend::Growing
    } else {
        Trend::Bounded
    }
}

/// `C_u = sup |u^t| / bbar(t)`, `C_v = sup |v^t| / abar(t)` in the reporting norm.
pub fn certify_decay(y: &TorusFamily, a_env: &DecayFn, b_env: &DecayFn, norm: &NormKind) -> Result<DecayCertificate> {
    let norm = norm.reporting();
    let u_ratios = ratios(&y.u, &Weight::Tail(b_env.clone()), &norm)?;
    let v_ratios = ratios(&y.v, &Weight::Tail(a_env.clone()), &norm)?;
    Ok(DecayCertificate {
        c_u: u_ratios.iter().cloned().fold(0.0, f64::max),
        c_v: v_ratios.iter().cloned().fold(0.0, f64::max),
        u_trend: trend(&u_ratios),
        v_trend: trend(&v_ratios),
        u_ratios,
        v_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::TimeProfile;
    use num_complex::Complex64;

    fn golden() -> f64 {
        (5f64.sqrt() - 1.0) / 2.0
    }

    #[test]
    fn determinant_small() {
        assert_eq!(determinant(&[2.0], 1), 2.0);
        assert_eq!(determinant(&[1.0, 2.0, 3.0, 4.0], 2), -2.0);
        let m = [2.0, 0.0, 1.0, 1.0, 3.0, 0.0, 0.0, 1.0, 4.0];
        assert!((determinant(&m, 3) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_of_identity_mbar_twice_iterates_kernel() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let omega = golden();
        let nodes = make_nodes(NodeLayout::Uniform, 0.0, 12.0, 240);
        let g = GridField::from_fn(nodes.clone(), Weight::Decay(env.clone()), |t| {
            vec![FourierField::cos_mode(1, 2, &[1], (-t).exp()).unwrap()]
        })
        .unwrap();
        let z = GridField::zeros(nodes.clone(), 1, 2, 1, Weight::Decay(env.clone()));
        let m = GridField::from_fn(nodes.clone(), Weight::One, |_| vec![FourierField::constant(1, 0, 1.0)]).unwrap();
        let sol = invert_linearized(&m, &z, &g, &[omega], &NormKind::Holder { sigma: 1.5 }, 1.0).unwrap();
        for (i, t) in nodes.iter().enumerate().step_by(17) {
            for s in [1i64, -1] {
                let d = Complex64::new(1.0, -2.0 * std::f64::consts::PI * omega * s as f64);
                let v = -(-t).exp() / (2.0 * d);
                let u = (-t).exp() / (2.0 * d * d);
                assert!((sol.v_hat.slice(i)[0].coeff(&[s]) - v).norm() < 1e-10);
                assert!((sol.u_hat.slice(i)[0].coeff(&[s]) - u).norm() < 1e-10, "t={t}");
            }
        }
        assert!(sol.estimate.holds);
    }

    #[test]
    fn trivial_model_is_a_fixed_point() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let m = HamiltonianModel::new(vec![golden()], SpaceTimeField::zero(), vec![SpaceTimeField::zero()], PTaylor::kinetic(1), env.clone(), env, 0.0)
            .unwrap();
        let cfg = SolverConfig { band: 4, nodes: 40, ..Default::default() };
        let (y, trace) = solve_torus(&m, &cfg).unwrap();
        assert!(y.is_zero());
        assert_eq!(trace.iterations, 0);
        assert_eq!(trace.residual, 0.0);
        assert_eq!(trace.status, Status::Converged);
    }

    #[test]
    fn constant_drift_is_integrated() {
        let p = SpaceTimeField::term(TimeProfile::Decay(DecayFn::exponential(1.0, 0.2).unwrap()), FourierField::constant(1, 0, 1.0));
        let cfg = SolverConfig { band: 2, nodes: 60, normalize_envelopes: false, upsilon_prime: Some(0.0), ..Default::default() };
        let env = TimeProfile::Decay(DecayFn::exponential(1.0, 1.0).unwrap());
        let (u, _) = solve_torus_field_profile(&[golden()], &[p], &env, 0.0, &cfg).unwrap();
        for (t, s) in u.nodes().iter().zip(u.slices()) {
            assert!((s[0].mean() + 0.2 * (-t).exp()).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn non_integrable_drift_is_rejected() {
        let p = SpaceTimeField::term(TimeProfile::ShiftedPower { scale: 1.0, shift: 1.0, power: 1.0 }, FourierField::constant(1, 0, 1.0));
        let env = TimeProfile::ShiftedPower { scale: 1.0, shift: 1.0, power: 1.0 };
        let r = solve_torus_field_profile(&[0.5], &[p], &env, 0.0, &SolverConfig::default());
        assert!(matches!(r, Err(SolverError::NonIntegrableDrift(_))));
    }
}
