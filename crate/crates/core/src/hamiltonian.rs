//! Hamiltonians `H = omega.p + a(q,t) + b(q,t).p + Q(q,p,t)` with `Q = O(p^2)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay::{sampling_grid, tail_horizon, DecayError, DecayFn, TailSpec};
use crate::field::{FieldError, FourierField, GridField, NormKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("frequency average drifts in time by {0:e}")]
    DriftingFrequency(f64),
    #[error("p-Taylor remainder has a term of degree {0} < 2")]
    LowDegree(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Decay(#[from] DecayError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Scalar time profile multiplying a spatial field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileSpec", into = "ProfileSpec")]
pub enum TimeProfile {
    Constant(f64),
    Decay(DecayFn),
    /// `scale / (shift + t)^power`, possibly non-integrable.
    ShiftedPower { scale: f64, shift: f64, power: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileSpec {
    Const {
        value: f64,
    },
    Exp {
        rate: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Poly {
        power: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Table {
        times: Vec<f64>,
        values: Vec<f64>,
        tail: TailSpec,
    },
    ShiftedPower {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        shift: f64,
        power: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ProfileSpec> for TimeProfile {
    type Error = DecayError;

    fn try_from(spec: ProfileSpec) -> std::result::Result<Self, DecayError> {
        Ok(match spec {
            ProfileSpec::Const { value } => TimeProfile::Constant(value),
            ProfileSpec::Exp { rate, scale } => TimeProfile::Decay(DecayFn::exponential(rate, scale)?),
            ProfileSpec::Poly { power, scale } if power <= 1.0 => TimeProfile::ShiftedPower { scale, shift: 0.0, power },
            ProfileSpec::Poly { power, scale } => TimeProfile::Decay(DecayFn::polynomial(power, scale)?),
            ProfileSpec::Table { times, values, tail } => TimeProfile::Decay(DecayFn::tabulated(times, values, tail)?),
            ProfileSpec::ShiftedPower { scale, shift, power } => {
                if !(power >= 0.0 && scale.is_finite() && shift.is_finite()) {
                    return Err(DecayError::InvalidParameters("shifted power needs power >= 0".into()));
                }
                TimeProfile::ShiftedPower { scale, shift, power }
            }
        })
    }
}

impl From<TimeProfile> for ProfileSpec {
    fn from(p: TimeProfile) -> Self {
        match p {
            TimeProfile::Constant(value) => ProfileSpec::Const { value },
            TimeProfile::Decay(d) => match crate::decay::DecaySpec::from(d) {
                crate::decay::DecaySpec::Exp { rate, scale } => ProfileSpec::Exp { rate, scale },
                crate::decay::DecaySpec::Poly { power, scale } => ProfileSpec::Poly { power, scale },
                crate::decay::DecaySpec::Table { times, values, tail } => ProfileSpec::Table { times, values, tail },
            },
            TimeProfile::ShiftedPower { scale, shift, power } => ProfileSpec::ShiftedPower { scale, shift, power },
        }
    }
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::Constant(v) => *v,
            TimeProfile::Decay(d) => d.eval(t),
            TimeProfile::ShiftedPower { scale, shift, power } => scale * (shift + t).powf(-power),
        }
    }

    /// `int_{t0}^{t1}` of the profile, in closed form.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        match self {
            TimeProfile::Constant(v) => v * (t1 - t0),
            TimeProfile::Decay(d) => d.tail(t0) - d.tail(t1),
            TimeProfile::ShiftedPower { scale, shift, power } => {
                if (*power - 1.0).abs() < 1e-15 {
                    scale * ((shift + t1) / (shift + t0)).ln()
                } else {
                    scale * ((shift + t1).powf(1.0 - power) - (shift + t0).powf(1.0 - power)) / (1.0 - power)
                }
            }
        }
    }

    pub fn is_integrable(&self) -> bool {
        match self {
            TimeProfile::Constant(v) => *v == 0.0,
            TimeProfile::Decay(_) => true,
            TimeProfile::ShiftedPower { scale, power, .. } => *scale == 0.0 || *power > 1.0,
        }
    }

    /// The profile as an integrable envelope.
    pub fn as_decay(&self) -> std::result::Result<DecayFn, DecayError> {
        match self {
            TimeProfile::Decay(d) => Ok(d.clone()),
            TimeProfile::ShiftedPower { power, shift, .. } if *power <= 1.0 || *shift != 0.0 => {
                if *power <= 1.0 {
                    Err(DecayError::NonIntegrable(format!("(t + {shift})^-{power}")))
                } else {
                    Err(DecayError::InvalidParameters("shifted profiles are not envelopes".into()))
                }
            }
            TimeProfile::ShiftedPower { scale, power, .. } => Ok(DecayFn::polynomial(*power, *scale)?),
            TimeProfile::Constant(v) => Err(DecayError::NonIntegrable(format!("constant {v}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub profile: TimeProfile,
    pub field: FourierField,
}

/// Scalar field on T^n x [upsilon, inf): a sum of separable terms or a sampled grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum SpaceTimeField {
    Separable { terms: Vec<Term> },
    Sampled { grid: GridField },
}

impl SpaceTimeField {
    pub fn zero() -> Self {
        SpaceTimeField::Separable { terms: Vec::new() }
    }

    pub fn term(profile: TimeProfile, field: FourierField) -> Self {
        SpaceTimeField::Separable { terms: vec![Term { profile, field }] }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            SpaceTimeField::Separable { terms } => terms.first().map(|t| t.field.dim()),
            SpaceTimeField::Sampled { grid } => Some(grid.dim()),
        }
    }

    pub fn band(&self) -> usize {
        match self {
            SpaceTimeField::Separable { terms } => terms.iter().map(|t| t.field.band()).max().unwrap_or(0),
            SpaceTimeField::Sampled { grid } => grid.band(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            SpaceTimeField::Separable { terms } => {
                terms.iter().all(|t| t.field.is_zero() || matches!(t.profile, TimeProfile::Constant(v) if v == 0.0))
            }
            SpaceTimeField::Sampled { grid } => grid.is_zero(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        match self {
            SpaceTimeField::Separable { terms } => {
                for t in terms {
                    if t.field.dim() != dim {
                        return Err(ModelError::DimensionMismatch { expected: dim, found: t.field.dim() });
                    }
                }
            }
            SpaceTimeField::Sampled { grid } => {
                if grid.dim() != dim || grid.components() != 1 {
                    return Err(ModelError::Invalid("sampled fields must be scalar on T^n".into()));
                }
            }
        }
        Ok(())
    }

    /// Spatial slice at time `t` on the band `band`.
    pub fn slice_at(&self, t: f64, dim: usize, band: usize) -> Result<FourierField> {
        match self {
            SpaceTimeField::Separable { terms } => {
                let mut out = FourierField::zeros(dim, band);
                for term in terms {
                    let p = term.profile.eval(t);
                    if p != 0.0 {
                        out.add_assign_scaled(p, &term.field.rebanded(band));
                    }
                }
                Ok(out)
            }
            SpaceTimeField::Sampled { grid } => Ok(grid.at(t)?.remove(0).rebanded(band)),
        }
    }

    pub fn eval(&self, q: &[f64], t: f64) -> Result<f64> {
        match self {
            SpaceTimeField::Separable { terms } => Ok(terms.iter().map(|term| term.profile.eval(t) * term.field.eval(q)).sum()),
            SpaceTimeField::Sampled { grid } => Ok(grid.at(t)?[0].eval(q)),
        }
    }

    pub fn map_fields(&self, f: impl Fn(&FourierField) -> FourierField) -> Result<SpaceTimeField> {
        Ok(match self {
            SpaceTimeField::Separable { terms } => SpaceTimeField::Separable {
                terms: terms.iter().map(|t| Term { profile: t.profile.clone(), field: f(&t.field) }).collect(),
            },
            SpaceTimeField::Sampled { grid } => {
                SpaceTimeField::Sampled { grid: grid.map(grid.envelope().clone(), |_, s| s.iter().map(&f).collect())? }
            }
        })
    }

    pub fn differentiate(&self, axis: usize) -> Result<SpaceTimeField> {
        if let Some(d) = self.dim() {
            if axis >= d {
                return Err(FieldError::AxisOutOfRange { axis, dim: d }.into());
            }
        }
        self.map_fields(|f| f.differentiate(axis).expect("axis checked"))
    }

    /// The field with its q-average removed at every time.
    pub fn without_mean(&self) -> Result<SpaceTimeField> {
        self.map_fields(|f| {
            let mut g = f.clone();
            let zero = vec![0i64; f.dim()];
            g.set_coeff(&zero, Default::default()).expect("zero mode in band");
            g
        })
    }

    pub fn mean_at(&self, t: f64) -> Result<f64> {
        Ok(match self {
            SpaceTimeField::Separable { terms } => terms.iter().map(|term| term.profile.eval(t) * term.field.mean()).sum(),
            SpaceTimeField::Sampled { grid } => grid.at(t)?[0].mean(),
        })
    }
}

/// `Q(q,p,t) = sum_alpha c_alpha(q,t) p^alpha` with every `|alpha| >= 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PTaylor {
    pub terms: Vec<PTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PTerm {
    pub alpha: Vec<usize>,
    pub coeff: SpaceTimeField,
}

impl PTaylor {
    /// `|p|^2 / 2`.
    pub fn kinetic(dim: usize) -> Self {
        let terms = (0..dim)
            .map(|i| {
                let mut alpha = vec![0; dim];
                alpha[i] = 2;
                PTerm { alpha, coeff: SpaceTimeField::term(TimeProfile::Constant(0.5), FourierField::constant(dim, 0, 1.0)) }
            })
            .collect();
        PTaylor { terms }
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(|t| t.alpha.iter().sum()).max().unwrap_or(0)
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if t.alpha.len() != dim {
                return Err(ModelError::DimensionMismatch { expected: dim, found: t.alpha.len() });
            }
            let deg: usize = t.alpha.iter().sum();
            if deg < 2 {
                return Err(ModelError::LowDegree(deg));
            }
            t.coeff.validate(dim)?;
        }
        Ok(())
    }

    pub fn eval(&self, q: &[f64], p: &[f64], t: f64) -> Result<f64> {
        self.terms.iter().try_fold(0.0, |acc, term| Ok(acc + term.coeff.eval(q, t)? * monomial(p, &term.alpha)))
    }

    /// Coefficient of `p_i p_j` in the Hessian at p = 0: `(1 + delta_ij) c_{e_i + e_j}`.
    fn second_order_index(&self, i: usize, j: usize) -> Option<&PTerm> {
        self.terms.iter().find(|t| {
            let mut target = vec![0usize; t.alpha.len()];
            target[i] += 1;
            target[j] += 1;
            t.alpha == target
        })
    }
}

pub(crate) fn monomial(p: &[f64], alpha: &[usize]) -> f64 {
    p.iter().zip(alpha.iter()).map(|(x, a)| x.powi(*a as i32)).product()
}

/// `d/dp_i p^alpha`.
pub(crate) fn monomial_dp(p: &[f64], alpha: &[usize], i: usize) -> f64 {
    if alpha[i] == 0 {
        return 0.0;
    }
    let mut beta = alpha.to_vec();
    beta[i] -= 1;
    alpha[i] as f64 * monomial(p, &beta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpec", into = "ModelSpec")]
pub struct HamiltonianModel {
    omega: Vec<f64>,
    a: SpaceTimeField,
    b: Vec<SpaceTimeField>,
    q: PTaylor,
    env_a: DecayFn,
    env_b: DecayFn,
    upsilon: f64,
    big_upsilon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub omega: Vec<f64>,
    #[serde(default = "SpaceTimeField::zero")]
    pub a: SpaceTimeField,
    #[serde(default)]
    pub b: Vec<SpaceTimeField>,
    #[serde(rename = "Q")]
    pub q: PTaylor,
    pub env_a: DecayFn,
    pub env_b: DecayFn,
    #[serde(default)]
    pub upsilon: Option<f64>,
    #[serde(default)]
    pub big_upsilon: Option<f64>,
}

impl TryFrom<ModelSpec> for HamiltonianModel {
    type Error = ModelError;

    fn try_from(s: ModelSpec) -> Result<Self> {
        let n = s.omega.len();
        let b = if s.b.is_empty() { vec![SpaceTimeField::zero(); n] } else { s.b };
        let upsilon = s.upsilon.unwrap_or_else(|| s.env_a.domain_start().max(s.env_b.domain_start()));
        let mut model = HamiltonianModel::new(s.omega, s.a, b, s.q, s.env_a, s.env_b, upsilon)?;
        if let Some(u) = s.big_upsilon {
            if u < 1.0 {
                return Err(ModelError::Invalid(format!("Upsilon must be at least 1, got {u}")));
            }
            model.big_upsilon = u;
        }
        Ok(model)
    }
}

impl From<HamiltonianModel> for ModelSpec {
    fn from(m: HamiltonianModel) -> Self {
        ModelSpec {
            omega: m.omega,
            a: m.a,
            b: m.b,
            q: m.q,
            env_a: m.env_a,
            env_b: m.env_b,
            upsilon: Some(m.upsilon),
            big_upsilon: Some(m.big_upsilon),
        }
    }
}

/// Ratios `|d_q a|_{sigma+1, env_a}` and `|b|_{sigma+1, env_b}` measured on a sample window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCertificate {
    pub ratio_a: f64,
    pub ratio_b: f64,
    pub scale_a: f64,
    pub scale_b: f64,
}

/// Per-node spatial data consumed by the solver.
#[derive(Clone, Debug)]
pub struct ModelSlice {
    pub da: Vec<FourierField>,
    pub b: Vec<FourierField>,
    /// `db[j][i] = d_{q_i} b_j`.
    pub db: Vec<Vec<FourierField>>,
    pub q: Vec<SlicePTerm>,
    /// Row-major `n x n`.
    pub mbar0: Vec<FourierField>,
}

#[derive(Clone, Debug)]
pub struct SlicePTerm {
    pub alpha: Vec<usize>,
    pub c: FourierField,
    pub dc: Vec<FourierField>,
}

/// Raw Hamiltonian before the split: `H(q,0,t)`, `d_p H(q,0,t)` and the remainder.
#[derive(Clone, Debug)]
pub struct RawHamiltonian {
    pub h0: SpaceTimeField,
    pub dp_h0: Vec<SpaceTimeField>,
    pub remainder: PTaylor,
    pub env_a: DecayFn,
    pub env_b: DecayFn,
    pub upsilon: f64,
}

fn sample_times(env_a: &DecayFn, env_b: &DecayFn, start: f64, count: usize) -> Vec<f64> {
    let end = tail_horizon(env_a, env_b, start, 1e-6);
    let scale = match (env_a.is_polynomial(), env_b.is_polynomial()) {
        (false, _) | (_, false) => 1.0,
        _ => start.max(1.0),
    };
    sampling_grid(start, end, scale, count)
}

/// Splits a raw Hamiltonian into the normal form; the frequency is the q-average of
/// `d_p H(q,0,t)`, which must not drift in time.
pub fn split(raw: RawHamiltonian) -> Result<HamiltonianModel> {
    let n = raw.dp_h0.len();
    let times = sample_times(&raw.env_a, &raw.env_b, raw.upsilon, 64);
    let mut omega = vec![0.0; n];
    for (i, f) in raw.dp_h0.iter().enumerate() {
        let means: Vec<f64> = times.iter().map(|t| f.mean_at(*t)).collect::<Result<_>>()?;
        let (lo, hi) = means.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), m| (l.min(*m), h.max(*m)));
        if hi - lo > 1e-10 * (1.0 + hi.abs()) {
            return Err(ModelError::DriftingFrequency(hi - lo));
        }
        omega[i] = means[0];
    }
    let a = raw.h0.without_mean()?;
    let b = raw.dp_h0.iter().map(|f| f.without_mean()).collect::<Result<Vec<_>>>()?;
    HamiltonianModel::new(omega, a, b, raw.remainder, raw.env_a, raw.env_b, raw.upsilon)
}

impl HamiltonianModel {
    pub fn new(
        omega: Vec<f64>,
        a: SpaceTimeField,
        b: Vec<SpaceTimeField>,
        q: PTaylor,
        env_a: DecayFn,
        env_b: DecayFn,
        upsilon: f64,
    ) -> Result<Self> {
        let n = omega.len();
        if n == 0 || omega.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::Invalid("frequency vector must be finite and non-empty".into()));
        }
        if b.len() != n {
            return Err(ModelError::DimensionMismatch { expected: n, found: b.len() });
        }
        a.validate(n)?;
        for f in &b {
            f.validate(n)?;
        }
        q.validate(n)?;
        if upsilon < env_a.domain_start() || upsilon < env_b.domain_start() {
            return Err(DecayError::OutOfDomain { t: upsilon, start: env_a.domain_start().max(env_b.domain_start()) }.into());
        }
        let mut model = HamiltonianModel { omega, a, b, q, env_a, env_b, upsilon, big_upsilon: 1.0 };
        model.big_upsilon = model.measure_big_upsilon(&NormKind::default(), 1.0)?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn a(&self) -> &SpaceTimeField {
        &self.a
    }

    pub fn b(&self) -> &[SpaceTimeField] {
        &self.b
    }

    pub fn q(&self) -> &PTaylor {
        &self.q
    }

    pub fn env_a(&self) -> &DecayFn {
        &self.env_a
    }

    pub fn env_b(&self) -> &DecayFn {
        &self.env_b
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    pub fn big_upsilon(&self) -> f64 {
        self.big_upsilon
    }

    pub fn with_envelopes(&self, env_a: DecayFn, env_b: DecayFn) -> Self {
        HamiltonianModel { env_a, env_b, ..self.clone() }
    }

    pub fn band(&self) -> usize {
        let mut band = self.a.band();
        for f in &self.b {
            band = band.max(f.band());
        }
        for t in &self.q.terms {
            band = band.max(t.coeff.band());
        }
        band
    }

    /// The integrable part: a and b removed.
    pub fn tilde_h(&self) -> HamiltonianModel {
        HamiltonianModel { a: SpaceTimeField::zero(), b: vec![SpaceTimeField::zero(); self.dim()], ..self.clone() }
    }

    pub fn is_integrable_form(&self) -> bool {
        self.a.is_zero() && self.b.iter().all(|f| f.is_zero())
    }

    /// `sup |d_p^2 Q|` over the sample window and `|p| <= p_radius`, at least 1.
    pub fn measure_big_upsilon(&self, norm: &NormKind, p_radius: f64) -> Result<f64> {
        let n = self.dim();
        let times = sample_times(&self.env_a, &self.env_b, self.upsilon, 24);
        let raised = norm.raised(2.0);
        let mut worst = 0.0f64;
        for &t in &times {
            let mut entries = vec![0.0f64; n * n];
            for term in &self.q.terms {
                let c = term.coeff.slice_at(t, n, term.coeff.band())?;
                if c.is_zero() {
                    continue;
                }
                let cn = raised.field_norm(&c)?;
                let deg: usize = term.alpha.iter().sum();
                for i in 0..n {
                    for j in 0..n {
                        let factor = term.alpha[i] as f64 * (term.alpha[j] as f64 - if i == j { 1.0 } else { 0.0 });
                        if factor > 0.0 {
                            entries[i * n + j] += factor * p_radius.powi(deg as i32 - 2) * cn;
                        }
                    }
                }
            }
            worst = worst.max(entries.iter().cloned().fold(0.0, f64::max));
            if self.q.terms.iter().all(|t| matches!(t.coeff, SpaceTimeField::Separable { ref terms } if terms.iter().all(|x| matches!(x.profile, TimeProfile::Constant(_))))) {
                break;
            }
        }
        Ok(worst.max(1.0))
    }

    pub fn certify_envelopes(&self, norm: &NormKind) -> Result<EnvelopeCertificate> {
        let n = self.dim();
        let band = self.band();
        let times = sample_times(&self.env_a, &self.env_b, self.upsilon, 48);
        let raised = norm.raised(1.0);
        let mut ratio_a = 0.0f64;
        let mut ratio_b = 0.0f64;
        for &t in &times {
            if !self.a.is_zero() {
                let a = self.a.slice_at(t, n, band)?;
                let da: Vec<FourierField> = a.gradient();
                ratio_a = ratio_a.max(raised.norm(&da)? / self.env_a.eval(t));
            }
            for f in &self.b {
                if !f.is_zero() {
                    let s = f.slice_at(t, n, band)?;
                    ratio_b = ratio_b.max(raised.field_norm(&s)? / self.env_b.eval(t));
                }
            }
        }
        Ok(EnvelopeCertificate { ratio_a, ratio_b, scale_a: 1.0, scale_b: 1.0 })
    }

    /// Rescales the declared envelopes upwards until the certificate ratios are at most 1.
    /// A vanishing `b` leaves `env_b` free; it is then raised until `abar <= env_b`.
    pub fn normalized(&self, norm: &NormKind) -> Result<(HamiltonianModel, EnvelopeCertificate)> {
        let mut cert = self.certify_envelopes(norm)?;
        cert.scale_a = cert.ratio_a.max(1.0);
        let env_a = self.env_a.scaled(cert.scale_a);
        cert.scale_b = if self.b.iter().all(|f| f.is_zero()) {
            let times = sample_times(&env_a, &self.env_b, self.upsilon, 48);
            times.iter().map(|t| env_a.tail(*t) / self.env_b.eval(*t)).fold(1.0, f64::max)
        } else {
            cert.ratio_b.max(1.0)
        };
        let env_b = self.env_b.scaled(cert.scale_b);
        Ok((self.with_envelopes(env_a, env_b), cert))
    }

    /// Spatial data at time `t` on the band `band`.
    pub fn slice(&self, t: f64, band: usize) -> Result<ModelSlice> {
        let n = self.dim();
        let da = if self.a.is_zero() {
            vec![FourierField::zeros(n, 0); n]
        } else {
            self.a.slice_at(t, n, band)?.gradient()
        };
        let mut b = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        for f in &self.b {
            if f.is_zero() {
                b.push(FourierField::zeros(n, 0));
                db.push(vec![FourierField::zeros(n, 0); n]);
            } else {
                let s = f.slice_at(t, n, band)?;
                db.push(s.gradient());
                b.push(s);
            }
        }
        let mut q = Vec::with_capacity(self.q.terms.len());
        for term in &self.q.terms {
            let tb = term.coeff.band().min(band);
            let c = term.coeff.slice_at(t, n, tb)?;
            let dc = c.gradient();
            q.push(SlicePTerm { alpha: term.alpha.clone(), c, dc });
        }
        let mut mbar0 = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let f = match self.q.second_order_index(i, j) {
                    Some(term) => {
                        let factor = if i == j { 2.0 } else { 1.0 };
                        term.coeff.slice_at(t, n, term.coeff.band().min(band))?.scale(factor)
                    }
                    None => FourierField::zeros(n, 0),
                };
                mbar0.push(f);
            }
        }
        Ok(ModelSlice { da, b, db, q, mbar0 })
    }

    /// Precomputed derivative fields for pointwise evaluation of the flow.
    pub fn flow(&self) -> Result<Flow> {
        let n = self.dim();
        let da = (0..n).map(|i| self.a.differentiate(i)).collect::<Result<Vec<_>>>()?;
        let db = self
            .b
            .iter()
            .map(|f| (0..n).map(|i| f.differentiate(i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let dq = self
            .q
            .terms
            .iter()
            .map(|t| (0..n).map(|i| t.coeff.differentiate(i)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Flow { model: self.clone(), da, db, dq })
    }
}

/// Hamiltonian vector field with cached q-derivatives.
#[derive(Clone, Debug)]
pub struct Flow {
    model: HamiltonianModel,
    da: Vec<SpaceTimeField>,
    db: Vec<Vec<SpaceTimeField>>,
    dq: Vec<Vec<SpaceTimeField>>,
}

impl Flow {
    pub fn model(&self) -> &HamiltonianModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// `(dq/dt, dp/dt)` at `(q, p, t)`.
    pub fn vector_field(&self, q: &[f64], p: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut dq = self.model.omega.clone();
        let mut dp = vec![0.0; n];
        for i in 0..n {
            if !self.model.b[i].is_zero() {
                dq[i] += self.model.b[i].eval(q, t)?;
            }
            if !self.model.a.is_zero() {
                dp[i] -= self.da[i].eval(q, t)?;
            }
            for j in 0..n {
                if !self.model.b[j].is_zero() {
                    dp[i] -= self.db[j][i].eval(q, t)? * p[j];
                }
            }
        }
        for (term, dterm) in self.model.q.terms.iter().zip(self.dq.iter()) {
            let c = term.coeff.eval(q, t)?;
            let mono = monomial(p, &term.alpha);
            for i in 0..n {
                dq[i] += c * monomial_dp(p, &term.alpha, i);
                if mono != 0.0 {
                    dp[i] -= dterm[i].eval(q, t)? * mono;
                }
            }
        }
        Ok((dq, dp))
    }

    pub fn energy(&self, q: &[f64], p: &[f64], t: f64) -> Result<f64> {
        let m = &self.model;
        let mut h: f64 = m.omega.iter().zip(p.iter()).map(|(w, x)| w * x).sum();
        h += m.a.eval(q, t)?;
        for (f, x) in m.b.iter().zip(p.iter()) {
            h += f.eval(q, t)? * x;
        }
        Ok(h + m.q.eval(q, p, t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_problem() -> HamiltonianModel {
        let omega = (5f64.sqrt() - 1.0) / 2.0;
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let a = SpaceTimeField::term(TimeProfile::Decay(env.scaled(0.1)), FourierField::cos_mode(1, 4, &[1], 1.0).unwrap());
        HamiltonianModel::new(vec![omega], a, vec![SpaceTimeField::zero()], PTaylor::kinetic(1), env.clone(), env, 0.0).unwrap()
    }

    #[test]
    fn mbar_zero_of_kinetic_term_is_identity() {
        let m = model_problem();
        let s = m.slice(1.0, 4).unwrap();
        assert!((s.mbar0[0].mean() - 1.0).abs() < 1e-15);
        assert_eq!(m.big_upsilon(), 1.0);
    }

    #[test]
    fn vector_field_of_model_problem() {
        let flow = model_problem().flow().unwrap();
        let (q, p, t) = ([0.3], [0.2], 0.5);
        let (dq, dp) = flow.vector_field(&q, &p, t).unwrap();
        let omega = (5f64.sqrt() - 1.0) / 2.0;
        assert!((dq[0] - (omega + 0.2)).abs() < 1e-14);
        let expect = 0.1 * (-0.5f64).exp() * 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * 0.3).sin();
        assert!((dp[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn split_recovers_frequency() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let dp0 = SpaceTimeField::Separable {
            terms: vec![
                Term { profile: TimeProfile::Constant(0.7), field: FourierField::constant(1, 2, 1.0) },
                Term { profile: TimeProfile::Decay(env.clone()), field: FourierField::sin_mode(1, 2, &[1], 1.0).unwrap() },
            ],
        };
        let raw = RawHamiltonian {
            h0: SpaceTimeField::term(TimeProfile::Constant(3.0), FourierField::constant(1, 2, 1.0)),
            dp_h0: vec![dp0],
            remainder: PTaylor::kinetic(1),
            env_a: env.clone(),
            env_b: env.clone(),
            upsilon: 0.0,
        };
        let m = split(raw).unwrap();
        assert!((m.omega()[0] - 0.7).abs() < 1e-15);
        assert!(m.a().is_zero() || m.a().mean_at(2.0).unwrap() == 0.0);
        assert!(m.b()[0].mean_at(1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn drifting_average_is_rejected() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let raw = RawHamiltonian {
            h0: SpaceTimeField::zero(),
            dp_h0: vec![SpaceTimeField::term(TimeProfile::Decay(env.clone()), FourierField::constant(1, 1, 1.0))],
            remainder: PTaylor::kinetic(1),
            env_a: env.clone(),
            env_b: env,
            upsilon: 0.0,
        };
        assert!(matches!(split(raw), Err(ModelError::DriftingFrequency(_))));
    }

    #[test]
    fn low_degree_remainder_is_rejected() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let q = PTaylor {
            terms: vec![PTerm {
                alpha: vec![1],
                coeff: SpaceTimeField::term(TimeProfile::Constant(1.0), FourierField::constant(1, 0, 1.0)),
            }],
        };
        let r = HamiltonianModel::new(vec![0.5], SpaceTimeField::zero(), vec![SpaceTimeField::zero()], q, env.clone(), env, 0.0);
        assert!(matches!(r, Err(ModelError::LowDegree(1))));
    }

    #[test]
    fn normalization_scales_env_a() {
        let m = model_problem();
        let (norm, cert) = m.normalized(&NormKind::Holder { sigma: 1.5 }).unwrap();
        assert!(cert.ratio_a > 1.0);
        let again = norm.certify_envelopes(&NormKind::Holder { sigma: 1.5 }).unwrap();
        assert!(again.ratio_a <= 1.0 + 1e-12);
        // b = 0 leaves env_b free; it is lifted to dominate abar
        assert!(norm.env_b().eval(1.0) >= norm.env_a().tail(1.0) * (1.0 - 1e-12));
    }

    #[test]
    fn model_serde_round_trip() {
        let m = model_problem();
        let s = serde_json::to_string(&m).unwrap();
        let back: HamiltonianModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
