//! Decay envelopes, their tails, condition (#) and the choice of the start time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecayError {
    #[error("invalid decay parameters: {0}")]
    InvalidParameters(String),
    #[error("profile is not integrable on [t, inf): {0}")]
    NonIntegrable(String),
    #[error("time {t} lies outside the domain [{start}, inf)")]
    OutOfDomain { t: f64, start: f64 },
    #[error("envelope vanishes or is not finite at t = {0}")]
    VanishingEnvelope(f64),
    #[error("condition (#) needs at least 16 grid points, got {0}")]
    TooFewPoints(usize),
    #[error("budget {budget} is not reached by {combo} before t = {horizon}")]
    HorizonExhausted { combo: &'static str, budget: f64, horizon: f64 },
}

type Result<T> = std::result::Result<T, DecayError>;

/// Closed-form continuation of a tabulated envelope past its last node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Continuation {
    Exponential { rate: f64, scale: f64 },
    Polynomial { power: f64, scale: f64 },
}

impl Continuation {
    fn eval(&self, t: f64) -> f64 {
        match *self {
            Continuation::Exponential { rate, scale } => scale * (-rate * t).exp(),
            Continuation::Polynomial { power, scale } => scale * t.powf(-power),
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        match *self {
            Continuation::Exponential { rate, .. } => -rate * self.eval(t),
            Continuation::Polynomial { power, .. } => -power * self.eval(t) / t,
        }
    }

    fn tail(&self, t: f64) -> f64 {
        match *self {
            Continuation::Exponential { rate, .. } => self.eval(t) / rate,
            Continuation::Polynomial { power, .. } => self.eval(t) * t / (power - 1.0),
        }
    }

    pub fn as_decay(&self) -> DecayFn {
        match *self {
            Continuation::Exponential { rate, scale } => DecayFn::Exponential { rate, scale },
            Continuation::Polynomial { power, scale } => DecayFn::Polynomial { power, scale },
        }
    }
}

/// Monotone cubic (Fritsch–Carlson) table with a matched closed-form tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    times: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    tail: Continuation,
}

impl Table {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn continuation(&self) -> Continuation {
        self.tail
    }

    fn last(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn locate(&self, t: f64) -> usize {
        match self.times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(self.times.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.times.len() - 2),
        }
    }

    fn hermite(&self, i: usize, t: f64) -> (f64, f64) {
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        let (y0, y1, d0, d1) = (self.values[i], self.values[i + 1], self.slopes[i], self.slopes[i + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let v = (2.0 * s3 - 3.0 * s2 + 1.0) * y0
            + (s3 - 2.0 * s2 + s) * h * d0
            + (-2.0 * s3 + 3.0 * s2) * y1
            + (s3 - s2) * h * d1;
        let dv = ((6.0 * s2 - 6.0 * s) * y0 + (-6.0 * s2 + 6.0 * s) * y1) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * d0
            + (3.0 * s2 - 2.0 * s) * d1;
        (v, dv)
    }

    // exact integral of the Hermite piece i over [t, times[i+1]]
    fn piece_integral_from(&self, i: usize, t: f64) -> f64 {
        let h = self.times[i + 1] - self.times[i];
        let s = ((t - self.times[i]) / h).clamp(0.0, 1.0);
        let anti = |s: f64| {
            let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
            let h00 = s - s3 + 0.5 * s4;
            let h10 = 0.5 * s2 - 2.0 * s3 / 3.0 + 0.25 * s4;
            let h01 = s3 - 0.5 * s4;
            let h11 = -s3 / 3.0 + 0.25 * s4;
            h00 * self.values[i] + h10 * h * self.slopes[i] + h01 * self.values[i + 1] + h11 * h * self.slopes[i + 1]
        };
        h * (anti(1.0) - anti(s))
    }

    fn eval(&self, t: f64) -> f64 {
        if t >= self.last() {
            self.tail.eval(t)
        } else {
            self.hermite(self.locate(t), t).0
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        if t >= self.last() {
            self.tail.derivative(t)
        } else {
            self.hermite(self.locate(t), t).1
        }
    }

    fn tail_integral(&self, t: f64) -> f64 {
        let last = self.last();
        if t >= last {
            return self.tail.tail(t);
        }
        let i = self.locate(t);
        let mut acc = self.piece_integral_from(i, t);
        for j in i + 1..self.times.len() - 1 {
            acc += self.piece_integral_from(j, self.times[j]);
        }
        acc + self.tail.tail(last)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d
}

/// Positive, non-increasing, integrable envelope on its domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DecaySpec", into = "DecaySpec")]
pub enum DecayFn {
    Exponential { rate: f64, scale: f64 },
    Polynomial { power: f64, scale: f64 },
    Tabulated(Table),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TailSpec {
    Exp { rate: f64 },
    Poly { power: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecaySpec {
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
    Table { times: Vec<f64>, values: Vec<f64>, tail: TailSpec },
}

fn one() -> f64 {
    1.0
}

impl TryFrom<DecaySpec> for DecayFn {
    type Error = DecayError;

    fn try_from(spec: DecaySpec) -> Result<Self> {
        match spec {
            DecaySpec::Exp { rate, scale } => DecayFn::exponential(rate, scale),
            DecaySpec::Poly { power, scale } => DecayFn::polynomial(power, scale),
            DecaySpec::Table { times, values, tail } => DecayFn::tabulated(times, values, tail),
        }
    }
}

impl From<DecayFn> for DecaySpec {
    fn from(d: DecayFn) -> Self {
        match d {
            DecayFn::Exponential { rate, scale } => DecaySpec::Exp { rate, scale },
            DecayFn::Polynomial { power, scale } => DecaySpec::Poly { power, scale },
            DecayFn::Tabulated(t) => DecaySpec::Table {
                tail: match t.tail {
                    Continuation::Exponential { rate, .. } => TailSpec::Exp { rate },
                    Continuation::Polynomial { power, .. } => TailSpec::Poly { power },
                },
                times: t.times,
                values: t.values,
            },
        }
    }
}

impl DecayFn {
    pub fn exponential(rate: f64, scale: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(DecayError::InvalidParameters(format!("exponential rate must be positive, got {rate}")));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(DecayError::InvalidParameters(format!("scale must be non-negative, got {scale}")));
        }
        Ok(DecayFn::Exponential { rate, scale })
    }

    pub fn polynomial(power: f64, scale: f64) -> Result<Self> {
        if !power.is_finite() {
            return Err(DecayError::InvalidParameters(format!("power must be finite, got {power}")));
        }
        if power <= 1.0 {
            return Err(DecayError::NonIntegrable(format!("t^-{power} has a divergent tail")));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(DecayError::InvalidParameters(format!("scale must be non-negative, got {scale}")));
        }
        Ok(DecayFn::Polynomial { power, scale })
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>, tail: TailSpec) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(DecayError::InvalidParameters("table needs at least two (time, value) pairs".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(DecayError::InvalidParameters("table times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(DecayError::InvalidParameters("table values must be positive".into()));
        }
        if values.windows(2).any(|w| w[1] > w[0]) {
            return Err(DecayError::InvalidParameters("table values must be non-increasing".into()));
        }
        let (t_last, v_last) = (*times.last().unwrap(), *values.last().unwrap());
        let tail = match tail {
            TailSpec::Exp { rate } => {
                if !(rate > 0.0) {
                    return Err(DecayError::InvalidParameters("continuation rate must be positive".into()));
                }
                Continuation::Exponential { rate, scale: v_last * (rate * t_last).exp() }
            }
            TailSpec::Poly { power } => {
                if power <= 1.0 {
                    return Err(DecayError::NonIntegrable(format!("continuation t^-{power} diverges")));
                }
                if t_last <= 0.0 {
                    return Err(DecayError::InvalidParameters("polynomial continuation needs t > 0".into()));
                }
                Continuation::Polynomial { power, scale: v_last * t_last.powf(power) }
            }
        };
        let junction = tail.eval(t_last);
        if (junction - v_last).abs() > 1e-12 * v_last {
            return Err(DecayError::InvalidParameters("continuation does not match the last node".into()));
        }
        let slopes = pchip_slopes(&times, &values);
        Ok(DecayFn::Tabulated(Table { times, values, slopes, tail }))
    }

    /// Left end of the domain (J_0 for exponentials, J_1 for polynomials).
    pub fn domain_start(&self) -> f64 {
        match self {
            DecayFn::Exponential { .. } => 0.0,
            DecayFn::Polynomial { .. } => 1.0,
            DecayFn::Tabulated(t) => t.times[0],
        }
    }

    pub fn in_domain(&self, t: f64) -> bool {
        t >= self.domain_start()
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            DecayFn::Exponential { rate, scale } => scale * (-rate * t).exp(),
            DecayFn::Polynomial { power, scale } => scale * t.powf(-power),
            DecayFn::Tabulated(table) => table.eval(t),
        }
    }

    pub fn checked_eval(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(self.eval(t))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            DecayFn::Exponential { rate, .. } => -rate * self.eval(t),
            DecayFn::Polynomial { power, .. } => -power * self.eval(t) / t,
            DecayFn::Tabulated(table) => table.derivative(t),
        }
    }

    /// `int_t^inf f(s) ds`.
    pub fn tail(&self, t: f64) -> f64 {
        match self {
            DecayFn::Exponential { rate, .. } => self.eval(t) / rate,
            DecayFn::Polynomial { power, .. } => self.eval(t) * t / (power - 1.0),
            DecayFn::Tabulated(table) => table.tail_integral(t),
        }
    }

    pub fn checked_tail(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(self.tail(t))
    }

    pub fn scaled(&self, factor: f64) -> DecayFn {
        match self {
            DecayFn::Exponential { rate, scale } => DecayFn::Exponential { rate: *rate, scale: scale * factor },
            DecayFn::Polynomial { power, scale } => DecayFn::Polynomial { power: *power, scale: scale * factor },
            DecayFn::Tabulated(t) => {
                let values: Vec<f64> = t.values.iter().map(|v| v * factor).collect();
                let slopes = t.slopes.iter().map(|d| d * factor).collect();
                let tail = match t.tail {
                    Continuation::Exponential { rate, scale } => Continuation::Exponential { rate, scale: scale * factor },
                    Continuation::Polynomial { power, scale } => Continuation::Polynomial { power, scale: scale * factor },
                };
                DecayFn::Tabulated(Table { times: t.times.clone(), values, slopes, tail })
            }
        }
    }

    /// The closed-form law governing the envelope at large times.
    pub fn asymptotic_law(&self) -> Continuation {
        match *self {
            DecayFn::Exponential { rate, scale } => Continuation::Exponential { rate, scale },
            DecayFn::Polynomial { power, scale } => Continuation::Polynomial { power, scale },
            DecayFn::Tabulated(ref t) => t.tail,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self.asymptotic_law(), Continuation::Polynomial { .. })
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if self.in_domain(t) {
            Ok(())
        } else {
            Err(DecayError::OutOfDomain { t, start: self.domain_start() })
        }
    }
}

/// Time weight used by the weighted norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "weight", content = "of", rename_all = "lowercase")]
pub enum Weight {
    One,
    Decay(DecayFn),
    Tail(DecayFn),
}

impl Weight {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Weight::One => 1.0,
            Weight::Decay(d) => d.eval(t),
            Weight::Tail(d) => d.tail(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Weight::One => 0.0,
            Weight::Decay(d) => d.derivative(t),
            Weight::Tail(d) => -d.eval(t),
        }
    }

    /// The weight as an integrable envelope, when it is one.
    pub fn as_integrable(&self) -> Option<DecayFn> {
        match self {
            Weight::One => None,
            Weight::Decay(d) => Some(d.clone()),
            Weight::Tail(d) => match *d {
                DecayFn::Exponential { rate, scale } => Some(DecayFn::Exponential { rate, scale: scale / rate }),
                DecayFn::Polynomial { power, scale } if power > 2.0 => {
                    Some(DecayFn::Polynomial { power: power - 1.0, scale: scale / (power - 1.0) })
                }
                _ => None,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpReport {
    pub holds: bool,
    pub lambda_min: f64,
    pub upsilon_used: f64,
    pub worst_t: f64,
}

fn characteristic_length(d: &DecayFn, start: f64) -> f64 {
    match d.asymptotic_law() {
        Continuation::Exponential { rate, .. } => 1.0 / rate,
        Continuation::Polynomial { .. } => start.max(1.0),
    }
}

/// End of a sampling window past which both tails have lost `ratio` of their mass.
pub fn tail_horizon(a: &DecayFn, b: &DecayFn, start: f64, ratio: f64) -> f64 {
    let (ta, tb) = (a.tail(start), b.tail(start));
    let mut width = 1.0;
    while width < 1e15 {
        let end = start + width;
        if a.tail(end) <= ratio * ta && b.tail(end) <= ratio * tb {
            return end;
        }
        width *= 2.0;
    }
    start + width
}

/// Sample points clustered at `start` and spread geometrically towards `end`.
pub fn sampling_grid(start: f64, end: f64, scale: f64, n: usize) -> Vec<f64> {
    let span = 1.0 + (end - start) / scale;
    (0..n)
        .map(|i| start + scale * (span.powf(i as f64 / (n - 1) as f64) - 1.0))
        .collect()
}

/// Tests condition (#) for the pair (a, b) on a sampled window of [upsilon, inf).
pub fn check_sharp(a: &DecayFn, b: &DecayFn, upsilon: f64, grid_points: usize) -> Result<SharpReport> {
    if grid_points < 16 {
        return Err(DecayError::TooFewPoints(grid_points));
    }
    let start = upsilon.max(a.domain_start()).max(b.domain_start());
    if start > upsilon {
        return Err(DecayError::OutOfDomain { t: upsilon, start });
    }
    let end = tail_horizon(a, b, start, 1e-9);
    let scale = characteristic_length(a, start).min(characteristic_length(b, start));
    let grid = sampling_grid(start, end, scale, grid_points);
    let mut ratios = Vec::with_capacity(grid.len());
    for &t in &grid {
        let (av, bv, abar, bbar) = (a.eval(t), b.eval(t), a.tail(t), b.tail(t));
        if [av, bv, abar, bbar].iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(DecayError::VanishingEnvelope(t));
        }
        ratios.push((abar / bv).max(abar * bv / (av * bbar)));
    }
    let (worst, lambda_min) = ratios
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, r)| if r > acc.1 { (i, r) } else { acc });
    // an unbounded ratio shows up as a maximum pinned at the far end and still rising
    let n = ratios.len();
    let rising = ratios[n - 1] > ratios[n - 2] * (1.0 + 1e-9) && ratios[n - 1] > ratios[n / 2] * (1.0 + 1e-6);
    let holds = lambda_min.is_finite() && !(worst == n - 1 && rising);
    Ok(SharpReport { holds, lambda_min, upsilon_used: start, worst_t: grid[worst] })
}

/// Smallest start time at which the three smallness combinations fall below `budget`.
pub fn choose_upsilon(a: &DecayFn, b: &DecayFn, lambda: f64, budget: f64) -> Result<f64> {
    if !(budget > 0.0) || !(lambda > 0.0) {
        return Err(DecayError::InvalidParameters(format!("budget {budget} and lambda {lambda} must be positive")));
    }
    let start = a.domain_start().max(b.domain_start());
    let combos: [(&'static str, Box<dyn Fn(f64) -> f64 + '_>); 3] = [
        ("bbar", Box::new(|t| b.tail(t))),
        ("lambda*b", Box::new(move |t| lambda * b.eval(t))),
        ("lambda^2*b*bbar", Box::new(move |t| lambda * lambda * b.eval(t) * b.tail(t))),
    ];
    let mut best = start;
    for (name, f) in combos.iter() {
        if f(start) <= budget {
            continue;
        }
        let limit = 1e12;
        let mut lo = start;
        let mut hi = start + 1.0;
        while f(hi) > budget {
            lo = hi;
            hi = start + 2.0 * (hi - start);
            if hi > limit {
                return Err(DecayError::HorizonExhausted { combo: name, budget, horizon: limit });
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best = best.max(hi);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(rate: f64) -> DecayFn {
        DecayFn::exponential(rate, 1.0).unwrap()
    }

    fn poly(power: f64) -> DecayFn {
        DecayFn::polynomial(power, 1.0).unwrap()
    }

    #[test]
    fn closed_form_tails() {
        let e = DecayFn::exponential(2.0, 3.0).unwrap();
        assert!((e.tail(1.5) - 3.0 * (-3.0f64).exp() / 2.0).abs() < 1e-15);
        let p = DecayFn::polynomial(3.0, 1.0).unwrap();
        assert!((p.tail(2.0) - 0.125).abs() < 1e-15);
        assert_eq!(DecayFn::exponential(2.0, 0.0).unwrap().tail(0.0), 0.0);
    }

    #[test]
    fn rejects_non_integrable_power() {
        assert!(matches!(DecayFn::polynomial(1.0, 1.0), Err(DecayError::NonIntegrable(_))));
        assert!(matches!(DecayFn::exponential(-1.0, 1.0), Err(DecayError::InvalidParameters(_))));
    }

    #[test]
    fn polynomial_domain_starts_at_one() {
        assert!(poly(2.0).checked_eval(0.5).is_err());
        assert!(poly(2.0).checked_tail(1.0).is_ok());
    }

    #[test]
    fn table_matches_its_continuation() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let values: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        let d = DecayFn::tabulated(times, values, TailSpec::Exp { rate: 1.0 }).unwrap();
        for t in [0.0, 1.3, 4.1, 9.5, 12.0] {
            assert!((d.eval(t) - (-t).exp()).abs() < 1e-3 * (-t).exp(), "t={t}");
            assert!((d.tail(t) - (-t).exp()).abs() < 1e-3 * (-t).exp(), "t={t}");
        }
    }

    #[test]
    fn sharp_pairs() {
        let r = check_sharp(&exp(2.0), &exp(1.0), 0.0, 64).unwrap();
        assert!(r.holds && r.lambda_min <= 0.5 + 1e-12);
        let r = check_sharp(&poly(3.0), &poly(2.0), 1.0, 64).unwrap();
        assert!(r.holds && r.lambda_min <= 1.0);
        let r = check_sharp(&exp(1.0), &exp(1.0), 0.0, 64).unwrap();
        assert!((r.lambda_min - 1.0).abs() < 1e-12);
        assert!(matches!(check_sharp(&exp(1.0), &exp(1.0), 0.0, 8), Err(DecayError::TooFewPoints(8))));
    }

    #[test]
    fn equal_polynomial_pair_violates_sharp() {
        let r = check_sharp(&poly(2.0), &poly(2.0), 1.0, 64).unwrap();
        assert!(!r.holds);
    }

    #[test]
    fn upsilon_examples() {
        let u = choose_upsilon(&exp(1.0), &exp(1.0), 1.0, 0.01).unwrap();
        assert!((u - 100f64.ln()).abs() < 1e-9);
        let u = choose_upsilon(&poly(3.0), &poly(2.0), 1.0, 0.01).unwrap();
        assert!((u - 100.0).abs() < 1e-8);
        let small = DecayFn::exponential(1.0, 0.5).unwrap();
        assert_eq!(choose_upsilon(&small, &small, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn serde_round_trip() {
        let d = DecayFn::exponential(1.0, 2.0).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"kind":"exp","rate":1.0,"scale":2.0}"#);
        let back: DecayFn = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        assert!(serde_json::from_str::<DecayFn>(r#"{"kind":"poly","power":0.5}"#).is_err());
    }

    #[test]
    fn weight_as_integrable() {
        let w = Weight::Tail(exp(2.0));
        let d = w.as_integrable().unwrap();
        assert!((d.eval(1.0) - w.eval(1.0)).abs() < 1e-15);
        assert!(Weight::Tail(poly(2.0)).as_integrable().is_none());
    }
}
