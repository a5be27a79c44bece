//! The transport equation `omega . d_q kappa + d_t kappa = g` with kappa -> 0 as t -> inf.
//!
//! Each Fourier mode is integrated backwards from infinity. On every grid interval
//! the envelope-normalised coefficient `g_k / env` is replaced by its local cubic
//! interpolant and integrated exactly against `env(t) exp(i theta t)`; past `T_max`
//! the normalised coefficient is frozen and the envelope tail is integrated in
//! closed form (exponential) or by quadrature plus an asymptotic expansion
//! (polynomial).

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decay::{Continuation, DecayFn, Weight};
use crate::field::{sup_norm, weighted_time_norm, FieldError, FourierField, GridField, NormKind, NormSpec};
use crate::timegrid::cubic_window;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("right-hand side envelope is not integrable: {0}")]
    NonIntegrable(String),
    #[error("frequency vector has {found} entries for a field on T^{expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

type Result<T> = std::result::Result<T, HeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeSolution {
    pub kappa: GridField,
    /// Absolute size charged to the frozen-tail model beyond `T_max`.
    pub residual_budget: f64,
    /// `|kappa|_{gbar} / |g|_{g}` in the requested norm.
    pub norm_ratio: f64,
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            let dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, 0.0);
                for j in 0..n {
                    let q2 = q1;
                    q1 = q0;
                    q0 = ((2 * j + 1) as f64 * z * q1 - j as f64 * q2) / (j + 1) as f64;
                }
                let dq = n as f64 * (z * q0 - q1) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

fn gl8() -> &'static (Vec<f64>, Vec<f64>) {
    static NODES: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    NODES.get_or_init(|| gauss_legendre(8))
}

/// `int_0^h s^m exp(z s) ds` for m = 0..=3.
fn exp_moments(z: Complex64, h: f64) -> [Complex64; 4] {
    let zh = z * h;
    let mut out = [Complex64::default(); 4];
    if zh.norm() <= 3.0 {
        for (m, o) in out.iter_mut().enumerate() {
            let mut term = Complex64::new(1.0, 0.0);
            let mut acc = Complex64::new(1.0 / (m + 1) as f64, 0.0);
            for j in 1..80 {
                term *= zh / j as f64;
                let add = term / (m + j + 1) as f64;
                acc += add;
                if add.norm() < 1e-18 * acc.norm() {
                    break;
                }
            }
            *o = acc * h.powi(m as i32 + 1);
        }
    } else {
        let e = zh.exp();
        out[0] = (e - 1.0) / z;
        for m in 1..4 {
            out[m] = (e * h.powi(m as i32) - out[m - 1] * m as f64) / z;
        }
    }
    out
}

/// Composite Gauss–Legendre for `int_a^b f(s) exp(i theta s) ds`.
fn oscillatory_quadrature(a: f64, b: f64, theta: f64, panels: usize, f: impl Fn(f64) -> [f64; 4]) -> [Complex64; 4] {
    let (x, w) = gl8();
    let panels = panels.clamp(1, 1 << 16);
    let width = (b - a) / panels as f64;
    let mut out = [Complex64::default(); 4];
    for p in 0..panels {
        let lo = a + p as f64 * width;
        for (xi, wi) in x.iter().zip(w.iter()) {
            let s = lo + 0.5 * width * (xi + 1.0);
            let e = Complex64::from_polar(0.5 * width * wi, theta * s);
            let v = f(s);
            for m in 0..4 {
                out[m] += e * v[m];
            }
        }
    }
    out
}

fn rising(l: f64, j: usize) -> f64 {
    (0..j).map(|i| l + i as f64).product()
}

/// `int_0^h s^m w(s) exp(i theta s) ds` with `w(s) = env(t + s) / env(t)`.
fn weighted_moments(env: &DecayFn, theta: f64, t: f64, h: f64) -> [Complex64; 4] {
    if let DecayFn::Exponential { rate, .. } = *env {
        return exp_moments(Complex64::new(-rate, theta), h);
    }
    let e0 = env.eval(t);
    let power = match env.asymptotic_law() {
        Continuation::Polynomial { power, .. } if matches!(env, DecayFn::Polynomial { .. }) => Some(power),
        _ => None,
    };
    if let Some(l) = power {
        if theta.abs() * h.min(t) >= 40.0 {
            return polynomial_moments_asymptotic(l, theta, t, h);
        }
    }
    let panels = (theta.abs() * h).ceil() as usize + (8.0 * h / t.abs().max(1e-3)).ceil() as usize;
    oscillatory_quadrature(0.0, h, theta, panels, |s| {
        let w = env.eval(t + s) / e0;
        [w, w * s, w * s * s, w * s * s * s]
    })
}

// Integration by parts at both ends; F(s) = s^m (1 + s/t)^(-l) has derivatives
// shrinking like (l + j) / (|theta| t) and m / (|theta| h).
fn polynomial_moments_asymptotic(l: f64, theta: f64, t: f64, h: f64) -> [Complex64; 4] {
    let it = Complex64::new(0.0, theta);
    let eh = Complex64::from_polar(1.0, theta * h);
    let mut out = [Complex64::default(); 4];
    let wder = |r: usize, s: f64| -> f64 {
        let sign = if r.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * rising(l, r) * t.powi(-(r as i32)) * (1.0 + s / t).powf(-l - r as f64)
    };
    let mder = |m: usize, i: usize, s: f64| -> f64 {
        if i > m {
            0.0
        } else {
            let f: f64 = ((m - i + 1)..=m).map(|x| x as f64).product();
            f * s.powi((m - i) as i32)
        }
    };
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::default();
        let mut denom = it;
        let mut binom_row = vec![1.0f64];
        for j in 0..60 {
            if j > 0 {
                let mut next = vec![1.0; j + 1];
                for i in 1..j {
                    next[i] = binom_row[i - 1] + binom_row[i];
                }
                binom_row = next;
                denom *= it;
            }
            let deriv = |s: f64| -> f64 { (0..=j.min(m)).map(|i| binom_row[i] * mder(m, i, s) * wder(j - i, s)).sum() };
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            let term = (eh * deriv(h) - deriv(0.0)) * sign / denom;
            acc += term;
            if term.norm() < 1e-17 * acc.norm().max(1e-300) && j > m {
                break;
            }
        }
        *o = acc;
    }
    out
}

fn law_tail(law: Continuation, theta: f64, from: f64, origin: f64, norm: f64) -> Complex64 {
    let phase = Complex64::from_polar(1.0, theta * (from - origin));
    match law {
        Continuation::Exponential { rate, scale } => phase * (scale * (-rate * from).exp() / norm) / Complex64::new(rate, -theta),
        Continuation::Polynomial { power, scale } => {
            if theta == 0.0 {
                return Complex64::new(scale * from.powf(1.0 - power) / (power - 1.0) / norm, 0.0);
            }
            let env = |tau: f64| scale * tau.powf(-power) / norm;
            let start = from.max(40.0 * (power + 8.0) / theta.abs());
            let mut acc = Complex64::default();
            if start > from {
                let panels = (theta.abs() * (start - from)).ceil() as usize + (8.0 * (start - from) / from).ceil() as usize;
                let q = oscillatory_quadrature(0.0, start - from, theta, panels, |s| [env(from + s), 0.0, 0.0, 0.0]);
                acc += phase * q[0];
            }
            let it = Complex64::new(0.0, theta);
            let e = Complex64::from_polar(1.0, theta * (start - origin));
            let mut denom = it;
            let mut series = Complex64::default();
            for j in 0..40 {
                if j > 0 {
                    denom *= it;
                }
                let term = -(rising(power, j) * start.powf(-power - j as f64) * scale / norm) / denom;
                series += term;
                if term.norm() < 1e-18 * series.norm() {
                    break;
                }
            }
            acc + e * series
        }
    }
}

/// `int_T^inf exp(i theta (tau - T)) env(tau) / env(T) dtau`.
pub fn tail_factor(env: &DecayFn, theta: f64, t_max: f64) -> Complex64 {
    let norm = env.eval(t_max);
    match env {
        DecayFn::Tabulated(table) => {
            let last = *table.times().last().unwrap();
            if t_max >= last {
                return law_tail(table.continuation(), theta, t_max, t_max, norm);
            }
            let panels = (theta.abs() * (last - t_max)).ceil() as usize + table.times().len() * 4;
            let head = oscillatory_quadrature(0.0, last - t_max, theta, panels, |s| [env.eval(t_max + s) / norm, 0.0, 0.0, 0.0]);
            head[0] + law_tail(table.continuation(), theta, last, t_max, norm)
        }
        _ => law_tail(env.asymptotic_law(), theta, t_max, t_max, norm),
    }
}

// Coefficients of the cubic through (xs, ys) in powers of s.
fn monomial_cubic(xs: &[f64], ys: &[Complex64]) -> [Complex64; 4] {
    let n = xs.len();
    let mut dd: Vec<Complex64> = ys.to_vec();
    for level in 1..n {
        for i in (level..n).rev() {
            dd[i] = (dd[i] - dd[i - 1]) / (xs[i] - xs[i - level]);
        }
    }
    let mut poly = [Complex64::default(); 4];
    poly[0] = dd[n - 1];
    let mut deg = 0;
    for i in (0..n - 1).rev() {
        // poly <- poly * (s - x_i) + dd[i]
        for k in (0..=deg + 1).rev() {
            let lower = if k > 0 { poly[k - 1] } else { Complex64::default() };
            poly[k] = lower - poly[k] * xs[i];
        }
        poly[0] += dd[i];
        deg += 1;
    }
    [poly[0], poly[1], poly[2], poly[3]]
}

/// Backward sweep for one Fourier mode; returns kappa_k at every node.
fn solve_mode(nodes: &[f64], env_vals: &[f64], env: &DecayFn, values: &[Complex64], theta: f64, tail: Complex64) -> Vec<Complex64> {
    let n = nodes.len();
    let r: Vec<Complex64> = values.iter().zip(env_vals.iter()).map(|(v, e)| v / e).collect();
    let mut acc = r[n - 1] * env_vals[n - 1] * tail;
    let mut out = vec![Complex64::default(); n];
    out[n - 1] = -acc;
    for j in (0..n - 1).rev() {
        let h = nodes[j + 1] - nodes[j];
        let start = cubic_window(j, n);
        let width = 4.min(n);
        let xs: Vec<f64> = nodes[start..start + width].iter().map(|x| x - nodes[j]).collect();
        let c = monomial_cubic(&xs, &r[start..start + width]);
        let w = weighted_moments(env, theta, nodes[j], h);
        let local: Complex64 = (0..4).map(|m| c[m] * w[m]).sum::<Complex64>() * env_vals[j];
        acc = local + Complex64::from_polar(1.0, theta * h) * acc;
        out[j] = -acc;
    }
    out
}

fn integrable_envelope(g: &GridField) -> Result<DecayFn> {
    g.envelope()
        .as_integrable()
        .ok_or_else(|| HeError::NonIntegrable(format!("{:?}", g.envelope())))
}

/// Solution operator of the transport equation, without diagnostics.
pub fn solve_transport(g: &GridField, omega: &[f64]) -> Result<GridField> {
    if omega.len() != g.dim() {
        return Err(HeError::DimensionMismatch { expected: g.dim(), found: omega.len() });
    }
    let env = integrable_envelope(g)?;
    let nodes = g.nodes();
    let t_max = g.t_max();
    let env_vals: Vec<f64> = nodes.iter().map(|t| env.eval(*t)).collect();
    let template = &g.slice(0)[0];
    let modes = template.coeffs().len();
    let thetas: Vec<f64> = (0..modes)
        .map(|i| 2.0 * PI * template.mode(i).iter().zip(omega.iter()).map(|(k, w)| *k as f64 * w).sum::<f64>())
        .collect();
    let tails: Vec<Complex64> = thetas.par_iter().map(|th| tail_factor(&env, *th, t_max)).collect();
    let comps = g.components();
    let mut slices: Vec<Vec<FourierField>> = vec![vec![FourierField::zeros(g.dim(), g.band()); comps]; nodes.len()];
    for c in 0..comps {
        let per_mode: Vec<Vec<Complex64>> = (0..modes)
            .into_par_iter()
            .map(|i| {
                let values: Vec<Complex64> = g.slices().iter().map(|s| s[c].coeffs()[i]).collect();
                if values.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
                    vec![Complex64::default(); nodes.len()]
                } else {
                    solve_mode(nodes, &env_vals, &env, &values, thetas[i], tails[i])
                }
            })
            .collect();
        for (j, slice) in slices.iter_mut().enumerate() {
            let coeffs = slice[c].coeffs_mut();
            for i in 0..modes {
                coeffs[i] = per_mode[i][j];
            }
            slice[c].symmetrize();
        }
    }
    Ok(GridField::new(nodes.to_vec(), slices, Weight::Tail(env))?)
}

/// Solves the transport equation and reports the tail budget and the norm ratio
/// against `tail(env)` / `env` weights in `norm`.
pub fn solve_he(g: &GridField, omega: &[f64], norm: &NormKind) -> Result<HeSolution> {
    let kappa = solve_transport(g, omega)?;
    let env = integrable_envelope(g)?;
    let t_max = g.t_max();
    let last_mass = g.slices().last().unwrap().iter().map(|f| f.l1_norm()).fold(0.0, f64::max);
    let residual_budget = last_mass / env.eval(t_max) * env.tail(t_max);
    let g_norm = weighted_time_norm(g, &NormSpec::new(*norm, Weight::Decay(env.clone())))?;
    let k_norm = weighted_time_norm(&kappa, &NormSpec::new(*norm, Weight::Tail(env)))?;
    let norm_ratio = if g_norm > 0.0 { k_norm / g_norm } else { 0.0 };
    Ok(HeSolution { kappa, residual_budget, norm_ratio })
}

/// `sup |omega . d_q kappa + d_t kappa - g| / env_g` over interior nodes,
/// with `d_t` taken from five-point stencils.
pub fn residual(kappa: &GridField, g: &GridField, omega: &[f64]) -> Result<f64> {
    let transported = kappa.transport(omega)?;
    let diff = transported.sub(g)?;
    let n = diff.nodes().len();
    let (lo, hi) = if n > 4 { (2, n - 2) } else { (0, n) };
    let worst = (lo..hi)
        .into_par_iter()
        .map(|i| {
            let w = g.envelope().eval(diff.nodes()[i]);
            diff.slice(i).iter().map(sup_norm).fold(0.0, f64::max) / w
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timegrid::{nodes, NodeLayout};

    #[test]
    fn gauss_legendre_integrates_degree_fifteen() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = x.iter().zip(w.iter()).map(|(x, w)| w * x.powi(14)).sum();
        assert!((s - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn moments_series_and_closed_form_agree() {
        for z in [Complex64::new(-0.5, 2.9), Complex64::new(-1.0, 0.0), Complex64::new(0.0, 3.1)] {
            let a = exp_moments(z, 1.0);
            // brute force
            let b = oscillatory_quadrature(0.0, 1.0, z.im, 64, |s| {
                let w = (z.re * s).exp();
                [w, w * s, w * s * s, w * s * s * s]
            });
            for m in 0..4 {
                assert!((a[m] - b[m]).norm() < 1e-13, "{z} m={m}");
            }
        }
    }

    #[test]
    fn asymptotic_polynomial_moments_match_quadrature() {
        let (l, theta, t, h) = (2.0, 3.7, 400.0, 14.0);
        let a = polynomial_moments_asymptotic(l, theta, t, h);
        let b = oscillatory_quadrature(0.0, h, theta, 400, |s| {
            let w = (1.0 + s / t).powf(-l);
            [w, w * s, w * s * s, w * s * s * s]
        });
        for m in 0..4 {
            assert!((a[m] - b[m]).norm() < 1e-11 * b[m].norm().max(1.0), "m={m} {} {}", a[m], b[m]);
        }
    }

    #[test]
    fn polynomial_tail_factor_matches_quadrature() {
        let env = DecayFn::polynomial(2.0, 1.0).unwrap();
        let t = 10.0;
        let theta = 0.9;
        let got = tail_factor(&env, theta, t);
        // direct quadrature on [T, 1e4] plus the leading asymptotic term
        let head = oscillatory_quadrature(0.0, 1e4 - t, theta, 20000, |s| [(t / (t + s)).powi(2), 0.0, 0.0, 0.0])[0];
        let far = 1e4;
        let rest = -Complex64::from_polar((t / far).powi(2), theta * (far - t)) / Complex64::new(0.0, theta);
        assert!((got - head - rest).norm() < 1e-7, "{got} vs {}", head + rest);
        assert!((tail_factor(&env, 0.0, t).re - t).abs() < 1e-12);
    }

    #[test]
    fn monomial_cubic_reproduces_cubics() {
        let xs = [-0.4, 0.0, 0.5, 1.3];
        let ys: Vec<Complex64> = xs.iter().map(|x| Complex64::new(1.0 - 2.0 * x + 0.5 * x * x * x, x * x)).collect();
        let c = monomial_cubic(&xs, &ys);
        assert!((c[0] - Complex64::new(1.0, 0.0)).norm() < 1e-13);
        assert!((c[1] - Complex64::new(-2.0, 0.0)).norm() < 1e-13);
        assert!((c[2] - Complex64::new(0.0, 1.0)).norm() < 1e-13);
        assert!((c[3] - Complex64::new(0.5, 0.0)).norm() < 1e-13);
    }

    #[test]
    fn constant_mode_closed_form() {
        let env = DecayFn::exponential(1.0, 1.0).unwrap();
        let g = GridField::from_fn(nodes(NodeLayout::Uniform, 0.0, 7.0, 60), Weight::Decay(env), |t| {
            vec![FourierField::constant(1, 2, (-t).exp())]
        })
        .unwrap();
        let k = solve_transport(&g, &[0.618]).unwrap();
        for (t, s) in k.nodes().iter().zip(k.slices()) {
            assert!((s[0].mean() + (-t).exp()).abs() < 1e-13);
        }
    }
}
