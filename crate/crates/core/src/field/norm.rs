use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FieldError, FourierField, GridField, Lattice, Result};
use crate::decay::Weight;

/// Space norm applied to each time slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NormKind {
    Holder { sigma: f64 },
    Analytic { s: f64 },
}

impl Default for NormKind {
    fn default() -> Self {
        NormKind::Holder { sigma: 1.5 }
    }
}

impl NormKind {
    pub fn field_norm(&self, f: &FourierField) -> Result<f64> {
        match *self {
            NormKind::Holder { sigma } => holder_norm(f, sigma),
            NormKind::Analytic { s } => analytic_norm(f, s),
        }
    }

    /// Max over components.
    pub fn norm(&self, comps: &[FourierField]) -> Result<f64> {
        vector_norm(self, comps)
    }

    /// Norm with `extra` more derivatives (Hölder) or the same strip (analytic).
    pub fn raised(&self, extra: f64) -> NormKind {
        match *self {
            NormKind::Holder { sigma } => NormKind::Holder { sigma: sigma + extra },
            NormKind::Analytic { s } => NormKind::Analytic { s },
        }
    }

    /// Norm in which outputs are quoted: analytic results lose three quarters of the strip.
    pub fn reporting(&self) -> NormKind {
        match *self {
            NormKind::Holder { sigma } => NormKind::Holder { sigma },
            NormKind::Analytic { s } => NormKind::Analytic { s: s / 4.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NormKind::Holder { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(FieldError::InvalidNorm(format!("sigma must be non-negative, got {sigma}")))
            }
            NormKind::Analytic { s } if !(s > 0.0 && s.is_finite()) => {
                Err(FieldError::InvalidNorm(format!("analytic width must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub weight: Weight,
}

impl NormSpec {
    pub fn new(kind: NormKind, weight: Weight) -> Self {
        NormSpec { kind, weight }
    }
}

pub fn vector_norm(kind: &NormKind, comps: &[FourierField]) -> Result<f64> {
    comps.iter().try_fold(0.0f64, |m, f| Ok(m.max(kind.field_norm(f)?)))
}

pub fn analytic_norm(f: &FourierField, s: f64) -> Result<f64> {
    f.analytic_norm(s)
}

fn solve_small(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<f64> = a.to_vec();
    let mut x: Vec<f64> = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
        }
        x.swap(col, piv);
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    Some(x)
}

fn negative_definite(h: &[f64], n: usize) -> bool {
    // Cholesky of -h
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = -h[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

// Newton ascent of sign * f from a lattice point; never returns less than the start value.
fn refine_max(f: &FourierField, x0: &[f64], sign: f64, cell: f64, lip: f64) -> f64 {
    let n = f.dim();
    let mut x = x0.to_vec();
    let (v0, mut g, mut h) = f.eval_derivs(&x);
    let mut best = sign * v0;
    for _ in 0..60 {
        let gs: Vec<f64> = g.iter().map(|v| sign * v).collect();
        let hs: Vec<f64> = h.iter().map(|v| sign * v).collect();
        let mut step = if negative_definite(&hs, n) {
            let neg: Vec<f64> = gs.iter().map(|v| -v).collect();
            solve_small(&hs, &neg).unwrap_or_else(|| gs.iter().map(|v| v / lip).collect())
        } else {
            gs.iter().map(|v| v / lip).collect()
        };
        let len = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // a step this short changes the value below rounding
        if len < 1e-9 * cell {
            break;
        }
        if len > cell {
            step.iter_mut().for_each(|v| *v *= cell / len);
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            let (vn, gn, hn) = f.eval_derivs(&xn);
            if sign * vn >= best {
                moved = sign * vn > best || t * len < 1e-15;
                best = sign * vn;
                x = xn;
                g = gn;
                h = hn;
                break;
            }
            t *= 0.5;
        }
        if !moved || t * len < 1e-14 {
            break;
        }
    }
    best
}

/// Sup norm of a trigonometric polynomial: lattice search refined by Newton ascent.
pub fn sup_norm(f: &FourierField) -> f64 {
    if f.is_constant() {
        return f.mean().abs();
    }
    let n = (8 * f.band()).max(16);
    let lattice = Lattice::new(f.dim(), n);
    let vals = lattice.values(f);
    let grid_max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if grid_max == 0.0 && f.l1_norm() == 0.0 {
        return 0.0;
    }
    let mut candidates: Vec<usize> = (0..vals.len())
        .filter(|&i| {
            let a = vals[i].abs();
            a >= 0.9 * grid_max
                && (0..f.dim()).all(|d| {
                    a >= vals[lattice.neighbour(i, d, true)].abs() && a >= vals[lattice.neighbour(i, d, false)].abs()
                })
        })
        .collect();
    candidates.sort_by(|&a, &b| vals[b].abs().partial_cmp(&vals[a].abs()).unwrap());
    candidates.truncate(16);
    let k = 2.0 * std::f64::consts::PI * f.band() as f64;
    let lip = (k * k * f.l1_norm()).max(1e-300);
    let cell = 1.0 / n as f64;
    candidates
        .iter()
        .map(|&i| {
            let sign = if vals[i] >= 0.0 { 1.0 } else { -1.0 };
            refine_max(f, &lattice.point(i), sign, cell, lip)
        })
        .fold(grid_max, f64::max)
}

fn multi_indices(dim: usize, order: usize) -> Vec<Vec<usize>> {
    if dim == 1 {
        return vec![vec![order]];
    }
    let mut out = Vec::new();
    for first in 0..=order {
        for mut rest in multi_indices(dim - 1, order - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn derivative(f: &FourierField, alpha: &[usize]) -> FourierField {
    let mut g = f.clone();
    for (axis, &count) in alpha.iter().enumerate() {
        for _ in 0..count {
            g = g.differentiate(axis).expect("axis in range");
        }
    }
    g
}

/// Hölder norm estimator: max of derivative sups up to order k plus the dyadic
/// axis-direction seminorm of the k-th derivatives when sigma is fractional.
pub fn holder_norm(f: &FourierField, sigma: f64) -> Result<f64> {
    NormKind::Holder { sigma }.validate()?;
    let k = sigma.floor() as usize;
    let mu = sigma - k as f64;
    let mut sup = 0.0f64;
    let mut top = Vec::new();
    for order in 0..=k {
        for alpha in multi_indices(f.dim(), order) {
            let d = derivative(f, &alpha);
            sup = sup.max(sup_norm(&d));
            if order == k {
                top.push(d);
            }
        }
    }
    if mu < 1e-12 {
        return Ok(sup);
    }
    let levels = ((8 * f.band().max(1)) as f64).log2().ceil() as i32 + 1;
    // Screen every (derivative, axis, level) on one lattice: dyadic shifts that are
    // whole lattice steps cost nothing there. A degree-K polynomial exceeds its
    // lattice maximum by at most cos(pi K / n)^-dim, so only screened values within
    // that factor of the running best need the full sup search.
    let n = (8 * f.band()).max(16);
    let lattice = Lattice::new(f.dim(), n);
    let slack = (std::f64::consts::PI * f.band() as f64 / n as f64).cos().powi(-(f.dim() as i32));
    let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
    for (di, d) in top.iter().enumerate() {
        if d.is_constant() {
            continue;
        }
        let vals = lattice.values(d);
        for axis in 0..f.dim() {
            for j in 1..=levels {
                let h = 0.5f64.powi(j);
                let steps = h * n as f64;
                let screened = if steps.fract() == 0.0 {
                    let s = steps as usize;
                    let m = (0..vals.len()).fold(0.0f64, |m, i| m.max((vals[lattice.shifted(i, axis, s)] - vals[i]).abs()));
                    m * slack / h.powf(mu)
                } else {
                    f64::INFINITY
                };
                candidates.push((screened, di, axis, h));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut semi = 0.0f64;
    for (bound, di, axis, h) in candidates {
        if bound <= semi {
            break;
        }
        let diff = top[di].map_modes(|kv, c| c * (Complex64::from_polar(1.0, kv[axis] * h) - 1.0));
        semi = semi.max(sup_norm(&diff) / h.powf(mu));
    }
    Ok(sup + semi)
}

/// `sup_t |F^t| / weight(t)` over the grid nodes.
pub fn weighted_time_norm(field: &GridField, spec: &NormSpec) -> Result<f64> {
    spec.kind.validate()?;
    let per_node: Vec<Result<f64>> = field
        .nodes()
        .par_iter()
        .zip(field.slices().par_iter())
        .map(|(t, slice)| {
            let w = spec.weight.eval(*t);
            if !(w > 0.0) {
                return Err(FieldError::InvalidGrid(format!("weight vanishes at t = {t}")));
            }
            Ok(vector_norm(&spec.kind, slice)? / w)
        })
        .collect();
    per_node.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sup_of_shifted_cosine_is_exact() {
        // maximum deliberately off the lattice
        let f = FourierField::cos_mode(1, 16, &[16], 1.0).unwrap().shift(&[0.0037]).unwrap();
        assert!((sup_norm(&f) - 1.0).abs() < 1e-12);
        let g = FourierField::cos_mode(2, 5, &[5, -3], 2.0).unwrap().shift(&[0.011, 0.029]).unwrap();
        assert!((sup_norm(&g) - 2.0).abs() < 1e-11);
    }

    #[test]
    fn holder_of_cosine() {
        let f = FourierField::cos_mode(1, 4, &[1], 1.0).unwrap();
        assert!((holder_norm(&f, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((holder_norm(&f, 1.0).unwrap() - 2.0 * PI).abs() < 1e-10);
        // mu = 1/2: sup of 2 pi |sin(pi h)| * 2 / sqrt(h) over dyadic h is at h = 1/2 or 1/4
        let expect = 2.0 * PI + 2.0 * PI * 2.0 * 2f64.sqrt();
        assert!((holder_norm(&f, 1.5).unwrap() - expect).abs() < 1e-9);
        assert!(holder_norm(&f, -1.0).is_err());
    }

    #[test]
    fn analytic_norm_of_cosine() {
        let f = FourierField::cos_mode(1, 4, &[1], 1.0).unwrap();
        assert!((analytic_norm(&f, 0.1).unwrap() - (0.2 * PI).exp()).abs() < 1e-14);
        let wide = FourierField::cos_mode(1, 200, &[1], 1.0).unwrap();
        assert!(matches!(analytic_norm(&wide, 1.0), Err(FieldError::NumericRange(_))));
    }

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(3, 2).len(), 6);
    }
}
