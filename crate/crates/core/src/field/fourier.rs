use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{FieldError, Result};

const TWO_PI: f64 = 2.0 * PI;
const MAX_COEFFS: usize = 1 << 22;

/// Real-valued trigonometric polynomial on T^n, dense over the box |k|_inf <= band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FieldRecord", into = "FieldRecord")]
pub struct FourierField {
    dim: usize,
    band: usize,
    coeffs: Vec<Complex64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldRecord {
    pub dim: usize,
    pub band: usize,
    pub coeffs: Vec<(Vec<i64>, f64, f64)>,
}

impl TryFrom<FieldRecord> for FourierField {
    type Error = FieldError;

    fn try_from(r: FieldRecord) -> Result<Self> {
        let modes: Vec<(Vec<i64>, Complex64)> = r.coeffs.into_iter().map(|(k, re, im)| (k, Complex64::new(re, im))).collect();
        FourierField::from_modes(r.dim, r.band, &modes)
    }
}

impl From<FourierField> for FieldRecord {
    fn from(f: FourierField) -> Self {
        let coeffs = f
            .modes()
            .filter(|(_, c)| c.norm() > 0.0)
            .map(|(k, c)| (k, c.re + 0.0, c.im + 0.0))
            .collect();
        FieldRecord { dim: f.dim, band: f.band, coeffs }
    }
}

pub(crate) fn box_len(dim: usize, band: usize) -> Result<usize> {
    let width = 2 * band + 1;
    let mut len: usize = 1;
    for _ in 0..dim {
        len = len.checked_mul(width).filter(|l| *l <= MAX_COEFFS).ok_or(FieldError::BandOverflow {
            needed: band,
            cap: max_band(dim),
        })?;
    }
    Ok(len)
}

fn max_band(dim: usize) -> usize {
    let per_axis = (MAX_COEFFS as f64).powf(1.0 / dim.max(1) as f64).floor() as usize;
    per_axis.saturating_sub(1) / 2
}

/// Per-axis table of `exp(2 pi i k x_d)` for `k = -band..=band`.
pub(crate) fn axis_phases(x: f64, band: usize) -> Vec<Complex64> {
    let w = Complex64::from_polar(1.0, TWO_PI * x);
    let mut out = vec![Complex64::new(1.0, 0.0); 2 * band + 1];
    for k in 1..=band {
        out[band + k] = out[band + k - 1] * w;
        out[band - k] = out[band + k].conj();
    }
    out
}

impl FourierField {
    pub fn zeros(dim: usize, band: usize) -> Self {
        assert!(dim >= 1, "fields live on T^n with n >= 1");
        let len = box_len(dim, band).expect("band within cap");
        FourierField { dim, band, coeffs: vec![Complex64::new(0.0, 0.0); len] }
    }

    pub fn constant(dim: usize, band: usize, value: f64) -> Self {
        let mut f = Self::zeros(dim, band);
        let c = f.center();
        f.coeffs[c] = Complex64::new(value, 0.0);
        f
    }

    /// Builds a field from explicit modes; repeated modes add up.
    pub fn from_modes(dim: usize, band: usize, modes: &[(Vec<i64>, Complex64)]) -> Result<Self> {
        if dim == 0 {
            return Err(FieldError::InvalidMode("dimension must be positive".into()));
        }
        box_len(dim, band)?;
        let mut f = Self::zeros(dim, band);
        for (k, c) in modes {
            if k.len() != dim {
                return Err(FieldError::DimensionMismatch { expected: dim, found: k.len() });
            }
            let idx = f
                .index(k)
                .ok_or_else(|| FieldError::InvalidMode(format!("mode {k:?} outside band {band}")))?;
            f.coeffs[idx] += c;
        }
        let asym = f.symmetry_defect();
        if asym > 1e-12 * (1.0 + f.l1_norm()) {
            return Err(FieldError::NotRealValued(asym));
        }
        f.symmetrize();
        Ok(f)
    }

    /// `amp * cos(2 pi k.q)`.
    pub fn cos_mode(dim: usize, band: usize, k: &[i64], amp: f64) -> Result<Self> {
        let neg: Vec<i64> = k.iter().map(|x| -x).collect();
        if k.iter().all(|x| *x == 0) {
            return Ok(Self::constant(dim, band, amp));
        }
        Self::from_modes(dim, band, &[(k.to_vec(), Complex64::new(amp / 2.0, 0.0)), (neg, Complex64::new(amp / 2.0, 0.0))])
    }

    /// `amp * sin(2 pi k.q)`.
    pub fn sin_mode(dim: usize, band: usize, k: &[i64], amp: f64) -> Result<Self> {
        let neg: Vec<i64> = k.iter().map(|x| -x).collect();
        if k.iter().all(|x| *x == 0) {
            return Ok(Self::zeros(dim, band));
        }
        Self::from_modes(dim, band, &[(k.to_vec(), Complex64::new(0.0, -amp / 2.0)), (neg, Complex64::new(0.0, amp / 2.0))])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn width(&self) -> usize {
        2 * self.band + 1
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub(crate) fn from_raw(dim: usize, band: usize, coeffs: Vec<Complex64>) -> Self {
        debug_assert_eq!(coeffs.len(), box_len(dim, band).unwrap());
        FourierField { dim, band, coeffs }
    }

    fn center(&self) -> usize {
        (self.coeffs.len() - 1) / 2
    }

    pub fn index(&self, k: &[i64]) -> Option<usize> {
        let b = self.band as i64;
        let w = self.width();
        let mut idx = 0usize;
        for &kd in k {
            if kd.abs() > b {
                return None;
            }
            idx = idx * w + (kd + b) as usize;
        }
        Some(idx)
    }

    /// Mode of the linear index `i`.
    pub fn mode(&self, mut i: usize) -> Vec<i64> {
        let w = self.width();
        let mut k = vec![0i64; self.dim];
        for d in (0..self.dim).rev() {
            k[d] = (i % w) as i64 - self.band as i64;
            i /= w;
        }
        k
    }

    pub fn coeff(&self, k: &[i64]) -> Complex64 {
        self.index(k).map(|i| self.coeffs[i]).unwrap_or_default()
    }

    pub fn set_coeff(&mut self, k: &[i64], c: Complex64) -> Result<()> {
        let idx = self.index(k).ok_or_else(|| FieldError::InvalidMode(format!("mode {k:?} outside band")))?;
        self.coeffs[idx] = c;
        Ok(())
    }

    pub fn modes(&self) -> impl Iterator<Item = (Vec<i64>, Complex64)> + '_ {
        self.coeffs.iter().enumerate().map(move |(i, c)| (self.mode(i), *c))
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[self.center()].re
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.re == 0.0 && c.im == 0.0)
    }

    /// True when only the zero mode is populated.
    pub fn is_constant(&self) -> bool {
        let c = self.center();
        self.coeffs.iter().enumerate().all(|(i, v)| i == c || (v.re == 0.0 && v.im == 0.0))
    }

    pub fn symmetry_defect(&self) -> f64 {
        let n = self.coeffs.len();
        (0..n).map(|i| (self.coeffs[i] - self.coeffs[n - 1 - i].conj()).norm()).fold(0.0, f64::max)
    }

    /// Projects onto real-valued fields: c_k <- (c_k + conj(c_-k)) / 2.
    pub fn symmetrize(&mut self) {
        let n = self.coeffs.len();
        for i in 0..=n / 2 {
            let j = n - 1 - i;
            let avg = 0.5 * (self.coeffs[i] + self.coeffs[j].conj());
            self.coeffs[i] = avg;
            self.coeffs[j] = avg.conj();
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).sum()
    }

    /// Largest `|k|_1` with a nonzero coefficient.
    pub fn max_l1_mode(&self) -> i64 {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.norm() > 0.0)
            .map(|(i, _)| self.mode(i).iter().map(|k| k.abs()).sum::<i64>())
            .max()
            .unwrap_or(0)
    }

    fn phases(&self, x: &[f64]) -> Vec<Vec<Complex64>> {
        x.iter().map(|&xd| axis_phases(xd, self.band)).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let ph = self.phases(x);
        let refs: Vec<&[Complex64]> = ph.iter().map(|v| v.as_slice()).collect();
        self.eval_with_phases(&refs)
    }

    /// Evaluation from per-axis phase tables of length `2 * band + 1`.
    pub(crate) fn eval_with_phases(&self, ph: &[&[Complex64]]) -> f64 {
        let w = self.width();
        match self.dim {
            1 => self.coeffs.iter().zip(ph[0].iter()).map(|(c, e)| (c * e).re).sum(),
            2 => {
                let mut acc = 0.0;
                for i in 0..w {
                    let row = &self.coeffs[i * w..(i + 1) * w];
                    let inner: Complex64 = row.iter().zip(ph[1].iter()).map(|(c, e)| c * e).sum();
                    acc += (inner * ph[0][i]).re;
                }
                acc
            }
            _ => self
                .coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mut e = *c;
                    let mut r = i;
                    for d in (0..self.dim).rev() {
                        e *= ph[d][r % w];
                        r /= w;
                    }
                    e.re
                })
                .sum(),
        }
    }

    /// Value, gradient and Hessian (row-major) at `x`.
    pub fn eval_derivs(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.dim;
        let ph = self.phases(x);
        let w = self.width();
        if n == 2 {
            return self.eval_derivs_2d(&ph);
        }
        let mut val = 0.0;
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        let mut k = vec![0.0; n];
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            let mut e = *c;
            let mut r = i;
            for d in (0..n).rev() {
                let kd = r % w;
                e *= ph[d][kd];
                k[d] = TWO_PI * (kd as f64 - self.band as f64);
                r /= w;
            }
            val += e.re;
            // d/dx_d -> i k_d, so grad = Re(i k e) = -k Im(e), hess = -k_a k_b Re(e)
            for a in 0..n {
                grad[a] -= k[a] * e.im;
                for b in 0..n {
                    hess[a * n + b] -= k[a] * k[b] * e.re;
                }
            }
        }
        (val, grad, hess)
    }

    // row sums first: one complex multiply per coefficient
    fn eval_derivs_2d(&self, ph: &[Vec<Complex64>]) -> (f64, Vec<f64>, Vec<f64>) {
        let w = self.width();
        let ks: Vec<f64> = (0..w).map(|j| TWO_PI * (j as f64 - self.band as f64)).collect();
        let (mut val, mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..w {
            let row = &self.coeffs[i * w..(i + 1) * w];
            let (mut s0, mut s1, mut s2) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for j in 0..w {
                let e = row[j] * ph[1][j];
                s0 += e;
                s1 += e * ks[j];
                s2 += e * (ks[j] * ks[j]);
            }
            let (a0, a1, a2) = (s0 * ph[0][i], s1 * ph[0][i], s2 * ph[0][i]);
            let k0 = ks[i];
            val += a0.re;
            g0 -= k0 * a0.im;
            g1 -= a1.im;
            h00 -= k0 * k0 * a0.re;
            h01 -= k0 * a1.re;
            h11 -= a2.re;
        }
        (val, vec![g0, g1], vec![h00, h01, h01, h11])
    }

    pub fn rebanded(&self, band: usize) -> Self {
        if band == self.band {
            return self.clone();
        }
        let mut out = Self::zeros(self.dim, band);
        let shared = band.min(self.band);
        let (wi, wo) = (self.width(), out.width());
        let span = 2 * shared + 1;
        let count = span.pow(self.dim as u32);
        for flat in 0..count {
            let mut r = flat;
            let mut src = 0usize;
            let mut dst = 0usize;
            let mut mult_i = 1usize;
            let mut mult_o = 1usize;
            for _ in 0..self.dim {
                let off = r % span;
                r /= span;
                let kd = off as i64 - shared as i64;
                src += (kd + self.band as i64) as usize * mult_i;
                dst += (kd + band as i64) as usize * mult_o;
                mult_i *= wi;
                mult_o *= wo;
            }
            out.coeffs[dst] = self.coeffs[src];
        }
        out
    }

    fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(FieldError::DimensionMismatch { expected: self.dim, found: other.dim });
        }
        Ok(())
    }

    /// Elementwise map of coefficients with their wavevector `2 pi k`.
    pub fn map_modes(&self, f: impl Fn(&[f64], Complex64) -> Complex64) -> Self {
        let n = self.dim;
        let w = self.width();
        let mut k = vec![0.0; n];
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut r = i;
                for d in (0..n).rev() {
                    k[d] = TWO_PI * ((r % w) as f64 - self.band as f64);
                    r /= w;
                }
                f(&k, *c)
            })
            .collect();
        FourierField { dim: n, band: self.band, coeffs }
    }

    /// `d/dq_axis`, with `axis` counted from zero.
    pub fn differentiate(&self, axis: usize) -> Result<Self> {
        if axis >= self.dim {
            return Err(FieldError::AxisOutOfRange { axis, dim: self.dim });
        }
        Ok(self.map_modes(|k, c| c * Complex64::new(0.0, k[axis])))
    }

    pub fn gradient(&self) -> Vec<Self> {
        (0..self.dim).map(|d| self.differentiate(d).unwrap()).collect()
    }

    /// `q -> f(q + delta)`.
    pub fn shift(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim {
            return Err(FieldError::DimensionMismatch { expected: self.dim, found: delta.len() });
        }
        Ok(self.map_modes(|k, c| {
            let phase: f64 = k.iter().zip(delta.iter()).map(|(k, d)| k * d).sum();
            c * Complex64::from_polar(1.0, phase)
        }))
    }

    /// Exact product; the band grows to the sum of both bands.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        let band = self.band + other.band;
        box_len(self.dim, band)?;
        let mut out = Self::zeros(self.dim, band);
        let (wa, wb, wo) = (self.width(), other.width(), out.width());
        let nz_b: Vec<(usize, Complex64)> = other
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.re != 0.0 || c.im != 0.0)
            .map(|(i, c)| (i, *c))
            .collect();
        let digits = |mut i: usize, w: usize, n: usize| -> Vec<usize> {
            let mut d = vec![0; n];
            for j in (0..n).rev() {
                d[j] = i % w;
                i /= w;
            }
            d
        };
        let b_digits: Vec<Vec<usize>> = nz_b.iter().map(|(i, _)| digits(*i, wb, self.dim)).collect();
        for (ia, ca) in self.coeffs.iter().enumerate() {
            if ca.re == 0.0 && ca.im == 0.0 {
                continue;
            }
            let da = digits(ia, wa, self.dim);
            for ((_, cb), db) in nz_b.iter().zip(b_digits.iter()) {
                // offset digits add: (ka + A) + (kb + B) = ko + (A + B)
                let mut io = 0usize;
                for d in 0..self.dim {
                    io = io * wo + da[d] + db[d];
                }
                out.coeffs[io] += ca * cb;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        FourierField { dim: self.dim, band: self.band, coeffs: self.coeffs.iter().map(|c| c * s).collect() }
    }

    /// `self + s * other`, on the larger of the two bands.
    pub fn axpy(&self, s: f64, other: &Self) -> Result<Self> {
        self.check_same_dim(other)?;
        let band = self.band.max(other.band);
        let mut out = self.rebanded(band);
        let o = other.rebanded(band);
        for (a, b) in out.coeffs.iter_mut().zip(o.coeffs.iter()) {
            *a += b * s;
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub(crate) fn add_assign_scaled(&mut self, s: f64, other: &Self) {
        if other.band == self.band {
            for (a, b) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
                *a += b * s;
            }
        } else {
            *self = self.axpy(s, other).expect("same dimension");
        }
    }

    /// Majorant norm `sum |c_k| exp(2 pi |k|_1 s)`.
    pub fn analytic_norm(&self, s: f64) -> Result<f64> {
        if !(s >= 0.0) {
            return Err(FieldError::InvalidNorm(format!("analytic width must be non-negative, got {s}")));
        }
        let exponent = TWO_PI * s * (self.band * self.dim) as f64;
        if exponent > 700.0 {
            return Err(FieldError::NumericRange(format!("exp(2 pi K n s) overflows for s = {s}")));
        }
        let w = self.width();
        let total = self
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.re != 0.0 || c.im != 0.0)
            .map(|(i, c)| {
                let mut r = i;
                let mut l1 = 0i64;
                for _ in 0..self.dim {
                    l1 += ((r % w) as i64 - self.band as i64).abs();
                    r /= w;
                }
                c.norm() * (TWO_PI * s * l1 as f64).exp()
            })
            .sum();
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cos_and_sin_modes_evaluate() {
        let c = FourierField::cos_mode(1, 4, &[1], 2.0).unwrap();
        let s = FourierField::sin_mode(1, 4, &[2], 1.0).unwrap();
        for x in [0.0, 0.1, 0.37] {
            assert!((c.eval(&[x]) - 2.0 * (TWO_PI * x).cos()).abs() < 1e-14);
            assert!((s.eval(&[x]) - (2.0 * TWO_PI * x).sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_real_modes() {
        let r = FourierField::from_modes(1, 2, &[(vec![1], Complex64::new(1.0, 0.0))]);
        assert!(matches!(r, Err(FieldError::NotRealValued(_))));
    }

    #[test]
    fn derivative_of_sine() {
        let s = FourierField::sin_mode(1, 3, &[1], 1.0).unwrap();
        let d = s.differentiate(0).unwrap();
        assert!((d.eval(&[0.2]) - TWO_PI * (TWO_PI * 0.2).cos()).abs() < 1e-12);
        assert!(matches!(s.differentiate(1), Err(FieldError::AxisOutOfRange { .. })));
    }

    #[test]
    fn shift_moves_the_argument() {
        let f = FourierField::cos_mode(2, 3, &[1, 2], 1.0).unwrap();
        let g = f.shift(&[0.1, -0.3]).unwrap();
        assert!((g.eval(&[0.2, 0.4]) - f.eval(&[0.3, 0.1])).abs() < 1e-13);
    }

    #[test]
    fn product_of_cosines() {
        let a = FourierField::cos_mode(1, 2, &[1], 1.0).unwrap();
        let p = a.multiply(&a).unwrap();
        assert_eq!(p.band(), 4);
        // cos^2 = 1/2 + cos(2x)/2
        assert!((p.mean() - 0.5).abs() < 1e-15);
        assert!((p.coeff(&[2]).re - 0.25).abs() < 1e-15);
        let x = [0.123];
        assert!((p.eval(&x) - a.eval(&x).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn product_in_two_dims() {
        let a = FourierField::cos_mode(2, 2, &[1, -1], 1.0).unwrap();
        let b = FourierField::sin_mode(2, 1, &[0, 1], 0.5).unwrap();
        let p = a.multiply(&b).unwrap();
        let x = [0.31, 0.77];
        assert!((p.eval(&x) - a.eval(&x) * b.eval(&x)).abs() < 1e-13);
    }

    #[test]
    fn hessian_matches_finite_differences() {
        let f = FourierField::cos_mode(2, 2, &[1, 2], 1.0)
            .unwrap()
            .add(&FourierField::sin_mode(2, 2, &[2, -1], 0.3).unwrap())
            .unwrap();
        let x = [0.21, 0.63];
        let (_, g, h) = f.eval_derivs(&x);
        let eps = 1e-6;
        for a in 0..2 {
            let mut xp = x;
            xp[a] += eps;
            let mut xm = x;
            xm[a] -= eps;
            let fd = (f.eval(&xp) - f.eval(&xm)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-6);
            let (_, gp, _) = f.eval_derivs(&xp);
            let (_, gm, _) = f.eval_derivs(&xm);
            for b in 0..2 {
                assert!(((gp[b] - gm[b]) / (2.0 * eps) - h[b * 2 + a]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rebanding_round_trip() {
        let f = FourierField::cos_mode(2, 2, &[1, 2], 1.0).unwrap();
        let g = f.rebanded(5).rebanded(2);
        assert_eq!(f, g);
        assert_eq!(f.rebanded(1).coeff(&[1, 2]), Complex64::default());
    }

    #[test]
    fn serde_keeps_nonzero_modes() {
        let f = FourierField::cos_mode(1, 3, &[1], 1.0).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"dim":1,"band":3,"coeffs":[[[-1],0.5,0.0],[[1],0.5,0.0]]}"#);
        let back: FourierField = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }
}
