use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::fourier::{axis_phases, box_len};
use super::{FieldError, FourierField, Result};

/// Uniform collocation lattice with `n` points per axis.
#[derive(Clone)]
pub struct Lattice {
    dim: usize,
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Lattice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Lattice").field("dim", &self.dim).field("n", &self.n).finish()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

// In-place transform of every axis of a row-major `n^dim` tensor.
fn transform_axes(data: &mut [Complex64], dim: usize, n: usize, fft: &Arc<dyn Fft<f64>>) {
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for d in 0..dim {
        let stride = n.pow((dim - d - 1) as u32);
        let blocks = data.len() / (n * stride);
        for b in 0..blocks {
            for s in 0..stride {
                let base = b * n * stride + s;
                for (j, x) in line.iter_mut().enumerate() {
                    *x = data[base + j * stride];
                }
                fft.process_with_scratch(&mut line, &mut scratch);
                for (j, x) in line.iter().enumerate() {
                    data[base + j * stride] = *x;
                }
            }
        }
    }
}

impl Lattice {
    pub fn new(dim: usize, n: usize) -> Self {
        assert!(dim >= 1 && n >= 1);
        let (forward, inverse) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(n), p.plan_fft_inverse(n))
        });
        Lattice { dim, n, forward, inverse }
    }

    /// Lattice able to resolve products of fields with bands summing to `band`.
    pub fn for_band(dim: usize, band: usize) -> Self {
        Lattice::new(dim, 2 * band + 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn per_axis(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut i: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for d in (0..self.dim).rev() {
            x[d] = (i % self.n) as f64 / self.n as f64;
            i /= self.n;
        }
        x
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Index of the neighbour of `i` one step along `axis` (periodic).
    pub fn neighbour(&self, i: usize, axis: usize, forward: bool) -> usize {
        let stride = self.n.pow((self.dim - axis - 1) as u32);
        let digit = (i / stride) % self.n;
        let nd = if forward { (digit + 1) % self.n } else { (digit + self.n - 1) % self.n };
        i - digit * stride + nd * stride
    }

    /// Index of the point `steps` lattice steps along `axis` from `i` (periodic).
    pub fn shifted(&self, i: usize, axis: usize, steps: usize) -> usize {
        let stride = self.n.pow((self.dim - axis - 1) as u32);
        let digit = (i / stride) % self.n;
        i - digit * stride + ((digit + steps) % self.n) * stride
    }

    // flat lattice index of the residue class of mode `k`
    fn slot(&self, k: &[i64]) -> usize {
        k.iter().fold(0usize, |acc, kd| acc * self.n + kd.rem_euclid(self.n as i64) as usize)
    }

    pub fn values(&self, f: &FourierField) -> Vec<f64> {
        assert_eq!(f.dim(), self.dim);
        if f.is_constant() {
            return vec![f.mean(); self.len()];
        }
        let mut data = vec![Complex64::new(0.0, 0.0); self.len()];
        for (i, c) in f.coeffs().iter().enumerate() {
            if c.re != 0.0 || c.im != 0.0 {
                data[self.slot(&f.mode(i))] += c;
            }
        }
        transform_axes(&mut data, self.dim, self.n, &self.inverse);
        data.into_iter().map(|c| c.re).collect()
    }

    fn full_band(&self) -> usize {
        (self.n - 1) / 2
    }

    fn dft(&self, values: &[f64], band: usize) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        transform_axes(&mut data, self.dim, self.n, &self.forward);
        let scale = 1.0 / self.len() as f64;
        let mut out = FourierField::zeros(self.dim, band);
        let coeffs: Vec<Complex64> = (0..out.coeffs().len()).map(|i| data[self.slot(&out.mode(i))] * scale).collect();
        out.coeffs_mut().copy_from_slice(&coeffs);
        out.coeffs().to_vec()
    }

    /// Discrete projection of lattice values onto the band `band`.
    pub fn project(&self, values: &[f64], band: usize) -> FourierField {
        assert_eq!(values.len(), self.len());
        let band = band.min(self.full_band());
        let mut f = FourierField::from_raw(self.dim, band, self.dft(values, band));
        f.symmetrize();
        f
    }

    /// Projection plus the l1 mass of the resolved modes beyond `band`.
    pub fn project_with_aliasing(&self, values: &[f64], band: usize) -> (FourierField, f64) {
        let full = self.full_band();
        if full <= band {
            return (self.project(values, band), 0.0);
        }
        let mut all = FourierField::from_raw(self.dim, full, self.dft(values, full));
        all.symmetrize();
        let kept = all.rebanded(band);
        let lost = all.l1_norm() - kept.l1_norm();
        (kept, lost.max(0.0))
    }
}

/// Phase tables at arbitrary points, shared by every field evaluated there.
pub struct PointBasis {
    band: usize,
    phases: Vec<Vec<Vec<Complex64>>>,
}

impl PointBasis {
    pub fn new(points: &[Vec<f64>], band: usize) -> Self {
        let phases = points.iter().map(|x| x.iter().map(|&xd| axis_phases(xd, band)).collect()).collect();
        PointBasis { band, phases }
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn eval(&self, f: &FourierField) -> Vec<f64> {
        assert!(f.band() <= self.band, "basis band too small");
        if f.is_constant() {
            return vec![f.mean(); self.phases.len()];
        }
        let lo = self.band - f.band();
        let hi = self.band + f.band() + 1;
        self.phases
            .iter()
            .map(|ph| {
                let refs: Vec<&[Complex64]> = ph.iter().map(|v| &v[lo..hi]).collect();
                f.eval_with_phases(&refs)
            })
            .collect()
    }
}

/// `f(q + u(q))` projected onto `band_out`, with the neglected coefficient mass.
pub fn compose_near_identity(f: &FourierField, u: &[FourierField], band_out: usize) -> Result<(FourierField, f64)> {
    let dim = f.dim();
    if u.len() != dim {
        return Err(FieldError::DimensionMismatch { expected: dim, found: u.len() });
    }
    if let Some(bad) = u.iter().find(|c| c.dim() != dim) {
        return Err(FieldError::DimensionMismatch { expected: dim, found: bad.dim() });
    }
    box_len(dim, band_out)?;
    let lattice = Lattice::for_band(dim, f.band() + band_out);
    let disp: Vec<Vec<f64>> = u.iter().map(|c| lattice.values(c)).collect();
    let sup = disp.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if sup >= 0.25 {
        return Err(FieldError::NotNearIdentity(sup));
    }
    let points: Vec<Vec<f64>> = (0..lattice.len())
        .map(|i| {
            let mut x = lattice.point(i);
            for (d, xd) in x.iter_mut().enumerate() {
                *xd += disp[d][i];
            }
            x
        })
        .collect();
    let basis = PointBasis::new(&points, f.band());
    let vals = basis.eval(f);
    Ok(lattice.project_with_aliasing(&vals, band_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_and_projection_invert() {
        let f = FourierField::cos_mode(2, 3, &[1, -2], 0.7)
            .unwrap()
            .add(&FourierField::sin_mode(2, 3, &[3, 1], 0.2).unwrap())
            .unwrap();
        let lat = Lattice::for_band(2, 3);
        let v = lat.values(&f);
        for (i, x) in lat.points().iter().enumerate().step_by(7) {
            assert!((v[i] - f.eval(x)).abs() < 1e-13);
        }
        let g = lat.project(&v, 3);
        for (a, b) in f.coeffs().iter().zip(g.coeffs()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn zero_displacement_is_identity() {
        let f = FourierField::cos_mode(1, 4, &[3], 1.0).unwrap();
        let (g, lost) = compose_near_identity(&f, &[FourierField::zeros(1, 4)], 4).unwrap();
        assert!(lost < 1e-14);
        for (a, b) in f.coeffs().iter().zip(g.coeffs()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn constant_displacement_matches_shift() {
        let f = FourierField::cos_mode(1, 3, &[2], 1.0).unwrap();
        let u = [FourierField::constant(1, 2, 0.1)];
        let (g, _) = compose_near_identity(&f, &u, 3).unwrap();
        let s = f.shift(&[0.1]).unwrap();
        for (a, b) in s.coeffs().iter().zip(g.coeffs()) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn large_displacement_is_rejected() {
        let f = FourierField::cos_mode(1, 3, &[1], 1.0).unwrap();
        let u = [FourierField::constant(1, 0, 0.3)];
        assert!(matches!(compose_near_identity(&f, &u, 3), Err(FieldError::NotNearIdentity(_))));
    }

    #[test]
    fn neighbours_wrap() {
        let lat = Lattice::new(2, 4);
        assert_eq!(lat.neighbour(3, 1, true), 0);
        assert_eq!(lat.neighbour(0, 0, false), 12);
    }
}
