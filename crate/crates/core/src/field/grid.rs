use serde::{Deserialize, Serialize};

use super::{FieldError, FourierField, Result};
use crate::decay::Weight;
use crate::timegrid::{cubic_window, fornberg_weights, lagrange_weights, locate, window_start};

/// Time-dependent field: one Fourier slice per node plus the envelope governing t > T_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRecord", into = "GridRecord")]
pub struct GridField {
    nodes: Vec<f64>,
    slices: Vec<Vec<FourierField>>,
    envelope: Weight,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRecord {
    pub dim: usize,
    pub band: usize,
    pub nodes: Vec<f64>,
    pub envelope: Weight,
    pub slices: Vec<Vec<FourierField>>,
}

impl TryFrom<GridRecord> for GridField {
    type Error = FieldError;

    fn try_from(r: GridRecord) -> Result<Self> {
        let g = GridField::new(r.nodes, r.slices, r.envelope)?;
        if g.dim() != r.dim || g.band() != r.band {
            return Err(FieldError::InvalidGrid("header does not match the slices".into()));
        }
        Ok(g)
    }
}

impl From<GridField> for GridRecord {
    fn from(g: GridField) -> Self {
        GridRecord { dim: g.dim(), band: g.band(), nodes: g.nodes, envelope: g.envelope, slices: g.slices }
    }
}

impl GridField {
    pub fn new(nodes: Vec<f64>, slices: Vec<Vec<FourierField>>, envelope: Weight) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(FieldError::InvalidGrid("need at least two nodes".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FieldError::InvalidGrid("nodes must be strictly increasing".into()));
        }
        if slices.len() != nodes.len() {
            return Err(FieldError::InvalidGrid(format!("{} slices for {} nodes", slices.len(), nodes.len())));
        }
        let comps = slices[0].len();
        if comps == 0 {
            return Err(FieldError::InvalidGrid("slices need at least one component".into()));
        }
        let (dim, band) = (slices[0][0].dim(), slices[0][0].band());
        for s in &slices {
            if s.len() != comps || s.iter().any(|f| f.dim() != dim || f.band() != band) {
                return Err(FieldError::InvalidGrid("slices must share components, dimension and band".into()));
            }
        }
        Ok(GridField { nodes, slices, envelope })
    }

    pub fn zeros(nodes: Vec<f64>, dim: usize, band: usize, comps: usize, envelope: Weight) -> Self {
        let slices = vec![vec![FourierField::zeros(dim, band); comps]; nodes.len()];
        GridField::new(nodes, slices, envelope).expect("valid zero grid")
    }

    pub fn from_fn(nodes: Vec<f64>, envelope: Weight, f: impl Fn(f64) -> Vec<FourierField>) -> Result<Self> {
        let slices = nodes.iter().map(|&t| f(t)).collect();
        GridField::new(nodes, slices, envelope)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn slices(&self) -> &[Vec<FourierField>] {
        &self.slices
    }

    pub fn slice(&self, i: usize) -> &[FourierField] {
        &self.slices[i]
    }

    pub fn envelope(&self) -> &Weight {
        &self.envelope
    }

    pub fn with_envelope(mut self, envelope: Weight) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn components(&self) -> usize {
        self.slices[0].len()
    }

    pub fn dim(&self) -> usize {
        self.slices[0][0].dim()
    }

    pub fn band(&self) -> usize {
        self.slices[0][0].band()
    }

    pub fn t_min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    pub fn component(&self, c: usize) -> GridField {
        let slices = self.slices.iter().map(|s| vec![s[c].clone()]).collect();
        GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() }
    }

    /// Stacks single-component fields on a shared grid.
    pub fn stack(parts: &[GridField], envelope: Weight) -> Result<GridField> {
        let nodes = parts[0].nodes.clone();
        if parts.iter().any(|p| p.nodes != nodes) {
            return Err(FieldError::InvalidGrid("stacked fields need identical nodes".into()));
        }
        let slices = (0..nodes.len())
            .map(|i| parts.iter().flat_map(|p| p.slices[i].iter().cloned()).collect())
            .collect();
        GridField::new(nodes, slices, envelope)
    }

    pub fn map(&self, envelope: Weight, f: impl Fn(f64, &[FourierField]) -> Vec<FourierField>) -> Result<GridField> {
        let slices = self.nodes.iter().zip(self.slices.iter()).map(|(t, s)| f(*t, s)).collect();
        GridField::new(self.nodes.clone(), slices, envelope)
    }

    fn zip(&self, other: &GridField, s: f64) -> Result<GridField> {
        if self.nodes != other.nodes || self.components() != other.components() {
            return Err(FieldError::InvalidGrid("fields live on different grids".into()));
        }
        let slices = self
            .slices
            .iter()
            .zip(other.slices.iter())
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x.axpy(s, y)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() })
    }

    /// `self + other`, keeping this field's envelope.
    pub fn add(&self, other: &GridField) -> Result<GridField> {
        self.zip(other, 1.0)
    }

    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.zip(other, -1.0)
    }

    pub fn scale(&self, s: f64) -> GridField {
        let slices = self.slices.iter().map(|sl| sl.iter().map(|f| f.scale(s)).collect()).collect();
        GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() }
    }

    pub fn rebanded(&self, band: usize) -> GridField {
        let slices = self.slices.iter().map(|sl| sl.iter().map(|f| f.rebanded(band)).collect()).collect();
        GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() }
    }

    pub fn is_zero(&self) -> bool {
        self.slices.iter().all(|s| s.iter().all(|f| f.is_zero()))
    }

    /// Slice at time `t`: local cubic interpolation inside the grid and the
    /// envelope-shaped continuation of the last slice past `T_max`.
    pub fn at(&self, t: f64) -> Result<Vec<FourierField>> {
        let (t0, tm) = (self.t_min(), self.t_max());
        let slack = 1e-12 * (1.0 + t0.abs());
        if t < t0 - slack {
            return Err(FieldError::OutOfGrid { t, start: t0 });
        }
        if t >= tm {
            let ratio = self.envelope.eval(t) / self.envelope.eval(tm);
            return Ok(self.slices.last().unwrap().iter().map(|f| f.scale(ratio)).collect());
        }
        let t = t.max(t0);
        let j = locate(&self.nodes, t);
        let start = cubic_window(j, self.nodes.len());
        let width = 4.min(self.nodes.len());
        let xs = &self.nodes[start..start + width];
        // interpolate the envelope-normalised coefficients
        let w: Vec<f64> = xs.iter().map(|x| self.envelope.eval(*x)).collect();
        let lw = lagrange_weights(t, xs);
        let wt = self.envelope.eval(t);
        let mut out: Vec<FourierField> = vec![FourierField::zeros(self.dim(), self.band()); self.components()];
        for (i, lwi) in lw.iter().enumerate() {
            for (c, f) in self.slices[start + i].iter().enumerate() {
                out[c].add_assign_scaled(lwi * wt / w[i], f);
            }
        }
        Ok(out)
    }

    /// `d/dt` from five-point stencils applied to the envelope-normalised field;
    /// the envelope factor itself is differentiated exactly.
    pub fn time_derivative(&self) -> GridField {
        let n = self.nodes.len();
        let width = 5.min(n);
        let w: Vec<f64> = self.nodes.iter().map(|t| self.envelope.eval(*t)).collect();
        let slices = (0..n)
            .map(|i| {
                let start = window_start(i, n, width);
                let xs = &self.nodes[start..start + width];
                let cw = fornberg_weights(self.nodes[i], xs, 1);
                let wi = w[i];
                let dwi = self.envelope.derivative(self.nodes[i]);
                (0..self.components())
                    .map(|c| {
                        let mut acc = self.slices[i][c].scale(dwi / wi);
                        for (j, cj) in cw.iter().enumerate() {
                            acc.add_assign_scaled(cj * wi / w[start + j], &self.slices[start + j][c]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() }
    }

    /// `omega . d_q w + d_t w`, componentwise.
    pub fn transport(&self, omega: &[f64]) -> Result<GridField> {
        if omega.len() != self.dim() {
            return Err(FieldError::DimensionMismatch { expected: self.dim(), found: omega.len() });
        }
        let dt = self.time_derivative();
        let slices = self
            .slices
            .iter()
            .zip(dt.slices.iter())
            .map(|(s, d)| {
                s.iter()
                    .zip(d.iter())
                    .map(|(f, df)| {
                        f.map_modes(|k, c| {
                            let kw: f64 = k.iter().zip(omega.iter()).map(|(a, b)| a * b).sum();
                            c * num_complex::Complex64::new(0.0, kw)
                        })
                        .add(df)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GridField { nodes: self.nodes.clone(), slices, envelope: self.envelope.clone() })
    }
}
