//! Node layouts and local polynomial stencils on non-uniform time grids.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeLayout {
    Uniform,
    Geometric,
}

/// `m + 1` nodes on `[start, end]`.
pub fn nodes(layout: NodeLayout, start: f64, end: f64, m: usize) -> Vec<f64> {
    let m = m.max(1);
    let mut out: Vec<f64> = match layout {
        NodeLayout::Uniform => (0..=m).map(|i| start + (end - start) * i as f64 / m as f64).collect(),
        NodeLayout::Geometric => {
            let ratio = end / start;
            (0..=m).map(|i| start * ratio.powf(i as f64 / m as f64)).collect()
        }
    };
    out[0] = start;
    out[m] = end;
    out
}

/// Finite-difference weights for the `order`-th derivative at `x0` (Fornberg).
pub fn fornberg_weights(x0: f64, xs: &[f64], order: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Start of the `width`-point window around node `i`, shifted inwards at the ends.
pub fn window_start(i: usize, len: usize, width: usize) -> usize {
    let width = width.min(len);
    let half = width / 2;
    i.saturating_sub(half).min(len - width)
}

/// Start of the four-node window used to interpolate on `[x_j, x_{j+1}]`.
pub fn cubic_window(j: usize, len: usize) -> usize {
    let width = 4.min(len);
    j.saturating_sub(1).min(len - width)
}

pub fn lagrange_weights(t: f64, xs: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            xs.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, xj)| (t - xj) / (xs[i] - xj))
                .product()
        })
        .collect()
}

/// Index `j` with `x_j <= t <= x_{j+1}` (clamped).
pub fn locate(xs: &[f64], t: f64) -> usize {
    match xs.binary_search_by(|x| x.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
        Ok(i) => i.min(xs.len() - 2),
        Err(i) => i.saturating_sub(1).min(xs.len() - 2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_point_weights_are_exact_on_quartics() {
        let xs = [0.0, 0.3, 0.7, 1.2, 2.0];
        for &x0 in &xs {
            let w = fornberg_weights(x0, &xs, 1);
            let d: f64 = w.iter().zip(xs.iter()).map(|(w, x)| w * x.powi(4)).sum();
            assert!((d - 4.0 * x0.powi(3)).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_central_weights() {
        let w = fornberg_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0], 1);
        let expect = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn windows_stay_inside() {
        assert_eq!(window_start(0, 10, 5), 0);
        assert_eq!(window_start(5, 10, 5), 3);
        assert_eq!(window_start(9, 10, 5), 5);
        assert_eq!(cubic_window(0, 10), 0);
        assert_eq!(cubic_window(8, 10), 6);
    }

    #[test]
    fn geometric_nodes_hit_endpoints() {
        let n = nodes(NodeLayout::Geometric, 100.0, 1e5, 200);
        assert_eq!(n.len(), 201);
        assert_eq!(n[0], 100.0);
        assert_eq!(n[200], 1e5);
        assert!((n[1] / n[0] - n[200] / n[199]).abs() < 1e-9);
    }
}
