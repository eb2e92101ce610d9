//! Quadrature rules on uniform grids.
//!
//! Composite Simpson (with a 3/8 end panel for an odd interval count),
//! cumulative Simpson for running integrals, and tensor-product midpoint grids
//! for boxes in several dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[l1,u1] x ... x [ln,un]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Domain { lower, upper };
        d.validate()?;
        Ok(d)
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Domain {
            lower: vec![lo],
            upper: vec![hi],
        }
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Domain {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return Err(Error::config(
                "domain",
                format!(
                    "lower/upper must be non-empty and equal length ({} vs {})",
                    self.lower.len(),
                    self.upper.len()
                ),
            ));
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::config(
                    format!("domain.lower[{i}]"),
                    format!("need finite lower < upper, got [{l}, {u}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l - 1e-12 && *v <= *u + 1e-12)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }
}

/// `n` equally spaced points on `[lo, hi]`, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n).map(|i| lo + h * i as f64).collect()
        }
    }
}

/// Composite Simpson weights for `n` equally spaced nodes with spacing `h`.
///
/// For an even number of nodes the last interval uses a three-point
/// end correction so the rule stays fourth order.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    match n {
        0 => {}
        1 => w[0] = 0.0,
        2 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        _ => {
            let intervals = n - 1;
            let even_part = if intervals.is_multiple_of(2) {
                intervals
            } else {
                intervals - 3
            };
            for k in (0..even_part).step_by(2) {
                w[k] += h / 3.0;
                w[k + 1] += 4.0 * h / 3.0;
                w[k + 2] += h / 3.0;
            }
            if intervals % 2 == 1 {
                // Simpson 3/8 on the last three intervals.
                let s = even_part;
                w[s] += 3.0 * h / 8.0;
                w[s + 1] += 9.0 * h / 8.0;
                w[s + 2] += 9.0 * h / 8.0;
                w[s + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

pub fn simpson(values: &[f64], h: f64) -> f64 {
    simpson_weights(values.len(), h)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

/// Running integral `F[i] = int_{x_0}^{x_i} f` on a uniform grid.
///
/// Even nodes accumulate composite Simpson panels; odd nodes add the
/// three-point quadratic over a single interval to the previous even node, so
/// every entry is fourth-order accurate.
pub fn cumulative_simpson(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (values[0] + values[1]);
        return out;
    }
    let f = values;
    let mut i = 0;
    while i + 2 < n {
        out[i + 1] = out[i] + h / 12.0 * (5.0 * f[i] + 8.0 * f[i + 1] - f[i + 2]);
        out[i + 2] = out[i] + h / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
        i += 2;
    }
    if i + 1 < n {
        out[i + 1] = out[i] + h / 12.0 * (-f[i - 1] + 8.0 * f[i] + 5.0 * f[i + 1]);
    }
    out
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Cell-centre coordinates of a tensor-product midpoint grid with `counts[i]`
/// cells along axis `i`. Points are ordered with the last axis varying fastest.
pub fn midpoint_grid(domain: &Domain, counts: &[usize]) -> (Vec<f64>, f64) {
    let dim = domain.dim();
    assert_eq!(dim, counts.len());
    let axes: Vec<Vec<f64>> = (0..dim)
        .map(|i| {
            let h = (domain.upper[i] - domain.lower[i]) / counts[i] as f64;
            (0..counts[i])
                .map(|k| domain.lower[i] + h * (k as f64 + 0.5))
                .collect()
        })
        .collect();
    let cell: f64 = (0..dim)
        .map(|i| (domain.upper[i] - domain.lower[i]) / counts[i] as f64)
        .product();
    (tensor_product(&axes), cell)
}

/// Flattened tensor product of per-axis coordinates, last axis fastest.
pub fn tensor_product(axes: &[Vec<f64>]) -> Vec<f64> {
    let dim = axes.len();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total * dim);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        for (a, &k) in idx.iter().enumerate() {
            out.push(axes[a][k]);
        }
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < axes[a].len() {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Visits every midpoint-grid cell centre without materialising the grid.
pub fn for_each_midpoint(domain: &Domain, counts: &[usize], mut f: impl FnMut(&[f64])) {
    let dim = domain.dim();
    let h: Vec<f64> = (0..dim)
        .map(|i| (domain.upper[i] - domain.lower[i]) / counts[i] as f64)
        .collect();
    let total: usize = counts.iter().product();
    let mut idx = vec![0usize; dim];
    let mut x: Vec<f64> = (0..dim).map(|i| domain.lower[i] + 0.5 * h[i]).collect();
    for _ in 0..total {
        f(&x);
        for a in (0..dim).rev() {
            idx[a] += 1;
            if idx[a] < counts[a] {
                x[a] = domain.lower[a] + h[a] * (idx[a] as f64 + 0.5);
                break;
            }
            idx[a] = 0;
            x[a] = domain.lower[a] + 0.5 * h[a];
        }
    }
}
