//! Euler-Maruyama sample paths and Gaussian kernel density estimates.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::densities::{DensityObservation, Layout};
use crate::error::{Error, Result};
use crate::quadrature::{linspace, midpoint_grid, Domain};
use crate::residual::SdeModel;
use crate::rng::{stream_rng, STREAM_SIMULATION};

/// Default half-width of the box a path may not leave.
pub const DEFAULT_GUARD: f64 = 50.0;

/// Kernel contributions beyond this many bandwidths are dropped.
const KERNEL_CUTOFF: f64 = 10.0;

/// Uniformly spaced samples of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub times: Vec<f64>,
    /// Point-major, `times.len() x dim`.
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    /// Every `every`-th state, point-major.
    pub fn thinned(&self, every: usize) -> Vec<f64> {
        let every = every.max(1);
        (0..self.len())
            .step_by(every)
            .flat_map(|k| self.state(k).iter().copied())
            .collect()
    }

    /// Per-axis sample mean and (unbiased) variance.
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        moments(&self.states, self.dim)
    }
}

pub fn moments(samples: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let m = samples.len() / dim;
    let mut mean = vec![0.0; dim];
    for x in samples.chunks(dim) {
        for i in 0..dim {
            mean[i] += x[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; dim];
    for x in samples.chunks(dim) {
        for i in 0..dim {
            var[i] += (x[i] - mean[i]).powi(2);
        }
    }
    let denom = (m.max(2) - 1) as f64;
    var.iter_mut().for_each(|v| *v /= denom);
    (mean, var)
}

/// `X_{k+1} = X_k + b(X_k) dt + sigma(X_k) sqrt(dt) xi_k`, keeping states
/// `burn_in..=steps`.
pub fn euler_maruyama(
    model: &SdeModel,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    burn_in: usize,
) -> Result<Trajectory> {
    euler_maruyama_guarded(model, x0, dt, steps, seed, burn_in, DEFAULT_GUARD)
}

pub fn euler_maruyama_guarded(
    model: &SdeModel,
    x0: &[f64],
    dt: f64,
    steps: usize,
    seed: u64,
    burn_in: usize,
    guard: f64,
) -> Result<Trajectory> {
    model.validate()?;
    let n = model.dim;
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
        });
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::config("dt", format!("must be positive, got {dt}")));
    }
    if burn_in > steps {
        return Err(Error::config(
            "burn_in",
            format!("{burn_in} exceeds steps {steps}"),
        ));
    }
    let mut rng = stream_rng(seed, STREAM_SIMULATION);
    let sq = dt.sqrt();
    let kept = steps + 1 - burn_in;
    let mut states = Vec::with_capacity(kept * n);
    let mut x = x0.to_vec();
    if burn_in == 0 {
        states.extend_from_slice(&x);
    }
    for step in 1..=steps {
        let b = model.drift_at(&x)?;
        let s = model.sigma_at(&x)?;
        for i in 0..n {
            let xi: f64 = StandardNormal.sample(&mut rng);
            x[i] += b[i] * dt + s[i] * sq * xi;
        }
        if x.iter().any(|v| !(v.abs() <= guard)) {
            return Err(Error::BlowUp { step, state: x });
        }
        if step >= burn_in {
            states.extend_from_slice(&x);
        }
    }
    let times = (burn_in..=steps).map(|k| k as f64 * dt).collect();
    Ok(Trajectory {
        dim: n,
        dt,
        seed,
        times,
        states,
    })
}

/// Kernel bandwidth per axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Bandwidth {
    /// `1.06 * std * m^(-1/5)` per axis.
    Auto,
    Fixed(Vec<f64>),
}

/// Evaluation grid for [`kde`].
#[derive(Debug, Clone, PartialEq)]
pub enum KdeGrid {
    /// Uniform grid (1D, endpoints included) or midpoint tensor grid over a box.
    Box { domain: Domain, counts: Vec<usize> },
    /// Box spanning the samples plus three bandwidths on each side.
    Padded { counts: Vec<usize> },
}

pub fn silverman_bandwidth(samples: &[f64], dim: usize) -> Result<Vec<f64>> {
    let m = samples.len() / dim;
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    let (mean, var) = moments(samples, dim);
    var.iter()
        .enumerate()
        .map(|(axis, v)| {
            // round-off leaves a tiny variance for constant samples
            if v.sqrt() > 1e-12 * mean[axis].abs().max(1.0) {
                Ok(1.06 * v.sqrt() * (m as f64).powf(-0.2))
            } else {
                Err(Error::DegenerateBandwidth { axis })
            }
        })
        .collect()
}

/// Gaussian product-kernel density estimate of point-major `samples`.
pub fn kde(
    samples: &[f64],
    dim: usize,
    grid: &KdeGrid,
    bandwidth: &Bandwidth,
) -> Result<DensityObservation> {
    let m = samples.len() / dim.max(1);
    if dim == 0 || !samples.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: samples.len(),
        });
    }
    if m < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: m });
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput {
            index: i,
            value: samples[i],
        });
    }
    let h = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(samples, dim)?,
        Bandwidth::Fixed(h) => {
            if h.len() != dim || h.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config(
                    "bandwidth",
                    format!("need {dim} positive values, got {h:?}"),
                ));
            }
            h.clone()
        }
    };
    let (domain, counts) = match grid {
        KdeGrid::Box { domain, counts } => (domain.clone(), counts.clone()),
        KdeGrid::Padded { counts } => {
            let mut lo = vec![f64::INFINITY; dim];
            let mut hi = vec![f64::NEG_INFINITY; dim];
            for x in samples.chunks(dim) {
                for i in 0..dim {
                    lo[i] = lo[i].min(x[i]);
                    hi[i] = hi[i].max(x[i]);
                }
            }
            for i in 0..dim {
                lo[i] -= 3.0 * h[i];
                hi[i] += 3.0 * h[i];
            }
            (Domain::new(lo, hi)?, counts.clone())
        }
    };
    if counts.len() != dim || domain.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: counts.len(),
        });
    }
    let norm: f64 = h
        .iter()
        .map(|v| v * (2.0 * std::f64::consts::PI).sqrt())
        .product::<f64>()
        * m as f64;
    if dim == 1 {
        let xs = linspace(domain.lower[0], domain.upper[0], counts[0]);
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let h0 = h[0];
        let values = xs
            .iter()
            .map(|&x| {
                let a = sorted.partition_point(|s| *s < x - KERNEL_CUTOFF * h0);
                let b = sorted.partition_point(|s| *s <= x + KERNEL_CUTOFF * h0);
                sorted[a..b]
                    .iter()
                    .map(|s| {
                        let z = (x - s) / h0;
                        (-0.5 * z * z).exp()
                    })
                    .sum::<f64>()
                    / norm
            })
            .collect();
        return DensityObservation::new(xs, values, domain, Layout::Grid1d, "kde");
    }
    let (pts, _) = midpoint_grid(&domain, &counts);
    let values = pts
        .chunks(dim)
        .map(|x| {
            let mut s = 0.0;
            'sample: for y in samples.chunks(dim) {
                let mut e = 0.0;
                for i in 0..dim {
                    let z = (x[i] - y[i]) / h[i];
                    if z.abs() > KERNEL_CUTOFF {
                        continue 'sample;
                    }
                    e += z * z;
                }
                s += (-0.5 * e).exp();
            }
            s / norm
        })
        .collect();
    DensityObservation::new(pts, values, domain, Layout::Tensor { counts }, "kde")
}

/// Writes `t,x1,..,xn` rows.
pub fn write_trajectory_csv(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for k in 0..traj.len() {
        let mut row = vec![format!("{}", traj.times[k])];
        row.extend(traj.state(k).iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `t,x1,..,xn` file; `dt` is taken from the first two rows.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(1);
    let ok = dim >= 1
        && header.get(0) == Some("t")
        && (1..=dim).all(|i| header.get(i) == Some(format!("x{i}").as_str()));
    if !ok {
        return Err(Error::Format(format!(
            "line 1: expected header t,x1,..,xn, got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Format(format!("line {line}: {e}")))?;
        if rec.len() != dim + 1 {
            return Err(Error::Format(format!(
                "line {line}: expected {} fields, got {}",
                dim + 1,
                rec.len()
            )));
        }
        for (j, f) in rec.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: cannot parse `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("line {line}: non-finite value")));
            }
            if j == 0 {
                times.push(v);
            } else {
                states.push(v);
            }
        }
    }
    let dt = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        0.0
    };
    Ok(Trajectory {
        dim,
        dt,
        seed: 0,
        times,
        states,
    })
}
