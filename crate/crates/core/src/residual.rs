//! Stationary Fokker-Planck residuals.
//!
//! For constant diagonal noise the residual of a density `p` under drift `b`
//! is `f = -sum_i d_i(b_i p) + 1/2 sum_i sigma_i^2 d_ii p`. In 1D the noise
//! may depend on `x`, in which case the last term is `1/2 (sigma^2 p)''`.
//! A 1D alpha-stable variant replaces the second-order term by a nonlocal
//! integral.

use serde::{Deserialize, Serialize};

use crate::densities::{GeneRegulation, PotentialSpec};
use crate::error::{Error, Result};
use crate::field::{JetOrder, NeuralField};

/// Closed-form drift functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClosedDrift {
    /// `b(x) = -k x`, componentwise.
    Linear { k: f64 },
    /// 1D `b(x) = sum_j c_j x^j`.
    Polynomial { coeffs: Vec<f64> },
    /// 1D gene-regulation drift.
    GeneRegulation(GeneRegulation),
    /// 1D `b(x) = -x / (1 + x^2)`.
    Cauchy,
}

pub(crate) fn poly(c: &[f64], x: f64) -> (f64, f64, f64) {
    let (mut v, mut d, mut dd) = (0.0, 0.0, 0.0);
    for &a in c.iter().rev() {
        dd = dd * x + 2.0 * d;
        d = d * x + v;
        v = v * x + a;
    }
    (v, d, dd)
}

impl ClosedDrift {
    pub fn is_one_dimensional(&self) -> bool {
        !matches!(self, ClosedDrift::Linear { .. })
    }

    /// `b(x)` and `d b_i / d x_i`.
    pub fn eval(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            ClosedDrift::Linear { k } => (x.iter().map(|v| -k * v).collect(), vec![-k; x.len()]),
            ClosedDrift::Polynomial { coeffs } => {
                let (v, d, _) = poly(coeffs, x[0]);
                (vec![v], vec![d])
            }
            ClosedDrift::GeneRegulation(g) => (vec![g.drift(x[0])], vec![g.drift_derivative(x[0])]),
            ClosedDrift::Cauchy => {
                let x = x[0];
                let d = 1.0 + x * x;
                (vec![-x / d], vec![(x * x - 1.0) / (d * d)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    Closed(ClosedDrift),
    Potential(PotentialSpec),
    Neural(NeuralField),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Diffusion {
    /// Diagonal `sigma_i`.
    Constant(Vec<f64>),
    /// 1D polynomial `sigma(x) = sum_j c_j x^j`.
    Polynomial1d(Vec<f64>),
    /// 1D neural `sigma(x)`.
    Neural(NeuralField),
}

/// Which parts of a model are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainMask {
    pub drift: bool,
    pub diffusion: bool,
}

/// Drift plus diffusion in dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeModel {
    pub dim: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub trainable: TrainMask,
}

/// Channel-major drift values at a batch: `b[i][k]`, `div[i][k] = d b_i / d x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftJets {
    pub b: Vec<Vec<f64>>,
    pub div: Vec<Vec<f64>>,
}

impl SdeModel {
    pub fn new(dim: usize, drift: Drift, diffusion: Diffusion) -> Result<Self> {
        let m = SdeModel {
            dim,
            drift,
            diffusion,
            trainable: TrainMask::default(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim;
        match &self.drift {
            Drift::Closed(c) if c.is_one_dimensional() && n != 1 => {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: n,
                });
            }
            Drift::Potential(s) if s.dim() != n => {
                return Err(Error::DimensionMismatch {
                    expected: s.dim(),
                    got: n,
                });
            }
            Drift::Neural(f) if f.input_dim() != n || f.output_dim() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: f.output_dim(),
                });
            }
            _ => {}
        }
        match &self.diffusion {
            Diffusion::Constant(s) => {
                if s.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: s.len(),
                    });
                }
                if s.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("diffusion", "non-finite sigma"));
                }
            }
            Diffusion::Polynomial1d(_) | Diffusion::Neural(_) if n != 1 => {
                return Err(Error::UnsupportedDiffusion(format!(
                    "state-dependent diffusion needs dimension 1, got {n}"
                )));
            }
            Diffusion::Neural(f) if f.input_dim() != 1 || f.output_dim() != 1 => {
                return Err(Error::DimensionMismatch {
                    expected: 1,
                    got: f.output_dim(),
                });
            }
            _ => {}
        }
        Ok(())
    }

    /// Drift and its diagonal derivatives at point-major `points`.
    pub fn drift_jets(&self, points: &[f64]) -> Result<DriftJets> {
        let n = self.dim;
        let m = points.len() / n;
        match &self.drift {
            Drift::Neural(f) => {
                let jet = f.forward_batch(points, JetOrder::First, false)?;
                Ok(DriftJets {
                    b: (0..n).map(|i| jet.value(i).to_vec()).collect(),
                    div: (0..n).map(|i| jet.grad(i, i).to_vec()).collect(),
                })
            }
            _ => {
                let mut out = DriftJets {
                    b: vec![vec![0.0; m]; n],
                    div: vec![vec![0.0; m]; n],
                };
                for (k, x) in points.chunks(n).enumerate() {
                    check_finite(x)?;
                    let (b, d) = match &self.drift {
                        Drift::Closed(c) => c.eval(x),
                        Drift::Potential(s) => s.drift_jet(x)?,
                        Drift::Neural(_) => unreachable!(),
                    };
                    for i in 0..n {
                        out.b[i][k] = b[i];
                        out.div[i][k] = d[i];
                    }
                }
                Ok(out)
            }
        }
    }

    /// Drift vector at one point.
    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let j = self.drift_jets(x)?;
        Ok(j.b.iter().map(|c| c[0]).collect())
    }

    /// Noise amplitudes `sigma_i(x)` at one point.
    pub fn sigma_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match &self.diffusion {
            Diffusion::Constant(s) => s.clone(),
            Diffusion::Polynomial1d(c) => vec![poly(c, x[0]).0],
            Diffusion::Neural(f) => f.eval_many(x)?,
        })
    }

    /// Variance terms needed by the residual at point-major `points`.
    pub fn variance_jets(&self, points: &[f64]) -> Result<VarianceJets> {
        match &self.diffusion {
            Diffusion::Constant(s) => Ok(VarianceJets::Constant(s.iter().map(|v| v * v).collect())),
            Diffusion::Polynomial1d(c) => {
                let mut a = Vec::with_capacity(points.len());
                let mut da = Vec::with_capacity(points.len());
                let mut dda = Vec::with_capacity(points.len());
                for &x in points {
                    let (s, ds, dds) = poly(c, x);
                    a.push(s * s);
                    da.push(2.0 * s * ds);
                    dda.push(2.0 * ds * ds + 2.0 * s * dds);
                }
                Ok(VarianceJets::Field1d { a, da, dda })
            }
            Diffusion::Neural(f) => {
                let j = f.forward_batch(points, JetOrder::Second, false)?;
                Ok(variance_from_sigma(
                    j.value(0),
                    j.grad(0, 0),
                    j.hess_diag(0, 0),
                ))
            }
        }
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteInput {
            index: i,
            value: x[i],
        }),
        None => Ok(()),
    }
}

/// `a = sigma^2` and its first two derivatives from a jet of `sigma`.
pub fn variance_from_sigma(s: &[f64], ds: &[f64], dds: &[f64]) -> VarianceJets {
    let mut a = Vec::with_capacity(s.len());
    let mut da = Vec::with_capacity(s.len());
    let mut dda = Vec::with_capacity(s.len());
    for k in 0..s.len() {
        a.push(s[k] * s[k]);
        da.push(2.0 * s[k] * ds[k]);
        dda.push(2.0 * ds[k] * ds[k] + 2.0 * s[k] * dds[k]);
    }
    VarianceJets::Field1d { a, da, dda }
}

/// Diffusion variance `a = sigma^2` seen by the residual.
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceJets {
    Constant(Vec<f64>),
    Field1d {
        a: Vec<f64>,
        da: Vec<f64>,
        dda: Vec<f64>,
    },
}

/// Channel-major density jets: `grad[i][k] = d_i p(x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityJets {
    pub value: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub hess_diag: Vec<Vec<f64>>,
}

/// Anything that can report `p`, `grad p` and `diag(Hess p)` at points.
pub trait DensityModel {
    fn dim(&self) -> usize;
    fn density_jets(&self, points: &[f64]) -> Result<DensityJets>;
}

impl DensityModel for NeuralField {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn density_jets(&self, points: &[f64]) -> Result<DensityJets> {
        let n = self.input_dim();
        let j = self.forward_batch(points, JetOrder::Second, false)?;
        Ok(DensityJets {
            value: j.value(0).to_vec(),
            grad: (0..n).map(|i| j.grad(0, i).to_vec()).collect(),
            hess_diag: (0..n).map(|i| j.hess_diag(0, i).to_vec()).collect(),
        })
    }
}

/// Closed-form densities with analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum ClosedDensity {
    /// Product of independent normals.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    /// 1D `exp(P(x) - log_scale) / S(x)^2` for polynomials `P`, `S`.
    ExpPoly {
        coeffs: Vec<f64>,
        log_scale: f64,
        sigma_poly: Vec<f64>,
    },
    /// 1D standard Cauchy.
    Cauchy,
    /// `exp(-2 Phi / sigma^2 - log_z)`.
    Boltzmann {
        spec: PotentialSpec,
        sigma: f64,
        log_z: f64,
    },
}

impl ClosedDensity {
    /// `p`, `d_i p`, `d_ii p` at one point.
    pub fn jet(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_finite(x)?;
        // work with log p: grad p = p g, d_ii p = p (g_i^2 + l_ii)
        let (logp, g, l2): (f64, Vec<f64>, Vec<f64>) = match self {
            ClosedDensity::Gaussian { mean, std } => {
                let mut lp = 0.0;
                let mut g = Vec::with_capacity(x.len());
                let mut l2 = Vec::with_capacity(x.len());
                for i in 0..x.len() {
                    let s2 = std[i] * std[i];
                    let d = x[i] - mean[i];
                    lp += -0.5 * d * d / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
                    g.push(-d / s2);
                    l2.push(-1.0 / s2);
                }
                (lp, g, l2)
            }
            ClosedDensity::ExpPoly {
                coeffs,
                log_scale,
                sigma_poly,
            } => {
                let (p, dp, ddp) = poly(coeffs, x[0]);
                let (s, ds, dds) = if sigma_poly.is_empty() {
                    (1.0, 0.0, 0.0)
                } else {
                    poly(sigma_poly, x[0])
                };
                let lp = p - log_scale - 2.0 * s.abs().ln();
                let g = dp - 2.0 * ds / s;
                let l2 = ddp - 2.0 * (dds * s - ds * ds) / (s * s);
                (lp, vec![g], vec![l2])
            }
            ClosedDensity::Cauchy => {
                let d = 1.0 + x[0] * x[0];
                let lp = -(std::f64::consts::PI * d).ln();
                let g = -2.0 * x[0] / d;
                let l2 = (2.0 * x[0] * x[0] - 2.0) / (d * d);
                (lp, vec![g], vec![l2])
            }
            ClosedDensity::Boltzmann { spec, sigma, log_z } => {
                let j = spec.jet(x)?;
                let c = 2.0 / (sigma * sigma);
                (
                    -c * j.phi - log_z,
                    j.grad.iter().map(|v| -c * v).collect(),
                    j.hess_diag.iter().map(|v| -c * v).collect(),
                )
            }
        };
        let p = logp.exp();
        let grad = g.iter().map(|v| p * v).collect();
        let hess = g
            .iter()
            .zip(&l2)
            .map(|(gi, li)| p * (gi * gi + li))
            .collect();
        Ok((p, grad, hess))
    }
}

impl DensityModel for ClosedDensity {
    fn dim(&self) -> usize {
        match self {
            ClosedDensity::Gaussian { mean, .. } => mean.len(),
            ClosedDensity::Boltzmann { spec, .. } => spec.dim(),
            _ => 1,
        }
    }

    fn density_jets(&self, points: &[f64]) -> Result<DensityJets> {
        let n = DensityModel::dim(self);
        let m = points.len() / n;
        let mut out = DensityJets {
            value: Vec::with_capacity(m),
            grad: vec![Vec::with_capacity(m); n],
            hess_diag: vec![Vec::with_capacity(m); n],
        };
        for x in points.chunks(n) {
            let (p, g, h) = self.jet(x)?;
            out.value.push(p);
            for i in 0..n {
                out.grad[i].push(g[i]);
                out.hess_diag[i].push(h[i]);
            }
        }
        Ok(out)
    }
}

/// Density values on a uniform 1D grid `x0 + k h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedDensity1d {
    pub x0: f64,
    pub h: f64,
    pub values: Vec<f64>,
}

impl TabulatedDensity1d {
    pub fn from_fn(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let h = (hi - lo) / (n - 1) as f64;
        TabulatedDensity1d {
            x0: lo,
            h,
            values: (0..n).map(|k| f(lo + h * k as f64)).collect(),
        }
    }

    pub fn x(&self, k: usize) -> f64 {
        self.x0 + self.h * k as f64
    }

    /// Grid index of `x`, which must be a node.
    pub fn node(&self, x: f64) -> Result<usize> {
        let t = (x - self.x0) / self.h;
        let k = t.round();
        if (t - k).abs() > 1e-6 || k < 0.0 || k as usize >= self.values.len() {
            return Err(Error::InvalidPoint(format!(
                "{x} is not a node of the tabulated grid"
            )));
        }
        Ok(k as usize)
    }

    fn require_margin(&self, k: usize, margin: usize) -> Result<()> {
        if k < margin || k + margin >= self.values.len() {
            return Err(Error::DomainCoverage(format!(
                "node {} needs {margin} nodes on each side, grid has {}",
                self.x(k),
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Fourth-order central differences `(p, p', p'')` at node `k`.
    pub fn derivatives(&self, k: usize) -> Result<(f64, f64, f64)> {
        self.require_margin(k, 2)?;
        let v = &self.values;
        let h = self.h;
        let d1 = (-v[k + 2] + 8.0 * v[k + 1] - 8.0 * v[k - 1] + v[k - 2]) / (12.0 * h);
        let d2 = (-v[k + 2] + 16.0 * v[k + 1] - 30.0 * v[k] + 16.0 * v[k - 1] - v[k - 2])
            / (12.0 * h * h);
        Ok((v[k], d1, d2))
    }
}

impl DensityModel for TabulatedDensity1d {
    fn dim(&self) -> usize {
        1
    }

    fn density_jets(&self, points: &[f64]) -> Result<DensityJets> {
        let mut out = DensityJets {
            value: Vec::with_capacity(points.len()),
            grad: vec![Vec::with_capacity(points.len())],
            hess_diag: vec![Vec::with_capacity(points.len())],
        };
        for &x in points {
            let (p, d1, d2) = self.derivatives(self.node(x)?)?;
            out.value.push(p);
            out.grad[0].push(d1);
            out.hess_diag[0].push(d2);
        }
        Ok(out)
    }
}

/// Residual values at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBatch {
    pub points: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl ResidualBatch {
    pub fn max_abs(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Pointwise residual from precomputed jets.
pub fn residual_values(p: &DensityJets, b: &DriftJets, var: &VarianceJets) -> Vec<f64> {
    let n = p.grad.len();
    let m = p.value.len();
    let mut f = vec![0.0; m];
    for i in 0..n {
        let (dp, d2p, bi, di) = (&p.grad[i], &p.hess_diag[i], &b.b[i], &b.div[i]);
        for k in 0..m {
            f[k] -= di[k] * p.value[k] + bi[k] * dp[k];
        }
        match var {
            VarianceJets::Constant(a) => {
                for k in 0..m {
                    f[k] += 0.5 * a[i] * d2p[k];
                }
            }
            VarianceJets::Field1d { a, da, dda } => {
                for k in 0..m {
                    f[k] += 0.5 * (dda[k] * p.value[k] + 2.0 * da[k] * dp[k] + a[k] * d2p[k]);
                }
            }
        }
    }
    f
}

/// Sum of magnitudes of the individual residual terms, a natural scale for `f`.
pub fn residual_scale(p: &DensityJets, b: &DriftJets, var: &VarianceJets) -> Vec<f64> {
    let n = p.grad.len();
    let m = p.value.len();
    let mut s = vec![0.0; m];
    for i in 0..n {
        for k in 0..m {
            s[k] += (b.div[i][k] * p.value[k]).abs() + (b.b[i][k] * p.grad[i][k]).abs();
            s[k] += match var {
                VarianceJets::Constant(a) => (0.5 * a[i] * p.hess_diag[i][k]).abs(),
                VarianceJets::Field1d { a, da, dda } => {
                    (0.5 * dda[k] * p.value[k]).abs()
                        + (da[k] * p.grad[i][k]).abs()
                        + (0.5 * a[k] * p.hess_diag[i][k]).abs()
                }
            };
        }
    }
    s
}

/// Adjoints of every residual input given `f_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAdjoint {
    pub p: DensityJets,
    pub b: DriftJets,
    pub var: VarianceJets,
}

/// Reverse pass of [`residual_values`].
pub fn residual_pullback(
    p: &DensityJets,
    b: &DriftJets,
    var: &VarianceJets,
    f_bar: &[f64],
) -> ResidualAdjoint {
    let n = p.grad.len();
    let m = p.value.len();
    let mut ap = DensityJets {
        value: vec![0.0; m],
        grad: vec![vec![0.0; m]; n],
        hess_diag: vec![vec![0.0; m]; n],
    };
    let mut ab = DriftJets {
        b: vec![vec![0.0; m]; n],
        div: vec![vec![0.0; m]; n],
    };
    let mut av = match var {
        VarianceJets::Constant(a) => VarianceJets::Constant(vec![0.0; a.len()]),
        VarianceJets::Field1d { .. } => VarianceJets::Field1d {
            a: vec![0.0; m],
            da: vec![0.0; m],
            dda: vec![0.0; m],
        },
    };
    for i in 0..n {
        for k in 0..m {
            let fb = f_bar[k];
            ap.value[k] -= b.div[i][k] * fb;
            ap.grad[i][k] -= b.b[i][k] * fb;
            ab.b[i][k] = -p.grad[i][k] * fb;
            ab.div[i][k] = -p.value[k] * fb;
        }
        match (var, &mut av) {
            (VarianceJets::Constant(a), VarianceJets::Constant(abar)) => {
                for k in 0..m {
                    ap.hess_diag[i][k] += 0.5 * a[i] * f_bar[k];
                    abar[i] += 0.5 * p.hess_diag[i][k] * f_bar[k];
                }
            }
            (
                VarianceJets::Field1d { a, da, dda },
                VarianceJets::Field1d {
                    a: abar,
                    da: dabar,
                    dda: ddabar,
                },
            ) => {
                for k in 0..m {
                    let fb = f_bar[k];
                    ap.value[k] += 0.5 * dda[k] * fb;
                    ap.grad[i][k] += da[k] * fb;
                    ap.hess_diag[i][k] += 0.5 * a[k] * fb;
                    abar[k] = 0.5 * p.hess_diag[i][k] * fb;
                    dabar[k] = p.grad[i][k] * fb;
                    ddabar[k] = 0.5 * p.value[k] * fb;
                }
            }
            _ => unreachable!(),
        }
    }
    ResidualAdjoint {
        p: ap,
        b: ab,
        var: av,
    }
}

/// Residual of `density` under `model` at point-major `points`.
pub fn adjoint_residual(
    model: &SdeModel,
    density: &dyn DensityModel,
    points: &[f64],
) -> Result<ResidualBatch> {
    model.validate()?;
    let n = model.dim;
    if density.dim() != n || !points.len().is_multiple_of(n) {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: density.dim(),
        });
    }
    let p = density.density_jets(points)?;
    let b = model.drift_jets(points)?;
    let v = model.variance_jets(points)?;
    Ok(ResidualBatch {
        points: points.to_vec(),
        residuals: residual_values(&p, &b, &v),
    })
}

/// `C_{1,alpha}` of the symmetric alpha-stable jump measure in 1D.
pub fn levy_constant(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::InvalidStability(alpha));
    }
    use statrs::function::gamma::gamma;
    Ok(alpha * gamma((1.0 + alpha) / 2.0)
        / (2f64.powf(1.0 - alpha) * std::f64::consts::PI.sqrt() * gamma(1.0 - alpha / 2.0)))
}

/// Nonlocal residual `-(b p)' + eps^alpha int [p(x+y) - p(x)] nu(dy)` at grid nodes.
///
/// The jump integral is split at `delta = h`: the inner part uses
/// `p''(x) delta^(2-alpha)/(2-alpha)`, `delta <= |y| <= radius` uses the
/// trapezoid rule on the grid, and the tail beyond `radius` uses the power
/// law with `p(x +- radius)` frozen. `drift` returns `(b, b')`.
pub fn levy_residual_1d(
    drift: impl Fn(f64) -> (f64, f64),
    eps: f64,
    alpha: f64,
    density: &TabulatedDensity1d,
    points: &[f64],
    radius: f64,
) -> Result<ResidualBatch> {
    let c = levy_constant(alpha)?;
    let h = density.h;
    let kmax = (radius / h).round() as usize;
    if kmax < 2 || ((kmax as f64) * h - radius).abs() > 1e-6 * h {
        return Err(Error::config(
            "radius",
            format!("truncation radius {radius} must be a multiple (>= 2) of the grid step {h}"),
        ));
    }
    let scale = eps.powf(alpha);
    let mut res = Vec::with_capacity(points.len());
    for &x in points {
        let k = density.node(x)?;
        density.require_margin(k, kmax.max(2))?;
        let (p, dp, d2p) = density.derivatives(k)?;
        let (b, db) = drift(x);
        let v = &density.values;
        let mut jump = c * d2p * h.powf(2.0 - alpha) / (2.0 - alpha);
        for j in 1..=kmax {
            let y = h * j as f64;
            let w = if j == 1 || j == kmax { 0.5 * h } else { h };
            jump += w * c * (v[k + j] + v[k - j] - 2.0 * p) * y.powf(-1.0 - alpha);
        }
        let tail = c * radius.powf(-alpha) / alpha;
        jump += tail * (v[k + kmax] + v[k - kmax] - 2.0 * p);
        res.push(-(db * p + b * dp) + scale * jump);
    }
    Ok(ResidualBatch {
        points: points.to_vec(),
        residuals: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{boltzmann_normalizer, stationary_density_1d};
    use crate::field::{init_field, OutputTransform};
    use crate::quadrature::{linspace, Domain};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(dim: usize, drift: Drift, diffusion: Diffusion) -> SdeModel {
        SdeModel::new(dim, drift, diffusion).unwrap()
    }

    #[test]
    fn ou_with_standard_normal_vanishes() {
        let m = model(
            1,
            Drift::Closed(ClosedDrift::Linear { k: 0.5 }),
            Diffusion::Constant(vec![1.0]),
        );
        let d = ClosedDensity::Gaussian {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let r = adjoint_residual(&m, &d, &linspace(-4.0, 4.0, 81)).unwrap();
        assert!(r.max_abs() < 1e-10);
    }

    #[test]
    fn double_well_closed_form_vanishes() {
        let m = model(
            1,
            Drift::Closed(ClosedDrift::Polynomial {
                coeffs: vec![0.0, 1.0, 0.0, -1.0],
            }),
            Diffusion::Constant(vec![1.0]),
        );
        let d = ClosedDensity::ExpPoly {
            coeffs: vec![0.0, 0.0, 1.0, 0.0, -0.5],
            log_scale: 1.0,
            sigma_poly: vec![],
        };
        let r = adjoint_residual(&m, &d, &linspace(-3.0, 3.0, 61)).unwrap();
        assert!(r.max_abs() < 1e-8);
    }

    #[test]
    fn cauchy_drift_with_cauchy_density_vanishes() {
        let m = model(
            1,
            Drift::Closed(ClosedDrift::Cauchy),
            Diffusion::Constant(vec![1.0]),
        );
        let r = adjoint_residual(&m, &ClosedDensity::Cauchy, &linspace(-10.0, 10.0, 41)).unwrap();
        assert!(r.max_abs() < 1e-14);
    }

    #[test]
    fn three_dim_boltzmann_vanishes() {
        let spec = crate::densities::PotentialSpec::three_dim();
        let dom = Domain::cube(3, -4.0, 4.0);
        let z = boltzmann_normalizer(&spec, &dom, &[40; 3], &[1.0; 3]).unwrap();
        let m = model(
            3,
            Drift::Potential(spec.clone()),
            Diffusion::Constant(vec![1.0; 3]),
        );
        let d = ClosedDensity::Boltzmann {
            spec,
            sigma: 1.0,
            log_z: z.ln(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..300).map(|_| rng.gen_range(-3.5..3.5)).collect();
        let r = adjoint_residual(&m, &d, &pts).unwrap();
        assert!(r.max_abs() < 1e-6, "{}", r.max_abs());
    }

    #[test]
    fn five_dim_boltzmann_vanishes_with_scaled_noise() {
        let spec = crate::densities::PotentialSpec::five_dim();
        let s = 0.7;
        let m = model(
            5,
            Drift::Potential(spec.clone()),
            Diffusion::Constant(vec![s; 5]),
        );
        let d = ClosedDensity::Boltzmann {
            spec,
            sigma: s,
            log_z: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<f64> = (0..250).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jets = d.density_jets(&pts).unwrap();
        let b = m.drift_jets(&pts).unwrap();
        let v = m.variance_jets(&pts).unwrap();
        let f = residual_values(&jets, &b, &v);
        let sc = residual_scale(&jets, &b, &v);
        for (fi, si) in f.iter().zip(&sc) {
            assert!(fi.abs() <= 1e-12 * si);
        }
    }

    #[test]
    fn state_dependent_noise_pair_vanishes() {
        // p = exp(P)/S^2 is stationary for b = S^2 P' / 2
        let pc = [0.3, 0.5, -0.4, 0.1, -0.2];
        let sc = [1.0, 0.2, 0.3];
        let xs = linspace(-2.0, 2.0, 41);
        let d = ClosedDensity::ExpPoly {
            coeffs: pc.to_vec(),
            log_scale: 0.0,
            sigma_poly: sc.to_vec(),
        };
        let p = d.density_jets(&xs).unwrap();
        let mut b = DriftJets {
            b: vec![vec![]],
            div: vec![vec![]],
        };
        for &x in &xs {
            let (_, dp, ddp) = poly(&pc, x);
            let (s, ds, _) = poly(&sc, x);
            b.b[0].push(0.5 * s * s * dp);
            b.div[0].push(s * ds * dp + 0.5 * s * s * ddp);
        }
        let m = model(
            1,
            Drift::Closed(ClosedDrift::Linear { k: 0.0 }),
            Diffusion::Polynomial1d(sc.to_vec()),
        );
        let v = m.variance_jets(&xs).unwrap();
        let f = residual_values(&p, &b, &v);
        let s = residual_scale(&p, &b, &v);
        for (fi, si) in f.iter().zip(&s) {
            assert!(fi.abs() <= 1e-12 * si, "{fi} {si}");
        }
    }

    #[test]
    fn non_constant_diffusion_rejected_above_1d() {
        let e = SdeModel::new(
            2,
            Drift::Closed(ClosedDrift::Linear { k: 1.0 }),
            Diffusion::Polynomial1d(vec![1.0]),
        )
        .unwrap_err();
        assert!(matches!(e, Error::UnsupportedDiffusion(_)));
    }

    #[test]
    fn tabulated_stationary_density_is_discretely_stationary() {
        let b = |x: f64| 0.5 - x + 0.3 * x * x - 0.2 * x * x * x;
        let d = Domain::interval(-4.0, 4.0);
        let obs = stationary_density_1d(b, |_| 0.9, &d, 1601).unwrap();
        let tab = TabulatedDensity1d {
            x0: -4.0,
            h: obs.xs()[1] - obs.xs()[0],
            values: obs.values.clone(),
        };
        let m = model(
            1,
            Drift::Closed(ClosedDrift::Polynomial {
                coeffs: vec![0.5, -1.0, 0.3, -0.2],
            }),
            Diffusion::Constant(vec![0.9]),
        );
        let r = adjoint_residual(&m, &tab, &obs.xs()[2..1599]).unwrap();
        assert!(r.max_abs() < 1e-4, "{}", r.max_abs());
    }

    #[test]
    fn residual_is_linear_in_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f1 = init_field(&[2, 8, 8, 1], 1, OutputTransform::Squared).unwrap();
        let f2 = init_field(&[2, 8, 8, 1], 2, OutputTransform::Identity).unwrap();
        let m = model(
            2,
            Drift::Closed(ClosedDrift::Linear { k: 0.7 }),
            Diffusion::Constant(vec![1.0, 0.5]),
        );
        let pts: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r1 = adjoint_residual(&m, &f1, &pts).unwrap();
        let r2 = adjoint_residual(&m, &f2, &pts).unwrap();
        let p1 = f1.density_jets(&pts).unwrap();
        let p2 = f2.density_jets(&pts).unwrap();
        let sum = DensityJets {
            value: p1.value.iter().zip(&p2.value).map(|(a, b)| a + b).collect(),
            grad: (0..2)
                .map(|i| {
                    p1.grad[i]
                        .iter()
                        .zip(&p2.grad[i])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect(),
            hess_diag: (0..2)
                .map(|i| {
                    p1.hess_diag[i]
                        .iter()
                        .zip(&p2.hess_diag[i])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect(),
        };
        let f = residual_values(
            &sum,
            &m.drift_jets(&pts).unwrap(),
            &m.variance_jets(&pts).unwrap(),
        );
        for k in 0..f.len() {
            let lin = r1.residuals[k] + r2.residuals[k];
            assert!((f[k] - lin).abs() < 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn pullback_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 7;
        let rand_vec = |rng: &mut ChaCha8Rng| {
            (0..m)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let p = DensityJets {
            value: rand_vec(&mut rng),
            grad: vec![rand_vec(&mut rng)],
            hess_diag: vec![rand_vec(&mut rng)],
        };
        let b = DriftJets {
            b: vec![rand_vec(&mut rng)],
            div: vec![rand_vec(&mut rng)],
        };
        let v = VarianceJets::Field1d {
            a: rand_vec(&mut rng),
            da: rand_vec(&mut rng),
            dda: rand_vec(&mut rng),
        };
        let fb = rand_vec(&mut rng);
        let adj = residual_pullback(&p, &b, &v, &fb);
        // f is bilinear, so perturbing one input at a time checks each adjoint exactly
        let obj = |p: &DensityJets, b: &DriftJets, v: &VarianceJets| -> f64 {
            residual_values(p, b, v)
                .iter()
                .zip(&fb)
                .map(|(a, c)| a * c)
                .sum()
        };
        let base = obj(&p, &b, &v);
        for k in 0..m {
            let mut q = p.clone();
            q.hess_diag[0][k] += 1.0;
            assert!((obj(&q, &b, &v) - base - adj.p.hess_diag[0][k]).abs() < 1e-12);
            let mut q = p.clone();
            q.value[k] += 1.0;
            assert!((obj(&q, &b, &v) - base - adj.p.value[k]).abs() < 1e-12);
            let mut c = b.clone();
            c.div[0][k] += 1.0;
            assert!((obj(&p, &c, &v) - base - adj.b.div[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn levy_constant_values() {
        assert!((levy_constant(1.0).unwrap() - 1.0 / std::f64::consts::PI).abs() < 1e-14);
        assert!(matches!(
            levy_constant(2.0),
            Err(Error::InvalidStability(_))
        ));
        assert!(matches!(
            levy_constant(0.0),
            Err(Error::InvalidStability(_))
        ));
    }

    #[test]
    fn levy_constant_density_has_zero_residual() {
        let tab = TabulatedDensity1d::from_fn(-30.0, 30.0, 601, |_| 0.2);
        let r = levy_residual_1d(|_| (0.0, 0.0), 1.0, 1.3, &tab, &[0.0, 1.0, -2.5], 20.0).unwrap();
        assert!(r.max_abs() < 1e-14);
    }

    #[test]
    fn levy_even_density_two_ways() {
        let p = |x: f64| (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let tab = TabulatedDensity1d::from_fn(-40.0, 40.0, 8001, p);
        let (alpha, radius) = (0.8, 20.0);
        let r = levy_residual_1d(|_| (0.0, 0.0), 1.0, alpha, &tab, &[0.0], radius).unwrap();
        // full-line sum over k != 0 of [p(kh) - p(0)] |kh|^(-1-alpha) with end weights halved
        let c = levy_constant(alpha).unwrap();
        let h = tab.h;
        let kmax = (radius / h).round() as i64;
        let mut s = 0.0;
        for k in -kmax..=kmax {
            if k == 0 {
                continue;
            }
            let w = if k.abs() == 1 || k.abs() == kmax {
                0.5 * h
            } else {
                h
            };
            s += w * (p(k as f64 * h) - p(0.0)) * (k.abs() as f64 * h).powf(-1.0 - alpha);
        }
        let (_, _, d2) = tab.derivatives(4000).unwrap();
        let expected = c
            * (s + d2 * h.powf(2.0 - alpha) / (2.0 - alpha)
                + radius.powf(-alpha) / alpha * (2.0 * p(radius) - 2.0 * p(0.0)));
        assert!((r.residuals[0] - expected).abs() < 1e-8);
    }

    fn cauchy_grid(h: f64, half: f64) -> TabulatedDensity1d {
        let n = (2.0 * half / h).round() as usize + 1;
        TabulatedDensity1d::from_fn(-half, half, n, |x| {
            1.0 / (std::f64::consts::PI * (1.0 + x * x))
        })
    }

    #[test]
    fn levy_cauchy_free_motion_is_not_stationary() {
        // the alpha = 1 operator maps the Cauchy density to (x^2 - 1) / (pi (1 + x^2)^2), -1/pi at 0
        let tab = cauchy_grid(0.005, 300.0);
        let r = levy_residual_1d(|_| (0.0, 0.0), 1.0, 1.0, &tab, &[0.0], 200.0).unwrap();
        assert!(
            (r.residuals[0] + 1.0 / std::f64::consts::PI).abs() < 5e-3,
            "{}",
            r.residuals[0]
        );
    }

    #[test]
    fn levy_cauchy_with_linear_restoring_drift() {
        let pts = [0.0, 0.5, -1.0];
        let mut prev = f64::INFINITY;
        for h in [0.02, 0.01] {
            let tab = cauchy_grid(h, 300.0);
            let r = levy_residual_1d(|x| (-x, -1.0), 1.0, 1.0, &tab, &pts, 200.0).unwrap();
            assert!(r.max_abs() < 5e-3, "h = {h}: {:?}", r.residuals);
            assert!(r.max_abs() < prev);
            prev = r.max_abs();
        }
    }

    #[test]
    fn levy_coverage_errors() {
        let tab = cauchy_grid(0.1, 10.0);
        let e = levy_residual_1d(|_| (0.0, 0.0), 1.0, 1.0, &tab, &[0.0], 15.0).unwrap_err();
        assert!(matches!(e, Error::DomainCoverage(_)));
        let e = levy_residual_1d(|_| (0.0, 0.0), 1.0, 2.5, &tab, &[0.0], 5.0).unwrap_err();
        assert!(matches!(e, Error::InvalidStability(_)));
    }
}
