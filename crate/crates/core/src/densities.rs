//! Observation densities: closed-form targets, the scalar stationary density,
//! two-well potentials in 3D/5D and their Boltzmann densities.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{cumulative_simpson, linspace, midpoint_grid, simpson_weights, Domain};

/// Smallest density value kept before taking logarithms.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// How the observation points are arranged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    /// Uniform 1D grid including both endpoints (Simpson weights).
    Grid1d,
    /// Tensor-product cell centres, last axis fastest (midpoint weights).
    Tensor { counts: Vec<usize> },
    /// Arbitrary points, equal Monte Carlo weights `volume / N`.
    Scattered,
}

/// Density values `q(x_i)` on a point set inside a box.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityObservation {
    pub dim: usize,
    /// Point-major, `len() x dim`.
    pub points: Vec<f64>,
    pub values: Vec<f64>,
    pub domain: Domain,
    pub label: String,
    pub layout: Layout,
    /// Quadrature weight of each point.
    pub weights: Vec<f64>,
}

impl DensityObservation {
    /// Builds an observation and its quadrature weights, validating values and points.
    pub fn new(
        points: Vec<f64>,
        values: Vec<f64>,
        domain: Domain,
        layout: Layout,
        label: impl Into<String>,
    ) -> Result<Self> {
        domain.validate()?;
        let dim = domain.dim();
        if points.len() != values.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: values.len() * dim,
                got: points.len(),
            });
        }
        let weights = quadrature_weights(&points, dim, &domain, &layout)?;
        let obs = DensityObservation {
            dim,
            points,
            values,
            domain,
            label: label.into(),
            layout,
            weights,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .values
            .iter()
            .position(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidDensity {
                index: i,
                value: self.values[i],
            });
        }
        for i in 0..self.len() {
            if !self.domain.contains(self.point(i)) {
                return Err(Error::InvalidPoint(format!(
                    "observation point {i} {:?} lies outside the domain",
                    self.point(i)
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Quadrature estimate of the total mass on the domain.
    pub fn integral(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Same points and weights, new values.
    pub fn with_values(&self, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let obs = DensityObservation {
            values,
            label: label.into(),
            ..self.clone()
        };
        obs.validate()?;
        Ok(obs)
    }

    /// Coordinates along axis 0 for 1D grids.
    pub fn xs(&self) -> &[f64] {
        &self.points
    }
}

fn quadrature_weights(
    points: &[f64],
    dim: usize,
    domain: &Domain,
    layout: &Layout,
) -> Result<Vec<f64>> {
    let n = points.len() / dim.max(1);
    match layout {
        Layout::Grid1d => {
            if dim != 1 {
                return Err(Error::config("layout", "grid_1d requires dimension 1"));
            }
            if n < 2 {
                return Err(Error::InsufficientSamples { needed: 2, got: n });
            }
            let h = (points[n - 1] - points[0]) / (n - 1) as f64;
            check_uniform(points, h)?;
            Ok(simpson_weights(n, h))
        }
        Layout::Tensor { counts } => {
            if counts.len() != dim || counts.iter().product::<usize>() != n {
                return Err(Error::config(
                    "layout.counts",
                    format!("counts {counts:?} do not match {n} points in {dim} dimensions"),
                ));
            }
            let cell: f64 = (0..dim)
                .map(|i| (domain.upper[i] - domain.lower[i]) / counts[i] as f64)
                .product();
            Ok(vec![cell; n])
        }
        Layout::Scattered => {
            if n == 0 {
                return Err(Error::InsufficientSamples { needed: 1, got: 0 });
            }
            Ok(vec![domain.volume() / n as f64; n])
        }
    }
}

fn check_uniform(xs: &[f64], h: f64) -> Result<()> {
    if !(h > 0.0) {
        return Err(Error::Format("grid is not increasing".into()));
    }
    for (i, w) in xs.windows(2).enumerate() {
        let d = w[1] - w[0];
        if !(d > 0.0) {
            return Err(Error::Format(format!(
                "grid is not increasing at row {}",
                i + 1
            )));
        }
        if (d - h).abs() > 1e-6 * h {
            return Err(Error::Format(format!(
                "grid is not uniform at row {}",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Normalised stationary density of `dX = b dt + sigma dB` on an interval.
///
/// `p(x) = C / sigma^2(x) * exp(int_{x*}^{x} 2 b / sigma^2)` with `x*` the
/// interval midpoint.
pub fn stationary_density_1d(
    drift: impl Fn(f64) -> f64,
    sigma: impl Fn(f64) -> f64,
    domain: &Domain,
    n: usize,
) -> Result<DensityObservation> {
    let mid = domain.center().first().copied().unwrap_or(0.0);
    stationary_density_1d_with_reference(drift, sigma, domain, n, mid)
}

/// As [`stationary_density_1d`] with an explicit reference point `x*`.
pub fn stationary_density_1d_with_reference(
    drift: impl Fn(f64) -> f64,
    sigma: impl Fn(f64) -> f64,
    domain: &Domain,
    n: usize,
    x_ref: f64,
) -> Result<DensityObservation> {
    domain.validate()?;
    if domain.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: domain.dim(),
        });
    }
    if n < 3 {
        return Err(Error::InsufficientSamples { needed: 3, got: n });
    }
    let (lo, hi) = (domain.lower[0], domain.upper[0]);
    if !(lo..=hi).contains(&x_ref) {
        return Err(Error::InvalidPoint(format!(
            "reference point {x_ref} outside [{lo}, {hi}]"
        )));
    }
    let xs = linspace(lo, hi, n);
    let h = xs[1] - xs[0];
    let mut s2 = Vec::with_capacity(n);
    let mut integrand = Vec::with_capacity(n);
    for &x in &xs {
        let s = sigma(x);
        let sq = s * s;
        if !(sq.is_finite() && sq > 1e-14) {
            return Err(Error::DegenerateDiffusion { x, sigma_sq: sq });
        }
        s2.push(sq);
        integrand.push(2.0 * drift(x) / sq);
    }
    let cum = cumulative_simpson(&integrand, h);
    let at_ref = interp_linear(&xs, &cum, x_ref);
    let log_p: Vec<f64> = cum
        .iter()
        .zip(&s2)
        .map(|(c, sq)| c - at_ref - sq.ln())
        .collect();
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max > f64::MAX.ln() {
        return Err(Error::DivergentDensity(format!(
            "log-density reaches {max} on [{lo}, {hi}]"
        )));
    }
    let raw: Vec<f64> = log_p.iter().map(|l| (l - max).exp()).collect();
    let w = simpson_weights(n, h);
    let mass: f64 = raw.iter().zip(&w).map(|(v, w)| v * w).sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::DivergentDensity(format!("mass {mass}")));
    }
    let values = raw.iter().map(|v| (v / mass).max(DENSITY_FLOOR)).collect();
    DensityObservation::new(xs, values, domain.clone(), Layout::Grid1d, "stationary_1d")
}

fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let h = xs[1] - xs[0];
    let t = ((x - xs[0]) / h).clamp(0.0, (xs.len() - 1) as f64);
    let k = (t.floor() as usize).min(xs.len() - 2);
    let f = t - k as f64;
    ys[k] * (1.0 - f) + ys[k + 1] * f
}

/// Gene-regulation drift `k_f x^2 / (x^2 + K_d) - k_d x + R_bas`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneRegulation {
    pub k_f: f64,
    pub k_d: f64,
    #[serde(rename = "K_d")]
    pub big_k_d: f64,
    pub r_bas: f64,
}

impl Default for GeneRegulation {
    fn default() -> Self {
        GeneRegulation {
            k_f: 6.0,
            k_d: 1.0,
            big_k_d: 10.0,
            r_bas: 0.4,
        }
    }
}

impl GeneRegulation {
    pub fn drift(&self, x: f64) -> f64 {
        self.k_f * x * x / (x * x + self.big_k_d) - self.k_d * x + self.r_bas
    }

    pub fn drift_derivative(&self, x: f64) -> f64 {
        let d = x * x + self.big_k_d;
        self.k_f * 2.0 * x * self.big_k_d / (d * d) - self.k_d
    }
}

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

/// Names accepted by [`observation_library`].
pub const LIBRARY_NAMES: [&str; 4] = ["gaussian", "double_well", "cauchy", "gene_regulation"];

/// Analytic target densities on a uniform 1D grid.
///
/// Common parameters: `lower`, `upper`, `n`. Family parameters:
/// gaussian `mean`, `std`; double_well `sigma` (only 1 supported);
/// gene_regulation `k_f`, `k_d`, `K_d`, `R_bas`, `sigma`.
pub fn observation_library(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<DensityObservation> {
    let (lo_d, hi_d) = match name {
        "gaussian" | "double_well" => (-5.0, 5.0),
        "cauchy" => (-20.0, 20.0),
        "gene_regulation" => (0.0, 15.0),
        _ => return Err(Error::UnknownObservation(name.to_string())),
    };
    let lo = param(params, "lower", lo_d);
    let hi = param(params, "upper", hi_d);
    let n = param(params, "n", 1001.0);
    if !(n >= 3.0 && n.fract() == 0.0) {
        return Err(Error::config(
            "params.n",
            format!("need an integer >= 3, got {n}"),
        ));
    }
    let n = n as usize;
    let domain = Domain::new(vec![lo], vec![hi])?;
    let xs = linspace(lo, hi, n);
    let values: Vec<f64> = match name {
        "gaussian" => {
            let mu = param(params, "mean", 0.0);
            let sd = param(params, "std", 1.0);
            if !(sd > 0.0) {
                return Err(Error::config("params.std", "must be positive"));
            }
            xs.iter().map(|x| gaussian_pdf(*x, mu, sd)).collect()
        }
        "double_well" => {
            let sigma = param(params, "sigma", 1.0);
            if sigma != 1.0 {
                return Err(Error::UnsupportedDiffusion(format!(
                    "double_well target is defined for sigma = 1 only, got {sigma}"
                )));
            }
            let un: Vec<f64> = xs.iter().map(|x| (x * x - x.powi(4) / 2.0).exp()).collect();
            let a = crate::quadrature::simpson(&un, xs[1] - xs[0]);
            un.iter().map(|v| v / a).collect()
        }
        "cauchy" => xs
            .iter()
            .map(|x| 1.0 / (std::f64::consts::PI * (1.0 + x * x)))
            .collect(),
        "gene_regulation" => {
            let g = GeneRegulation {
                k_f: param(params, "k_f", 6.0),
                k_d: param(params, "k_d", 1.0),
                big_k_d: param(params, "K_d", 10.0),
                r_bas: param(params, "R_bas", 0.4),
            };
            let sigma = param(params, "sigma", 1.0);
            let obs = stationary_density_1d(|x| g.drift(x), |_| sigma, &domain, n)?;
            return Ok(DensityObservation {
                label: name.to_string(),
                ..obs
            });
        }
        _ => unreachable!(),
    };
    DensityObservation::new(xs, values, domain, Layout::Grid1d, name)
}

pub fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
}

/// Which two-well potential family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialFamily {
    /// Two weighted Gaussian wells in 3D, quadratic exponents.
    ThreeDim,
    /// Two exponentials of linear forms in 5D.
    FiveDim,
}

impl PotentialFamily {
    pub fn dim(self) -> usize {
        match self {
            PotentialFamily::ThreeDim => 3,
            PotentialFamily::FiveDim => 5,
        }
    }

    fn weights(self) -> [f64; 2] {
        match self {
            PotentialFamily::ThreeDim => [2.0, 1.0],
            PotentialFamily::FiveDim => [1.0, 1.0],
        }
    }
}

/// `Phi(x) = -1/2 log sum_k w_k exp(E_k(x))`, where group `k` uses
/// coefficients `lambda0[k*n..(k+1)*n]` and centres `lambda1[k*n..(k+1)*n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub family: PotentialFamily,
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
}

/// Value, gradient and Hessian diagonal of a potential at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialJet {
    pub phi: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

struct GroupTerms {
    /// Softmax weights of the two groups.
    pi: [f64; 2],
    log_sum: f64,
    /// `d E_k / d x_i`, `k*n + i`.
    g: Vec<f64>,
    /// `d^2 E_k / d x_i^2`.
    h: Vec<f64>,
}

impl PotentialSpec {
    pub fn new(family: PotentialFamily, lambda0: Vec<f64>, lambda1: Vec<f64>) -> Result<Self> {
        let s = PotentialSpec {
            family,
            lambda0,
            lambda1,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn three_dim() -> Self {
        PotentialSpec {
            family: PotentialFamily::ThreeDim,
            lambda0: vec![-5.0, -2.5, -5.0, -1.0, -1.0, -1.0],
            lambda1: vec![1.0, 1.0, 1.0, -2.0, -1.0, -1.0],
        }
    }

    pub fn five_dim() -> Self {
        PotentialSpec {
            family: PotentialFamily::FiveDim,
            lambda0: vec![-1.0; 10],
            lambda1: vec![1.0, 1.0, 1.0, 1.5, 1.5, -2.0, -1.0, -1.0, -1.0, -2.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = 2 * self.family.dim();
        if self.lambda0.len() != want || self.lambda1.len() != want {
            return Err(Error::config(
                "potential",
                format!(
                    "{:?} needs {want} entries in lambda0 and lambda1, got {} and {}",
                    self.family,
                    self.lambda0.len(),
                    self.lambda1.len()
                ),
            ));
        }
        if self
            .lambda0
            .iter()
            .chain(&self.lambda1)
            .any(|v| !v.is_finite())
        {
            return Err(Error::config("potential", "non-finite lambda"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    /// All parameters as `[lambda0, lambda1]`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.lambda0.clone();
        v.extend_from_slice(&self.lambda1);
        v
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        let m = self.lambda0.len();
        self.lambda0.copy_from_slice(&theta[..m]);
        self.lambda1.copy_from_slice(&theta[m..2 * m]);
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidPoint(format!(
                "expected a point in R^{}, got {} coordinates",
                self.dim(),
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                index: i,
                value: x[i],
            });
        }
        Ok(())
    }

    fn terms(&self, x: &[f64]) -> GroupTerms {
        let n = self.dim();
        let w = self.family.weights();
        let mut e = [0.0; 2];
        let mut g = vec![0.0; 2 * n];
        let mut h = vec![0.0; 2 * n];
        for k in 0..2 {
            for i in 0..n {
                let a = self.lambda0[k * n + i];
                let d = x[i] - self.lambda1[k * n + i];
                match self.family {
                    PotentialFamily::ThreeDim => {
                        e[k] += a * d * d;
                        g[k * n + i] = 2.0 * a * d;
                        h[k * n + i] = 2.0 * a;
                    }
                    PotentialFamily::FiveDim => {
                        e[k] += a * d;
                        g[k * n + i] = a;
                    }
                }
            }
        }
        let l = [w[0].ln() + e[0], w[1].ln() + e[1]];
        let m = l[0].max(l[1]);
        let z = (l[0] - m).exp() + (l[1] - m).exp();
        let pi = [(l[0] - m).exp() / z, (l[1] - m).exp() / z];
        GroupTerms {
            pi,
            log_sum: m + z.ln(),
            g,
            h,
        }
    }

    /// `Phi`, `grad Phi` and `diag(Hess Phi)` at `x`.
    pub fn jet(&self, x: &[f64]) -> Result<PotentialJet> {
        self.check_point(x)?;
        let n = self.dim();
        let t = self.terms(x);
        let mut grad = vec![0.0; n];
        let mut hess_diag = vec![0.0; n];
        for i in 0..n {
            let gbar = t.pi[0] * t.g[i] + t.pi[1] * t.g[n + i];
            let second = t.pi[0] * (t.h[i] + t.g[i] * t.g[i])
                + t.pi[1] * (t.h[n + i] + t.g[n + i] * t.g[n + i]);
            grad[i] = -0.5 * gbar;
            hess_diag[i] = -0.5 * (second - gbar * gbar);
        }
        Ok(PotentialJet {
            phi: -0.5 * t.log_sum,
            grad,
            hess_diag,
        })
    }

    /// Drift `b = -grad Phi` and its diagonal derivatives `d b_i / d x_i`.
    pub fn drift_jet(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let j = self.jet(x)?;
        Ok((
            j.grad.iter().map(|g| -g).collect(),
            j.hess_diag.iter().map(|h| -h).collect(),
        ))
    }

    /// Pulls adjoints of `b_i` and `d b_i / d x_i` at `x` back onto the
    /// parameters, accumulating into `grad` laid out as [`PotentialSpec::params`].
    pub fn drift_backward(&self, x: &[f64], b_bar: &[f64], div_bar: &[f64], grad: &mut [f64]) {
        let n = self.dim();
        let m = 2 * n;
        let t = self.terms(x);
        let mut gbar = vec![0.0; n];
        for i in 0..n {
            gbar[i] = t.pi[0] * t.g[i] + t.pi[1] * t.g[n + i];
        }
        let mut pi_bar = [0.0; 2];
        let mut g_adj = vec![0.0; m];
        let mut h_adj = vec![0.0; m];
        for i in 0..n {
            // b_i = gbar_i / 2, D_i = (sum_k pi_k (h + g^2) - gbar_i^2) / 2
            let gb = 0.5 * b_bar[i] - div_bar[i] * gbar[i];
            let mb = 0.5 * div_bar[i];
            for k in 0..2 {
                let (g, h) = (t.g[k * n + i], t.h[k * n + i]);
                pi_bar[k] += gb * g + mb * (h + g * g);
                g_adj[k * n + i] = t.pi[k] * (gb + 2.0 * mb * g);
                h_adj[k * n + i] = mb * t.pi[k];
            }
        }
        let mean = t.pi[0] * pi_bar[0] + t.pi[1] * pi_bar[1];
        let e_adj = [t.pi[0] * (pi_bar[0] - mean), t.pi[1] * (pi_bar[1] - mean)];
        for k in 0..2 {
            for i in 0..n {
                let j = k * n + i;
                let a = self.lambda0[j];
                let d = x[i] - self.lambda1[j];
                match self.family {
                    PotentialFamily::ThreeDim => {
                        grad[j] += e_adj[k] * d * d + g_adj[j] * 2.0 * d + h_adj[j] * 2.0;
                        grad[m + j] += e_adj[k] * (-2.0 * a * d) + g_adj[j] * (-2.0 * a);
                    }
                    PotentialFamily::FiveDim => {
                        grad[j] += e_adj[k] * d + g_adj[j];
                        grad[m + j] += e_adj[k] * (-a);
                    }
                }
            }
        }
    }
}

/// `(Phi(x), grad Phi(x))`.
pub fn potential_value_and_gradient(spec: &PotentialSpec, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let j = spec.jet(x)?;
    Ok((j.phi, j.grad))
}

/// Where to evaluate a Boltzmann density.
#[derive(Debug, Clone, PartialEq)]
pub enum PointSet {
    /// Midpoint tensor grid with this many cells per axis.
    Tensor(Vec<usize>),
    /// Explicit points, point-major.
    Scattered(Vec<f64>),
}

fn common_sigma(sigma: &[f64], dim: usize) -> Result<f64> {
    if sigma.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: sigma.len(),
        });
    }
    let s = sigma[0];
    if sigma.iter().any(|v| *v != s) {
        return Err(Error::UnsupportedDiffusion(format!(
            "Boltzmann form needs equal diffusion entries, got {sigma:?}"
        )));
    }
    if !(s.is_finite() && s != 0.0) {
        return Err(Error::DegenerateDiffusion {
            x: f64::NAN,
            sigma_sq: s * s,
        });
    }
    Ok(s)
}

/// Unnormalised `exp(-2 Phi / s^2)` as a log value.
fn boltzmann_log(spec: &PotentialSpec, x: &[f64], s2: f64) -> f64 {
    -2.0 * (-0.5 * spec.terms(x).log_sum) / s2
}

/// `Z = int_box exp(-2 Phi / s^2)` by tensor midpoint quadrature.
pub fn boltzmann_normalizer(
    spec: &PotentialSpec,
    domain: &Domain,
    counts: &[usize],
    sigma: &[f64],
) -> Result<f64> {
    spec.validate()?;
    let s = common_sigma(sigma, spec.dim())?;
    if domain.dim() != spec.dim() || counts.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: domain.dim(),
        });
    }
    let h: f64 = (0..spec.dim())
        .map(|i| (domain.upper[i] - domain.lower[i]) / counts[i] as f64)
        .product();
    let mut z = 0.0;
    crate::quadrature::for_each_midpoint(domain, counts, |x| {
        z += boltzmann_log(spec, x, s * s).exp();
    });
    let z = z * h;
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::DivergentDensity(format!("normaliser {z}")));
    }
    Ok(z)
}

/// Boltzmann density `exp(-2 Phi / s^2) / Z` on `points`, with `Z` from a
/// midpoint tensor grid of `z_counts` cells over `domain`.
pub fn boltzmann_density(
    spec: &PotentialSpec,
    domain: &Domain,
    points: &PointSet,
    sigma: &[f64],
    z_counts: &[usize],
) -> Result<DensityObservation> {
    let z = boltzmann_normalizer(spec, domain, z_counts, sigma)?;
    let s2 = sigma[0] * sigma[0];
    let dim = spec.dim();
    let (pts, layout) = match points {
        PointSet::Tensor(counts) => (
            midpoint_grid(domain, counts).0,
            Layout::Tensor {
                counts: counts.clone(),
            },
        ),
        PointSet::Scattered(p) => (p.clone(), Layout::Scattered),
    };
    let values = pts
        .chunks(dim)
        .map(|x| (boltzmann_log(spec, x, s2).exp() / z).max(DENSITY_FLOOR))
        .collect();
    DensityObservation::new(
        pts,
        values,
        domain.clone(),
        layout,
        format!("boltzmann_{:?}", spec.family).to_lowercase(),
    )
}

/// `n` points distributed as `exp(-2 Phi / s^2)` restricted to `domain`, by
/// rejection from the uniform law. The envelope starts at the largest value
/// on a midpoint grid of `counts` cells and is raised by a factor e above
/// any proposal that exceeds it, discarding what was accepted so far.
pub fn sample_boltzmann_points<R: Rng>(
    spec: &PotentialSpec,
    domain: &Domain,
    sigma: &[f64],
    counts: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let s = common_sigma(sigma, spec.dim())?;
    let dim = spec.dim();
    if domain.dim() != dim || counts.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: domain.dim(),
        });
    }
    let s2 = s * s;
    let mut envelope = f64::NEG_INFINITY;
    crate::quadrature::for_each_midpoint(domain, counts, |x| {
        envelope = envelope.max(boltzmann_log(spec, x, s2));
    });
    if !envelope.is_finite() {
        return Err(Error::DivergentDensity(format!(
            "log density {envelope} on the envelope grid"
        )));
    }
    let mut out = Vec::with_capacity(n * dim);
    let mut x = vec![0.0; dim];
    while out.len() < n * dim {
        for (i, v) in x.iter_mut().enumerate() {
            *v = rng.gen_range(domain.lower[i]..domain.upper[i]);
        }
        let l = boltzmann_log(spec, &x, s2);
        if l > envelope {
            envelope = l + 1.0;
            out.clear();
            continue;
        }
        if rng.gen::<f64>().ln() < l - envelope {
            out.extend_from_slice(&x);
        }
    }
    Ok(out)
}

/// Multiplies every value by `1 + level * nu_i` with `nu_i ~ N(0, 1)`,
/// clamping negatives to zero.
pub fn perturb_observation(
    obs: &DensityObservation,
    level: f64,
    seed: u64,
) -> Result<DensityObservation> {
    if !(level.is_finite() && level >= 0.0) {
        return Err(Error::config(
            "noise",
            format!("level must be >= 0, got {level}"),
        ));
    }
    if level == 0.0 {
        return Ok(obs.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = obs
        .values
        .iter()
        .map(|v| {
            let nu: f64 = StandardNormal.sample(&mut rng);
            (v * (1.0 + level * nu)).max(0.0)
        })
        .collect();
    obs.with_values(values, format!("{}+noise{level}", obs.label))
}

/// Writes `x1,..,xn,q` rows.
pub fn write_observation_csv(obs: &DensityObservation, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=obs.dim).map(|i| format!("x{i}")).collect();
    header.push("q".into());
    w.write_record(&header)?;
    for i in 0..obs.len() {
        let mut row: Vec<String> = obs.point(i).iter().map(|v| format!("{v:e}")).collect();
        row.push(format!("{:e}", obs.values[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `x1,..,xn,q` file.
///
/// 1D files must be a uniform increasing grid. In higher dimension a file
/// whose rows form a full tensor grid must list it last axis fastest;
/// anything else is read as scattered points over its bounding box.
pub fn read_observation_csv(path: impl AsRef<Path>) -> Result<DensityObservation> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(1);
    let ok_header = dim >= 1
        && header.get(dim) == Some("q")
        && (0..dim).all(|i| header.get(i) == Some(format!("x{}", i + 1).as_str()));
    if !ok_header {
        return Err(Error::Format(format!(
            "{}: expected header x1,..,xn,q, got {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != dim + 1 {
            return Err(Error::Format(format!(
                "line {line}: expected {} fields, got {}",
                dim + 1,
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {line}: cannot parse `{field}`")))?;
            if j < dim {
                points.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if dim == 1 {
        let domain = Domain::new(vec![points[0]], vec![points[n - 1]])
            .map_err(|_| Error::Format("grid is not increasing".into()))?;
        return DensityObservation::new(points, values, domain, Layout::Grid1d, label);
    }
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for a in 0..dim {
        let mut u: Vec<f64> = points.iter().skip(a).step_by(dim).copied().collect();
        u.sort_by(|x, y| x.total_cmp(y));
        u.dedup();
        axes.push(u);
    }
    let counts: Vec<usize> = axes.iter().map(Vec::len).collect();
    let tensor = counts.iter().all(|c| *c >= 2) && counts.iter().product::<usize>() == n;
    if tensor {
        let expected = crate::quadrature::tensor_product(&axes);
        if let Some(k) = expected.iter().zip(&points).position(|(a, b)| a != b) {
            return Err(Error::Format(format!(
                "tensor grid rows are not ordered last axis fastest (line {})",
                k / dim + 2
            )));
        }
        let mut lower = Vec::with_capacity(dim);
        let mut upper = Vec::with_capacity(dim);
        for ax in &axes {
            let h = (ax[ax.len() - 1] - ax[0]) / (ax.len() - 1) as f64;
            check_uniform(ax, h)?;
            lower.push(ax[0] - 0.5 * h);
            upper.push(ax[ax.len() - 1] + 0.5 * h);
        }
        let domain = Domain::new(lower, upper)?;
        return DensityObservation::new(points, values, domain, Layout::Tensor { counts }, label);
    }
    let lower = axes.iter().map(|a| a[0]).collect();
    let upper = axes.iter().map(|a| a[a.len() - 1]).collect();
    let domain = Domain::new(lower, upper)
        .map_err(|_| Error::Format("scattered points have zero extent along an axis".into()))?;
    DensityObservation::new(points, values, domain, Layout::Scattered, label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ou_stationary_density_is_standard_normal() {
        let d = Domain::interval(-6.0, 6.0);
        let obs = stationary_density_1d(|x| -0.5 * x, |_| 1.0, &d, 1201).unwrap();
        let norm_mass = 0.999_999_998_026_824_9; // P(|Z| <= 6)
        for (x, q) in obs.xs().iter().zip(&obs.values) {
            assert!((q - gaussian_pdf(*x, 0.0, 1.0) / norm_mass).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_drift_gives_narrow_gaussian() {
        let k = 2.0;
        let d = Domain::interval(-5.0, 5.0);
        let obs = stationary_density_1d(|x| -k * x, |_| 1.0, &d, 1001).unwrap();
        for (x, q) in obs.xs().iter().zip(&obs.values) {
            let exact = (k / std::f64::consts::PI).sqrt() * (-k * x * x).exp();
            assert!((q - exact).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn double_well_matches_library_entry() {
        let d = Domain::interval(-5.0, 5.0);
        let obs = stationary_density_1d(|x| x - x * x * x, |_| 1.0, &d, 1001).unwrap();
        let lib = observation_library("double_well", &BTreeMap::new()).unwrap();
        for (a, b) in obs.values.iter().zip(&lib.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn reference_point_only_changes_normalisation() {
        let d = Domain::interval(-3.0, 4.0);
        let b = |x: f64| 1.0 - x - 0.2 * x * x * x;
        let s = |x: f64| 0.8 + 0.1 * x.sin();
        let a = stationary_density_1d_with_reference(b, s, &d, 701, 0.5).unwrap();
        let c = stationary_density_1d_with_reference(b, s, &d, 701, -2.73).unwrap();
        for (u, v) in a.values.iter().zip(&c.values) {
            assert!((u - v).abs() < 1e-8);
        }
        assert!((a.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_density_errors() {
        let d = Domain::interval(-1.0, 1.0);
        let e = stationary_density_1d(|x| -x, |x| x, &d, 101).unwrap_err();
        assert!(matches!(e, Error::DegenerateDiffusion { .. }));
        let d = Domain::interval(-40.0, 40.0);
        let e = stationary_density_1d(|x| x * x * x, |_| 1.0, &d, 801).unwrap_err();
        assert!(matches!(e, Error::DivergentDensity(_)));
    }

    #[test]
    fn library_values() {
        let none = BTreeMap::new();
        let g = observation_library("gaussian", &none).unwrap();
        assert_eq!(g.len(), 1001);
        assert!((g.values[500] - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        let c = observation_library("cauchy", &none).unwrap();
        let at = |obs: &DensityObservation, x: f64| {
            let i = obs.xs().iter().position(|v| (v - x).abs() < 1e-9).unwrap();
            obs.values[i]
        };
        assert!((at(&c, 0.0) - 1.0 / std::f64::consts::PI).abs() < 1e-15);
        assert!((at(&c, 1.0) - 0.5 / std::f64::consts::PI).abs() < 1e-15);
        assert!(matches!(
            observation_library("banana", &none),
            Err(Error::UnknownObservation(_))
        ));
        let mut p = BTreeMap::new();
        p.insert("sigma".to_string(), 0.5);
        assert!(matches!(
            observation_library("double_well", &p),
            Err(Error::UnsupportedDiffusion(_))
        ));
    }

    #[test]
    fn gene_regulation_drift_and_density() {
        let g = GeneRegulation::default();
        assert!((g.drift(5.0) - (6.0 * 25.0 / 35.0 - 5.0 + 0.4)).abs() < 1e-15);
        assert!((g.drift(5.0) + 0.314_285_714_285_714_3).abs() < 1e-12);
        let obs = observation_library("gene_regulation", &BTreeMap::new()).unwrap();
        assert_eq!(obs.domain, Domain::interval(0.0, 15.0));
        assert!((obs.integral() - 1.0).abs() < 1e-9);
        assert!(obs.values.iter().all(|v| *v >= DENSITY_FLOOR));
    }

    #[test]
    fn unperturbed_library_mass() {
        for name in LIBRARY_NAMES {
            let obs = observation_library(name, &BTreeMap::new()).unwrap();
            let m = obs.integral();
            assert!((0.95..=1.05).contains(&m), "{name}: {m}");
            if name != "cauchy" {
                assert!((m - 1.0).abs() < 5e-3, "{name}: {m}");
            }
        }
    }

    #[test]
    fn boltzmann_samples_match_quadrature() {
        let spec = PotentialSpec::three_dim();
        let dom = Domain::new(vec![-4.0, -3.0, -3.0], vec![2.5, 2.5, 2.5]).unwrap();
        let counts = [60, 60, 60];
        // a deliberately coarse envelope grid exercises the restart path
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts =
            sample_boltzmann_points(&spec, &dom, &[1.0; 3], &[3, 3, 3], 20_000, &mut rng).unwrap();
        assert_eq!(pts.len(), 60_000);
        assert!(pts
            .chunks(3)
            .all(|x| (0..3).all(|i| x[i] >= dom.lower[i] && x[i] < dom.upper[i])));
        let frac = pts.chunks(3).filter(|x| x[0] < -1.0).count() as f64 / 20_000.0;
        let grid = boltzmann_density(
            &spec,
            &dom,
            &PointSet::Tensor(counts.to_vec()),
            &[1.0; 3],
            &counts,
        )
        .unwrap();
        let cell = dom.volume() / grid.len() as f64;
        let exact: f64 = grid
            .points
            .chunks(3)
            .zip(&grid.values)
            .filter(|(x, _)| x[0] < -1.0)
            .map(|(_, q)| q * cell)
            .sum();
        // binomial standard error is below 0.004
        assert!((frac - exact).abs() < 0.015, "{frac} vs {exact}");
    }

    #[test]
    fn three_dim_value_at_first_centre() {
        let spec = PotentialSpec::three_dim();
        let (phi, _) = potential_value_and_gradient(&spec, &[1.0, 1.0, 1.0]).unwrap();
        // second exponent: -(1+2)^2 - (1+1)^2 - (1+1)^2 = -17
        let expected = -0.5 * (2.0 + (-17.0f64).exp()).ln();
        assert!((phi - expected).abs() < 1e-15);
        assert!(matches!(
            potential_value_and_gradient(&spec, &[1.0, 2.0]),
            Err(Error::InvalidPoint(_))
        ));
    }

    fn fd_check(spec: &PotentialSpec, x: &[f64]) {
        let j = spec.jet(x).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let (fp, gp) = potential_value_and_gradient(spec, &xp).unwrap();
            let (fm, gm) = potential_value_and_gradient(spec, &xm).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - j.grad[i]).abs() <= 1e-6 * j.grad[i].abs().max(1e-3),
                "grad {i}: {fd} vs {}",
                j.grad[i]
            );
            let fd2 = (gp[i] - gm[i]) / (2.0 * h);
            assert!((fd2 - j.hess_diag[i]).abs() <= 1e-6 * j.hess_diag[i].abs().max(1e-2));
        }
    }

    #[test]
    fn potential_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [PotentialSpec::three_dim(), PotentialSpec::five_dim()] {
            for _ in 0..20 {
                let x: Vec<f64> = (0..spec.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                fd_check(&spec, &x);
            }
        }
    }

    #[test]
    fn identical_wells_collapse() {
        let spec = PotentialSpec::new(
            PotentialFamily::ThreeDim,
            vec![-1.5; 6],
            vec![0.5, -0.2, 1.0, 0.5, -0.2, 1.0],
        )
        .unwrap();
        let x = [0.3, 0.7, -1.1];
        let e: f64 = (0..3)
            .map(|i| -1.5 * (x[i] - spec.lambda1[i]).powi(2))
            .sum();
        let (phi, grad) = potential_value_and_gradient(&spec, &x).unwrap();
        assert!((phi - (-0.5 * 3f64.ln() - 0.5 * e)).abs() < 1e-14);
        for i in 0..3 {
            let ge = 2.0 * -1.5 * (x[i] - spec.lambda1[i]);
            assert!((grad[i] + 0.5 * ge).abs() < 1e-14);
        }
    }

    #[test]
    fn drift_backward_matches_parameter_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for base in [PotentialSpec::three_dim(), PotentialSpec::five_dim()] {
            let n = base.dim();
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bb: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let db: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let objective = |s: &PotentialSpec| {
                let (b, d) = s.drift_jet(&x).unwrap();
                (0..n).map(|i| bb[i] * b[i] + db[i] * d[i]).sum::<f64>()
            };
            let mut grad = vec![0.0; 4 * n];
            base.drift_backward(&x, &bb, &db, &mut grad);
            let theta = base.params();
            for k in 0..theta.len() {
                let h = 1e-6;
                let mut sp = base.clone();
                let mut t = theta.clone();
                t[k] += h;
                sp.set_params(&t);
                let mut sm = base.clone();
                t[k] -= 2.0 * h;
                sm.set_params(&t);
                let fd = (objective(&sp) - objective(&sm)) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() < 1e-6 * fd.abs().max(1e-2),
                    "{:?} k={k}: {fd} vs {}",
                    base.family,
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn boltzmann_three_dim_grid() {
        let spec = PotentialSpec::three_dim();
        let dom = Domain::cube(3, -4.0, 4.0);
        let obs = boltzmann_density(
            &spec,
            &dom,
            &PointSet::Tensor(vec![50; 3]),
            &[1.0; 3],
            &[50; 3],
        )
        .unwrap();
        let m = obs.integral();
        assert!((0.995..=1.005).contains(&m), "{m}");
        assert!(obs.values.iter().all(|v| *v > 0.0));
        let (imax, _) = obs
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        for (c, t) in obs.point(imax).iter().zip([1.0, 1.0, 1.0]) {
            assert!(
                (c - t).abs() <= 0.16 + 1e-12,
                "argmax {:?}",
                obs.point(imax)
            );
        }
        assert!(matches!(
            boltzmann_density(
                &spec,
                &dom,
                &PointSet::Tensor(vec![4; 3]),
                &[1.0, 1.0, 0.5],
                &[4; 3]
            ),
            Err(Error::UnsupportedDiffusion(_))
        ));
    }

    #[test]
    fn perturbation_noise_level() {
        let n = 50_000;
        let pts = linspace(0.0, 1.0, n);
        let obs = DensityObservation::new(
            pts,
            vec![1.0; n],
            Domain::interval(0.0, 1.0),
            Layout::Grid1d,
            "flat",
        )
        .unwrap();
        assert_eq!(perturb_observation(&obs, 0.0, 3).unwrap(), obs);
        for (level, lo, hi) in [(0.05, 0.045, 0.055), (0.1, 0.09, 0.11)] {
            let p = perturb_observation(&obs, level, 11).unwrap();
            let r: Vec<f64> = p.values.iter().map(|v| v - 1.0).collect();
            let mean = r.iter().sum::<f64>() / n as f64;
            let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!((lo..=hi).contains(&sd), "{level}: {sd}");
            assert_eq!(p, perturb_observation(&obs, level, 11).unwrap());
        }
        assert!(perturb_observation(&obs, -0.1, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = observation_library("gaussian", &BTreeMap::new()).unwrap();
        let p = dir.path().join("g.csv");
        write_observation_csv(&g, &p).unwrap();
        let back = read_observation_csv(&p).unwrap();
        assert_eq!(back.values, g.values);
        assert_eq!(back.layout, Layout::Grid1d);

        let spec = PotentialSpec::three_dim();
        let dom = Domain::cube(3, -4.0, 4.0);
        let b = boltzmann_density(
            &spec,
            &dom,
            &PointSet::Tensor(vec![4, 5, 6]),
            &[1.0; 3],
            &[8; 3],
        )
        .unwrap();
        let p = dir.path().join("b.csv");
        write_observation_csv(&b, &p).unwrap();
        let back = read_observation_csv(&p).unwrap();
        assert_eq!(
            back.layout,
            Layout::Tensor {
                counts: vec![4, 5, 6]
            }
        );
        for (a, c) in back
            .domain
            .lower
            .iter()
            .chain(&back.domain.upper)
            .zip(dom.lower.iter().chain(&dom.upper))
        {
            assert!((a - c).abs() < 1e-12);
        }

        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "x1,q\n0,1\n2,1\n1,1\n").unwrap();
        assert!(matches!(read_observation_csv(&p), Err(Error::Format(_))));
    }
}
