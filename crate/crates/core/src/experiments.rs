//! Named experiment definitions, the runner, scoring and artifact output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{
    boltzmann_density, boltzmann_normalizer, observation_library, perturb_observation,
    read_observation_csv, sample_boltzmann_points, stationary_density_1d, write_observation_csv,
    DensityObservation, GeneRegulation, PointSet, PotentialFamily, PotentialSpec,
};
use crate::divergences::{hellinger, js, mse, GridPair, HellingerMode, JsForm};
use crate::error::{Error, Result};
use crate::field::{init_field, NeuralField, OutputTransform};
use crate::model_io::save_model;
use crate::quadrature::{linspace, midpoint_grid, simpson_weights, Domain};
use crate::residual::{ClosedDensity, ClosedDrift, Diffusion, Drift, SdeModel, TrainMask};
use crate::rng::{
    job_seed, stream_rng, STREAM_NETWORK_INIT, STREAM_OBSERVATION_NOISE, STREAM_OBSERVATION_POINTS,
    STREAM_PARAMETER_INIT, STREAM_SIMULATION,
};
use crate::sim::{euler_maruyama, kde, write_trajectory_csv, Bandwidth, KdeGrid};
use crate::trainer::{
    train_with, write_history_csv, Anchor, LossBreakdown, LossWeights, LrStep, Mode, ObsLoss,
    Problem, TrainConfig, TrainedModel,
};

/// Relative-error threshold used when counting recovered parameters.
pub const RECOVERY_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub task: Task,
    /// Pass/fail thresholds on named metrics.
    #[serde(default)]
    pub gates: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    /// Grid scan of `b = -k x` against a standard normal target.
    HellingerScan(ScanSpec),
    Train(Box<TrainSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub k_min: f64,
    pub k_max: f64,
    pub k_step: f64,
    pub lower: f64,
    pub upper: f64,
    /// Quadrature nodes (odd).
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub source: ObservationSource,
    /// Multiplicative noise level applied to the observation.
    #[serde(default)]
    pub noise: f64,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    /// Hidden widths of the density network.
    pub density_hidden: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default)]
    pub truth: Option<TruthSpec>,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ObservationSource {
    /// Named 1D density on a uniform grid; `n` must equal `N_H`.
    Library {
        name: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
    /// `exp(-2 Phi / sigma^2) / Z` at `N_H` random points of the training box.
    Boltzmann {
        potential: PotentialSpec,
        sigma: Vec<f64>,
        /// Midpoint cells per axis for the normaliser.
        z_counts: Vec<usize>,
        /// Share of the points drawn from the density itself; the rest are uniform.
        #[serde(default)]
        mass_fraction: f64,
    },
    /// Euler-Maruyama path of a closed-form 1D model, then KDE on the training box.
    Trajectory {
        drift: ClosedDrift,
        sigma: f64,
        x0: f64,
        dt: f64,
        steps: usize,
        #[serde(default)]
        burn_in: usize,
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    /// Observation CSV (`x1..xn,q`).
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DriftSpec {
    Neural {
        hidden: Vec<usize>,
    },
    /// Potential family; starts from `start` or from `reference` scaled by
    /// `1 + perturbation * U(-1, 1)` per entry.
    Potential {
        family: PotentialFamily,
        #[serde(default)]
        start: Option<PotentialSpec>,
        #[serde(default)]
        reference: Option<PotentialSpec>,
        #[serde(default)]
        perturbation: f64,
        #[serde(default = "yes")]
        trainable: bool,
    },
    Linear {
        k: f64,
    },
    Closed {
        drift: ClosedDrift,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DiffusionSpec {
    Constant {
        sigma: Vec<f64>,
        #[serde(default)]
        trainable: bool,
    },
    Neural {
        hidden: Vec<usize>,
    },
}

/// Reference functions for scoring.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    #[serde(default)]
    pub drift: Option<TruthDrift>,
    #[serde(default)]
    pub sigma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TruthDrift {
    Closed { drift: ClosedDrift },
    Potential { potential: PotentialSpec },
}

impl TruthDrift {
    fn model(&self, dim: usize) -> Result<SdeModel> {
        let d = match self {
            TruthDrift::Closed { drift } => Drift::Closed(drift.clone()),
            TruthDrift::Potential { potential } => Drift::Potential(potential.clone()),
        };
        SdeModel::new(dim, d, Diffusion::Constant(vec![1.0; dim]))
    }

    fn params(&self) -> Option<(Vec<String>, Vec<f64>)> {
        match self {
            TruthDrift::Closed {
                drift: ClosedDrift::Linear { k },
            } => Some((vec!["k".into()], vec![*k])),
            TruthDrift::Potential { potential } => {
                let m = potential.lambda0.len();
                let names = (1..=m)
                    .map(|i| format!("lambda0_{i}"))
                    .chain((1..=m).map(|i| format!("lambda1_{i}")))
                    .collect();
                Some((names, potential.params()))
            }
            _ => None,
        }
    }
}

/// Where drift errors are measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum RegionSpec {
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Observation nodes where `q >= fraction * max q` (1D grids).
    DensityAbove {
        fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSpec {
    #[serde(default)]
    pub drift_region: Option<RegionSpec>,
    /// Nodes per axis for drift quadrature and plot grids.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// `z` values of 2D density slices (3D only).
    #[serde(default)]
    pub slices: Vec<f64>,
}

fn default_grid() -> usize {
    401
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            drift_region: None,
            grid: default_grid(),
            slices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub metric: String,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub metric: String,
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub value: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftError {
    pub rel_l2: f64,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaError {
    pub learned: Vec<f64>,
    pub truth: Vec<f64>,
    pub abs_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub names: Vec<String>,
    pub learned: Vec<f64>,
    pub truth: Vec<f64>,
    /// `|learned - truth| / |truth|`, absolute when the truth is 0.
    pub rel_error: Vec<f64>,
    pub within_tolerance: usize,
    pub tolerance: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityDistances {
    pub hellinger: f64,
    pub js: f64,
    pub mse: f64,
    pub region: String,
}

/// Loss terms without timing, so reports are reproducible byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalLoss {
    pub iteration: usize,
    #[serde(rename = "loss_H")]
    pub loss_h: f64,
    pub loss_f: f64,
    pub loss_b: Option<f64>,
    pub total: f64,
}

impl From<&LossBreakdown> for FinalLoss {
    fn from(b: &LossBreakdown) -> Self {
        FinalLoss {
            iteration: b.iteration,
            loss_h: b.loss_h,
            loss_f: b.loss_f,
            loss_b: b.loss_b,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub argmin_k: f64,
    pub h_min: f64,
    pub h_at_half: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub seed: u64,
    pub drift: Option<DriftError>,
    pub sigma: Option<SigmaError>,
    pub parameters: Option<ParamError>,
    pub density: Option<DensityDistances>,
    pub final_loss: Option<FinalLoss>,
    pub best_total: Option<f64>,
    pub best_iteration: Option<usize>,
    pub scan: Option<ScanResult>,
    /// Flat view of the numbers above; gates refer to these names.
    pub metrics: BTreeMap<String, f64>,
    pub gates: Vec<GateResult>,
}

impl MetricsReport {
    fn flatten(&mut self) {
        let m = &mut self.metrics;
        if let Some(d) = &self.drift {
            m.insert("drift_rel_l2".into(), d.rel_l2);
        }
        if let Some(s) = &self.sigma {
            m.insert(
                "sigma_abs_error_max".into(),
                s.abs_error.iter().cloned().fold(0.0, f64::max),
            );
            for (i, v) in s.learned.iter().enumerate() {
                m.insert(format!("sigma_{}", i + 1), *v);
            }
        }
        if let Some(p) = &self.parameters {
            m.insert("param_within_tolerance".into(), p.within_tolerance as f64);
            m.insert("param_mean_rel_error".into(), p.mean_rel_error);
            m.insert(
                "param_max_rel_error".into(),
                p.rel_error.iter().cloned().fold(0.0, f64::max),
            );
            let max_abs = p
                .learned
                .iter()
                .zip(&p.truth)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            m.insert("param_max_abs_error".into(), max_abs);
        }
        if let Some(d) = &self.density {
            m.insert("density_hellinger".into(), d.hellinger);
            m.insert("density_js".into(), d.js);
            m.insert("density_mse".into(), d.mse);
        }
        if let Some(f) = &self.final_loss {
            m.insert("final_total".into(), f.total);
            m.insert("final_loss_H".into(), f.loss_h);
            m.insert("final_loss_f".into(), f.loss_f);
            if let Some(b) = f.loss_b {
                m.insert("final_loss_b".into(), b);
            }
        }
        if let Some(b) = self.best_total {
            m.insert("best_total".into(), b);
        }
        if let Some(s) = &self.scan {
            m.insert("argmin_k".into(), s.argmin_k);
            m.insert("argmin_k_abs_error".into(), (s.argmin_k - 0.5).abs());
            m.insert("h_min".into(), s.h_min);
            m.insert("h_at_half".into(), s.h_at_half);
        }
    }

    pub fn apply_gates(&mut self, gates: &[Gate]) {
        self.gates = gates
            .iter()
            .map(|g| {
                let value = self.metrics.get(&g.metric).copied();
                let pass = value.is_some_and(|v| {
                    g.max.is_none_or(|m| v <= m) && g.min.is_none_or(|m| v >= m) && v.is_finite()
                });
                GateResult {
                    metric: g.metric.clone(),
                    max: g.max,
                    min: g.min,
                    value,
                    pass,
                }
            })
            .collect();
    }

    pub fn all_gates_pass(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }
}

/// Scores a model against reference functions.
///
/// Drift errors use Simpson quadrature (1D box), midpoint cells (nD box) or
/// the masked observation grid ([`RegionSpec::DensityAbove`]). Density
/// distances compare the density field with the observation on its own points.
pub fn score_against_truth(
    model: &SdeModel,
    density: Option<&NeuralField>,
    obs: Option<&DensityObservation>,
    truth: &TruthSpec,
    eval: &EvaluationSpec,
) -> Result<MetricsReport> {
    let n = model.dim;
    let mut report = MetricsReport::default();
    if let (Some(td), Some(region)) = (&truth.drift, &eval.drift_region) {
        let reference = td.model(n)?;
        let (points, weights, desc) = region_quadrature(region, n, eval.grid, obs)?;
        let (mut num, mut den) = (0.0, 0.0);
        for (x, w) in points.chunks(n).zip(&weights) {
            let b = model.drift_at(x)?;
            let r = reference.drift_at(x)?;
            for i in 0..n {
                num += w * (b[i] - r[i]).powi(2);
                den += w * r[i] * r[i];
            }
        }
        let rel = if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        };
        report.drift = Some(DriftError {
            rel_l2: rel,
            region: desc,
        });
    }
    if let (Some(ts), Diffusion::Constant(s)) = (&truth.sigma, &model.diffusion) {
        if ts.len() != s.len() {
            return Err(Error::DimensionMismatch {
                expected: s.len(),
                got: ts.len(),
            });
        }
        // only sigma^2 enters the model, so the sign is arbitrary
        let learned: Vec<f64> = s.iter().map(|v| v.abs()).collect();
        report.sigma = Some(SigmaError {
            abs_error: learned
                .iter()
                .zip(ts)
                .map(|(a, b)| (a - b.abs()).abs())
                .collect(),
            learned,
            truth: ts.clone(),
        });
    }
    if let Some((names, tp)) = truth.drift.as_ref().and_then(|d| d.params()) {
        let learned = match &model.drift {
            Drift::Closed(ClosedDrift::Linear { k }) => Some(vec![*k]),
            Drift::Potential(p) => Some(p.params()),
            _ => None,
        };
        if let Some(learned) = learned.filter(|l| l.len() == tp.len()) {
            let rel_error: Vec<f64> = learned
                .iter()
                .zip(&tp)
                .map(|(a, b)| {
                    if *b == 0.0 {
                        a.abs()
                    } else {
                        ((a - b) / b).abs()
                    }
                })
                .collect();
            report.parameters = Some(ParamError {
                names,
                within_tolerance: rel_error
                    .iter()
                    .filter(|e| **e <= RECOVERY_TOLERANCE)
                    .count(),
                tolerance: RECOVERY_TOLERANCE,
                mean_rel_error: rel_error.iter().sum::<f64>() / rel_error.len() as f64,
                rel_error,
                learned,
                truth: tp,
            });
        }
    }
    if let (Some(d), Some(obs)) = (density, obs) {
        let p = d.eval_many(&obs.points)?;
        let pair = GridPair::new(&p, &obs.values, &obs.weights)?;
        report.density = Some(DensityDistances {
            hellinger: hellinger(&pair, HellingerMode::Quadrature),
            js: js(&pair, JsForm::Textbook)?,
            mse: mse(&pair),
            region: format!("observation points ({})", obs.len()),
        });
    }
    report.flatten();
    Ok(report)
}

fn region_quadrature(
    region: &RegionSpec,
    n: usize,
    grid: usize,
    obs: Option<&DensityObservation>,
) -> Result<(Vec<f64>, Vec<f64>, String)> {
    match region {
        RegionSpec::Box { lower, upper } => {
            let dom = Domain::new(lower.clone(), upper.clone())?;
            if dom.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: dom.dim(),
                });
            }
            let desc = format!("box {lower:?} x {upper:?}");
            if n == 1 {
                let m = if grid % 2 == 1 { grid } else { grid + 1 };
                let xs = linspace(lower[0], upper[0], m);
                let w = simpson_weights(m, xs[1] - xs[0]);
                Ok((xs, w, desc))
            } else {
                let (pts, cell) = midpoint_grid(&dom, &vec![grid; n]);
                let w = vec![cell; pts.len() / n];
                Ok((pts, w, desc))
            }
        }
        RegionSpec::DensityAbove { fraction } => {
            let obs = obs
                .ok_or_else(|| Error::config("evaluation.drift_region", "needs an observation"))?;
            if obs.dim != 1 {
                return Err(Error::config(
                    "evaluation.drift_region",
                    "density_above is defined for 1D grids",
                ));
            }
            let qmax = obs.values.iter().cloned().fold(0.0, f64::max);
            let h = obs.points[1] - obs.points[0];
            let mut pts = Vec::new();
            for (x, q) in obs.points.iter().zip(&obs.values) {
                if *q >= fraction * qmax {
                    pts.push(*x);
                }
            }
            if pts.is_empty() {
                return Err(Error::DomainCoverage("empty density region".into()));
            }
            let desc = format!(
                "q >= {fraction} max q: {} nodes, hull [{:.3}, {:.3}]",
                pts.len(),
                pts[0],
                pts[pts.len() - 1]
            );
            let w = vec![h; pts.len()];
            Ok((pts, w, desc))
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub trained: Option<TrainedModel>,
    pub observation: Option<DensityObservation>,
}

/// Failure of one experiment; training failures keep what was logged.
#[derive(Debug, thiserror::Error)]
#[error("experiment {name}: {source}")]
pub struct ExperimentError {
    pub name: String,
    #[source]
    pub source: Error,
    pub partial: Option<Box<TrainedModel>>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        for (i, g) in self.gates.iter().enumerate() {
            if g.max.is_none() && g.min.is_none() {
                return Err(Error::config(format!("gates[{i}]"), "needs max or min"));
            }
        }
        match &self.task {
            Task::HellingerScan(s) => {
                if !(s.k_min > 0.0 && s.k_max > s.k_min && s.k_step > 0.0) {
                    return Err(Error::config(
                        "task.k_min",
                        "need 0 < k_min < k_max and k_step > 0",
                    ));
                }
                if s.n < 3 || s.n % 2 == 0 || !(s.upper > s.lower) {
                    return Err(Error::config(
                        "task.n",
                        "need an odd node count >= 3 on a non-empty interval",
                    ));
                }
                Ok(())
            }
            Task::Train(t) => {
                t.train
                    .validate()
                    .map_err(|e| prefix_path(e, "task.train"))?;
                if !(t.noise.is_finite() && t.noise >= 0.0) {
                    return Err(Error::config("task.noise", "must be >= 0"));
                }
                if let ObservationSource::Boltzmann { mass_fraction, .. } = &t.source {
                    if !(0.0..=1.0).contains(mass_fraction) {
                        return Err(Error::config(
                            "task.source.mass_fraction",
                            "must lie in [0, 1]",
                        ));
                    }
                }
                if t.density_hidden.is_empty() || t.density_hidden.contains(&0) {
                    return Err(Error::config(
                        "task.density_hidden",
                        "need at least one non-zero width",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Copy with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        if let Task::Train(t) = &mut s.task {
            t.train.seed = seed;
        }
        s
    }

    pub fn seed(&self) -> u64 {
        match &self.task {
            Task::Train(t) => t.train.seed,
            Task::HellingerScan(_) => 0,
        }
    }
}

fn prefix_path(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidConfig { path, message } => Error::InvalidConfig {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    }
}

fn scan(spec: &ScanSpec) -> Result<(ScanResult, Vec<(f64, f64)>)> {
    let dom = Domain::interval(spec.lower, spec.upper);
    let xs = linspace(spec.lower, spec.upper, spec.n);
    let w = simpson_weights(spec.n, xs[1] - xs[0]);
    let q: Vec<f64> = xs
        .iter()
        .map(|x| crate::densities::gaussian_pdf(*x, 0.0, 1.0))
        .collect();
    let steps = ((spec.k_max - spec.k_min) / spec.k_step + 1e-9).floor() as usize;
    let mut curve = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let k = spec.k_min + j as f64 * spec.k_step;
        let p = stationary_density_1d(|x| -k * x, |_| 1.0, &dom, spec.n)?;
        let pair = GridPair::new(&p.values, &q, &w)?;
        curve.push((k, hellinger(&pair, HellingerMode::Quadrature)));
    }
    let (argmin_k, h_min) = curve
        .iter()
        .cloned()
        .fold((f64::NAN, f64::INFINITY), |acc, (k, h)| {
            if h < acc.1 {
                (k, h)
            } else {
                acc
            }
        });
    let p = stationary_density_1d(|x| -0.5 * x, |_| 1.0, &dom, spec.n)?;
    let h_at_half = hellinger(
        &GridPair::new(&p.values, &q, &w)?,
        HellingerMode::Quadrature,
    );
    Ok((
        ScanResult {
            argmin_k,
            h_min,
            h_at_half,
        },
        curve,
    ))
}

fn build_observation(t: &TrainSpec, seed: u64, out: Option<&Path>) -> Result<DensityObservation> {
    let c = &t.train;
    let obs = match &t.source {
        ObservationSource::Library { name, params } => observation_library(name, params)?,
        ObservationSource::Boltzmann {
            potential,
            sigma,
            z_counts,
            mass_fraction,
        } => {
            let n = c.domain.dim();
            let mut rng = stream_rng(seed, STREAM_OBSERVATION_POINTS);
            let from_mass = (mass_fraction * c.n_h as f64).round() as usize;
            let mut pts = Vec::with_capacity(c.n_h * n);
            for _ in from_mass..c.n_h {
                for i in 0..n {
                    pts.push(rng.gen_range(c.domain.lower[i]..c.domain.upper[i]));
                }
            }
            if from_mass > 0 {
                pts.extend(sample_boltzmann_points(
                    potential, &c.domain, sigma, z_counts, from_mass, &mut rng,
                )?);
            }
            boltzmann_density(
                potential,
                &c.domain,
                &PointSet::Scattered(pts),
                sigma,
                z_counts,
            )?
        }
        ObservationSource::Trajectory {
            drift,
            sigma,
            x0,
            dt,
            steps,
            burn_in,
            bandwidth,
        } => {
            let model = SdeModel::new(
                1,
                Drift::Closed(drift.clone()),
                Diffusion::Constant(vec![*sigma]),
            )?;
            let traj = euler_maruyama(
                &model,
                &[*x0],
                *dt,
                *steps,
                job_seed(seed, STREAM_SIMULATION),
                *burn_in,
            )?;
            if let Some(dir) = out {
                let every = (traj.len() / 20_000).max(1);
                let thin = crate::sim::Trajectory {
                    dim: 1,
                    dt: traj.dt * every as f64,
                    seed: traj.seed,
                    times: traj.times.iter().step_by(every).cloned().collect(),
                    states: traj.states.iter().step_by(every).cloned().collect(),
                };
                write_trajectory_csv(&thin, dir.join("plotdata").join("trajectory.csv"))?;
            }
            let bw = match bandwidth {
                Some(h) => Bandwidth::Fixed(vec![*h]),
                None => Bandwidth::Auto,
            };
            kde(
                &traj.states,
                1,
                &KdeGrid::Box {
                    domain: c.domain.clone(),
                    counts: vec![c.n_h],
                },
                &bw,
            )?
        }
        ObservationSource::File { path } => read_observation_csv(path)?,
    };
    perturb_observation(&obs, t.noise, job_seed(seed, STREAM_OBSERVATION_NOISE))
}

fn widths(n_in: usize, hidden: &[usize], n_out: usize) -> Vec<usize> {
    let mut w = vec![n_in];
    w.extend_from_slice(hidden);
    w.push(n_out);
    w
}

fn build_problem(t: &TrainSpec, seed: u64, obs: DensityObservation) -> Result<Problem> {
    let dom = &t.train.domain;
    let n = dom.dim();
    let scaled = |f: NeuralField| f.with_input_scaling(dom.center(), dom.half_widths());
    let net_seed = |k: u64| job_seed(seed, STREAM_NETWORK_INIT * 16 + k);
    let mut mask = TrainMask::default();
    let drift = match &t.drift {
        DriftSpec::Neural { hidden } => {
            mask.drift = true;
            Drift::Neural(scaled(init_field(
                &widths(n, hidden, n),
                net_seed(1),
                OutputTransform::Identity,
            )?)?)
        }
        DriftSpec::Potential {
            family,
            start,
            reference,
            perturbation,
            trainable,
        } => {
            mask.drift = *trainable;
            let spec = match (start, reference) {
                (Some(s), _) => s.clone(),
                (None, r) => {
                    let mut s = r.clone().unwrap_or_else(|| match family {
                        PotentialFamily::ThreeDim => PotentialSpec::three_dim(),
                        PotentialFamily::FiveDim => PotentialSpec::five_dim(),
                    });
                    let mut rng = stream_rng(seed, STREAM_PARAMETER_INIT);
                    for v in s.lambda0.iter_mut().chain(s.lambda1.iter_mut()) {
                        *v *= 1.0 + perturbation * rng.gen_range(-1.0..1.0);
                    }
                    s
                }
            };
            if spec.family != *family {
                return Err(Error::config(
                    "task.drift.family",
                    "start or reference uses another family",
                ));
            }
            Drift::Potential(spec)
        }
        DriftSpec::Linear { k } => {
            mask.drift = true;
            Drift::Closed(ClosedDrift::Linear { k: *k })
        }
        DriftSpec::Closed { drift } => Drift::Closed(drift.clone()),
    };
    let diffusion = match &t.diffusion {
        DiffusionSpec::Constant { sigma, trainable } => {
            mask.diffusion = *trainable;
            Diffusion::Constant(sigma.clone())
        }
        DiffusionSpec::Neural { hidden } => {
            mask.diffusion = true;
            Diffusion::Neural(scaled(init_field(
                &widths(n, hidden, 1),
                net_seed(2),
                OutputTransform::Identity,
            )?)?)
        }
    };
    let mut model = SdeModel::new(n, drift, diffusion)?;
    model.trainable = mask;
    let density = scaled(init_field(
        &widths(n, &t.density_hidden, 1),
        net_seed(0),
        OutputTransform::Squared,
    )?)?;
    Problem::new(model, density, obs)
}

/// Runs one experiment, writing artifacts under `out` when given.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out: Option<&Path>,
) -> std::result::Result<ExperimentOutput, ExperimentError> {
    run_experiment_with(spec, out, |_| {})
}

/// As [`run_experiment`], forwarding logged losses to `on_log`.
pub fn run_experiment_with(
    spec: &ExperimentSpec,
    out: Option<&Path>,
    on_log: impl FnMut(&LossBreakdown),
) -> std::result::Result<ExperimentOutput, ExperimentError> {
    let fail = |source: Error| ExperimentError {
        name: spec.name.clone(),
        source,
        partial: None,
    };
    spec.validate().map_err(fail)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("plotdata")).map_err(|e| fail(e.into()))?;
    }
    let seed = spec.seed();
    match &spec.task {
        Task::HellingerScan(s) => {
            let (result, curve) = scan(s).map_err(fail)?;
            let mut report = MetricsReport {
                experiment: spec.name.clone(),
                seed,
                scan: Some(result),
                ..Default::default()
            };
            report.flatten();
            report.apply_gates(&spec.gates);
            if let Some(dir) = out {
                let mut csv = String::from("k,hellinger\n");
                for (k, h) in &curve {
                    let _ = writeln!(csv, "{k:.4},{h:e}");
                }
                write(dir.join("plotdata").join("hellinger_vs_k.csv"), &csv).map_err(fail)?;
                write_report(dir, &report).map_err(fail)?;
            }
            Ok(ExperimentOutput {
                report,
                trained: None,
                observation: None,
            })
        }
        Task::Train(t) => {
            let obs = build_observation(t, seed, out).map_err(fail)?;
            let problem = build_problem(t, seed, obs.clone()).map_err(fail)?;
            let provenance = serde_json::json!({
                "experiment": spec.name,
                "seed": seed,
                "config": spec,
            });
            let trained = match train_with(problem, &t.train, on_log) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(dir) = out {
                        let _ = write_history_csv(&e.partial.history, dir.join("history.csv"));
                        let p = &e.partial.final_problem;
                        let _ = save_model(dir, &p.model, Some(&p.density), provenance);
                    }
                    return Err(ExperimentError {
                        name: spec.name.clone(),
                        source: e.source,
                        partial: Some(e.partial),
                    });
                }
            };
            let fp = &trained.final_problem;
            let truth = t.truth.clone().unwrap_or_default();
            let mut report = score_against_truth(
                &fp.model,
                Some(&fp.density),
                Some(&obs),
                &truth,
                &t.evaluation,
            )
            .map_err(fail)?;
            report.experiment = spec.name.clone();
            report.seed = seed;
            report.final_loss = trained.history.last().map(FinalLoss::from);
            report.best_total = Some(trained.best_total).filter(|v| v.is_finite());
            report.best_iteration = Some(trained.best_iteration);
            report.metrics.clear();
            report.flatten();
            report.apply_gates(&spec.gates);
            if let Some(dir) = out {
                write_artifacts(dir, t, &trained, &obs, &report, provenance).map_err(fail)?;
            }
            Ok(ExperimentOutput {
                report,
                trained: Some(trained),
                observation: Some(obs),
            })
        }
    }
}

fn write(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    write(dir.join("metrics.json"), &s)
}

fn write_artifacts(
    dir: &Path,
    t: &TrainSpec,
    trained: &TrainedModel,
    obs: &DensityObservation,
    report: &MetricsReport,
    provenance: serde_json::Value,
) -> Result<()> {
    let fp = &trained.final_problem;
    let plot = dir.join("plotdata");
    write_report(dir, report)?;
    write_history_csv(&trained.history, dir.join("history.csv"))?;
    save_model(dir, &fp.model, Some(&fp.density), provenance)?;
    write_observation_csv(obs, plot.join("observation.csv"))?;

    let names = fp.scalar_names();
    if !names.is_empty() {
        let mut csv = format!("iter,{}\n", names.join(","));
        for (it, v) in &trained.scalar_history {
            let row: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            let _ = writeln!(csv, "{it},{}", row.join(","));
        }
        let row: Vec<String> = fp.scalars().iter().map(|x| format!("{x:e}")).collect();
        let _ = writeln!(csv, "{},{}", trained.iterations_done, row.join(","));
        write(plot.join("params_vs_iteration.csv"), &csv)?;
    }

    let dom = &t.train.domain;
    let truth_model = match t.truth.as_ref().and_then(|x| x.drift.as_ref()) {
        Some(d) => Some(d.model(dom.dim())?),
        None => None,
    };
    match dom.dim() {
        1 => {
            let xs = linspace(dom.lower[0], dom.upper[0], t.evaluation.grid.max(2));
            let p = fp.density.eval_many(&xs)?;
            let mut csv = String::from("x,b_learned,b_true,p_learned,sigma_learned\n");
            for (x, pv) in xs.iter().zip(&p) {
                let b = fp.model.drift_at(&[*x])?[0];
                let bt = match &truth_model {
                    Some(m) => format!("{:e}", m.drift_at(&[*x])?[0]),
                    None => String::new(),
                };
                let s = fp.model.sigma_at(&[*x])?[0];
                let _ = writeln!(csv, "{x},{b:e},{bt},{pv:e},{s:e}");
            }
            write(plot.join("drift_density_vs_x.csv"), &csv)?;
        }
        3 => {
            let q_true = match &t.source {
                ObservationSource::Boltzmann {
                    potential,
                    sigma,
                    z_counts,
                    ..
                } => {
                    let z = boltzmann_normalizer(potential, dom, z_counts, sigma)?;
                    Some(ClosedDensity::Boltzmann {
                        spec: potential.clone(),
                        sigma: sigma[0],
                        log_z: z.ln(),
                    })
                }
                _ => None,
            };
            let m = t.evaluation.grid.clamp(2, 101);
            let ax: Vec<Vec<f64>> = (0..3)
                .map(|i| linspace(dom.lower[i], dom.upper[i], m))
                .collect();
            for z in &t.evaluation.slices {
                let mut pts = Vec::with_capacity(m * m * 3);
                for x in &ax[0] {
                    for y in &ax[1] {
                        pts.extend_from_slice(&[*x, *y, *z]);
                    }
                }
                let p = fp.density.eval_many(&pts)?;
                let mut csv = String::from("x,y,p_learned,q_true\n");
                for (pt, pv) in pts.chunks(3).zip(&p) {
                    let q = match &q_true {
                        Some(d) => format!("{:e}", d.jet(pt)?.0),
                        None => String::new(),
                    };
                    let _ = writeln!(csv, "{},{},{pv:e},{q}", pt[0], pt[1]);
                }
                write(plot.join(format!("density_slice_z{z}.csv")), &csv)?;
            }
            if let Drift::Potential(learned) = &fp.model.drift {
                let reference = match t.truth.as_ref().and_then(|x| x.drift.as_ref()) {
                    Some(TruthDrift::Potential { potential }) => Some(potential),
                    _ => None,
                };
                for (drop, name) in [(2, "z"), (1, "y"), (0, "x")] {
                    write(
                        plot.join(format!("potential_min_over_{name}.csv")),
                        &min_projection(learned, reference, &ax, drop)?,
                    )?;
                }
            }
        }
        _ => {}
    }
    Ok(())
}

/// `min` over axis `drop` of the learned (and reference) potential on a grid.
fn min_projection(
    learned: &PotentialSpec,
    reference: Option<&PotentialSpec>,
    ax: &[Vec<f64>],
    drop: usize,
) -> Result<String> {
    let keep: Vec<usize> = (0..3).filter(|i| *i != drop).collect();
    let names = ["x", "y", "z"];
    let mut csv = format!(
        "{},{},phi_learned,phi_true\n",
        names[keep[0]], names[keep[1]]
    );
    let mut x = [0.0; 3];
    for a in &ax[keep[0]] {
        for b in &ax[keep[1]] {
            x[keep[0]] = *a;
            x[keep[1]] = *b;
            let (mut lo, mut lo_t) = (f64::INFINITY, f64::INFINITY);
            for c in &ax[drop] {
                x[drop] = *c;
                lo = lo.min(learned.jet(&x)?.phi);
                if let Some(r) = reference {
                    lo_t = lo_t.min(r.jet(&x)?.phi);
                }
            }
            let t = if reference.is_some() {
                format!("{lo_t:e}")
            } else {
                String::new()
            };
            let _ = writeln!(csv, "{a},{b},{lo:e},{t}");
        }
    }
    Ok(csv)
}

// ---- registry ----

/// Names of the built-in experiments.
pub const REGISTRY: [&str; 18] = [
    "ex1_parametric_scan",
    "ex1_parametric_train",
    "ex2_drift_only",
    "ex2_joint",
    "ex2_trajectory",
    "ex3_drift_only",
    "ex4_drift_only",
    "ex4_joint",
    "ex5_all_params",
    "ex5_diffusion_given_drift",
    "ex5_drift_given_diffusion_clean",
    "ex5_drift_given_diffusion_noise5",
    "ex5_drift_given_diffusion_noise10",
    "ex5_drift_hellinger_joint",
    "ex5_drift_js",
    "ex5_drift_pinn",
    "ex6_drift_5d",
    "ex6_drift_5d_quick",
];

const HIDDEN_1D: [usize; 4] = [20, 20, 20, 20];
const HIDDEN_3D: [usize; 4] = [20, 20, 20, 20];

fn gate(metric: &str, max: Option<f64>, min: Option<f64>) -> Gate {
    Gate {
        metric: metric.into(),
        max,
        min,
    }
}

fn base_train(
    mode: Mode,
    domain: Domain,
    n_h: usize,
    n_f: usize,
    iterations: usize,
) -> TrainConfig {
    TrainConfig {
        mode,
        obs_loss: ObsLoss::Hellinger,
        js_form: JsForm::Verbatim,
        n_h,
        n_f,
        anchors: Vec::new(),
        learning_rate: 1e-3,
        scalar_learning_rate: None,
        iterations,
        seed: 1,
        weights: LossWeights::default(),
        domain,
        log_every: 100,
        warmup_iterations: 0,
        freeze_density_after_warmup: false,
        lr_steps: Vec::new(),
    }
}

fn library(name: &str, n: usize) -> ObservationSource {
    let mut params = BTreeMap::new();
    params.insert("n".to_string(), n as f64);
    ObservationSource::Library {
        name: name.into(),
        params,
    }
}

fn double_well() -> ClosedDrift {
    ClosedDrift::Polynomial {
        coeffs: vec![0.0, 1.0, 0.0, -1.0],
    }
}

fn one_d(
    source: ObservationSource,
    domain: Domain,
    mode: Mode,
    iterations: usize,
    truth: ClosedDrift,
    region: RegionSpec,
) -> TrainSpec {
    TrainSpec {
        source,
        noise: 0.0,
        drift: DriftSpec::Neural {
            hidden: HIDDEN_1D.to_vec(),
        },
        diffusion: DiffusionSpec::Constant {
            sigma: vec![1.0],
            trainable: false,
        },
        density_hidden: HIDDEN_1D.to_vec(),
        train: base_train(mode, domain, 1001, 2000, iterations),
        truth: Some(TruthSpec {
            drift: Some(TruthDrift::Closed { drift: truth }),
            sigma: Some(vec![1.0]),
        }),
        evaluation: EvaluationSpec {
            drift_region: Some(region),
            ..Default::default()
        },
    }
}

/// Network rate x0.3 after half the warm-up and x0.1 after three quarters.
fn warmup_steps(warmup: usize) -> Vec<LrStep> {
    vec![
        LrStep {
            at: warmup / 2,
            factor: 0.3,
        },
        LrStep {
            at: 3 * warmup / 4,
            factor: 0.1,
        },
    ]
}

/// Density-only warm-up, then the parameters against the frozen density.
fn three_d(mode: Mode) -> TrainSpec {
    let (warmup, iterations) = (6000, 6600);
    let domain = Domain {
        lower: vec![-4.0, -3.0, -3.0],
        upper: vec![2.5, 2.5, 2.5],
    };
    let mut train = base_train(mode, domain.clone(), 20_000, 2000, iterations);
    train.learning_rate = 3e-3;
    train.scalar_learning_rate = Some(1e-2);
    train.lr_steps = warmup_steps(warmup);
    train.warmup_iterations = warmup;
    train.freeze_density_after_warmup = true;
    train.log_every = 50;
    TrainSpec {
        source: ObservationSource::Boltzmann {
            potential: PotentialSpec::three_dim(),
            sigma: vec![1.0; 3],
            z_counts: vec![60; 3],
            mass_fraction: 0.5,
        },
        noise: 0.0,
        drift: DriftSpec::Potential {
            family: PotentialFamily::ThreeDim,
            start: None,
            reference: None,
            perturbation: 0.3,
            trainable: true,
        },
        diffusion: DiffusionSpec::Constant {
            sigma: vec![1.0; 3],
            trainable: false,
        },
        density_hidden: HIDDEN_3D.to_vec(),
        train,
        truth: Some(TruthSpec {
            drift: Some(TruthDrift::Potential {
                potential: PotentialSpec::three_dim(),
            }),
            sigma: Some(vec![1.0; 3]),
        }),
        evaluation: EvaluationSpec {
            drift_region: Some(RegionSpec::Box {
                lower: domain.lower.clone(),
                upper: domain.upper.clone(),
            }),
            grid: 41,
            slices: vec![-1.0, 0.5, 1.0],
        },
    }
}

/// Short warm-up, then density and coefficients together; the observation
/// loss keeps acting on the density while the coefficients move.
fn comparison(mode: Mode, obs_loss: ObsLoss) -> TrainSpec {
    let mut t = three_d(mode);
    t.train.obs_loss = obs_loss;
    t.train.warmup_iterations = 1000;
    t.train.iterations = 3000;
    t.train.freeze_density_after_warmup = false;
    t.train.learning_rate = 1e-3;
    t.train.lr_steps = Vec::new();
    t
}

fn five_d(warmup: usize, iterations: usize) -> TrainSpec {
    let domain = Domain::cube(5, -1.0, 1.0);
    let mut train = base_train(Mode::Parametric, domain.clone(), 20_000, 2000, iterations);
    train.learning_rate = 3e-3;
    train.scalar_learning_rate = Some(1e-2);
    train.lr_steps = warmup_steps(warmup);
    train.warmup_iterations = warmup;
    train.freeze_density_after_warmup = true;
    train.log_every = 50;
    TrainSpec {
        source: ObservationSource::Boltzmann {
            potential: PotentialSpec::five_dim(),
            sigma: vec![1.0; 5],
            z_counts: vec![12; 5],
            mass_fraction: 0.5,
        },
        noise: 0.0,
        drift: DriftSpec::Potential {
            family: PotentialFamily::FiveDim,
            start: None,
            reference: None,
            perturbation: 0.3,
            trainable: true,
        },
        diffusion: DiffusionSpec::Constant {
            sigma: vec![1.0; 5],
            trainable: false,
        },
        density_hidden: HIDDEN_3D.to_vec(),
        train,
        truth: Some(TruthSpec {
            drift: Some(TruthDrift::Potential {
                potential: PotentialSpec::five_dim(),
            }),
            sigma: Some(vec![1.0; 5]),
        }),
        evaluation: EvaluationSpec {
            drift_region: Some(RegionSpec::Box {
                lower: domain.lower.clone(),
                upper: domain.upper.clone(),
            }),
            grid: 6,
            slices: Vec::new(),
        },
    }
}

fn spec(name: &str, description: &str, task: TrainSpec, gates: Vec<Gate>) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        description: description.into(),
        task: Task::Train(Box::new(task)),
        gates,
    }
}

/// Built-in experiment by name.
pub fn registry(name: &str) -> Result<ExperimentSpec> {
    let dw_box = || RegionSpec::Box {
        lower: vec![-2.0],
        upper: vec![2.0],
    };
    let s = match name {
        "ex1_parametric_scan" => ExperimentSpec {
            name: name.into(),
            description: "Hellinger distance of b = -kx against N(0,1), k on a grid".into(),
            task: Task::HellingerScan(ScanSpec {
                k_min: 0.05,
                k_max: 2.0,
                k_step: 0.01,
                lower: -10.0,
                upper: 10.0,
                n: 2001,
            }),
            gates: vec![
                gate("argmin_k_abs_error", Some(0.01), None),
                gate("h_at_half", Some(1e-3), None),
            ],
        },
        "ex1_parametric_train" => {
            let mut t = one_d(
                library("gaussian", 201),
                Domain::interval(-5.0, 5.0),
                Mode::Parametric,
                3000,
                ClosedDrift::Linear { k: 0.5 },
                dw_box(),
            );
            t.drift = DriftSpec::Linear { k: 1.5 };
            t.train.n_h = 201;
            t.train.n_f = 200;
            t.train.learning_rate = 2e-3;
            t.train.scalar_learning_rate = Some(1e-2);
            spec(
                name,
                "b = -kx fitted to N(0,1) by gradient descent from k = 1.5",
                t,
                vec![gate("param_max_abs_error", Some(0.02), None)],
            )
        }
        "ex2_drift_only" => spec(
            name,
            "double-well drift, sigma = 1 given",
            one_d(
                library("double_well", 1001),
                Domain::interval(-5.0, 5.0),
                Mode::DriftOnly,
                20_000,
                double_well(),
                dw_box(),
            ),
            vec![
                gate("drift_rel_l2", Some(0.1), None),
                gate("final_total", Some(1e-3), None),
            ],
        ),
        "ex2_joint" => {
            let mut t = one_d(
                library("double_well", 1001),
                Domain::interval(-5.0, 5.0),
                Mode::Joint,
                30_000,
                double_well(),
                dw_box(),
            );
            t.diffusion = DiffusionSpec::Constant {
                sigma: vec![0.5],
                trainable: true,
            };
            t.train.anchors = vec![Anchor {
                x: vec![-2.0],
                b: vec![6.0],
            }];
            // density first, then a faster sigma and a decaying network rate
            t.train.warmup_iterations = 5000;
            t.train.scalar_learning_rate = Some(1e-2);
            t.train.lr_steps = vec![
                LrStep {
                    at: 18_000,
                    factor: 0.3,
                },
                LrStep {
                    at: 24_000,
                    factor: 0.1,
                },
            ];
            spec(
                name,
                "double-well drift and constant sigma, one drift anchor at x = -2",
                t,
                vec![
                    gate("sigma_abs_error_max", Some(0.1), None),
                    gate("drift_rel_l2", Some(0.15), None),
                ],
            )
        }
        "ex2_trajectory" => {
            let mut t = one_d(
                ObservationSource::Trajectory {
                    drift: double_well(),
                    sigma: 1.0,
                    x0: 0.0,
                    dt: 0.01,
                    steps: 1_000_000,
                    burn_in: 1000,
                    bandwidth: None,
                },
                Domain::interval(-5.0, 5.0),
                Mode::DriftOnly,
                30_000,
                double_well(),
                dw_box(),
            );
            t.train.n_h = 1001;
            spec(
                name,
                "double-well drift learned from one simulated path via KDE",
                t,
                vec![],
            )
        }
        "ex3_drift_only" => spec(
            name,
            "drift for a Cauchy-shaped stationary density, sigma = 1",
            one_d(
                library("cauchy", 1001),
                Domain::interval(-20.0, 20.0),
                Mode::DriftOnly,
                30_000,
                ClosedDrift::Cauchy,
                RegionSpec::Box {
                    lower: vec![-5.0],
                    upper: vec![5.0],
                },
            ),
            vec![],
        ),
        "ex4_drift_only" | "ex4_joint" => {
            let g = GeneRegulation::default();
            let mut t = one_d(
                library("gene_regulation", 1001),
                Domain::interval(0.0, 15.0),
                Mode::DriftOnly,
                30_000,
                ClosedDrift::GeneRegulation(g),
                RegionSpec::DensityAbove { fraction: 0.01 },
            );
            let mut gates = vec![gate("drift_rel_l2", Some(0.15), None)];
            let desc = if name == "ex4_joint" {
                t.train.mode = Mode::Joint;
                t.diffusion = DiffusionSpec::Constant {
                    sigma: vec![0.5],
                    trainable: true,
                };
                t.train.anchors = vec![Anchor {
                    x: vec![5.0],
                    b: vec![g.drift(5.0)],
                }];
                t.train.iterations = 40_000;
                t.train.lr_steps = vec![
                    LrStep {
                        at: 24_000,
                        factor: 0.3,
                    },
                    LrStep {
                        at: 32_000,
                        factor: 0.1,
                    },
                ];
                gates.push(gate("sigma_abs_error_max", Some(0.15), None));
                "gene-regulation drift and constant sigma, one drift anchor at x = 5"
            } else {
                "gene-regulation drift, sigma = 1 given"
            };
            spec(name, desc, t, gates)
        }
        "ex5_all_params" => {
            let mut t = three_d(Mode::Parametric);
            t.diffusion = DiffusionSpec::Constant {
                sigma: vec![0.7, 1.3, 0.8],
                trainable: true,
            };
            spec(
                name,
                "3D potential: all lambda and sigma together (partly unidentifiable)",
                t,
                vec![],
            )
        }
        "ex5_diffusion_given_drift" => {
            let mut t = three_d(Mode::Parametric);
            t.drift = DriftSpec::Potential {
                family: PotentialFamily::ThreeDim,
                start: Some(PotentialSpec::three_dim()),
                reference: None,
                perturbation: 0.0,
                trainable: false,
            };
            t.diffusion = DiffusionSpec::Constant {
                sigma: vec![0.7, 1.3, 0.8],
                trainable: true,
            };
            spec(
                name,
                "3D potential: sigma learned with the drift given",
                t,
                vec![],
            )
        }
        "ex5_drift_given_diffusion_clean"
        | "ex5_drift_given_diffusion_noise5"
        | "ex5_drift_given_diffusion_noise10" => {
            let mut t = three_d(Mode::Parametric);
            t.noise = match name {
                "ex5_drift_given_diffusion_noise5" => 0.05,
                "ex5_drift_given_diffusion_noise10" => 0.1,
                _ => 0.0,
            };
            spec(
                name,
                "3D potential: 12 drift parameters with sigma given",
                t,
                vec![gate("param_within_tolerance", None, Some(12.0))],
            )
        }
        "ex5_drift_hellinger_joint" => spec(
            name,
            "3D potential drift, density trained throughout (Hellinger)",
            comparison(Mode::Parametric, ObsLoss::Hellinger),
            vec![],
        ),
        "ex5_drift_js" => spec(
            name,
            "3D potential drift, density trained throughout (JS)",
            comparison(Mode::Parametric, ObsLoss::Js),
            vec![],
        ),
        "ex5_drift_pinn" => spec(
            name,
            "3D potential drift, density trained throughout (mean-square)",
            comparison(Mode::PinnBaseline, ObsLoss::Hellinger),
            vec![],
        ),
        "ex6_drift_5d" => spec(
            name,
            "5D potential: 20 drift parameters with sigma given",
            five_d(20_000, 20_600),
            vec![gate("param_mean_rel_error", Some(0.25), None)],
        ),
        "ex6_drift_5d_quick" => {
            let mut t = five_d(300, 400);
            t.train.n_h = 4000;
            t.train.n_f = 500;
            spec(name, "reduced 5D run for smoke tests", t, vec![])
        }
        _ => {
            return Err(Error::config(
                "experiment",
                format!(
                    "unknown experiment {name:?}; known: {}",
                    REGISTRY.join(", ")
                ),
            ))
        }
    };
    Ok(s)
}
