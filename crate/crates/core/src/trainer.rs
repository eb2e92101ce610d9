//! Loss assembly and Adam training of drift, diffusion and density models.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{DensityObservation, PotentialSpec};
use crate::divergences::{hellinger_loss, js_loss, mse_loss, JsForm};
use crate::error::{Error, Result};
use crate::field::{BatchJet, JetAdjoint, JetOrder, NeuralField};
use crate::gradient::{loss_gradient, FieldRequest, LossEval};
use crate::optim::{adam_step, AdamState};
use crate::quadrature::Domain;
use crate::residual::{
    residual_pullback, residual_values, variance_from_sigma, ClosedDrift, DensityJets, Diffusion,
    Drift, DriftJets, ResidualAdjoint, SdeModel, TrainMask, VarianceJets,
};
use crate::rng::{stream_rng, STREAM_COLLOCATION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Neural drift, given diffusion: observation + residual.
    DriftOnly,
    /// Drift and diffusion both learned; needs drift anchors.
    Joint,
    /// Drift from a parametric family.
    Parametric,
    /// Mean-square observation loss + residual.
    PinnBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsLoss {
    #[default]
    Hellinger,
    Js,
    Mse,
}

/// A known drift value at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub x: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub obs: f64,
    #[serde(default = "one")]
    pub residual: f64,
    #[serde(default = "one")]
    pub anchor: f64,
}

fn one() -> f64 {
    1.0
}

fn default_log_every() -> usize {
    100
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            obs: 1.0,
            residual: 1.0,
            anchor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    #[serde(default)]
    pub obs_loss: ObsLoss,
    #[serde(default)]
    pub js_form: JsForm,
    #[serde(rename = "N_H")]
    pub n_h: usize,
    #[serde(rename = "N_f")]
    pub n_f: usize,
    #[serde(default)]
    pub anchors: Vec<Anchor>,
    pub learning_rate: f64,
    /// Step size for parametric drift and constant diffusion; defaults to `learning_rate`.
    #[serde(default)]
    pub scalar_learning_rate: Option<f64>,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    pub domain: Domain,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Leading iterations that fit only the density to the observation;
    /// drift, diffusion and scalars stay frozen.
    #[serde(default)]
    pub warmup_iterations: usize,
    /// Keep the density network fixed once warm-up ends.
    #[serde(default)]
    pub freeze_density_after_warmup: bool,
    /// Network step-size multipliers; the last entry with `at <= it` applies.
    #[serde(default)]
    pub lr_steps: Vec<LrStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub at: usize,
    pub factor: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("N_H", self.n_h),
            ("N_f", self.n_f),
            ("iterations", self.iterations),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if let Some(lr) = self.scalar_learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config("scalar_learning_rate", "must be positive"));
            }
        }
        if self.warmup_iterations >= self.iterations {
            return Err(Error::config(
                "warmup_iterations",
                "must be smaller than iterations",
            ));
        }
        if self.freeze_density_after_warmup && self.warmup_iterations == 0 {
            return Err(Error::config(
                "freeze_density_after_warmup",
                "needs warmup_iterations > 0",
            ));
        }
        for (k, s) in self.lr_steps.iter().enumerate() {
            if !(s.factor.is_finite() && s.factor > 0.0) {
                return Err(Error::config(
                    format!("lr_steps[{k}].factor"),
                    "must be positive",
                ));
            }
            if k > 0 && s.at <= self.lr_steps[k - 1].at {
                return Err(Error::config(format!("lr_steps[{k}].at"), "must increase"));
            }
        }
        self.domain.validate()?;
        let w = self.weights;
        for (name, v) in [
            ("weights.obs", w.obs),
            ("weights.residual", w.residual),
            ("weights.anchor", w.anchor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be >= 0"));
            }
        }
        if self.mode == Mode::Joint && self.anchors.is_empty() {
            return Err(Error::config(
                "anchors",
                "joint drift and diffusion learning is not unique without at least one drift anchor",
            ));
        }
        let n = self.domain.dim();
        for (k, a) in self.anchors.iter().enumerate() {
            if a.x.len() != n || a.b.len() != n {
                return Err(Error::config(
                    format!("anchors[{k}]"),
                    format!("x and b need {n} entries"),
                ));
            }
        }
        Ok(())
    }

    /// Loss weights in force at iteration `it`.
    pub fn weights_at(&self, it: usize) -> LossWeights {
        if it < self.warmup_iterations {
            LossWeights {
                obs: self.weights.obs,
                residual: 0.0,
                anchor: 0.0,
            }
        } else {
            self.weights
        }
    }

    /// Network learning rate at iteration `it`.
    pub fn learning_rate_at(&self, it: usize) -> f64 {
        let f = self
            .lr_steps
            .iter()
            .rev()
            .find(|s| s.at <= it)
            .map_or(1.0, |s| s.factor);
        self.learning_rate * f
    }

    /// Observation loss actually used in this mode.
    pub fn effective_obs_loss(&self) -> ObsLoss {
        match self.mode {
            Mode::PinnBaseline => ObsLoss::Mse,
            _ => self.obs_loss,
        }
    }
}

/// Loss terms at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    #[serde(rename = "loss_H")]
    pub loss_h: f64,
    pub loss_f: f64,
    pub loss_b: Option<f64>,
    pub total: f64,
    pub seconds: f64,
}

/// Uniform points in `domain`, point-major.
pub fn sample_collocation<R: Rng>(domain: &Domain, n: usize, rng: &mut R) -> Vec<f64> {
    let d = domain.dim();
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        for i in 0..d {
            out.push(rng.gen_range(domain.lower[i]..domain.upper[i]));
        }
    }
    out
}

/// Everything the loss needs, already evaluated.
pub struct TermInputs<'a> {
    pub obs_loss: ObsLoss,
    pub js_form: JsForm,
    pub weights: LossWeights,
    /// Observed values.
    pub q: &'a [f64],
    /// Model density at the observation points.
    pub obs_p: &'a [f64],
    /// `sqrt` of the model density at the observation points.
    pub obs_sqrt: &'a [f64],
    pub density: &'a DensityJets,
    pub drift: &'a DriftJets,
    pub variance: &'a VarianceJets,
    /// Predicted drift at each anchor.
    pub anchor_pred: &'a [Vec<f64>],
    pub anchors: &'a [Anchor],
}

/// Sensitivities of the total loss.
pub struct TermAdjoints {
    pub obs_p: Vec<f64>,
    pub obs_sqrt: Vec<f64>,
    pub residual: ResidualAdjoint,
    pub anchor: Vec<Vec<f64>>,
}

fn finite_term(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DivergedLoss {
            term: term.to_string(),
            value: v,
        })
    }
}

/// Weighted loss terms and their sensitivities.
pub fn evaluate_terms(t: &TermInputs<'_>) -> Result<(LossBreakdown, TermAdjoints)> {
    let w = t.weights;
    let n_obs = t.q.len();
    let mut obs_p = vec![0.0; n_obs];
    let mut obs_sqrt = vec![0.0; n_obs];
    let loss_h = match t.obs_loss {
        ObsLoss::Hellinger => {
            let (v, g) = hellinger_loss(t.obs_sqrt, t.q);
            obs_sqrt = g;
            v
        }
        ObsLoss::Js => {
            let (v, g) = js_loss(t.obs_p, t.q, t.js_form);
            obs_p = g;
            v
        }
        ObsLoss::Mse => {
            let (v, g) = mse_loss(t.obs_p, t.q);
            obs_p = g;
            v
        }
    };
    let loss_h = finite_term("loss_H", loss_h)?;
    obs_p
        .iter_mut()
        .chain(obs_sqrt.iter_mut())
        .for_each(|g| *g *= w.obs);

    let f = residual_values(t.density, t.drift, t.variance);
    let nf = f.len() as f64;
    let loss_f = finite_term("loss_f", f.iter().map(|v| v * v).sum::<f64>() / nf)?;
    let f_bar: Vec<f64> = f.iter().map(|v| w.residual * 2.0 * v / nf).collect();
    let residual = residual_pullback(t.density, t.drift, t.variance, &f_bar);

    let (loss_b, anchor) = if t.anchors.is_empty() {
        (None, Vec::new())
    } else {
        let nb = t.anchors.len() as f64;
        let mut s = 0.0;
        let adj = t
            .anchors
            .iter()
            .zip(t.anchor_pred)
            .map(|(a, pred)| {
                pred.iter()
                    .zip(&a.b)
                    .map(|(p, b)| {
                        s += (p - b) * (p - b);
                        w.anchor * 2.0 * (p - b) / nb
                    })
                    .collect()
            })
            .collect();
        (Some(finite_term("loss_b", s / nb)?), adj)
    };
    let total = w.obs * loss_h + w.residual * loss_f + w.anchor * loss_b.unwrap_or(0.0);
    Ok((
        LossBreakdown {
            iteration: 0,
            loss_h,
            loss_f,
            loss_b,
            total,
            seconds: 0.0,
        },
        TermAdjoints {
            obs_p,
            obs_sqrt,
            residual,
            anchor,
        },
    ))
}

/// Model, density network and observation being fitted.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: SdeModel,
    pub density: NeuralField,
    pub obs: DensityObservation,
}

fn apply_scalars(model: &mut SdeModel, lay: ScalarLayout, v: &[f64]) {
    if lay.drift > 0 {
        match &mut model.drift {
            Drift::Potential(s) => s.set_params(&v[..lay.drift]),
            Drift::Closed(ClosedDrift::Linear { k }) => *k = v[0],
            _ => {}
        }
    }
    if lay.sigma > 0 {
        if let Diffusion::Constant(s) = &mut model.diffusion {
            s.copy_from_slice(&v[lay.drift..lay.drift + lay.sigma]);
        }
    }
}

/// Which scalar parameters the problem exposes, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ScalarLayout {
    drift: usize,
    sigma: usize,
}

impl Problem {
    pub fn new(model: SdeModel, density: NeuralField, obs: DensityObservation) -> Result<Self> {
        model.validate()?;
        if density.input_dim() != model.dim || density.output_dim() != 1 || obs.dim != model.dim {
            return Err(Error::DimensionMismatch {
                expected: model.dim,
                got: density.input_dim(),
            });
        }
        Ok(Problem {
            model,
            density,
            obs,
        })
    }

    fn scalar_layout(&self) -> ScalarLayout {
        let drift = match &self.model.drift {
            Drift::Potential(s) if self.model.trainable.drift => s.lambda0.len() * 2,
            Drift::Closed(ClosedDrift::Linear { .. }) if self.model.trainable.drift => 1,
            _ => 0,
        };
        let sigma = match &self.model.diffusion {
            Diffusion::Constant(s) if self.model.trainable.diffusion => s.len(),
            _ => 0,
        };
        ScalarLayout { drift, sigma }
    }

    /// Column names for [`Problem::scalars`].
    pub fn scalar_names(&self) -> Vec<String> {
        let lay = self.scalar_layout();
        let mut v = Vec::new();
        if lay.drift > 0 {
            match &self.model.drift {
                Drift::Potential(s) => {
                    let m = s.lambda0.len();
                    v.extend((1..=m).map(|i| format!("lambda0_{i}")));
                    v.extend((1..=m).map(|i| format!("lambda1_{i}")));
                }
                _ => v.push("k".to_string()),
            }
        }
        v.extend((1..=lay.sigma).map(|i| format!("sigma_{i}")));
        v
    }

    /// Trainable scalars: parametric drift values, then constant sigmas.
    pub fn scalars(&self) -> Vec<f64> {
        let lay = self.scalar_layout();
        let mut v = Vec::new();
        if lay.drift > 0 {
            match &self.model.drift {
                Drift::Potential(s) => v.extend(s.params()),
                Drift::Closed(ClosedDrift::Linear { k }) => v.push(*k),
                _ => {}
            }
        }
        if lay.sigma > 0 {
            if let Diffusion::Constant(s) = &self.model.diffusion {
                v.extend_from_slice(s);
            }
        }
        v
    }

    pub fn set_scalars(&mut self, v: &[f64]) {
        let lay = self.scalar_layout();
        apply_scalars(&mut self.model, lay, v);
    }

    fn fields(&self) -> Vec<&NeuralField> {
        let mut f = vec![&self.density];
        if let Drift::Neural(d) = &self.model.drift {
            f.push(d);
        }
        if let Diffusion::Neural(s) = &self.model.diffusion {
            f.push(s);
        }
        f
    }

    /// Which field blocks get updated.
    fn field_trainable(&self) -> Vec<bool> {
        let mut t = vec![true];
        if matches!(self.model.drift, Drift::Neural(_)) {
            t.push(self.model.trainable.drift);
        }
        if matches!(self.model.diffusion, Diffusion::Neural(_)) {
            t.push(self.model.trainable.diffusion);
        }
        t
    }

    fn fields_mut(&mut self) -> Vec<&mut NeuralField> {
        let mut f = vec![&mut self.density];
        if let Drift::Neural(d) = &mut self.model.drift {
            f.push(d);
        }
        if let Diffusion::Neural(s) = &mut self.model.diffusion {
            f.push(s);
        }
        f
    }

    /// All field parameters followed by [`Problem::scalars`].
    pub fn flat_params(&self) -> Vec<f64> {
        crate::gradient::flatten(&self.fields(), &self.scalars())
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        let mut off = 0;
        for f in self.fields_mut() {
            let n = f.num_params();
            f.set_params(&theta[off..off + n])?;
            off += n;
        }
        self.set_scalars(&theta[off..]);
        Ok(())
    }
}

fn density_jets_from(jet: &BatchJet, n: usize) -> DensityJets {
    DensityJets {
        value: jet.value(0).to_vec(),
        grad: (0..n).map(|i| jet.grad(0, i).to_vec()).collect(),
        hess_diag: (0..n).map(|i| jet.hess_diag(0, i).to_vec()).collect(),
    }
}

/// Loss terms and the gradient over [`Problem::flat_params`] for one
/// collocation batch.
pub fn assemble_loss(
    config: &TrainConfig,
    problem: &Problem,
    colloc: &[f64],
) -> Result<(LossBreakdown, Vec<f64>)> {
    assemble_weighted(config, config.weights, problem, colloc)
}

fn assemble_weighted(
    config: &TrainConfig,
    weights: LossWeights,
    problem: &Problem,
    colloc: &[f64],
) -> Result<(LossBreakdown, Vec<f64>)> {
    let n = problem.model.dim;
    let obs = &problem.obs;
    let anchor_pts: Vec<f64> = config
        .anchors
        .iter()
        .flat_map(|a| a.x.iter().copied())
        .collect();
    let neural_drift = matches!(problem.model.drift, Drift::Neural(_));
    let neural_sigma = matches!(problem.model.diffusion, Diffusion::Neural(_));
    let mut requests = vec![
        FieldRequest {
            field: 0,
            points: &obs.points,
            order: JetOrder::Value,
        },
        FieldRequest {
            field: 0,
            points: colloc,
            order: JetOrder::Second,
        },
    ];
    let mut next_field = 1;
    let (mut r_drift, mut r_anchor, mut r_sigma) = (None, None, None);
    if neural_drift {
        r_drift = Some(requests.len());
        requests.push(FieldRequest {
            field: next_field,
            points: colloc,
            order: JetOrder::First,
        });
        if !config.anchors.is_empty() {
            r_anchor = Some(requests.len());
            requests.push(FieldRequest {
                field: next_field,
                points: &anchor_pts,
                order: JetOrder::Value,
            });
        }
        next_field += 1;
    }
    if neural_sigma {
        r_sigma = Some(requests.len());
        requests.push(FieldRequest {
            field: next_field,
            points: colloc,
            order: JetOrder::Second,
        });
    }
    let lay = problem.scalar_layout();
    let fields = problem.fields();
    let scalars = problem.scalars();
    let mut breakdown = None;
    let (_, grad) = loss_gradient(&fields, &scalars, &requests, |jets, scalars| {
        let mut model = problem.model.clone();
        apply_scalars(&mut model, lay, scalars);

        let obs_jet = &jets[0];
        let obs_p = obs_jet.value(0);
        let obs_sqrt: Vec<f64> = obs_jet.raw_value(0).iter().map(|r| r.abs()).collect();
        let density = density_jets_from(&jets[1], n);
        let drift = match r_drift {
            Some(r) => DriftJets {
                b: (0..n).map(|i| jets[r].value(i).to_vec()).collect(),
                div: (0..n).map(|i| jets[r].grad(i, i).to_vec()).collect(),
            },
            None => model.drift_jets(colloc)?,
        };
        let variance = match r_sigma {
            Some(r) => variance_from_sigma(
                jets[r].value(0),
                jets[r].grad(0, 0),
                jets[r].hess_diag(0, 0),
            ),
            None => model.variance_jets(colloc)?,
        };
        let anchor_pred: Vec<Vec<f64>> = match r_anchor {
            Some(r) => (0..config.anchors.len())
                .map(|k| (0..n).map(|i| jets[r].value(i)[k]).collect())
                .collect(),
            None => config
                .anchors
                .iter()
                .map(|a| model.drift_at(&a.x))
                .collect::<Result<_>>()?,
        };
        let (bd, adj) = evaluate_terms(&TermInputs {
            obs_loss: config.effective_obs_loss(),
            js_form: config.js_form,
            weights,
            q: &obs.values,
            obs_p,
            obs_sqrt: &obs_sqrt,
            density: &density,
            drift: &drift,
            variance: &variance,
            anchor_pred: &anchor_pred,
            anchors: &config.anchors,
        })?;
        breakdown = Some(bd);

        let mut adjoints: Vec<JetAdjoint> = jets.iter().map(JetAdjoint::zeros_like).collect();
        {
            let a = &mut adjoints[0];
            a.value_mut(0).copy_from_slice(&adj.obs_p);
            let raw = obs_jet.raw_value(0);
            for ((dst, g), r) in a.raw_value_mut(0).iter_mut().zip(&adj.obs_sqrt).zip(raw) {
                *dst = if *r == 0.0 { 0.0 } else { g * r.signum() };
            }
        }
        {
            let a = &mut adjoints[1];
            a.value_mut(0).copy_from_slice(&adj.residual.p.value);
            for i in 0..n {
                a.grad_mut(0, i).copy_from_slice(&adj.residual.p.grad[i]);
                a.hess_diag_mut(0, i)
                    .copy_from_slice(&adj.residual.p.hess_diag[i]);
            }
        }
        let mut scalar_grad = vec![0.0; scalars.len()];
        match r_drift {
            Some(r) => {
                let a = &mut adjoints[r];
                for i in 0..n {
                    a.value_mut(i).copy_from_slice(&adj.residual.b.b[i]);
                    a.grad_mut(i, i).copy_from_slice(&adj.residual.b.div[i]);
                }
            }
            None if lay.drift > 0 => {
                let g = &mut scalar_grad[..lay.drift];
                match &model.drift {
                    Drift::Potential(spec) => {
                        potential_pullback(spec, colloc, &adj.residual.b, g);
                        for (a, ab) in config.anchors.iter().zip(&adj.anchor) {
                            spec.drift_backward(&a.x, ab, &vec![0.0; n], g);
                        }
                    }
                    Drift::Closed(ClosedDrift::Linear { .. }) => {
                        // b_i = -k x_i, d b_i / d x_i = -k
                        for (k, x) in colloc.chunks(n).enumerate() {
                            for i in 0..n {
                                g[0] -= x[i] * adj.residual.b.b[i][k] + adj.residual.b.div[i][k];
                            }
                        }
                        for (a, ab) in config.anchors.iter().zip(&adj.anchor) {
                            for i in 0..n {
                                g[0] -= a.x[i] * ab[i];
                            }
                        }
                    }
                    _ => {}
                }
            }
            None => {}
        }
        if let Some(r) = r_anchor {
            let a = &mut adjoints[r];
            for (k, ab) in adj.anchor.iter().enumerate() {
                for i in 0..n {
                    a.value_mut(i)[k] = ab[i];
                }
            }
        }
        match (&adj.residual.var, r_sigma) {
            (
                VarianceJets::Field1d {
                    a: abar,
                    da: dabar,
                    dda: ddabar,
                },
                Some(r),
            ) => {
                let (s, ds, dds) = (
                    jets[r].value(0),
                    jets[r].grad(0, 0),
                    jets[r].hess_diag(0, 0),
                );
                let m = s.len();
                let (mut sb, mut dsb, mut ddsb) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
                for k in 0..m {
                    sb[k] =
                        2.0 * s[k] * abar[k] + 2.0 * ds[k] * dabar[k] + 2.0 * dds[k] * ddabar[k];
                    dsb[k] = 2.0 * s[k] * dabar[k] + 4.0 * ds[k] * ddabar[k];
                    ddsb[k] = 2.0 * s[k] * ddabar[k];
                }
                let a = &mut adjoints[r];
                a.value_mut(0).copy_from_slice(&sb);
                a.grad_mut(0, 0).copy_from_slice(&dsb);
                a.hess_diag_mut(0, 0).copy_from_slice(&ddsb);
            }
            (VarianceJets::Constant(abar), None) if lay.sigma > 0 => {
                if let Diffusion::Constant(s) = &model.diffusion {
                    for i in 0..lay.sigma {
                        scalar_grad[lay.drift + i] = 2.0 * s[i] * abar[i];
                    }
                }
            }
            _ => {}
        }
        Ok(LossEval {
            value: bd.total,
            adjoints,
            scalar_grad,
        })
    })?;
    Ok((breakdown.expect("loss closure ran"), grad))
}

fn potential_pullback(spec: &PotentialSpec, colloc: &[f64], adj: &DriftJets, grad: &mut [f64]) {
    let n = spec.dim();
    let mut bb = vec![0.0; n];
    let mut db = vec![0.0; n];
    for (k, x) in colloc.chunks(n).enumerate() {
        for i in 0..n {
            bb[i] = adj.b[i][k];
            db[i] = adj.div[i][k];
        }
        spec.drift_backward(x, &bb, &db, grad);
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Parameters after the last step.
    pub final_problem: Problem,
    /// Parameters with the lowest total loss seen.
    pub best_problem: Problem,
    pub best_iteration: usize,
    pub best_total: f64,
    pub history: Vec<LossBreakdown>,
    /// Trainable scalars at each logged iteration.
    pub scalar_history: Vec<(usize, Vec<f64>)>,
    pub config: TrainConfig,
    pub iterations_done: usize,
}

/// Training stopped early; carries everything logged so far.
#[derive(Debug, thiserror::Error)]
#[error("training stopped at iteration {}: {source}", partial.iterations_done)]
pub struct TrainError {
    pub partial: Box<TrainedModel>,
    #[source]
    pub source: Error,
}

fn check_problem(config: &TrainConfig, problem: &Problem) -> Result<()> {
    config.validate()?;
    if config.domain.dim() != problem.model.dim {
        return Err(Error::DimensionMismatch {
            expected: problem.model.dim,
            got: config.domain.dim(),
        });
    }
    if problem.obs.len() != config.n_h {
        return Err(Error::config(
            "N_H",
            format!(
                "observation has {} points, config says {}",
                problem.obs.len(),
                config.n_h
            ),
        ));
    }
    for i in 0..problem.obs.len() {
        if !config.domain.contains(problem.obs.point(i)) {
            return Err(Error::InvalidPoint(format!(
                "observation point {:?} lies outside the training box",
                problem.obs.point(i)
            )));
        }
    }
    match (config.mode, &problem.model.drift) {
        (Mode::Parametric, Drift::Potential(_) | Drift::Closed(ClosedDrift::Linear { .. })) => {}
        (Mode::Parametric, _) => {
            return Err(Error::config(
                "mode",
                "parametric mode needs a potential or linear drift",
            ));
        }
        (Mode::DriftOnly | Mode::Joint, Drift::Neural(_)) => {}
        (Mode::DriftOnly | Mode::Joint, _) => {
            return Err(Error::config(
                "mode",
                "drift_only and joint modes need a neural drift",
            ));
        }
        (Mode::PinnBaseline, _) => {}
    }
    if matches!(config.mode, Mode::Parametric | Mode::PinnBaseline)
        && !problem.model.trainable.drift
        && !problem.model.trainable.diffusion
    {
        return Err(Error::config(
            "mode",
            "nothing to train: drift and diffusion are both fixed",
        ));
    }
    Ok(())
}

/// Runs `config.iterations` Adam steps.
pub fn train(
    problem: Problem,
    config: &TrainConfig,
) -> std::result::Result<TrainedModel, TrainError> {
    train_with(problem, config, |_| {})
}

/// As [`train`], calling `on_log` at every logged iteration.
pub fn train_with(
    mut problem: Problem,
    config: &TrainConfig,
    mut on_log: impl FnMut(&LossBreakdown),
) -> std::result::Result<TrainedModel, TrainError> {
    match config.mode {
        Mode::Joint => {
            problem.model.trainable = TrainMask {
                drift: true,
                diffusion: true,
            }
        }
        Mode::DriftOnly => {
            problem.model.trainable = TrainMask {
                drift: true,
                diffusion: false,
            }
        }
        _ => {}
    }
    let mut out = TrainedModel {
        final_problem: problem.clone(),
        best_problem: problem.clone(),
        best_iteration: 0,
        best_total: f64::INFINITY,
        history: Vec::new(),
        scalar_history: Vec::new(),
        config: config.clone(),
        iterations_done: 0,
    };
    if let Err(e) = check_problem(config, &problem) {
        return Err(TrainError {
            partial: Box::new(out),
            source: e,
        });
    }
    let mut rng = stream_rng(config.seed, STREAM_COLLOCATION);
    let trainable = problem.field_trainable();
    let field_sizes: Vec<usize> = problem.fields().iter().map(|f| f.num_params()).collect();
    let n_field: usize = field_sizes.iter().sum();
    let n_scalar = problem.scalars().len();
    let mut adam_net = AdamState::new(n_field);
    let mut adam_scalar = AdamState::new(n_scalar);
    let lr_scalar = config.scalar_learning_rate.unwrap_or(config.learning_rate);
    let mut theta = problem.flat_params();
    let start = Instant::now();

    for it in 0..config.iterations {
        let colloc = sample_collocation(&config.domain, config.n_f, &mut rng);
        let warm = it < config.warmup_iterations;
        if it > 0 && it == config.warmup_iterations {
            // the residual gradient arrives at a different scale
            adam_net = AdamState::new(n_field);
        }
        let step = assemble_weighted(config, config.weights_at(it), &problem, &colloc).and_then(
            |(mut bd, mut grad)| {
                bd.iteration = it;
                bd.seconds = start.elapsed().as_secs_f64();
                if !warm && bd.total < out.best_total {
                    out.best_total = bd.total;
                    out.best_iteration = it;
                    out.best_problem = problem.clone();
                }
                if it % config.log_every == 0 || it + 1 == config.iterations {
                    out.history.push(bd);
                    out.scalar_history.push((it, problem.scalars()));
                    on_log(&bd);
                }
                let mut off = 0;
                for (k, (size, t)) in field_sizes.iter().zip(&trainable).enumerate() {
                    let frozen = k == 0 && !warm && config.freeze_density_after_warmup;
                    if !t || (warm && k > 0) || frozen {
                        grad[off..off + size].iter_mut().for_each(|g| *g = 0.0);
                    }
                    off += size;
                }
                let (net, sc) = theta.split_at_mut(n_field);
                adam_step(
                    net,
                    &grad[..n_field],
                    &mut adam_net,
                    config.learning_rate_at(it),
                )?;
                if n_scalar > 0 && !warm {
                    adam_step(sc, &grad[n_field..], &mut adam_scalar, lr_scalar)?;
                }
                problem.set_flat_params(&theta)
            },
        );
        if let Err(e) = step {
            out.final_problem = problem;
            out.iterations_done = it;
            return Err(TrainError {
                partial: Box::new(out),
                source: e,
            });
        }
        out.iterations_done = it + 1;
    }
    out.final_problem = problem;
    Ok(out)
}

/// Writes `iter,loss_H,loss_f,loss_b,total,seconds`.
pub fn write_history_csv(history: &[LossBreakdown], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,loss_H,loss_f,loss_b,total,seconds")?;
    for h in history {
        let lb = h.loss_b.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            f,
            "{},{:e},{:e},{},{:e},{:.3}",
            h.iteration, h.loss_h, h.loss_f, lb, h.total, h.seconds
        )?;
    }
    f.flush()?;
    Ok(())
}
