use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sdefit::densities::{read_observation_csv, write_observation_csv};
use sdefit::experiments::{
    registry, run_experiment_with, score_against_truth, EvaluationSpec, ExperimentSpec, RegionSpec,
    TruthSpec, REGISTRY,
};
use sdefit::model_io::{load_model, ModelDescription};
use sdefit::quadrature::Domain;
use sdefit::residual::SdeModel;
use sdefit::rng::{job_seed, STREAM_SIMULATION};
use sdefit::sim::{
    euler_maruyama, kde, read_trajectory_csv, write_trajectory_csv, Bandwidth, KdeGrid,
};

mod config;

/// Environment variable overriding the default output root of `run`.
const OUTPUT_ROOT_ENV: &str = "SDEFIT_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Gates(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Gates(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<sdefit::Error> for CliError {
    fn from(e: sdefit::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "sdefit",
    version,
    about = "Fit SDE drift and diffusion to stationary densities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run registry experiments and/or experiments from a config file.
    Run {
        /// Registry names.
        names: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed of every experiment.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root; one subdirectory per experiment.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "runs")]
        out: PathBuf,
        /// Experiments run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Euler-Maruyama path of a model to CSV.
    Simulate {
        /// Model JSON (closed-form or potential) or a saved model directory.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial state, comma separated; zeros by default.
        #[arg(long, value_delimiter = ',')]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kernel density estimate of a trajectory CSV.
    Kde {
        #[arg(long)]
        config: PathBuf,
        /// `auto` or comma-separated per-axis widths.
        #[arg(long, default_value = "auto")]
        bandwidth: String,
        /// Per-axis `lo:hi:n`, comma separated; padded sample range by default.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        /// Nodes per axis for the padded grid.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a saved model against reference functions.
    Evaluate {
        /// Saved model directory.
        #[arg(long)]
        model: PathBuf,
        /// Reference JSON: `truth`, `evaluation`, optional `observation` CSV path.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Registry experiments.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            names,
            config,
            seed,
            out,
            jobs,
            quiet,
        } => cmd_run(&names, config.as_deref(), seed, &out, jobs, quiet),
        Command::Simulate {
            config,
            dt,
            steps,
            seed,
            x0,
            burn_in,
            out,
        } => cmd_simulate(&config, dt, steps, seed, &x0, burn_in, &out),
        Command::Kde {
            config,
            bandwidth,
            grid,
            points,
            out,
        } => cmd_kde(&config, &bandwidth, &grid, points, &out),
        Command::Evaluate { model, config, out } => cmd_evaluate(&model, &config, out.as_deref()),
        Command::List => {
            for name in REGISTRY {
                let s = registry(name).expect("registry entry");
                println!("{name:38} {}", s.description);
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    config_hash: String,
    seed: Option<u64>,
    started: String,
    finished: String,
    output_root: String,
    experiments: Vec<RunEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunEntry {
    name: String,
    seed: u64,
    output_dir: String,
    status: String,
}

fn cmd_run(
    names: &[String],
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    jobs: usize,
    quiet: bool,
) -> Result<(), CliError> {
    let mut specs = Vec::new();
    for n in names {
        specs.push(registry(n).map_err(|e| CliError::Invalid(e.to_string()))?);
    }
    if let Some(path) = config {
        specs.extend(config::load_config(path)?);
    }
    if specs.is_empty() {
        return Err(CliError::Invalid(
            "nothing to run: give registry names or --config".into(),
        ));
    }
    if let Some(s) = seed {
        specs = specs.iter().map(|x| x.with_seed(s)).collect();
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &specs {
        if !seen.insert(s.name.as_str()) {
            return Err(CliError::Invalid(format!(
                "experiment name `{}` appears twice",
                s.name
            )));
        }
    }
    if jobs == 0 {
        return Err(CliError::Invalid("--jobs must be > 0".into()));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", out.display())))?;
    let started = chrono::Utc::now().to_rfc3339();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<bool, CliError>>>> =
        Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(specs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = specs.get(i) else { break };
                let r = run_one(spec, &out.join(&spec.name), quiet);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<Result<bool, CliError>> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();

    let entries = specs
        .iter()
        .zip(&results)
        .map(|(s, r)| RunEntry {
            name: s.name.clone(),
            seed: s.seed(),
            output_dir: out.join(&s.name).display().to_string(),
            status: match r {
                Ok(true) => "passed".into(),
                Ok(false) => "gates failed".into(),
                Err(e) => format!("error: {e}"),
            },
        })
        .collect();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config::config_hash(&specs),
        seed,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        output_root: out.display().to_string(),
        experiments: entries,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Invalid(e.to_string()))?;
    std::fs::write(out.join("run_manifest.json"), text + "\n")
        .map_err(|e| CliError::Invalid(e.to_string()))?;

    let mut failed_gates = Vec::new();
    let mut first_err = None;
    for (s, r) in specs.iter().zip(results) {
        match r {
            Ok(true) => {}
            Ok(false) => failed_gates.push(s.name.clone()),
            Err(e) => {
                let rank = |e: &CliError| {
                    if matches!(e, CliError::Numerical(_)) {
                        0
                    } else {
                        1
                    }
                };
                if first_err.as_ref().is_none_or(|f| rank(&e) < rank(f)) {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if !failed_gates.is_empty() {
        return Err(CliError::Gates(format!(
            "gates failed: {}",
            failed_gates.join(", ")
        )));
    }
    Ok(())
}

/// `Ok(true)` when every gate passes.
fn run_one(spec: &ExperimentSpec, dir: &Path, quiet: bool) -> Result<bool, CliError> {
    let name = spec.name.clone();
    let log = |b: &sdefit::trainer::LossBreakdown| {
        if !quiet {
            let lb = b
                .loss_b
                .map(|v| format!(" loss_b {v:.3e}"))
                .unwrap_or_default();
            eprintln!(
                "[{name}] {:>7} loss_H {:.3e} loss_f {:.3e}{lb} total {:.3e} ({:.1}s)",
                b.iteration, b.loss_h, b.loss_f, b.total, b.seconds
            );
        }
    };
    match run_experiment_with(spec, Some(dir), log) {
        Ok(out) => {
            let report = &out.report;
            let summary: Vec<String> = report
                .metrics
                .iter()
                .map(|(k, v)| format!("{k}={v:.6e}"))
                .collect();
            println!("{}: {}", spec.name, summary.join(" "));
            for g in &report.gates {
                let bound = match (g.min, g.max) {
                    (Some(lo), Some(hi)) => format!("in [{lo}, {hi}]"),
                    (Some(lo), None) => format!(">= {lo}"),
                    (None, Some(hi)) => format!("<= {hi}"),
                    (None, None) => String::new(),
                };
                let value = g
                    .value
                    .map_or("missing".to_string(), |v| format!("{v:.6e}"));
                println!(
                    "  gate {} {bound}: {value} {}",
                    g.metric,
                    if g.pass { "PASS" } else { "FAIL" }
                );
            }
            Ok(report.all_gates_pass())
        }
        Err(e) => {
            if e.partial.is_some() {
                eprintln!("[{}] partial artifacts in {}", spec.name, dir.display());
            }
            let cli: CliError = e.source.into();
            Err(match cli {
                CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", spec.name)),
                CliError::Invalid(m) => CliError::Invalid(format!("{}: {m}", spec.name)),
                other => other,
            })
        }
    }
}

fn load_any_model(path: &Path) -> Result<SdeModel, CliError> {
    if path.is_dir() {
        return Ok(load_model(path)?.0);
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let desc: ModelDescription = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CliError::Invalid(format!("{}: `{}`: {}", path.display(), e.path(), e.inner()))
    })?;
    Ok(desc.build(&[])?)
}

fn cmd_simulate(
    config: &Path,
    dt: f64,
    steps: usize,
    seed: u64,
    x0: &[f64],
    burn_in: usize,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_any_model(config)?;
    let x0 = if x0.is_empty() {
        vec![0.0; model.dim]
    } else {
        x0.to_vec()
    };
    let traj = match euler_maruyama(
        &model,
        &x0,
        dt,
        steps,
        job_seed(seed, STREAM_SIMULATION),
        burn_in,
    ) {
        Ok(t) => t,
        Err(sdefit::Error::BlowUp { step, state }) => {
            return Err(CliError::Numerical(format!(
                "state {state:?} left the guard box at step {step}; last valid index {}",
                step.saturating_sub(1)
            )))
        }
        Err(e) => return Err(e.into()),
    };
    write_trajectory_csv(&traj, out)?;
    let (mean, var) = traj.moments();
    println!("rows {}", traj.len());
    for i in 0..model.dim {
        println!("axis {i}: mean {:.6} var {:.6}", mean[i], var[i]);
    }
    if model.dim == 1 {
        let left = traj.states.iter().filter(|x| **x < 0.0).count() as f64 / traj.len() as f64;
        println!("occupancy x<0 {left:.4} x>=0 {:.4}", 1.0 - left);
    }
    Ok(())
}

fn parse_axis(s: &str) -> Result<(f64, f64, usize), CliError> {
    let bad = || CliError::Invalid(format!("--grid: expected lo:hi:n, got `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].trim().parse().map_err(|_| bad())?,
        parts[1].trim().parse().map_err(|_| bad())?,
        parts[2].trim().parse().map_err(|_| bad())?,
    ))
}

fn cmd_kde(
    config: &Path,
    bandwidth: &str,
    grid: &[String],
    points: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let traj = read_trajectory_csv(config)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", config.display())))?;
    let dim = traj.dim;
    let bw = if bandwidth == "auto" {
        Bandwidth::Auto
    } else {
        let h: Result<Vec<f64>, _> = bandwidth
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect();
        Bandwidth::Fixed(h.map_err(|_| CliError::Invalid(format!("--bandwidth: `{bandwidth}`")))?)
    };
    let grid = if grid.is_empty() {
        KdeGrid::Padded {
            counts: vec![points.unwrap_or(if dim == 1 { 401 } else { 41 }); dim],
        }
    } else {
        let axes = grid
            .iter()
            .map(|s| parse_axis(s))
            .collect::<Result<Vec<_>, _>>()?;
        if axes.len() != dim {
            return Err(CliError::Invalid(format!(
                "--grid: {} axes for a {dim}D trajectory",
                axes.len()
            )));
        }
        KdeGrid::Box {
            domain: Domain::new(
                axes.iter().map(|a| a.0).collect(),
                axes.iter().map(|a| a.1).collect(),
            )?,
            counts: axes.iter().map(|a| a.2).collect(),
        }
    };
    let obs = kde(&traj.states, dim, &grid, &bw)?;
    write_observation_csv(&obs, out)?;
    println!("points {} integral {:.6}", obs.len(), obs.integral());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reference {
    #[serde(default)]
    truth: TruthSpec,
    #[serde(default)]
    evaluation: EvaluationSpec,
    /// Observation CSV for density distances.
    #[serde(default)]
    observation: Option<PathBuf>,
}

/// Training box recorded in a model's provenance, if any.
fn training_box(provenance: &serde_json::Value) -> Option<Domain> {
    let d = provenance.pointer("/config/task/train/domain")?;
    serde_json::from_value(d.clone()).ok()
}

fn cmd_evaluate(model_dir: &Path, config: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (model, density, manifest) = load_model(model_dir)?;
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", config.display())))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let reference: Reference = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        CliError::Invalid(format!(
            "{}: `{}`: {}",
            config.display(),
            e.path(),
            e.inner()
        ))
    })?;
    if let Some(s) = &reference.truth.sigma {
        if s.len() != model.dim {
            return Err(CliError::Invalid(format!(
                "dimension mismatch: model is {}D, reference sigma has {} entries",
                model.dim,
                s.len()
            )));
        }
    }
    if let (Some(RegionSpec::Box { lower, upper }), Some(train)) = (
        &reference.evaluation.drift_region,
        training_box(&manifest.provenance),
    ) {
        if lower.len() != model.dim || upper.len() != model.dim {
            return Err(CliError::Invalid(format!(
                "dimension mismatch: model is {}D, region has {} bounds",
                model.dim,
                lower.len()
            )));
        }
        let outside =
            (0..model.dim).any(|i| lower[i] < train.lower[i] || upper[i] > train.upper[i]);
        if outside {
            eprintln!(
                "warning: region {lower:?} x {upper:?} extends beyond the training box {:?} x {:?}",
                train.lower, train.upper
            );
        }
    }
    let obs = match &reference.observation {
        Some(p) => Some(read_observation_csv(p)?),
        None => None,
    };
    let report = score_against_truth(
        &model,
        density.as_ref(),
        obs.as_ref(),
        &reference.truth,
        &reference.evaluation,
    )?;
    let summary: Vec<String> = report
        .metrics
        .iter()
        .map(|(k, v)| format!("{k}={v:.6e}"))
        .collect();
    let region = report
        .drift
        .as_ref()
        .map(|d| format!(" [{}]", d.region))
        .unwrap_or_default();
    println!("{}{region}", summary.join(" "));
    if let Some(path) = out {
        let text =
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Invalid(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
