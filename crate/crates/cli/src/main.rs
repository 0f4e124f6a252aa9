//! Command-line frontend: simulate benchmark or learned dynamics, build
//! occupation measures, fit velocity models, and run the calibration and
//! uncertainty-quantification pipelines.
//!
//! Every subcommand takes `--outdir`; artifacts have fixed names inside it
//! and the fully resolved configuration is echoed to `config.json` there, so
//! a run is reproducible from its output directory alone. A `--config` JSON
//! file may supply defaults for any flag (same field names, snake_case);
//! explicit flags win.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fplearn::adjoint_opt::{
    fit, FitStatus, GradcheckConfig, OptimizerKind, TrainConfig,
};
use fplearn::dynamics::{
    delay_embed, simulate, BuiltinSystem, DelaySpec, Drift, SdeSpec, Trajectory,
};
use fplearn::error::Error;
use fplearn::fvm::{assemble_auto_dt, steady_state, FaceVelocity};
use fplearn::grid::Grid;
use fplearn::measure::{bin_trajectory, gaussian_smooth};
use fplearn::objective::{ObjectiveKind, ObjectiveOptions};
use fplearn::pipeline::{
    calibrate, default_band_levels, evolve_uq, CalibrateConfig, InitialCondition,
};
use fplearn::velocity::{Activation, InitConfig, ModelSpec, VelocityModel};
use fplearn::{io, Result};

#[derive(Parser)]
#[command(name = "fplearn", version, about = "Learn velocity fields from occupation measures")]
struct Cli {
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with default values for this subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress the timestamp header line in CSV outputs.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate an SDE/ODE trajectory (Euler-Maruyama).
    Simulate(SimulateArgs),
    /// Time-delay embed a scalar series into d dimensions.
    Embed(EmbedArgs),
    /// Bin a trajectory into an occupation measure.
    Bin(BinArgs),
    /// Fit a velocity model to an occupation measure.
    Fit(FitArgs),
    /// Simulate a trajectory under a fitted model.
    Rollout(RolloutArgs),
    /// Check the adjoint gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Three-step calibration against trajectory data.
    Calibrate(CalibrateArgs),
    /// Evolve a density under a fitted model and emit quantile bands.
    Evolve(EvolveArgs),
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("bad number '{p}': {e}")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(|c| c == ',' || c == 'x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad count '{p}': {e}")))
        })
        .collect()
}

/// Bounds syntax: per-axis `lo,hi` pairs separated by `;`.
fn parse_bounds(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(';')
        .map(|pair| {
            let v = parse_f64_list(pair)?;
            if v.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "bounds pair '{pair}' must be 'lo,hi'"
                )));
            }
            Ok((v[0], v[1]))
        })
        .collect()
}

fn stamp(no_timestamp: bool) -> Option<String> {
    if no_timestamp {
        None
    } else {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Some(format!("unix {secs}"))
    }
}

fn ensure_outdir(outdir: &Path) -> Result<()> {
    fs::create_dir_all(outdir)?;
    Ok(())
}

fn echo_config<C: Serialize>(outdir: &Path, command: &str, cfg: &C) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, C> {
        format_version: u32,
        command: &'a str,
        #[serde(flatten)]
        config: &'a C,
    }
    let text = serde_json::to_string_pretty(&Echo {
        format_version: io::FORMAT_VERSION,
        command,
        config: cfg,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(outdir.join("config.json"), text)?;
    Ok(())
}

fn load_file_defaults<A: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<A> {
    match path {
        None => Ok(A::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Format(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

fn require<T>(cli: Option<T>, file: Option<T>, what: &str) -> Result<T> {
    cli.or(file)
        .ok_or_else(|| Error::InvalidArgument(format!("missing required value: {what}")))
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct SimulateArgs {
    /// Built-in system: vdp | lorenz63 | arctan_lorenz.
    #[arg(long)]
    system: Option<String>,
    /// Parameters of the built-in system (e.g. "0.5" for vdp).
    #[arg(long, allow_hyphen_values = true)]
    params: Option<String>,
    /// Fitted model JSON to use as the drift instead of a built-in system.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Time-scale factor applied to a model drift.
    #[arg(long)]
    scale: Option<f64>,
    /// Diffusion coefficient D (sigma = sqrt(2 D)).
    #[arg(long)]
    d_coeff: Option<f64>,
    /// Initial state, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Record every k-th step.
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct SimulateResolved {
    system: Option<String>,
    params: Vec<f64>,
    model: Option<PathBuf>,
    scale: f64,
    d_coeff: f64,
    x0: Vec<f64>,
    dt: f64,
    steps: usize,
    record_every: usize,
    seed: u64,
    outdir: PathBuf,
}

fn build_drift(
    system: &Option<String>,
    params: &[f64],
    model: &Option<PathBuf>,
    scale: f64,
) -> Result<Drift<f64>> {
    match (system, model) {
        (Some(tag), None) => Ok(Drift::Builtin {
            system: BuiltinSystem::parse(tag)?,
            params: params.to_vec(),
        }),
        (None, Some(path)) => Ok(Drift::Learned {
            model: io::load_model(path)?,
            scale,
        }),
        _ => Err(Error::InvalidArgument(
            "need exactly one of --system or --model".to_string(),
        )),
    }
}

fn run_simulate(a: SimulateArgs, seed: u64, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: SimulateArgs = load_file_defaults(config)?;
    let r = SimulateResolved {
        system: a.system.or(f.system),
        params: parse_f64_list(&pick(a.params, f.params, String::new()).to_string())
            .unwrap_or_default(),
        model: a.model.or(f.model),
        scale: pick(a.scale, f.scale, 1.0),
        d_coeff: pick(a.d_coeff, f.d_coeff, 0.0),
        x0: parse_f64_list(&require(a.x0, f.x0, "--x0")?)?,
        dt: require(a.dt, f.dt, "--dt")?,
        steps: require(a.steps, f.steps, "--steps")?,
        record_every: pick(a.record_every, f.record_every, 1),
        seed,
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let drift = build_drift(&r.system, &r.params, &r.model, r.scale)?;
    let spec = SdeSpec::with_diffusion(drift, r.d_coeff)?;
    let traj = simulate(&spec, &r.x0, r.dt, r.steps, r.record_every, r.seed)?;
    if traj.excursions() > 0 {
        log::warn!(
            "drift queried outside the model grid on {} steps",
            traj.excursions()
        );
    }
    io::write_trajectory_csv(&r.outdir.join("trajectory.csv"), &traj, true, ts)?;
    echo_config(&r.outdir, "simulate", &r)?;
    println!(
        "simulate: wrote {} samples to {}",
        traj.len(),
        r.outdir.join("trajectory.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// embed

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct EmbedArgs {
    /// Input CSV with the scalar series.
    #[arg(long)]
    input: Option<PathBuf>,
    /// The input has a leading time column.
    #[arg(long)]
    time_column: bool,
    /// Which state column holds the series (after the time column).
    #[arg(long)]
    column: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Delay in sample steps.
    #[arg(long)]
    lag_steps: Option<usize>,
    /// Delay in time units (requires --sample-dt; must be a multiple of it).
    #[arg(long)]
    tau: Option<f64>,
    /// Sampling interval of the series.
    #[arg(long)]
    sample_dt: Option<f64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct EmbedResolved {
    input: PathBuf,
    time_column: bool,
    column: usize,
    dim: usize,
    lag_steps: usize,
    outdir: PathBuf,
}

fn run_embed(a: EmbedArgs, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: EmbedArgs = load_file_defaults(config)?;
    let tau = a.tau.or(f.tau);
    let sample_dt = a.sample_dt.or(f.sample_dt);
    let lag_steps = match (a.lag_steps.or(f.lag_steps), tau) {
        (Some(m), _) => m,
        (None, Some(tau)) => {
            let h = sample_dt.ok_or_else(|| {
                Error::InvalidArgument("--tau needs --sample-dt".to_string())
            })?;
            let m = (tau / h).round();
            if m < 1.0 || ((tau / h) - m).abs() > 1e-9 * m.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "tau = {tau} is not a positive integer multiple of sample_dt = {h}"
                )));
            }
            m as usize
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "need --lag-steps or --tau with --sample-dt".to_string(),
            ))
        }
    };
    let r = EmbedResolved {
        input: require(a.input, f.input, "--input")?,
        time_column: a.time_column || f.time_column,
        column: pick(a.column, f.column, 0),
        dim: require(a.dim, f.dim, "--dim")?,
        lag_steps,
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let traj: Trajectory<f64> = io::read_trajectory_csv(&r.input, r.time_column)?;
    if r.column >= traj.dim() {
        return Err(Error::InvalidArgument(format!(
            "--column {} but the file has {} state columns",
            r.column,
            traj.dim()
        )));
    }
    let series = traj.column(r.column);
    let emb = delay_embed(
        &series,
        &DelaySpec {
            dim: r.dim,
            lag_steps: r.lag_steps,
        },
    )?;
    io::write_trajectory_csv(&r.outdir.join("embedded.csv"), &emb, false, ts)?;
    echo_config(&r.outdir, "embed", &r)?;
    println!(
        "embed: {} delay vectors written to {}",
        emb.len(),
        r.outdir.join("embedded.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bin

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct BinArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// The input has a leading time column.
    #[arg(long)]
    time_column: bool,
    /// Per-axis bounds "lo,hi;lo,hi".
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Per-axis cell counts "n0,n1".
    #[arg(long)]
    counts: Option<String>,
    /// Fraction of leading samples to discard.
    #[arg(long)]
    burn_in: Option<f64>,
    /// Gaussian smoothing width in cells (0 = off).
    #[arg(long)]
    smooth_sigma: Option<f64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct BinResolved {
    input: PathBuf,
    time_column: bool,
    bounds: Vec<(f64, f64)>,
    counts: Vec<usize>,
    burn_in: f64,
    smooth_sigma: f64,
    outdir: PathBuf,
}

fn run_bin(a: BinArgs, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: BinArgs = load_file_defaults(config)?;
    let r = BinResolved {
        input: require(a.input, f.input, "--input")?,
        time_column: a.time_column || f.time_column,
        bounds: parse_bounds(&require(a.bounds, f.bounds, "--bounds")?)?,
        counts: parse_usize_list(&require(a.counts, f.counts, "--counts")?)?,
        burn_in: pick(a.burn_in, f.burn_in, 0.1),
        smooth_sigma: pick(a.smooth_sigma, f.smooth_sigma, 0.0),
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let grid = Grid::new(r.bounds.clone(), r.counts.clone())?;
    let traj: Trajectory<f64> = io::read_trajectory_csv(&r.input, r.time_column)?;
    let trimmed = traj.discard_prefix_fraction(r.burn_in);
    let out = bin_trajectory(&trimmed, &grid)?;
    let density = gaussian_smooth(&out.density, r.smooth_sigma)?;
    io::save_density(&r.outdir.join("density.json"), &density)?;
    io::write_density_csv(&r.outdir.join("density.csv"), &density, ts)?;
    echo_config(&r.outdir, "bin", &r)?;
    println!(
        "bin: {} samples used, {} discarded out-of-domain; density written to {}",
        out.n_used,
        out.n_discarded,
        r.outdir.join("density.json").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct FitArgs {
    /// Reference occupation measure (density JSON).
    #[arg(long)]
    density: Option<PathBuf>,
    /// Model variant: pc | poly | nn.
    #[arg(long)]
    variant: Option<String>,
    /// Polynomial degree (poly).
    #[arg(long)]
    degree: Option<usize>,
    /// Hidden width (nn).
    #[arg(long)]
    hidden: Option<usize>,
    /// Activation: tanh | sigmoid (nn).
    #[arg(long)]
    activation: Option<String>,
    /// Coarser parameter-mesh counts for the pc variant ("n0,n1").
    #[arg(long)]
    param_counts: Option<String>,
    /// Objective: l2 | kl | js | w2.
    #[arg(long)]
    objective: Option<String>,
    /// Optimizer: adam | gd.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Stop when the objective falls to this fraction of its initial value.
    #[arg(long)]
    stop_ratio: Option<f64>,
    #[arg(long)]
    d_coeff: Option<f64>,
    /// Teleportation weight.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    cfl_safety: Option<f64>,
    /// Support-mask floor for KL/JS.
    #[arg(long)]
    mask_floor: Option<f64>,
    /// Pooling factor for the W2 objective.
    #[arg(long)]
    w2_coarsen: Option<usize>,
    /// W2 entropic regularization relative to the squared domain diameter.
    #[arg(long)]
    w2_reg_rel: Option<f64>,
    /// Write model checkpoints every k iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct FitResolved {
    density: PathBuf,
    variant: String,
    degree: usize,
    hidden: usize,
    activation: String,
    param_counts: Option<Vec<usize>>,
    objective: String,
    optimizer: String,
    lr: f64,
    max_iters: usize,
    stop_ratio: f64,
    d_coeff: f64,
    epsilon: f64,
    cfl_safety: f64,
    mask_floor: f64,
    w2_coarsen: usize,
    w2_reg_rel: f64,
    checkpoint_every: Option<usize>,
    seed: u64,
    outdir: PathBuf,
}

fn model_spec_of(variant: &str, degree: usize, hidden: usize, activation: &str) -> Result<ModelSpec> {
    match variant {
        "pc" | "piecewise_constant" => Ok(ModelSpec::PiecewiseConstant),
        "poly" | "polynomial" => Ok(ModelSpec::Polynomial { degree }),
        "nn" | "neural_net" => Ok(ModelSpec::NeuralNet {
            hidden,
            activation: Activation::parse(activation)?,
        }),
        other => Err(Error::UnknownTag(format!("variant {other}"))),
    }
}

fn train_config_of(r: &FitResolved) -> Result<TrainConfig<f64>> {
    let mut cfg = TrainConfig::new(ObjectiveKind::parse(&r.objective)?, r.d_coeff);
    cfg.optimizer = match r.optimizer.as_str() {
        "adam" => OptimizerKind::adam(r.lr),
        "gd" | "gradient_descent" => OptimizerKind::gradient_descent(r.lr),
        other => return Err(Error::UnknownTag(format!("optimizer {other}"))),
    };
    cfg.max_iters = r.max_iters;
    cfg.stop_ratio = r.stop_ratio;
    cfg.teleport_eps = r.epsilon;
    cfg.cfl_safety = r.cfl_safety;
    cfg.objective_opts = ObjectiveOptions {
        mask_floor: r.mask_floor,
        w2_coarsen: r.w2_coarsen,
        w2_reg_rel: r.w2_reg_rel,
    };
    Ok(cfg)
}

fn resolve_fit(a: FitArgs, f: FitArgs, seed: u64) -> Result<FitResolved> {
    let d_coeff = require(a.d_coeff, f.d_coeff, "--d-coeff")?;
    Ok(FitResolved {
        density: require(a.density, f.density, "--density")?,
        variant: pick(a.variant, f.variant, "nn".to_string()),
        degree: pick(a.degree, f.degree, 5),
        hidden: pick(a.hidden, f.hidden, 100),
        activation: pick(a.activation, f.activation, "tanh".to_string()),
        param_counts: match a.param_counts.or(f.param_counts) {
            Some(s) => Some(parse_usize_list(&s)?),
            None => None,
        },
        objective: pick(a.objective, f.objective, "kl".to_string()),
        optimizer: pick(a.optimizer, f.optimizer, "adam".to_string()),
        lr: pick(a.lr, f.lr, 0.1),
        max_iters: pick(a.max_iters, f.max_iters, 2000),
        stop_ratio: pick(a.stop_ratio, f.stop_ratio, 0.005),
        d_coeff,
        epsilon: pick(a.epsilon, f.epsilon, if d_coeff > 0.0 { 1e-6 } else { 1e-4 }),
        cfl_safety: pick(a.cfl_safety, f.cfl_safety, 0.9),
        mask_floor: pick(a.mask_floor, f.mask_floor, 1e-12),
        w2_coarsen: pick(a.w2_coarsen, f.w2_coarsen, 2),
        w2_reg_rel: pick(a.w2_reg_rel, f.w2_reg_rel, 1e-3),
        checkpoint_every: a.checkpoint_every.or(f.checkpoint_every),
        seed,
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    })
}

fn run_fit(a: FitArgs, seed: u64, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: FitArgs = load_file_defaults(config)?;
    let r = resolve_fit(a, f, seed)?;
    ensure_outdir(&r.outdir)?;
    let rho_star = io::load_density::<f64>(&r.density)?;
    let grid = rho_star.grid().clone();
    let spec = model_spec_of(&r.variant, r.degree, r.hidden, &r.activation)?;
    let model_grid = match (&spec, &r.param_counts) {
        (ModelSpec::PiecewiseConstant, Some(counts)) => {
            Grid::new(grid.bounds().to_vec(), counts.clone())?
        }
        _ => grid.clone(),
    };
    let model0 = VelocityModel::init(
        &spec,
        model_grid,
        &InitConfig {
            diffusion_hint: r.d_coeff,
            pc_scale: None,
        },
        r.seed,
    )?;
    let cfg = train_config_of(&r)?;
    let outdir = r.outdir.clone();
    let checkpoint = r.checkpoint_every;
    let mut on_iter = |iter: usize, model: &VelocityModel<f64>, rec: &fplearn::adjoint_opt::LossRecord<f64>| {
        if iter % 50 == 0 {
            log::info!("iter {iter}: {} = {:.6e}", rec.kind.name(), rec.value);
        }
        if let Some(every) = checkpoint {
            if every > 0 && iter > 0 && iter % every == 0 {
                let path = outdir.join(format!("model_{iter:06}.json"));
                if let Err(e) = io::save_model(&path, model) {
                    log::warn!("checkpoint write failed: {e}");
                }
            }
        }
    };
    let out = fit(&rho_star, &model0, &cfg, Some(&mut on_iter))?;
    io::save_model(&r.outdir.join("model.json"), &out.model)?;
    io::write_loss_csv(&r.outdir.join("loss.csv"), &out.log, ts)?;
    echo_config(&r.outdir, "fit", &r)?;
    let ratio = out.final_value / out.initial_value;
    println!(
        "fit: {:?} after {} iterations; objective {:.6e} -> {:.6e} ({:.3}% of initial)",
        out.status,
        out.log.last().map(|l| l.iter).unwrap_or(0),
        out.initial_value,
        out.final_value,
        100.0 * ratio
    );
    if matches!(out.status, FitStatus::Aborted(_)) {
        return Err(Error::Numerical {
            what: "fit aborted; last good model was saved".to_string(),
            residual: ratio,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rollout

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct RolloutArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Time-scale factor applied to the model drift.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    d_coeff: Option<f64>,
    /// Initial state; defaults to the center of the model's grid.
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    record_every: Option<usize>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct RolloutResolved {
    model: PathBuf,
    scale: f64,
    d_coeff: f64,
    x0: Vec<f64>,
    dt: f64,
    steps: usize,
    record_every: usize,
    seed: u64,
    outdir: PathBuf,
}

fn run_rollout(a: RolloutArgs, seed: u64, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: RolloutArgs = load_file_defaults(config)?;
    let model_path = require(a.model, f.model, "--model")?;
    let model = io::load_model::<f64>(&model_path)?;
    let default_x0: Vec<f64> = model
        .grid()
        .bounds()
        .iter()
        .map(|&(lo, hi)| 0.5 * (lo + hi))
        .collect();
    let x0 = match a.x0.or(f.x0) {
        Some(s) => parse_f64_list(&s)?,
        None => default_x0,
    };
    let r = RolloutResolved {
        model: model_path,
        scale: pick(a.scale, f.scale, 1.0),
        d_coeff: pick(a.d_coeff, f.d_coeff, 0.0),
        x0,
        dt: require(a.dt, f.dt, "--dt")?,
        steps: require(a.steps, f.steps, "--steps")?,
        record_every: pick(a.record_every, f.record_every, 1),
        seed,
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let spec = SdeSpec::with_diffusion(
        Drift::Learned {
            model,
            scale: r.scale,
        },
        r.d_coeff,
    )?;
    let traj = simulate(&spec, &r.x0, r.dt, r.steps, r.record_every, r.seed)?;
    if traj.excursions() > 0 {
        log::warn!(
            "rollout left the model grid on {} steps (drift is zero outside)",
            traj.excursions()
        );
    }
    io::write_trajectory_csv(&r.outdir.join("trajectory.csv"), &traj, true, ts)?;
    echo_config(&r.outdir, "rollout", &r)?;
    println!(
        "rollout: wrote {} samples ({} excursions) to {}",
        traj.len(),
        traj.excursions(),
        r.outdir.join("trajectory.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct GradcheckArgs {
    /// Grid counts, e.g. "8x8".
    #[arg(long)]
    grid: Option<String>,
    /// Bounds; default [-1, 1] on every axis.
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Model variant: pc | poly | nn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    /// Objective: l2 | kl | js | w2.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    d_coeff: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Pass/fail threshold on the max relative error; defaults to 1e-4
    /// (1e-2 for w2).
    #[arg(long)]
    threshold: Option<f64>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

fn run_gradcheck(a: GradcheckArgs, seed: u64, config: Option<&Path>) -> Result<()> {
    let f: GradcheckArgs = load_file_defaults(config)?;
    let counts = parse_usize_list(&pick(a.grid, f.grid, "8x8".to_string()))?;
    let bounds = match a.bounds.or(f.bounds) {
        Some(s) => parse_bounds(&s)?,
        None => vec![(-1.0, 1.0); counts.len()],
    };
    let variant = pick(a.variant, f.variant, "nn".to_string());
    let objective = ObjectiveKind::parse(&pick(a.objective, f.objective, "kl".to_string()))?;
    let d_coeff = pick(a.d_coeff, f.d_coeff, 0.05);
    let epsilon = pick(a.epsilon, f.epsilon, 1e-4);
    let default_threshold = if objective == ObjectiveKind::W2 { 1e-2 } else { 1e-4 };
    let threshold = pick(a.threshold, f.threshold, default_threshold);

    let grid = Grid::new(bounds, counts)?;
    // Reference measure: the stationary density of a random seeded field.
    let target_fv = FaceVelocity::random(grid.clone(), 0.6, seed.wrapping_add(1));
    let op = assemble_auto_dt(&target_fv, d_coeff, 0.9)?;
    let rho_star = steady_state(&op, epsilon.max(1e-6))?;

    let spec = model_spec_of(
        &variant,
        pick(a.degree, f.degree, 3),
        pick(a.hidden, f.hidden, 5),
        &pick(a.activation, f.activation, "tanh".to_string()),
    )?;
    let mut model = VelocityModel::init(
        &spec,
        grid,
        &InitConfig {
            diffusion_hint: d_coeff,
            pc_scale: None,
        },
        seed,
    )?;
    // Move off special symmetric points so no face velocity sits at zero.
    for (i, v) in model.theta_mut().iter_mut().enumerate() {
        *v += 0.03 * ((i as f64 * 0.7).sin() + 0.1);
    }
    let mut cfg = GradcheckConfig::new(objective, d_coeff);
    cfg.teleport_eps = epsilon;
    let report = fplearn::adjoint_opt::gradcheck(&rho_star, &model, &cfg)?;
    println!(
        "gradcheck: objective={} variant={variant} params={} max_rel_err={:.3e} threshold={:.1e}",
        objective.name(),
        report.n_checked,
        report.max_rel_err,
        threshold
    );
    if report.max_rel_err <= threshold {
        Ok(())
    } else {
        Err(Error::Numerical {
            what: format!(
                "gradient check failed: max relative error {:.3e} at parameter {}",
                report.max_rel_err, report.worst_param
            ),
            residual: report.max_rel_err,
        })
    }
}

// ---------------------------------------------------------------------------
// calibrate

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct CalibrateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    time_column: bool,
    /// Sampling interval of the input trajectory.
    #[arg(long)]
    sample_dt: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Coarse (step-1) grid counts.
    #[arg(long)]
    coarse_counts: Option<String>,
    /// Fine (step-2) grid counts.
    #[arg(long)]
    fine_counts: Option<String>,
    /// Assumed diffusion coefficient for step 1.
    #[arg(long)]
    assumed_d: Option<f64>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    stop_ratio: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    smooth_sigma: Option<f64>,
    #[arg(long)]
    burn_in: Option<f64>,
    /// Step-3 fitting window in time units (default: one estimated period).
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct CalibrateResolved {
    input: PathBuf,
    time_column: bool,
    sample_dt: f64,
    bounds: Vec<(f64, f64)>,
    coarse_counts: Vec<usize>,
    fine_counts: Vec<usize>,
    assumed_d: f64,
    variant: String,
    degree: usize,
    hidden: usize,
    activation: String,
    objective: String,
    lr: f64,
    max_iters: usize,
    stop_ratio: f64,
    epsilon: f64,
    smooth_sigma: f64,
    burn_in: f64,
    window: Option<f64>,
    seed: u64,
    outdir: PathBuf,
}

fn run_calibrate(a: CalibrateArgs, seed: u64, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: CalibrateArgs = load_file_defaults(config)?;
    let assumed_d = require(a.assumed_d, f.assumed_d, "--assumed-d")?;
    let r = CalibrateResolved {
        input: require(a.input, f.input, "--input")?,
        time_column: a.time_column || f.time_column,
        sample_dt: require(a.sample_dt, f.sample_dt, "--sample-dt")?,
        bounds: parse_bounds(&require(a.bounds, f.bounds, "--bounds")?)?,
        coarse_counts: parse_usize_list(&require(a.coarse_counts, f.coarse_counts, "--coarse-counts")?)?,
        fine_counts: parse_usize_list(&require(a.fine_counts, f.fine_counts, "--fine-counts")?)?,
        assumed_d,
        variant: pick(a.variant, f.variant, "nn".to_string()),
        degree: pick(a.degree, f.degree, 5),
        hidden: pick(a.hidden, f.hidden, 100),
        activation: pick(a.activation, f.activation, "tanh".to_string()),
        objective: pick(a.objective, f.objective, "kl".to_string()),
        lr: pick(a.lr, f.lr, 0.1),
        max_iters: pick(a.max_iters, f.max_iters, 2000),
        stop_ratio: pick(a.stop_ratio, f.stop_ratio, 0.005),
        epsilon: pick(a.epsilon, f.epsilon, 1e-6),
        smooth_sigma: pick(a.smooth_sigma, f.smooth_sigma, 1.0),
        burn_in: pick(a.burn_in, f.burn_in, 0.1),
        window: a.window.or(f.window),
        seed,
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let traj: Trajectory<f64> = io::read_trajectory_csv(&r.input, r.time_column)?;
    let coarse = Grid::new(r.bounds.clone(), r.coarse_counts.clone())?;
    let fine = Grid::new(r.bounds.clone(), r.fine_counts.clone())?;
    let spec = model_spec_of(&r.variant, r.degree, r.hidden, &r.activation)?;
    let mut train = TrainConfig::new(ObjectiveKind::parse(&r.objective)?, r.assumed_d);
    train.optimizer = OptimizerKind::adam(r.lr);
    train.max_iters = r.max_iters;
    train.stop_ratio = r.stop_ratio;
    train.teleport_eps = r.epsilon;
    let mut cfg = CalibrateConfig::new(spec, train);
    cfg.smooth_sigma = r.smooth_sigma;
    cfg.burn_in = r.burn_in;
    cfg.step3_window = r.window;
    cfg.seed = r.seed;
    let out = calibrate(&traj, r.sample_dt, &coarse, &fine, r.assumed_d, &cfg)?;
    io::save_model(&r.outdir.join("model.json"), &out.model)?;
    io::write_loss_csv(&r.outdir.join("loss.csv"), &out.step1_log, ts)?;

    #[derive(Serialize)]
    struct CalibrationJson {
        format_version: u32,
        d_tilde: f64,
        a_tilde: f64,
        final_diffusion: f64,
        step1_initial: f64,
        step1_final: f64,
        step2_initial: f64,
        step2_final: f64,
        step2_evals: usize,
        step2_at_edge: bool,
        step3_residual: f64,
        step3_evals: usize,
        step3_at_edge: bool,
        period_estimate: Option<f64>,
    }
    let diag = &out.diagnostics;
    let summary = CalibrationJson {
        format_version: io::FORMAT_VERSION,
        d_tilde: out.d_tilde,
        a_tilde: out.a_tilde,
        final_diffusion: out.final_diffusion(),
        step1_initial: diag.step1_initial,
        step1_final: diag.step1_final,
        step2_initial: diag.step2_initial,
        step2_final: diag.step2_final,
        step2_evals: diag.step2_evals,
        step2_at_edge: diag.step2_at_edge,
        step3_residual: diag.step3_residual,
        step3_evals: diag.step3_evals,
        step3_at_edge: diag.step3_at_edge,
        period_estimate: diag.period_estimate,
    };
    fs::write(
        r.outdir.join("calibration.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    echo_config(&r.outdir, "calibrate", &r)?;
    println!(
        "calibrate: a_tilde = {:.6}, d_tilde = {:.6e}, final diffusion = {:.6e}",
        out.a_tilde,
        out.d_tilde,
        out.final_diffusion()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evolve

#[derive(Args, Deserialize, Default)]
#[serde(default)]
struct EvolveArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    d_coeff: Option<f64>,
    /// Initial density JSON (alternative to the box spec).
    #[arg(long)]
    density: Option<PathBuf>,
    /// Box center, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    box_center: Option<String>,
    /// Box half-widths, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    box_half: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Emit a frame (and band row) every k steps.
    #[arg(long)]
    frame_stride: Option<usize>,
    /// Quantile levels, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    levels: Option<String>,
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[serde(skip)]
    #[arg(skip)]
    _guard: (),
}

#[derive(Serialize)]
struct EvolveResolved {
    model: PathBuf,
    d_coeff: f64,
    density: Option<PathBuf>,
    box_center: Option<Vec<f64>>,
    box_half: Option<Vec<f64>>,
    steps: usize,
    frame_stride: usize,
    levels: Vec<f64>,
    outdir: PathBuf,
}

fn run_evolve(a: EvolveArgs, config: Option<&Path>, ts: Option<&str>) -> Result<()> {
    let f: EvolveArgs = load_file_defaults(config)?;
    let r = EvolveResolved {
        model: require(a.model, f.model, "--model")?,
        d_coeff: require(a.d_coeff, f.d_coeff, "--d-coeff")?,
        density: a.density.or(f.density),
        box_center: match a.box_center.or(f.box_center) {
            Some(s) => Some(parse_f64_list(&s)?),
            None => None,
        },
        box_half: match a.box_half.or(f.box_half) {
            Some(s) => Some(parse_f64_list(&s)?),
            None => None,
        },
        steps: require(a.steps, f.steps, "--steps")?,
        frame_stride: pick(a.frame_stride, f.frame_stride, 1),
        levels: match a.levels.or(f.levels) {
            Some(s) => parse_f64_list(&s)?,
            None => default_band_levels(),
        },
        outdir: require(a.outdir, f.outdir, "--outdir")?,
    };
    ensure_outdir(&r.outdir)?;
    let model = io::load_model::<f64>(&r.model)?;
    let initial = match (&r.density, &r.box_center, &r.box_half) {
        (Some(path), None, None) => InitialCondition::Density(io::load_density(path)?),
        (None, Some(c), Some(h)) => InitialCondition::Box {
            center: c.clone(),
            half_widths: h.clone(),
        },
        _ => {
            return Err(Error::InvalidArgument(
                "need either --density or both --box-center and --box-half".to_string(),
            ))
        }
    };
    let out = evolve_uq(&model, r.d_coeff, &initial, r.steps, r.frame_stride, &r.levels)?;
    io::write_bands_csv(&r.outdir.join("bands.csv"), &out.bands, ts)?;
    io::write_frames_csv(&r.outdir.join("frames.csv"), &out.frames, ts)?;
    echo_config(&r.outdir, "evolve", &r)?;
    println!(
        "evolve: {} frames over t = [0, {:.4}] written to {}",
        out.frames.len(),
        out.bands.times.last().copied().unwrap_or(0.0),
        r.outdir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

/// Exit code policy: flag/file problems are usage errors (2), numerical
/// failures are runtime errors (1).
fn exit_code_of(e: &Error) -> u8 {
    match e {
        Error::Format(_)
        | Error::Io(_)
        | Error::InvalidArgument(_)
        | Error::UnknownTag(_)
        | Error::IndexOutOfRange(_)
        | Error::SeriesTooShort { .. }
        | Error::InvalidGrid(_)
        | Error::ShapeMismatch(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    let ts = stamp(cli.no_timestamp);
    let ts = ts.as_deref();
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a, seed, config, ts),
        Command::Embed(a) => run_embed(a, config, ts),
        Command::Bin(a) => run_bin(a, config, ts),
        Command::Fit(a) => run_fit(a, seed, config, ts),
        Command::Rollout(a) => run_rollout(a, seed, config, ts),
        Command::Gradcheck(a) => run_gradcheck(a, seed, config),
        Command::Calibrate(a) => run_calibrate(a, seed, config, ts),
        Command::Evolve(a) => run_evolve(a, config, ts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}
