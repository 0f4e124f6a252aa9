//! End-to-end workflows: the three-step calibration against real trajectory
//! data and density evolution for uncertainty quantification.

use crate::adjoint_opt::{fit, FitStatus, LossRecord, TrainConfig};
use crate::dynamics::{simulate, Drift, SdeSpec, Trajectory};
use crate::error::{Error, Result};
use crate::fvm::{assemble_auto_dt, steady_state, DensityEvolution};
use crate::grid::Grid;
use crate::measure::{bin_trajectory, gaussian_smooth, DensityField};
use crate::objective::evaluate;
use crate::scalar::{real, Scalar};
use crate::velocity::{InitConfig, ModelSpec, VelocityModel};

/// Outcome of a scalar golden-section search.
#[derive(Debug, Clone)]
pub struct ScalarSearchOutcome<T> {
    pub x: T,
    pub fx: T,
    pub evals: usize,
    /// The minimizer landed within 2% of a bracket end.
    pub at_edge: bool,
}

/// Golden-section minimization of a unimodal-ish scalar function on
/// `[lo, hi]`.
pub fn golden_section_min<T: Scalar>(
    mut f: impl FnMut(T) -> Result<T>,
    lo: T,
    hi: T,
    xtol: T,
    max_iter: usize,
) -> Result<ScalarSearchOutcome<T>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(
            "golden section needs lo < hi".to_string(),
        ));
    }
    let phi = real::<T>(0.5) * (real::<T>(5.0).sqrt() - T::one());
    let mut a = lo;
    let mut b = hi;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    let mut evals = 2usize;
    for _ in 0..max_iter {
        if (b - a).abs() <= xtol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d)?;
        }
        evals += 1;
    }
    let (x, fx) = if fc < fd { (c, fc) } else { (d, fd) };
    let span = hi - lo;
    let edge_frac = real::<T>(0.02);
    let at_edge = (x - lo).abs() < edge_frac * span || (hi - x).abs() < edge_frac * span;
    Ok(ScalarSearchOutcome { x, fx, evals, at_edge })
}

/// Rough dominant period of a scalar series from mean up-crossings.
pub fn estimate_period<T: Scalar>(series: &[T], sample_dt: T) -> Option<T> {
    if series.len() < 4 {
        return None;
    }
    let n = real::<T>(series.len() as f64);
    let mean = series.iter().copied().sum::<T>() / n;
    let mut first: Option<usize> = None;
    let mut last: Option<usize> = None;
    let mut count = 0usize;
    for i in 1..series.len() {
        if series[i - 1] < mean && series[i] >= mean {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
            count += 1;
        }
    }
    match (first, last) {
        (Some(f), Some(l)) if count >= 2 && l > f => {
            Some(real::<T>((l - f) as f64) * sample_dt / real::<T>((count - 1) as f64))
        }
        _ => None,
    }
}

/// Configuration for [`calibrate`].
#[derive(Debug, Clone)]
pub struct CalibrateConfig<T> {
    pub model_spec: ModelSpec,
    pub train: TrainConfig<T>,
    /// Gaussian filter width (cells) applied to the coarse occupation
    /// measure in step one.
    pub smooth_sigma: T,
    /// Fraction of leading samples discarded before binning.
    pub burn_in: T,
    /// Diffusion search bracket half-width, in decades around the assumed D.
    pub step2_decades: T,
    /// Relative tolerance on the log-diffusion search.
    pub step2_tol: T,
    /// Trajectory-fit window in time units; defaults to one estimated period.
    pub step3_window: Option<T>,
    /// Integrator substeps per sample interval for the zero-diffusion orbit.
    pub step3_substeps: usize,
    /// Time-scale search bracket half-width, in decades around 1.
    pub step3_decades: T,
    pub seed: u64,
}

impl<T: Scalar> CalibrateConfig<T> {
    pub fn new(model_spec: ModelSpec, train: TrainConfig<T>) -> Self {
        Self {
            model_spec,
            train,
            smooth_sigma: T::one(),
            burn_in: real(0.1),
            step2_decades: real(2.0),
            step2_tol: real(1e-3),
            step3_window: None,
            step3_substeps: 20,
            step3_decades: real(2.0),
            seed: 0,
        }
    }
}

/// Diagnostics recorded by [`calibrate`]; step-1 values are objective values
/// on the coarse grid, step-2 values on the fine grid.
#[derive(Debug, Clone)]
pub struct CalibrationDiagnostics<T> {
    pub step1_initial: T,
    pub step1_final: T,
    pub step1_status: FitStatus,
    pub step2_initial: T,
    pub step2_final: T,
    pub step2_evals: usize,
    pub step2_at_edge: bool,
    pub step3_residual: T,
    pub step3_evals: usize,
    pub step3_at_edge: bool,
    pub period_estimate: Option<T>,
}

/// Calibration output: the fitted model with its refitted diffusion and time
/// scale. The physical drift is `a_tilde * v` and the physical diffusion is
/// `a_tilde * d_tilde`.
#[derive(Debug, Clone)]
pub struct CalibrationResult<T> {
    pub model: VelocityModel<T>,
    pub d_tilde: T,
    pub a_tilde: T,
    pub diagnostics: CalibrationDiagnostics<T>,
    /// Loss log of the step-1 fit.
    pub step1_log: Vec<LossRecord<T>>,
}

impl<T: Scalar> CalibrationResult<T> {
    pub fn final_diffusion(&self) -> T {
        self.a_tilde * self.d_tilde
    }

    pub fn final_drift(&self) -> Drift<T> {
        Drift::Learned {
            model: self.model.clone(),
            scale: self.a_tilde,
        }
    }
}

/// Least-squares time-scale fit (calibration step three): choose `a` so that
/// the zero-diffusion orbit of `a v` started at the data's first point tracks
/// the data samples.
pub fn fit_time_scale<T: Scalar>(
    model: &VelocityModel<T>,
    data: &Trajectory<T>,
    sample_dt: T,
    window: T,
    substeps: usize,
    decades: T,
) -> Result<ScalarSearchOutcome<T>> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument(
            "time-scale fit needs at least two samples".to_string(),
        ));
    }
    if substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be >= 1".to_string()));
    }
    let n_window = (window / sample_dt)
        .floor()
        .to_usize()
        .unwrap_or(usize::MAX)
        .clamp(2, data.len());
    let d = data.dim();
    let x0 = data.row(0).to_vec();
    let dt_sim = sample_dt / real::<T>(substeps as f64);
    let residual = |ln_a: T| -> Result<T> {
        let a = ln_a.exp();
        let spec = SdeSpec {
            drift: Drift::Learned {
                model: model.clone(),
                scale: a,
            },
            sigma: T::zero(),
        };
        let orbit = simulate(&spec, &x0, dt_sim, (n_window - 1) * substeps, substeps, 0)?;
        let mut acc = T::zero();
        for i in 0..n_window {
            let o = orbit.row(i);
            let t = data.row(i);
            for k in 0..d {
                let diff = o[k] - t[k];
                acc += diff * diff;
            }
        }
        Ok(acc)
    };
    let half = decades * real::<T>(std::f64::consts::LN_10);
    let out = golden_section_min(residual, -half, half, real(1e-4), 200)?;
    Ok(ScalarSearchOutcome {
        x: out.x.exp(),
        fx: out.fx,
        evals: out.evals,
        at_edge: out.at_edge,
    })
}

/// Three-step calibration: fit the velocity on a coarse grid under an
/// assumed diffusion, refit the diffusion scalar on a finer grid, then pin
/// the time scale with a short zero-diffusion trajectory fit.
pub fn calibrate<T: Scalar>(
    data: &Trajectory<T>,
    sample_dt: T,
    coarse: &Grid<T>,
    fine: &Grid<T>,
    assumed_d: T,
    cfg: &CalibrateConfig<T>,
) -> Result<CalibrationResult<T>> {
    if !(assumed_d > T::zero()) {
        return Err(Error::InvalidArgument(
            "assumed diffusion must be > 0".to_string(),
        ));
    }
    if !(sample_dt > T::zero()) {
        return Err(Error::InvalidArgument("sample_dt must be > 0".to_string()));
    }
    let trimmed = data.discard_prefix_fraction(cfg.burn_in);

    // Step 1: coarse-grid fit with the assumed diffusion.
    let coarse_meas = bin_trajectory(&trimmed, coarse)?;
    log::info!(
        "calibrate step 1: {} samples on the coarse grid ({} discarded)",
        coarse_meas.n_used,
        coarse_meas.n_discarded
    );
    let rho_star = gaussian_smooth(&coarse_meas.density, cfg.smooth_sigma)?;
    let mut train = cfg.train.clone();
    train.diffusion = assumed_d;
    let model0 = VelocityModel::init(
        &cfg.model_spec,
        coarse.clone(),
        &InitConfig {
            diffusion_hint: assumed_d,
            pc_scale: None,
        },
        cfg.seed,
    )?;
    let fit_out = fit(&rho_star, &model0, &train, None)?;
    let model = fit_out.model;

    // Step 2: scalar diffusion refit on the fine grid (no smoothing:
    // this step corrects the filtering and coarse-mesh numerical diffusion).
    let fine_meas = bin_trajectory(&trimmed, fine)?;
    let rho_hat = fine_meas.density;
    let faces_fine = model.eval_faces(fine)?;
    let objective_of = |ln_d: T| -> Result<T> {
        let d_try = ln_d.exp();
        let op = assemble_auto_dt(&faces_fine, d_try, train.cfl_safety)?;
        let rho = steady_state(&op, train.teleport_eps)?;
        Ok(evaluate(train.objective, &rho, &rho_hat, &train.objective_opts)?.value)
    };
    let ln_d0 = assumed_d.ln();
    let half = cfg.step2_decades * real::<T>(std::f64::consts::LN_10);
    let step2_initial = objective_of(ln_d0)?;
    let search = golden_section_min(
        &mut { objective_of },
        ln_d0 - half,
        ln_d0 + half,
        cfg.step2_tol,
        200,
    )?;
    // The assumed value stays admissible: never return something worse.
    let (d_tilde, step2_final) = if search.fx <= step2_initial {
        (search.x.exp(), search.fx)
    } else {
        (assumed_d, step2_initial)
    };
    if search.at_edge {
        log::warn!("calibrate step 2: diffusion search ended near a bracket edge");
    }

    // Step 3: time scale from the zero-diffusion orbit over roughly one
    // period.
    let period = cfg
        .step3_window
        .or_else(|| estimate_period(&trimmed.column(0), sample_dt));
    let window = period.unwrap_or_else(|| {
        real::<T>(trimmed.len() as f64) * sample_dt / real::<T>(4.0)
    });
    let step3 = fit_time_scale(
        &model,
        &trimmed,
        sample_dt,
        window,
        cfg.step3_substeps,
        cfg.step3_decades,
    )?;
    if step3.at_edge {
        log::warn!("calibrate step 3: time-scale search ended near a bracket edge");
    }

    Ok(CalibrationResult {
        model,
        d_tilde,
        a_tilde: step3.x,
        step1_log: fit_out.log,
        diagnostics: CalibrationDiagnostics {
            step1_initial: fit_out.initial_value,
            step1_final: fit_out.final_value,
            step1_status: fit_out.status,
            step2_initial,
            step2_final,
            step2_evals: search.evals + 1,
            step2_at_edge: search.at_edge,
            step3_residual: step3.fx,
            step3_evals: step3.evals,
            step3_at_edge: step3.at_edge,
            period_estimate: period,
        },
    })
}

/// Initial condition for the UQ evolution.
#[derive(Debug, Clone)]
pub enum InitialCondition<T> {
    Density(DensityField<T>),
    /// Uniform mass over every interior cell intersecting the box
    /// `center +- half_widths` (partially covered cells included fully).
    Box {
        center: Vec<T>,
        half_widths: Vec<T>,
    },
}

/// Per-time quantiles of the first coordinate under the evolving density.
#[derive(Debug, Clone)]
pub struct QuantileBands<T> {
    pub times: Vec<T>,
    pub levels: Vec<T>,
    /// `rows[t][l]` is the `levels[l]` quantile at `times[t]`.
    pub rows: Vec<Vec<T>>,
    pub mean: Vec<T>,
}

/// UQ evolution output.
#[derive(Debug, Clone)]
pub struct UqOutcome<T> {
    pub bands: QuantileBands<T>,
    pub frames: Vec<(T, DensityField<T>)>,
    pub dt: T,
}

/// Default band levels: 5%, 25%, 50%, 75%, 95%.
pub fn default_band_levels<T: Scalar>() -> Vec<T> {
    vec![real(0.05), real(0.25), real(0.5), real(0.75), real(0.95)]
}

/// Quantiles of one axis marginal by within-cell linear interpolation of the
/// cumulative mass; the mean comes with them.
pub fn marginal_quantiles<T: Scalar>(
    rho: &DensityField<T>,
    axis: usize,
    levels: &[T],
) -> Result<(Vec<T>, T)> {
    let marg = rho.marginal(axis)?;
    let grid = rho.grid();
    let dx = grid.spacing()[axis];
    let half = real::<T>(0.5);
    let mut mean = T::zero();
    for (k, &m) in marg.iter().enumerate() {
        mean += grid.center_component(axis, k) * m;
    }
    let mut out = Vec::with_capacity(levels.len());
    for &q in levels {
        if !(q > T::zero() && q < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "quantile levels must lie in (0, 1), got {q}"
            )));
        }
        let mut cum = T::zero();
        let mut x = grid.center_component(axis, marg.len() - 1) + half * dx;
        for (k, &m) in marg.iter().enumerate() {
            if cum + m >= q && m > T::zero() {
                let lo = grid.center_component(axis, k) - half * dx;
                x = lo + (q - cum) / m * dx;
                break;
            }
            cum += m;
        }
        out.push(x);
    }
    Ok((out, mean))
}

/// Evolve a density under the learned Fokker-Planck dynamics and extract
/// quantile bands of the first coordinate.
pub fn evolve_uq<T: Scalar>(
    model: &VelocityModel<T>,
    d_coeff: T,
    initial: &InitialCondition<T>,
    steps: usize,
    frame_stride: usize,
    levels: &[T],
) -> Result<UqOutcome<T>> {
    if frame_stride == 0 {
        return Err(Error::InvalidArgument("frame_stride must be >= 1".to_string()));
    }
    let grid = model.grid().clone();
    let rho0 = match initial {
        InitialCondition::Density(d) => {
            if !d.grid().same_geometry(&grid) {
                return Err(Error::ShapeMismatch(
                    "initial density must live on the model grid".to_string(),
                ));
            }
            d.clone()
        }
        InitialCondition::Box { center, half_widths } => {
            if center.len() != grid.dim() || half_widths.len() != grid.dim() {
                return Err(Error::ShapeMismatch(
                    "box spec dimension mismatch".to_string(),
                ));
            }
            let half = real::<T>(0.5);
            let mut mass = vec![T::zero(); grid.n_cells()];
            let mut hits = 0usize;
            for j in 0..grid.n_cells() {
                if grid.is_boundary_cell(j) {
                    continue;
                }
                let c = grid.cell_center(j)?;
                let inside = (0..grid.dim()).all(|ax| {
                    (c[ax] - center[ax]).abs() <= half_widths[ax] + half * grid.spacing()[ax]
                });
                if inside {
                    mass[j] = T::one();
                    hits += 1;
                }
            }
            if hits == 0 {
                return Err(Error::EmptyMeasure);
            }
            DensityField::from_unnormalized(grid.clone(), mass)?
        }
    };
    let faces = model.eval_faces(&grid)?;
    let op = assemble_auto_dt(&faces, d_coeff, real(0.9))?;
    let dt = op.dt();
    let mut bands = QuantileBands {
        times: Vec::new(),
        levels: levels.to_vec(),
        rows: Vec::new(),
        mean: Vec::new(),
    };
    let mut frames = Vec::new();
    for (l, frame) in DensityEvolution::new(&rho0, &op, steps)?.enumerate() {
        let frame = frame?;
        if l % frame_stride == 0 || l == steps {
            let t = real::<T>(l as f64) * dt;
            let (qs, mean) = marginal_quantiles(&frame, 0, levels)?;
            bands.times.push(t);
            bands.rows.push(qs);
            bands.mean.push(mean);
            frames.push((t, frame));
        }
    }
    Ok(UqOutcome { bands, frames, dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::ModelSpec;

    #[test]
    fn golden_section_finds_a_quadratic_minimum() {
        let out = golden_section_min(|x: f64| Ok((x - 1.3).powi(2)), -4.0, 4.0, 1e-8, 200).unwrap();
        assert!((out.x - 1.3).abs() < 1e-6);
        assert!(!out.at_edge);
        let edge = golden_section_min(|x: f64| Ok(x), 0.0, 1.0, 1e-8, 200).unwrap();
        assert!(edge.at_edge);
    }

    #[test]
    fn period_estimate_recovers_a_sine_period() {
        let dt = 0.01;
        let series: Vec<f64> = (0..2000)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 * dt / 1.7).sin())
            .collect();
        let p = estimate_period(&series, dt).unwrap();
        assert!((p - 1.7).abs() < 0.02, "estimated period {p}");
        assert!(estimate_period(&[1.0, 2.0, 3.0], dt).is_none());
    }

    #[test]
    fn quantiles_interpolate_within_cells_and_stay_monotone() {
        let g = Grid::new(vec![(0.0, 3.0)], vec![4]).unwrap();
        // Masses 0.25 each: the cdf is linear within each unit cell.
        let rho = DensityField::new(g, vec![0.25; 4]).unwrap();
        let levels = default_band_levels::<f64>();
        let (qs, mean) = marginal_quantiles(&rho, 0, &levels).unwrap();
        assert!((mean - 1.5).abs() < 1e-12);
        // Total support is [-0.5, 3.5]: the q-quantile is -0.5 + 4 q.
        for (q, x) in levels.iter().zip(&qs) {
            assert!((x - (-0.5 + 4.0 * q)).abs() < 1e-12);
        }
        for w in qs.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn horizon_zero_bands_collapse_to_the_initial_box_quantiles() {
        let g = Grid::new(vec![(-2.0, 2.0), (-2.0, 2.0)], vec![21, 21]).unwrap();
        let model = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g).unwrap();
        let init = InitialCondition::Box {
            center: vec![0.3, -0.2],
            half_widths: vec![0.35, 0.35],
        };
        let out = evolve_uq(&model, 0.05, &init, 0, 1, &default_band_levels()).unwrap();
        assert_eq!(out.bands.times.len(), 1);
        let rho0 = match &out.frames[0] {
            (_, f) => f.clone(),
        };
        let (qs, _) = marginal_quantiles(&rho0, 0, &default_band_levels()).unwrap();
        assert_eq!(out.bands.rows[0], qs);
    }

    #[test]
    fn time_scale_doubles_when_the_data_clock_is_compressed() {
        // Same sample states reported at half the sampling interval describe
        // a system running twice as fast: a_tilde must double.
        let g = Grid::new(vec![(-2.0, 2.0), (-2.0, 2.0)], vec![17, 17]).unwrap();
        let spec = ModelSpec::Polynomial { degree: 3 };
        let model = VelocityModel::init(&spec, g, &InitConfig::default(), 0).unwrap();
        // Data: the model's own orbit at unit scale, sampled every 0.05.
        let sde = SdeSpec {
            drift: Drift::Learned {
                model: model.clone(),
                scale: 1.0,
            },
            sigma: 0.0,
        };
        let sub = 20;
        let h = 0.05;
        let data = simulate(&sde, &[0.4, 0.0], h / sub as f64, 100 * sub, sub, 0).unwrap();
        let window = 100.0 * h;
        let a1 = fit_time_scale(&model, &data, h, window, sub, 1.0).unwrap();
        let a2 = fit_time_scale(&model, &data, h / 2.0, window / 2.0, sub, 1.0).unwrap();
        assert!((a1.x - 1.0).abs() < 0.01, "unit-scale fit got {}", a1.x);
        assert!((a2.x / a1.x - 2.0).abs() < 0.05, "ratio {}", a2.x / a1.x);
    }
}
