//! Finite-difference-through-resolve oracle for the adjoint gradient.
//!
//! For each probed parameter the objective is re-evaluated from scratch
//! (faces, operator, stationary solve, misfit) at `theta +- h e_k`, holding
//! the time step fixed at its base-point value — the analytic gradient is
//! exact for fixed `dt`, and `dt` is only refreshed between optimizer
//! iterations.

use crate::error::Result;
use crate::fvm::{assemble, steady_state, StationarySolver};
use crate::measure::DensityField;
use crate::objective::{evaluate, ObjectiveKind, ObjectiveOptions};
use crate::scalar::{real, Scalar};
use crate::velocity::VelocityModel;

use super::param_gradient;

/// Gradient-check configuration.
#[derive(Debug, Clone)]
pub struct GradcheckConfig<T> {
    pub objective: ObjectiveKind,
    pub diffusion: T,
    pub teleport_eps: T,
    pub cfl_safety: T,
    pub objective_opts: ObjectiveOptions<T>,
    /// Central-difference step.
    pub step: T,
    /// Check at most this many parameters (evenly spaced) when set.
    pub max_params: Option<usize>,
}

impl<T: Scalar> GradcheckConfig<T> {
    pub fn new(objective: ObjectiveKind, diffusion: T) -> Self {
        Self {
            objective,
            diffusion,
            teleport_eps: real(1e-4),
            cfl_safety: real(0.9),
            objective_opts: ObjectiveOptions::default(),
            step: real(1e-5),
            max_params: None,
        }
    }
}

/// Gradient-check outcome. The error is measured relative to the sup norm of
/// the analytic gradient.
#[derive(Debug, Clone)]
pub struct GradcheckReport<T> {
    pub max_rel_err: T,
    pub worst_param: usize,
    pub n_checked: usize,
    pub grad_norm_inf: T,
}

/// Compare the adjoint parameter gradient against central finite differences
/// of the full re-solved objective.
pub fn gradcheck<T: Scalar>(
    rho_star: &DensityField<T>,
    model: &VelocityModel<T>,
    cfg: &GradcheckConfig<T>,
) -> Result<GradcheckReport<T>> {
    let grid = rho_star.grid();
    let faces0 = model.eval_faces(grid)?;
    let dt = grid.cfl_dt(cfg.diffusion, faces0.max_abs(), cfg.cfl_safety)?;

    // Analytic gradient at the base point.
    let op = assemble(&faces0, cfg.diffusion, dt)?;
    let solver = StationarySolver::new(&op, cfg.teleport_eps)?;
    let rho = solver.steady_state()?;
    let base = evaluate(cfg.objective, &rho, rho_star, &cfg.objective_opts)?;
    let lambda = solver.solve_adjoint(&rho, &base.grad)?;
    let analytic = param_gradient(model, &lambda, &rho, &faces0, cfg.teleport_eps, dt, grid.dx())?;
    let grad_norm_inf = analytic.iter().fold(T::zero(), |a, &g| T::max(a, g.abs()));

    let objective_at = |theta: Vec<T>| -> Result<T> {
        let m = model.with_theta(theta)?;
        let faces = m.eval_faces(grid)?;
        let op = assemble(&faces, cfg.diffusion, dt)?;
        let rho = steady_state(&op, cfg.teleport_eps)?;
        Ok(evaluate(cfg.objective, &rho, rho_star, &cfg.objective_opts)?.value)
    };

    let n = model.param_len();
    let indices: Vec<usize> = match cfg.max_params {
        Some(cap) if cap < n => {
            let stride = n.div_ceil(cap);
            (0..n).step_by(stride).collect()
        }
        _ => (0..n).collect(),
    };
    let h = cfg.step;
    let denom = T::max(grad_norm_inf, real(1e-12));
    let mut max_rel_err = T::zero();
    let mut worst_param = 0usize;
    for &p in &indices {
        let mut tp = model.theta().to_vec();
        tp[p] += h;
        let fp = objective_at(tp.clone())?;
        tp[p] -= real::<T>(2.0) * h;
        let fm = objective_at(tp)?;
        let fd = (fp - fm) / (real::<T>(2.0) * h);
        let rel = (fd - analytic[p]).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_param = p;
        }
    }
    Ok(GradcheckReport {
        max_rel_err,
        worst_param,
        n_checked: indices.len(),
        grad_norm_inf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvm::{assemble_auto_dt, FaceVelocity};
    use crate::grid::Grid;
    use crate::velocity::{Activation, InitConfig, ModelSpec};

    fn random_target(g: &Grid<f64>, d_coeff: f64, seed: u64) -> DensityField<f64> {
        let fv = FaceVelocity::random(g.clone(), 0.5, seed);
        let op = assemble_auto_dt(&fv, d_coeff, 0.9).unwrap();
        steady_state(&op, 1e-4).unwrap()
    }

    #[test]
    fn six_by_six_face_gradient_matches_finite_differences() {
        // Piecewise-constant on its own mesh: every parameter is one face
        // velocity, so this is the per-face derivative check.
        let g = Grid::new(vec![(-1.0, 1.0), (-1.0, 1.0)], vec![6, 6]).unwrap();
        let d_coeff = 0.06;
        let rho_star = random_target(&g, d_coeff, 13);
        let mut model = VelocityModel::init(
            &ModelSpec::PiecewiseConstant,
            g.clone(),
            &InitConfig {
                diffusion_hint: d_coeff,
                pc_scale: None,
            },
            0,
        )
        .unwrap();
        for (i, v) in model.theta_mut().iter_mut().enumerate() {
            *v += ((i % 5) as f64 - 2.0) * 0.03;
        }
        let cfg = GradcheckConfig::new(ObjectiveKind::L2, d_coeff);
        let report = gradcheck(&rho_star, &model, &cfg).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "confirmed max relative error {} at parameter {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn neural_net_kl_gradient_matches_finite_differences() {
        let g = Grid::new(vec![(-1.0, 1.0), (-1.0, 1.0)], vec![8, 8]).unwrap();
        let d_coeff = 0.05;
        let rho_star = random_target(&g, d_coeff, 29);
        let model = VelocityModel::init(
            &ModelSpec::NeuralNet {
                hidden: 5,
                activation: Activation::Tanh,
            },
            g.clone(),
            &InitConfig::default(),
            4,
        )
        .unwrap();
        let mut cfg = GradcheckConfig::new(ObjectiveKind::Kl, d_coeff);
        cfg.teleport_eps = 1e-4;
        let report = gradcheck(&rho_star, &model, &cfg).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "confirmed max relative error {}",
            report.max_rel_err
        );
    }
}
