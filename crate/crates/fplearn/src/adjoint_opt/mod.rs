//! Adjoint-state gradients through the stationary constraint and the
//! gradient-based training loop.
//!
//! One extra linear solve with the transposed stationary system yields the
//! objective gradient with respect to every face velocity at once; the
//! per-face sensitivities then pull back into parameter space through each
//! model's evaluation Jacobian. The cost per training iteration is therefore
//! independent of the parameter count.

pub mod gradcheck;
pub mod optimizer;

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fvm::{assemble_auto_dt, FaceVelocity, MarkovOperator, StationarySolver};
use crate::measure::DensityField;
use crate::objective::{evaluate, ObjectiveKind, ObjectiveOptions};
use crate::scalar::{real, Scalar};
use crate::velocity::VelocityModel;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use optimizer::{Optimizer, OptimizerKind};

/// Solve the adjoint equation for a stationary density and objective
/// derivative; returns the full-grid adjoint state (zero on the boundary
/// layer). The additive-constant gauge of the adjoint is irrelevant: the
/// face gradient only reads differences.
pub fn solve_adjoint<T: Scalar>(
    op: &MarkovOperator<T>,
    eps: T,
    rho: &DensityField<T>,
    djdrho: &[T],
) -> Result<Vec<T>> {
    StationarySolver::new(op, eps)?.solve_adjoint(rho, djdrho)
}

/// Per-face objective sensitivities from the adjoint state.
///
/// For the face between cells `j - S_i` and `j` the derivative is
/// `(1 - eps) (dt/dx) (lambda_j - lambda_{j-S_i}) (H(v) rho_{j-S_i} +
/// (1 - H(v)) rho_j)` with the upwind convention `H(0) = 0`. Faces touching
/// the excluded boundary layer carry zero sensitivity.
pub fn face_gradient<T: Scalar>(
    lambda: &[T],
    rho: &DensityField<T>,
    fv: &FaceVelocity<T>,
    eps: T,
    dt: T,
    dx: T,
) -> Result<FaceVelocity<T>> {
    let grid = fv.grid();
    if lambda.len() != grid.n_cells() || rho.mass().len() != grid.n_cells() {
        return Err(Error::ShapeMismatch(
            "adjoint/density vectors must live on the face-velocity grid".to_string(),
        ));
    }
    let d = grid.dim();
    let factor = (T::one() - eps) * dt / dx;
    let mass = rho.mass();
    let mut sens = FaceVelocity::zeros(grid.clone());
    for axis in 0..d {
        let stride = grid.strides()[axis];
        let out = sens.component_mut(axis);
        for jp in 0..grid.n_cells() {
            if grid.is_boundary_cell(jp) {
                continue;
            }
            let k = (jp / stride) % grid.counts()[axis];
            if k < 2 {
                continue;
            }
            let jm = jp - stride;
            if grid.is_boundary_cell(jm) {
                continue;
            }
            let v = fv.component(axis)[jp];
            let upwind_mass = if v > T::zero() { mass[jm] } else { mass[jp] };
            out[jp] = factor * (lambda[jp] - lambda[jm]) * upwind_mass;
        }
    }
    Ok(sens)
}

/// Full parameter gradient: adjoint face sensitivities pulled back through
/// the model Jacobian.
pub fn param_gradient<T: Scalar>(
    model: &VelocityModel<T>,
    lambda: &[T],
    rho: &DensityField<T>,
    fv: &FaceVelocity<T>,
    eps: T,
    dt: T,
    dx: T,
) -> Result<Vec<T>> {
    let sens = face_gradient(lambda, rho, fv, eps, dt, dx)?;
    model.pullback(&sens)
}

/// Training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig<T> {
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerKind<T>,
    pub max_iters: usize,
    /// Stop once the objective drops to this fraction of its initial value.
    pub stop_ratio: T,
    pub teleport_eps: T,
    pub diffusion: T,
    pub cfl_safety: T,
    pub objective_opts: ObjectiveOptions<T>,
}

impl<T: Scalar> TrainConfig<T> {
    /// Defaults: Adam with the stock moment constants, stop at 0.5% of the
    /// initial objective, teleportation 1e-6 for diffusive problems and 1e-4
    /// for pure transport.
    pub fn new(objective: ObjectiveKind, diffusion: T) -> Self {
        let teleport_eps = if diffusion > T::zero() {
            real(1e-6)
        } else {
            real(1e-4)
        };
        Self {
            objective,
            optimizer: OptimizerKind::adam(real(0.1)),
            max_iters: 2000,
            stop_ratio: real(0.005),
            teleport_eps,
            diffusion,
            cfl_safety: real(0.9),
            objective_opts: ObjectiveOptions::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.stop_ratio > T::zero() && self.stop_ratio <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "stop_ratio must lie in (0, 1], got {}",
                self.stop_ratio
            )));
        }
        self.optimizer.validate()
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct LossRecord<T> {
    pub iter: usize,
    pub kind: ObjectiveKind,
    pub value: T,
    pub grad_norm: T,
    pub wall_time_s: f64,
}

/// How a fit ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FitStatus {
    ReachedStopRatio,
    MaxIters,
    /// Objective went non-finite or a solve failed; the returned model is the
    /// last one that evaluated cleanly.
    Aborted(String),
}

/// Fit result: final model plus the full loss log.
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub model: VelocityModel<T>,
    pub log: Vec<LossRecord<T>>,
    pub status: FitStatus,
    pub initial_value: T,
    pub final_value: T,
}

/// Gradient-descent training of a velocity model against a reference
/// occupation measure.
///
/// Each iteration re-evaluates the faces, reassembles the operator with a
/// CFL-fresh time step, solves the stationary and adjoint systems, and takes
/// one optimizer step. `on_iter` (when given) observes every accepted
/// iterate, e.g. for checkpointing.
pub fn fit<T: Scalar>(
    rho_star: &DensityField<T>,
    model0: &VelocityModel<T>,
    cfg: &TrainConfig<T>,
    mut on_iter: Option<&mut dyn FnMut(usize, &VelocityModel<T>, &LossRecord<T>)>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    let grid = rho_star.grid();
    let mut model = model0.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone(), model.param_len());
    let mut log: Vec<LossRecord<T>> = Vec::with_capacity(cfg.max_iters + 1);
    let start = Instant::now();
    let mut initial_value = T::nan();
    let mut status = FitStatus::MaxIters;

    for iter in 0..=cfg.max_iters {
        let step_result = (|| -> Result<(T, Vec<T>)> {
            let faces = model.eval_faces(grid)?;
            let op = assemble_auto_dt(&faces, cfg.diffusion, cfg.cfl_safety)?;
            let solver = StationarySolver::new(&op, cfg.teleport_eps)?;
            let rho = solver.steady_state()?;
            let res = evaluate(cfg.objective, &rho, rho_star, &cfg.objective_opts)?;
            if !res.value.is_finite() {
                return Err(Error::NonFinite(format!("objective at iteration {iter}")));
            }
            let lambda = solver.solve_adjoint(&rho, &res.grad)?;
            let grad = param_gradient(&model, &lambda, &rho, &faces, cfg.teleport_eps, op.dt(), op.dx())?;
            Ok((res.value, grad))
        })();

        let (value, grad) = match step_result {
            Ok(v) => v,
            Err(e) if iter == 0 => return Err(e),
            Err(e) => {
                log::warn!("fit aborted at iteration {iter}: {e}");
                status = FitStatus::Aborted(e.to_string());
                break;
            }
        };
        let grad_norm = grad.iter().fold(T::zero(), |a, &g| a + g * g).sqrt();
        let record = LossRecord {
            iter,
            kind: cfg.objective,
            value,
            grad_norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_iter.as_deref_mut() {
            cb(iter, &model, &record);
        }
        log.push(record);
        if iter == 0 {
            initial_value = value;
        }
        if value <= cfg.stop_ratio * initial_value {
            status = FitStatus::ReachedStopRatio;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }
        let mut theta = model.theta().to_vec();
        opt.step(&mut theta, &grad);
        model = model.with_theta(theta)?;
    }

    let final_value = log.last().map(|r| r.value).unwrap_or(initial_value);
    Ok(FitOutcome {
        model,
        log,
        status,
        initial_value,
        final_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fvm::{assemble_auto_dt, steady_state};
    use crate::grid::Grid;
    use crate::objective;
    use crate::velocity::ModelSpec;

    fn grid2(n: usize) -> Grid<f64> {
        Grid::new(vec![(-1.0, 1.0), (-1.0, 1.0)], vec![n, n]).unwrap()
    }

    #[test]
    fn constant_objective_derivative_gives_zero_gradient() {
        // dJ/drho = c 1 projects to a zero right-hand side, so lambda = 0 is
        // admissible and every face sensitivity vanishes.
        let g = grid2(8);
        let fv = FaceVelocity::random(g.clone(), 0.7, 3);
        let op = assemble_auto_dt(&fv, 0.05, 0.9).unwrap();
        let eps = 1e-6;
        let rho = steady_state(&op, eps).unwrap();
        let djdrho = vec![2.5; g.n_cells()];
        let lambda = solve_adjoint(&op, eps, &rho, &djdrho).unwrap();
        let linf = lambda.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(linf < 1e-9, "lambda sup {linf}");
        let sens = face_gradient(&lambda, &rho, &fv, eps, op.dt(), op.dx()).unwrap();
        for axis in 0..2 {
            assert!(sens.component(axis).iter().all(|&s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn l2_gradient_vanishes_at_the_optimum() {
        let g = grid2(8);
        let fv = FaceVelocity::random(g.clone(), 0.5, 5);
        let op = assemble_auto_dt(&fv, 0.05, 0.9).unwrap();
        let eps = 1e-6;
        let rho = steady_state(&op, eps).unwrap();
        let res = objective::l2(&rho, &rho).unwrap();
        let lambda = solve_adjoint(&op, eps, &rho, &res.grad).unwrap();
        assert!(lambda.iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn sparse_adjoint_matches_dense_pseudoinverse_on_a_chain() {
        // 9-cell chain: interior block is 7 cells. The adjoint from the
        // banded path must match the dense least-squares solution up to an
        // additive constant, and yield the same face gradient.
        use nalgebra::{DMatrix, DVector};
        let g = Grid::new(vec![(0.0, 1.0)], vec![9]).unwrap();
        let fv = FaceVelocity::random(g.clone(), 0.6, 7);
        let op = assemble_auto_dt(&fv, 0.04, 0.9).unwrap();
        let eps = 1e-4;
        let rho = steady_state(&op, eps).unwrap();
        // Random objective derivative.
        let djdrho: Vec<f64> = (0..9).map(|i| ((i * 13 % 7) as f64) * 0.3 - 1.0).collect();
        let lambda = solve_adjoint(&op, eps, &rho, &djdrho).unwrap();

        let im = op.interior();
        let n = im.n_interior();
        let dense = op.matrix().to_dense();
        let mut mt = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                // (M_eps^T - I)_{ij} = (1 - eps) M_ji + eps/n - delta_ij
                mt[(i, j)] = (1.0 - eps) * dense[j][i] + eps / n as f64
                    - if i == j { 1.0 } else { 0.0 };
            }
        }
        let gdr: f64 = djdrho
            .iter()
            .zip(rho.mass())
            .map(|(&a, &b)| a * b)
            .sum();
        let c = DVector::<f64>::from_iterator(
            n,
            (0..n).map(|ji| -djdrho[im.to_full(ji)] + gdr),
        );
        let pinv = mt.pseudo_inverse(1e-12).unwrap();
        let lam_dense = pinv * c;

        let lam_sparse = im.restrict(&lambda);
        let mean_s: f64 = lam_sparse.iter().sum::<f64>() / n as f64;
        let mean_d: f64 = lam_dense.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            let a = lam_sparse[i] - mean_s;
            let b = lam_dense[i] - mean_d;
            assert!((a - b).abs() < 1e-8, "adjoint mismatch at {i}: {a} vs {b}");
        }
        // Gradients agree regardless of the gauge.
        let lam_dense_full = im.embed(&lam_dense.iter().copied().collect::<Vec<_>>());
        let s1 = face_gradient(&lambda, &rho, &fv, eps, op.dt(), op.dx()).unwrap();
        let s2 = face_gradient(&lam_dense_full, &rho, &fv, eps, op.dt(), op.dx()).unwrap();
        for j in 0..9 {
            assert!((s1.component(0)[j] - s2.component(0)[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn face_gradient_conventions() {
        let g = Grid::new(vec![(0.0, 1.0)], vec![6]).unwrap();
        let mut fv = FaceVelocity::zeros(g.clone());
        // Faces at owner cells 2..=4 are used by the reduced scheme; give the
        // one at cell 3 a zero velocity and the others nonzero.
        fv.component_mut(0)[2] = 0.4;
        fv.component_mut(0)[3] = 0.0;
        fv.component_mut(0)[4] = -0.3;
        let rho_mass = vec![0.0, 0.1, 0.3, 0.25, 0.35, 0.0];
        let rho = DensityField::new(g.clone(), rho_mass.clone()).unwrap();
        let lambda: Vec<f64> = vec![0.0, 1.0, -0.5, 2.0, 0.7, 0.0];
        let eps = 1e-3;
        let (dt, dx) = (0.01, g.dx());

        // Constant adjoint: all sensitivities vanish.
        let flat = face_gradient(&vec![3.3; 6], &rho, &fv, eps, dt, dx).unwrap();
        assert!(flat.component(0).iter().all(|&s| s == 0.0));

        let sens = face_gradient(&lambda, &rho, &fv, eps, dt, dx).unwrap();
        let factor = (1.0 - eps) * dt / dx;
        // v > 0 at owner 2: upwind mass is the lower cell (index 1).
        let expected2 = factor * (lambda[2] - lambda[1]) * rho_mass[1];
        assert!((sens.component(0)[2] - expected2).abs() < 1e-15);
        // v = 0 at owner 3: H(0) = 0, upwind weight is rho_j (index 3).
        let expected3 = factor * (lambda[3] - lambda[2]) * rho_mass[3];
        assert!((sens.component(0)[3] - expected3).abs() < 1e-15);
        // v < 0 at owner 4: upwind mass is rho_j (index 4).
        let expected4 = factor * (lambda[4] - lambda[3]) * rho_mass[4];
        assert!((sens.component(0)[4] - expected4).abs() < 1e-15);
        // Boundary-adjacent faces carry none.
        assert_eq!(sens.component(0)[0], 0.0);
        assert_eq!(sens.component(0)[1], 0.0);
        assert_eq!(sens.component(0)[5], 0.0);
    }

    #[test]
    fn gradient_is_invariant_to_adjoint_shifts() {
        let g = grid2(7);
        let fv = FaceVelocity::random(g.clone(), 0.8, 11);
        let op = assemble_auto_dt(&fv, 0.06, 0.9).unwrap();
        let eps = 1e-5;
        let rho = steady_state(&op, eps).unwrap();
        let model = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g.clone()).unwrap();
        let djdrho: Vec<f64> = (0..g.n_cells()).map(|i| (i as f64 * 0.17).sin()).collect();
        let lambda = solve_adjoint(&op, eps, &rho, &djdrho).unwrap();
        let g1 = param_gradient(&model, &lambda, &rho, &fv, eps, op.dt(), op.dx()).unwrap();
        let shifted: Vec<f64> = lambda.iter().map(|&l| l + 7.13).collect();
        let g2 = param_gradient(&model, &shifted, &rho, &fv, eps, op.dt(), op.dx()).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_iteration_fit_returns_the_initial_model() {
        let g = grid2(8);
        let target_fv = FaceVelocity::random(g.clone(), 0.4, 2);
        let op = assemble_auto_dt(&target_fv, 0.05, 0.9).unwrap();
        let rho_star = steady_state(&op, 1e-6).unwrap();
        let model0 = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g.clone()).unwrap();
        let mut cfg = TrainConfig::new(ObjectiveKind::L2, 0.05);
        cfg.max_iters = 0;
        let out = fit(&rho_star, &model0, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.model.theta(), model0.theta());
        assert_eq!(out.status, FitStatus::MaxIters);
    }

    #[test]
    fn one_dimensional_piecewise_constant_recovery() {
        // Known PC truth on a 1-d mesh: the stationary flux balance makes the
        // face velocities identifiable wherever mass lives, so an L2 fit must
        // drive both the objective and the parameter error down.
        let g = Grid::new(vec![(-1.0, 1.0)], vec![32]).unwrap();
        let truth = {
            let mut m = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g.clone()).unwrap();
            let n = g.n_cells();
            for j in 0..n {
                let x = g.cell_center(j).unwrap()[0];
                m.theta_mut()[j] = 0.08 * (std::f64::consts::PI * x + 0.3).sin();
            }
            m
        };
        let d_coeff = 0.05;
        let faces = truth.eval_faces(&g).unwrap();
        let op = assemble_auto_dt(&faces, d_coeff, 0.9).unwrap();
        let rho_star = steady_state(&op, 1e-6).unwrap();

        let model0 = VelocityModel::init(
            &ModelSpec::PiecewiseConstant,
            g.clone(),
            &crate::velocity::InitConfig {
                diffusion_hint: d_coeff,
                pc_scale: None,
            },
            0,
        )
        .unwrap();
        let mut cfg = TrainConfig::new(ObjectiveKind::L2, d_coeff);
        cfg.optimizer = OptimizerKind::adam(0.02);
        cfg.max_iters = 1500;
        cfg.stop_ratio = 1e-4;
        let out = fit(&rho_star, &model0, &cfg, None).unwrap();
        assert!(
            out.final_value <= 1e-2 * out.initial_value,
            "objective only reached {} of initial",
            out.final_value / out.initial_value
        );

        // 20-iteration moving average of the loss is non-increasing.
        let values: Vec<f64> = out.log.iter().map(|r| r.value).collect();
        let window = 20;
        let mov: Vec<f64> = values
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        for w in mov.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "moving average increased: {w:?}");
        }
    }
}
