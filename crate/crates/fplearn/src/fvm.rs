//! Upwind finite-volume discretization of the stationary Fokker-Planck
//! equation and the associated Markov operators.
//!
//! The explicit update reads `rho <- (I + K) rho` with `K = sum_i (dt/dx)
//! K_i`; each `K_i` couples cells at index offsets `+-S_i`. Advective fluxes
//! are upwinded (the donor cell contributes according to the sign of the face
//! velocity) and diffusion is a central difference, so every face contributes
//! equal-magnitude, opposite-sign entries to its two adjacent columns and the
//! columns of `K` sum to zero by construction. Under the CFL bound all
//! entries of `M = I + K` are nonnegative: `M` is column-stochastic.
//!
//! Zero mass on the domain boundary is enforced by reduction: the outermost
//! cell layer is excluded from the unknowns (mass pinned at zero) and the
//! scheme runs on the interior block with zero-flux at its edge, which keeps
//! the interior operator column-stochastic. Teleportation enters only through
//! the rank-one-corrected right-hand side of the stationary linear system;
//! the uniform-restart matrix is never materialized.

use crate::error::{Error, Result};
use crate::grid::{Grid, InteriorMap, Side};
use crate::linalg::banded::{BandedLu, BandedMatrix};
use crate::linalg::krylov::bicgstab;
use crate::linalg::sparse::CscMatrix;
use crate::measure::DensityField;
use crate::scalar::{mass_tol, neg_tol, pairwise_sum, real, to_f64, Scalar};

/// Band-factor storage budget (in scalars) before solves switch to BiCGSTAB.
const DIRECT_FACTOR_BUDGET: usize = 20_000_000;

/// Per-axis normal velocity samples at the low face of every cell.
///
/// `component(i)[j]` holds `v(x_j - e_i dx/2) . e_i`. The high face of cell
/// `j` along axis `i` is the low face of cell `j + S_i`. Faces of the
/// outermost layer lie outside the domain and carry exactly zero.
#[derive(Debug, Clone)]
pub struct FaceVelocity<T> {
    grid: Grid<T>,
    comps: Vec<Vec<T>>,
}

impl<T: Scalar> FaceVelocity<T> {
    pub fn zeros(grid: Grid<T>) -> Self {
        let n = grid.n_cells();
        let comps = vec![vec![T::zero(); n]; grid.dim()];
        Self { grid, comps }
    }

    /// Wrap per-axis component vectors, checking shape, finiteness, and zero
    /// entries on out-of-domain faces.
    pub fn from_components(grid: Grid<T>, comps: Vec<Vec<T>>) -> Result<Self> {
        if comps.len() != grid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} component vectors, got {}",
                grid.dim(),
                comps.len()
            )));
        }
        for (axis, comp) in comps.iter().enumerate() {
            if comp.len() != grid.n_cells() {
                return Err(Error::ShapeMismatch(format!(
                    "axis {axis}: component length {} != cell count {}",
                    comp.len(),
                    grid.n_cells()
                )));
            }
            let stride = grid.strides()[axis];
            let n_axis = grid.counts()[axis];
            for (j, &v) in comp.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "face velocity at cell {j}, axis {axis}"
                    )));
                }
                let k = (j / stride) % n_axis;
                if k == 0 && v != T::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "face on the domain boundary must carry zero velocity \
                         (cell {j}, axis {axis})"
                    )));
                }
            }
        }
        Ok(Self { grid, comps })
    }

    /// Sample a velocity field at every in-domain low face.
    pub fn sample(grid: Grid<T>, field: impl Fn(&[T]) -> Vec<T>) -> Result<Self> {
        let mut comps = vec![vec![T::zero(); grid.n_cells()]; grid.dim()];
        for axis in 0..grid.dim() {
            let stride = grid.strides()[axis];
            let n_axis = grid.counts()[axis];
            for j in 0..grid.n_cells() {
                let k = (j / stride) % n_axis;
                if k == 0 {
                    continue;
                }
                let pos = grid.face_center(j, axis, Side::Low)?;
                let v = field(&pos);
                if v.len() != grid.dim() {
                    return Err(Error::ShapeMismatch(
                        "velocity field must return one component per axis".to_string(),
                    ));
                }
                if !v[axis].is_finite() {
                    return Err(Error::NonFinite(format!(
                        "sampled velocity at cell {j}, axis {axis}"
                    )));
                }
                comps[axis][j] = v[axis];
            }
        }
        Ok(Self { grid, comps })
    }

    /// Random face velocities, uniform in `[-amplitude, amplitude]`, for
    /// stress tests; deterministic per seed.
    pub fn random(grid: Grid<T>, amplitude: T, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut comps = vec![vec![T::zero(); grid.n_cells()]; grid.dim()];
        for axis in 0..grid.dim() {
            let stride = grid.strides()[axis];
            let n_axis = grid.counts()[axis];
            for j in 0..grid.n_cells() {
                let k = (j / stride) % n_axis;
                if k == 0 {
                    continue;
                }
                let u: f64 = rng.gen_range(-1.0..1.0);
                comps[axis][j] = amplitude * real::<T>(u);
            }
        }
        Self { grid, comps }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[T] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [T] {
        &mut self.comps[axis]
    }

    /// Largest per-axis sup of the face speeds.
    pub fn max_abs(&self) -> T {
        self.comps
            .iter()
            .flat_map(|c| c.iter())
            .fold(T::zero(), |acc, &v| T::max(acc, v.abs()))
    }

    /// Scaled copy `a * v`.
    pub fn scale(&self, a: T) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|c| c.iter().map(|&v| v * a).collect())
            .collect();
        Self {
            grid: self.grid.clone(),
            comps,
        }
    }
}

/// Column-stochastic update matrix `M = I + K` on the interior block.
#[derive(Debug, Clone)]
pub struct MarkovOperator<T> {
    grid: Grid<T>,
    interior: InteriorMap,
    m: CscMatrix<T>,
    dt: T,
    d_coeff: T,
}

/// Assemble the upwind finite-volume operator for the given face velocities,
/// diffusion coefficient, and time step. Fails when `dt` exceeds the
/// stability bound.
pub fn assemble<T: Scalar>(fv: &FaceVelocity<T>, d_coeff: T, dt: T) -> Result<MarkovOperator<T>> {
    if d_coeff < T::zero() {
        return Err(Error::InvalidArgument(
            "diffusion coefficient must be >= 0".to_string(),
        ));
    }
    if dt <= T::zero() || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    let grid = fv.grid();
    let vmax = fv.max_abs();
    let bound = grid.cfl_bound(d_coeff, vmax)?;
    if dt > bound * (T::one() + real::<T>(1e-12)) {
        return Err(Error::CflViolation {
            dt: to_f64(dt),
            admissible: to_f64(bound),
        });
    }
    let im = grid.interior();
    let d = grid.dim();
    let dx = grid.dx();
    let ratio = dt / dx;
    let diff = d_coeff / dx;
    let mut columns: Vec<Vec<(usize, T)>> = Vec::with_capacity(im.n_interior());
    for jp_int in 0..im.n_interior() {
        let jp = im.to_full(jp_int);
        let k = grid.multi_index(jp)?;
        let mut col: Vec<(usize, T)> = Vec::with_capacity(2 * d + 1);
        let mut diag = T::one();
        for axis in 0..d {
            let stride = grid.strides()[axis];
            // Low face, shared with the interior neighbor below.
            if k[axis] >= 2 {
                let v = fv.component(axis)[jp];
                let beta = ratio * (T::min(v, T::zero()) - diff);
                diag += beta;
                let jm_int = im.to_interior(jp - stride).expect("interior neighbor");
                col.push((jm_int, -beta));
            }
            // High face, owned by the interior neighbor above.
            if k[axis] + 2 < grid.counts()[axis] {
                let w = fv.component(axis)[jp + stride];
                let alpha = ratio * (T::max(w, T::zero()) + diff);
                diag -= alpha;
                let jq_int = im.to_interior(jp + stride).expect("interior neighbor");
                col.push((jq_int, alpha));
            }
        }
        col.push((jp_int, diag));
        columns.push(col);
    }
    let m = CscMatrix::from_columns(im.n_interior(), columns)?;
    Ok(MarkovOperator {
        grid: grid.clone(),
        interior: im,
        m,
        dt,
        d_coeff,
    })
}

/// Assemble with the time step taken fresh from the CFL bound.
pub fn assemble_auto_dt<T: Scalar>(
    fv: &FaceVelocity<T>,
    d_coeff: T,
    safety: T,
) -> Result<MarkovOperator<T>> {
    let dt = fv.grid().cfl_dt(d_coeff, fv.max_abs(), safety)?;
    assemble(fv, d_coeff, dt)
}

impl<T: Scalar> MarkovOperator<T> {
    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn interior(&self) -> &InteriorMap {
        &self.interior
    }

    /// The interior block of `M = I + K`.
    pub fn matrix(&self) -> &CscMatrix<T> {
        &self.m
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn dx(&self) -> T {
        self.grid.dx()
    }

    pub fn d_coeff(&self) -> T {
        self.d_coeff
    }

    /// `out = M x` on interior vectors.
    pub fn apply(&self, x: &[T], out: &mut [T]) {
        self.m.matvec(x, out);
    }

    /// `out = M_eps x = (1 - eps) M x + (eps / n) sum(x)` on interior vectors.
    pub fn apply_teleported(&self, eps: T, x: &[T], out: &mut [T]) {
        self.m.matvec(x, out);
        let n = real::<T>(self.interior.n_interior() as f64);
        let restart = eps * pairwise_sum(x) / n;
        let keep = T::one() - eps;
        for v in out.iter_mut() {
            *v = keep * *v + restart;
        }
    }
}

enum SolvePath<T> {
    Direct(BandedLu<T>),
    /// Row-replaced factorization for the singular `eps = 0` system, with the
    /// replaced row index.
    DirectReplaced(BandedLu<T>, usize),
    Iterative,
}

/// Stationary/adjoint solver for one `(M, eps)` pair.
///
/// For `eps > 0` the nonsingular matrix `A = (1 - eps) M - I` is factored
/// once and reused: the stationary density solves `A rho = -(eps/n) 1` and
/// the adjoint state solves `A^T lambda = c` (exactly equivalent to the
/// teleported adjoint equation whenever `c . rho = 0`, since `A^{-T}` then
/// keeps `lambda` orthogonal to the ones vector).
pub struct StationarySolver<'a, T> {
    op: &'a MarkovOperator<T>,
    eps: T,
    path: SolvePath<T>,
}

fn teleported_system<T: Scalar>(op: &MarkovOperator<T>, eps: T) -> CscMatrix<T> {
    let keep = T::one() - eps;
    op.matrix().map_values(|i, j, v| {
        let s = keep * v;
        if i == j {
            s - T::one()
        } else {
            s
        }
    })
}

fn band_of<T: Scalar>(op: &MarkovOperator<T>) -> usize {
    *op.interior().interior_strides().last().unwrap_or(&1)
}

impl<'a, T: Scalar> StationarySolver<'a, T> {
    pub fn new(op: &'a MarkovOperator<T>, eps: T) -> Result<Self> {
        if eps < T::zero() || eps >= T::one() {
            return Err(Error::InvalidArgument(format!(
                "teleportation weight must lie in [0, 1), got {eps}"
            )));
        }
        if eps == T::zero() && op.d_coeff() == T::zero() {
            return Err(Error::InvalidArgument(
                "eps = 0 with zero diffusion: the stationary density need not be unique"
                    .to_string(),
            ));
        }
        let n = op.interior().n_interior();
        let band = band_of(op);
        let direct = BandedMatrix::<T>::factor_storage(n, band) <= DIRECT_FACTOR_BUDGET;
        let path = if !direct {
            SolvePath::Iterative
        } else if eps > T::zero() {
            let a = teleported_system(op, eps);
            SolvePath::Direct(BandedMatrix::from_csc(&a)?.factorize()?)
        } else {
            // eps = 0: M - I is singular with left null vector 1; replace one
            // equation by a scale-pin. Any row works since the stationary
            // density of the ergodic (D > 0) chain is strictly positive.
            let row = 0usize;
            let a = op.matrix().map_values(|i, j, v| {
                if i == row {
                    T::zero()
                } else if i == j {
                    v - T::one()
                } else {
                    v
                }
            });
            let mut banded = BandedMatrix::from_csc(&a)?;
            banded.set(row, row, T::one());
            SolvePath::DirectReplaced(banded.factorize()?, row)
        };
        Ok(Self { op, eps, path })
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    fn apply_system(&self, x: &[T], out: &mut [T]) {
        // out = ((1 - eps) M - I) x
        self.op.m.matvec(x, out);
        let keep = T::one() - self.eps;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = keep * *o - xi;
        }
    }

    fn apply_system_transpose(&self, x: &[T], out: &mut [T]) {
        self.op.m.matvec_transpose(x, out);
        let keep = T::one() - self.eps;
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = keep * *o - xi;
        }
    }

    fn direct_solve_refined(&self, lu: &BandedLu<T>, rhs: &[T]) -> Result<Vec<T>> {
        let mut x = rhs.to_vec();
        lu.solve(&mut x)?;
        // One step of iterative refinement keeps the residual near round-off
        // even when the teleported system is ill-conditioned.
        let mut r = vec![T::zero(); rhs.len()];
        self.apply_system(&x, &mut r);
        for (ri, &bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
        }
        lu.solve(&mut r)?;
        for (xi, di) in x.iter_mut().zip(&r) {
            *xi += *di;
        }
        Ok(x)
    }

    /// Solve for the stationary density of the teleported chain.
    pub fn steady_state(&self) -> Result<DensityField<T>> {
        let n = self.op.interior().n_interior();
        let mut x = match &self.path {
            SolvePath::Direct(lu) => {
                let rhs = vec![-self.eps / real::<T>(n as f64); n];
                self.direct_solve_refined(lu, &rhs)?
            }
            SolvePath::DirectReplaced(lu, row) => {
                let mut rhs = vec![T::zero(); n];
                rhs[*row] = T::one();
                let mut x = rhs;
                lu.solve(&mut x)?;
                x
            }
            SolvePath::Iterative => {
                if self.eps > T::zero() {
                    let rhs = vec![-self.eps / real::<T>(n as f64); n];
                    let diag: Vec<T> = (0..n)
                        .map(|j| (T::one() - self.eps) * self.op.m.get(j, j) - T::one())
                        .collect();
                    let x0 = vec![T::one() / real::<T>(n as f64); n];
                    let (x, _, _) = bicgstab(
                        |v, out| self.apply_system(v, out),
                        &rhs,
                        &x0,
                        real::<T>(1e-12),
                        40 * n,
                        Some(&diag),
                        false,
                    )?;
                    x
                } else {
                    // Singular consistent system (M - I) x = 0 pinned by
                    // normalizing afterwards; start from uniform and deflate.
                    let rhs = vec![T::zero(); n];
                    let mut x0 = vec![T::one() / real::<T>(n as f64); n];
                    // Power-iteration warm start improves robustness.
                    let mut tmp = vec![T::zero(); n];
                    for _ in 0..50 {
                        self.op.apply(&x0, &mut tmp);
                        std::mem::swap(&mut x0, &mut tmp);
                    }
                    let diag: Vec<T> =
                        (0..n).map(|j| self.op.m.get(j, j) - T::one()).collect();
                    let shifted = |v: &[T], out: &mut [T]| {
                        self.op.m.matvec(v, out);
                        for (o, &xi) in out.iter_mut().zip(v) {
                            *o -= xi;
                        }
                    };
                    match bicgstab(shifted, &rhs, &x0, real::<T>(1e-12), 40 * n, Some(&diag), false)
                    {
                        Ok((x, _, _)) => x,
                        // The zero solution is a valid answer to the singular
                        // system; fall back to long power iteration.
                        Err(_) => {
                            let mut x = x0;
                            for _ in 0..200 * n {
                                self.op.apply(&x, &mut tmp);
                                std::mem::swap(&mut x, &mut tmp);
                                let s = pairwise_sum(&x);
                                for v in x.iter_mut() {
                                    *v /= s;
                                }
                            }
                            x
                        }
                    }
                }
            }
        };
        // Clamp round-off negatives and renormalize.
        let clamp_floor = -neg_tol::<T>();
        for v in x.iter_mut() {
            if *v < T::zero() {
                if *v < clamp_floor {
                    return Err(Error::Numerical {
                        what: "stationary solve produced a significantly negative entry"
                            .to_string(),
                        residual: to_f64(v.abs()),
                    });
                }
                *v = T::zero();
            }
        }
        let total = pairwise_sum(&x);
        if !(total > T::zero()) || !total.is_finite() {
            return Err(Error::Numerical {
                what: "stationary solve produced a non-normalizable vector".to_string(),
                residual: to_f64(total),
            });
        }
        for v in x.iter_mut() {
            *v /= total;
        }
        // Residual of M_eps rho = rho in l1.
        let mut r = vec![T::zero(); n];
        self.op.apply_teleported(self.eps, &x, &mut r);
        let resid = x
            .iter()
            .zip(&r)
            .fold(T::zero(), |acc, (&xi, &ri)| acc + (ri - xi).abs());
        if resid > mass_tol::<T>() {
            return Err(Error::Numerical {
                what: "stationary residual exceeds tolerance".to_string(),
                residual: to_f64(resid),
            });
        }
        let full = self.op.interior().embed(&x);
        DensityField::new(self.op.grid().clone(), full)
    }

    /// Solve the adjoint equation for the given stationary density and
    /// objective derivative (full-grid vector). Returns the full-grid adjoint
    /// state, zero on the boundary layer.
    pub fn solve_adjoint(&self, rho: &DensityField<T>, djdrho: &[T]) -> Result<Vec<T>> {
        let grid = self.op.grid();
        if djdrho.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "objective derivative length {} != cell count {}",
                djdrho.len(),
                grid.n_cells()
            )));
        }
        if !rho.grid().same_geometry(grid) {
            return Err(Error::ShapeMismatch(
                "stationary density lives on a different grid".to_string(),
            ));
        }
        let total = rho.total();
        if (total - T::one()).abs() > real::<T>(1e-8) {
            return Err(Error::InconsistentState(format!(
                "stationary density sums to {total}, not 1"
            )));
        }
        let im = self.op.interior();
        let n = im.n_interior();
        let rho_int = im.restrict(rho.mass());
        // Projected right-hand side: c = -dJ/drho + (dJ/drho . rho) 1.
        let g_dot_rho = djdrho
            .iter()
            .zip(rho.mass())
            .fold(T::zero(), |acc, (&g, &r)| acc + g * r);
        let c: Vec<T> = (0..n)
            .map(|ji| -djdrho[im.to_full(ji)] + g_dot_rho)
            .collect();
        let c_scale = c.iter().fold(T::zero(), |acc, &v| T::max(acc, v.abs()));
        // Solvability: the projected rhs is orthogonal to the stationary
        // density whenever the density is normalized.
        let c_dot_rho = c
            .iter()
            .zip(&rho_int)
            .fold(T::zero(), |acc, (&ci, &ri)| acc + ci * ri);
        if c_dot_rho.abs() > real::<T>(1e-8) * T::max(T::one(), c_scale) {
            return Err(Error::InconsistentState(format!(
                "adjoint rhs is not orthogonal to the stationary density \
                 (inner product {c_dot_rho}); was the density solved from this operator?"
            )));
        }
        let lambda = match &self.path {
            SolvePath::Direct(lu) => {
                let mut x = c.clone();
                lu.solve_transpose(&mut x)?;
                // One refinement pass on the transposed system.
                let mut r = vec![T::zero(); n];
                self.apply_system_transpose(&x, &mut r);
                for (ri, &ci) in r.iter_mut().zip(&c) {
                    *ri = ci - *ri;
                }
                lu.solve_transpose(&mut r)?;
                for (xi, di) in x.iter_mut().zip(&r) {
                    *xi += *di;
                }
                x
            }
            SolvePath::DirectReplaced(_, _) => {
                // eps = 0: factor (M^T - I) with the row of largest stationary
                // mass replaced by a gauge pin.
                let row = rho_int
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let mt = transpose_minus_identity_row_replaced(&self.op.m, row)?;
                let lu = mt.factorize()?;
                let mut x = c.clone();
                x[row] = T::zero();
                lu.solve(&mut x)?;
                x
            }
            SolvePath::Iterative => {
                let diag: Vec<T> = (0..n)
                    .map(|j| (T::one() - self.eps) * self.op.m.get(j, j) - T::one())
                    .collect();
                let (x, _, _) = bicgstab(
                    |v, out| self.apply_system_transpose(v, out),
                    &c,
                    &vec![T::zero(); n],
                    real::<T>(1e-12),
                    40 * n,
                    Some(&diag),
                    self.eps == T::zero(),
                )?;
                x
            }
        };
        // Residual of the teleported adjoint equation (M_eps^T - I) lambda = c.
        let mut r = vec![T::zero(); n];
        self.op.m.matvec_transpose(&lambda, &mut r);
        let keep = T::one() - self.eps;
        let restart = self.eps * pairwise_sum(&lambda) / real::<T>(n as f64);
        let mut max_resid = T::zero();
        for i in 0..n {
            let lhs = keep * r[i] + restart - lambda[i];
            max_resid = T::max(max_resid, (lhs - c[i]).abs());
        }
        if max_resid > mass_tol::<T>() * T::max(T::one(), c_scale) {
            return Err(Error::Numerical {
                what: "adjoint residual exceeds tolerance".to_string(),
                residual: to_f64(max_resid),
            });
        }
        Ok(im.embed(&lambda))
    }
}

fn transpose_minus_identity_row_replaced<T: Scalar>(
    m: &CscMatrix<T>,
    row: usize,
) -> Result<BandedMatrix<T>> {
    let n = m.ncols();
    let (kl, ku) = m.bandwidths();
    let mut banded = BandedMatrix::new(n, ku, kl);
    m.for_each_entry(|i, j, v| {
        // Transposed entry (j, i).
        if j == row {
            return;
        }
        let vv = if i == j { v - T::one() } else { v };
        banded.add(j, i, vv);
    });
    banded.set(row, row, T::one());
    Ok(banded)
}

/// Stationary density of the teleported chain (one-shot convenience).
pub fn steady_state<T: Scalar>(op: &MarkovOperator<T>, eps: T) -> Result<DensityField<T>> {
    StationarySolver::new(op, eps)?.steady_state()
}

/// Check the joint rescaling invariance: the stationary density for drift
/// `a v` with diffusion `a D` (time step refreshed from the CFL bound)
/// matches the one for `(v, D)` within 1e-10 in l1.
pub fn scaling_identity_check<T: Scalar>(
    fv: &FaceVelocity<T>,
    d_coeff: T,
    a: T,
    eps: T,
    safety: T,
) -> Result<bool> {
    if a <= T::zero() {
        return Err(Error::InvalidArgument("scale factor must be > 0".to_string()));
    }
    let rho1 = steady_state(&assemble_auto_dt(fv, d_coeff, safety)?, eps)?;
    let scaled = fv.scale(a);
    let rho2 = steady_state(&assemble_auto_dt(&scaled, a * d_coeff, safety)?, eps)?;
    Ok(rho1.l1_distance(&rho2)? <= real::<T>(1e-10))
}

/// Explicit time evolution `rho <- M rho`, yielding the initial frame and one
/// frame per step.
pub struct DensityEvolution<'a, T> {
    op: &'a MarkovOperator<T>,
    cur: Vec<T>,
    scratch: Vec<T>,
    emitted: usize,
    frames_total: usize,
}

impl<'a, T: Scalar> DensityEvolution<'a, T> {
    pub fn new(
        rho0: &DensityField<T>,
        op: &'a MarkovOperator<T>,
        steps: usize,
    ) -> Result<Self> {
        if !rho0.grid().same_geometry(op.grid()) {
            return Err(Error::ShapeMismatch(
                "density and operator grids differ".to_string(),
            ));
        }
        let boundary = rho0.boundary_mass();
        if boundary > real::<T>(1e-12) {
            return Err(Error::InvalidArgument(format!(
                "initial density carries mass {boundary} on the excluded boundary layer"
            )));
        }
        let cur = op.interior().restrict(rho0.mass());
        Ok(Self {
            op,
            scratch: vec![T::zero(); cur.len()],
            cur,
            emitted: 0,
            frames_total: steps + 1,
        })
    }
}

impl<'a, T: Scalar> Iterator for DensityEvolution<'a, T> {
    type Item = Result<DensityField<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.frames_total {
            return None;
        }
        if self.emitted > 0 {
            self.op.apply(&self.cur, &mut self.scratch);
            std::mem::swap(&mut self.cur, &mut self.scratch);
        }
        self.emitted += 1;
        let full = self.op.interior().embed(&self.cur);
        Some(DensityField::new(self.op.grid().clone(), full))
    }
}

/// Step a density forward `steps` times, collecting every frame (the first
/// frame is the input).
pub fn step_density<T: Scalar>(
    rho0: &DensityField<T>,
    op: &MarkovOperator<T>,
    steps: usize,
) -> Result<Vec<DensityField<T>>> {
    DensityEvolution::new(rho0, op, steps)?.collect()
}
