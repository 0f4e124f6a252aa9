//! Occupation measures and discrete densities on a grid.

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::{mass_tol, pairwise_sum, real, to_f64, Scalar};

/// Default positivity floor for support masks.
pub const SUPPORT_FLOOR: f64 = 1e-12;

/// Discrete probability vector over grid cells (piecewise-constant density).
#[derive(Debug, Clone)]
pub struct DensityField<T> {
    grid: Grid<T>,
    mass: Vec<T>,
}

impl<T: Scalar> DensityField<T> {
    /// Wrap a mass vector that already sums to one (within 1e-10) with no
    /// negative entries.
    pub fn new(grid: Grid<T>, mass: Vec<T>) -> Result<Self> {
        if mass.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "mass vector length {} != cell count {}",
                mass.len(),
                grid.n_cells()
            )));
        }
        let mut total = T::zero();
        for &m in &mass {
            if !m.is_finite() || m < T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "density entries must be finite and nonnegative, got {m}"
                )));
            }
            total += m;
        }
        if (total - T::one()).abs() > mass_tol::<T>() {
            return Err(Error::InvalidArgument(format!(
                "density must sum to 1 within tolerance, got {total}"
            )));
        }
        Ok(Self { grid, mass })
    }

    /// Wrap a nonnegative vector and normalize it to total mass one.
    pub fn from_unnormalized(grid: Grid<T>, mut mass: Vec<T>) -> Result<Self> {
        if mass.len() != grid.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "mass vector length {} != cell count {}",
                mass.len(),
                grid.n_cells()
            )));
        }
        let mut total = T::zero();
        for &m in &mass {
            if !m.is_finite() || m < T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "density entries must be finite and nonnegative, got {m}"
                )));
            }
            total += m;
        }
        if total <= T::zero() {
            return Err(Error::EmptyMeasure);
        }
        for m in mass.iter_mut() {
            *m /= total;
        }
        Ok(Self { grid, mass })
    }

    /// Uniform distribution over the interior cells, zero on the boundary
    /// layer.
    pub fn uniform_interior(grid: Grid<T>) -> Self {
        let im = grid.interior();
        let w = T::one() / real::<T>(im.n_interior() as f64);
        let mass = im.embed(&vec![w; im.n_interior()]);
        Self { grid, mass }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn mass(&self) -> &[T] {
        &self.mass
    }

    pub fn total(&self) -> T {
        pairwise_sum(&self.mass)
    }

    /// Mass sitting on the outermost cell layer.
    pub fn boundary_mass(&self) -> T {
        let mut acc = T::zero();
        for (j, &m) in self.mass.iter().enumerate() {
            if self.grid.is_boundary_cell(j) {
                acc += m;
            }
        }
        acc
    }

    /// l1 distance to another field on the same grid.
    pub fn l1_distance(&self, other: &DensityField<T>) -> Result<T> {
        if !self.grid.same_geometry(other.grid()) {
            return Err(Error::ShapeMismatch(
                "l1 distance needs matching grids".to_string(),
            ));
        }
        Ok(self
            .mass
            .iter()
            .zip(other.mass())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs()))
    }

    /// Marginal mass along one axis.
    pub fn marginal(&self, axis: usize) -> Result<Vec<T>> {
        if axis >= self.grid.dim() {
            return Err(Error::IndexOutOfRange(format!(
                "axis {axis} >= dim {}",
                self.grid.dim()
            )));
        }
        let n = self.grid.counts()[axis];
        let stride = self.grid.strides()[axis];
        let mut out = vec![T::zero(); n];
        for (j, &m) in self.mass.iter().enumerate() {
            let k = (j / stride) % n;
            out[k] += m;
        }
        Ok(out)
    }

    /// Conservative re-binning onto another grid covering the same region.
    ///
    /// Each source cell's mass is split over the target cells it overlaps,
    /// proportionally to the overlap volume (separable per axis). Mass
    /// falling outside the target grid is discarded and the result is
    /// renormalized.
    pub fn rebin(&self, target: &Grid<T>) -> Result<DensityField<T>> {
        if target.dim() != self.grid.dim() {
            return Err(Error::ShapeMismatch(
                "rebin needs grids of equal dimension".to_string(),
            ));
        }
        let d = self.grid.dim();
        let half = real::<T>(0.5);
        let mut out = vec![T::zero(); target.n_cells()];
        // Per-axis overlap tables would cost as much as recomputing: do it
        // per cell; source cells with zero mass are skipped.
        let mut axis_overlaps: Vec<Vec<(usize, T)>> = vec![Vec::new(); d];
        for (j, &m) in self.mass.iter().enumerate() {
            if m == T::zero() {
                continue;
            }
            let k = self.grid.multi_index(j)?;
            for axis in 0..d {
                let c = self.grid.center_component(axis, k[axis]);
                let dx_s = self.grid.spacing()[axis];
                let lo = c - half * dx_s;
                let hi = c + half * dx_s;
                let dx_t = target.spacing()[axis];
                let a_t = target.bounds()[axis].0 - half * dx_t;
                let n_t = target.counts()[axis];
                let overlaps = &mut axis_overlaps[axis];
                overlaps.clear();
                let first = ((lo - a_t) / dx_t).floor();
                let first = if first < T::zero() {
                    0usize
                } else {
                    first.to_usize().unwrap_or(0).min(n_t - 1)
                };
                for kt in first..n_t {
                    let t_lo = a_t + real::<T>(kt as f64) * dx_t;
                    let t_hi = t_lo + dx_t;
                    if t_lo >= hi {
                        break;
                    }
                    let w = (T::min(hi, t_hi) - T::max(lo, t_lo)) / dx_s;
                    if w > T::zero() {
                        overlaps.push((kt, w));
                    }
                }
            }
            // Tensor product of the per-axis overlap lists.
            let mut idx = vec![0usize; d];
            'outer: loop {
                let mut w = m;
                let mut jt = 0usize;
                for axis in 0..d {
                    let (kt, wa) = axis_overlaps[axis][idx[axis]];
                    w = w * wa;
                    jt += kt * target.strides()[axis];
                }
                out[jt] += w;
                for axis in 0..d {
                    idx[axis] += 1;
                    if idx[axis] < axis_overlaps[axis].len() {
                        continue 'outer;
                    }
                    idx[axis] = 0;
                }
                break;
            }
        }
        DensityField::from_unnormalized(target.clone(), out)
    }
}

/// Result of binning a trajectory.
#[derive(Debug, Clone)]
pub struct BinOutcome<T> {
    pub density: DensityField<T>,
    pub n_used: usize,
    pub n_discarded: usize,
}

/// Occupation measure of a trajectory: the fraction of samples falling in
/// each cell. Samples outside the grid bounds are discarded (and counted),
/// never clamped onto boundary cells.
pub fn bin_trajectory<T: Scalar>(traj: &Trajectory<T>, grid: &Grid<T>) -> Result<BinOutcome<T>> {
    let mut counts = vec![0usize; grid.n_cells()];
    let mut used = 0usize;
    let mut discarded = 0usize;
    for row in traj.rows() {
        match grid.locate(row) {
            Some(j) => {
                counts[j] += 1;
                used += 1;
            }
            None => discarded += 1,
        }
    }
    if used == 0 {
        return Err(Error::EmptyMeasure);
    }
    if discarded > 0 {
        log::debug!("bin_trajectory discarded {discarded} of {} samples", used + discarded);
    }
    let w = T::one() / real::<T>(used as f64);
    let mass: Vec<T> = counts.iter().map(|&c| real::<T>(c as f64) * w).collect();
    Ok(BinOutcome {
        density: DensityField::from_unnormalized(grid.clone(), mass)?,
        n_used: used,
        n_discarded: discarded,
    })
}

/// Separable truncated-Gaussian smoothing, `sigma` in units of cells.
///
/// The kernel is renormalized per source cell, so each sweep is
/// column-stochastic: total mass is conserved exactly and marginalizing
/// commutes with smoothing the marginal. `sigma = 0` is the identity.
pub fn gaussian_smooth<T: Scalar>(rho: &DensityField<T>, sigma_cells: T) -> Result<DensityField<T>> {
    if sigma_cells < T::zero() || !sigma_cells.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma_cells must be finite and >= 0, got {sigma_cells}"
        )));
    }
    if sigma_cells == T::zero() {
        return Ok(rho.clone());
    }
    let grid = rho.grid().clone();
    let radius = to_f64(sigma_cells * real::<T>(3.0)).ceil() as usize;
    let radius = radius.max(1);
    let mut weights = Vec::with_capacity(2 * radius + 1);
    let two_sig_sq = real::<T>(2.0) * sigma_cells * sigma_cells;
    for t in -(radius as isize)..=(radius as isize) {
        let t2 = real::<T>((t * t) as f64);
        weights.push((-t2 / two_sig_sq).exp());
    }
    let mut cur = rho.mass().to_vec();
    let mut next = vec![T::zero(); cur.len()];
    for axis in 0..grid.dim() {
        let n = grid.counts()[axis];
        let stride = grid.strides()[axis];
        for v in next.iter_mut() {
            *v = T::zero();
        }
        for (j, &m) in cur.iter().enumerate() {
            if m == T::zero() {
                continue;
            }
            let k = (j / stride) % n;
            let base = j - k * stride;
            let lo = k.saturating_sub(radius);
            let hi = (k + radius).min(n - 1);
            let mut wsum = T::zero();
            for t in lo..=hi {
                wsum += weights[t + radius - k];
            }
            for t in lo..=hi {
                next[base + t * stride] += m * weights[t + radius - k] / wsum;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    DensityField::from_unnormalized(grid, cur)
}

/// Cells where both densities exceed `floor`: the evaluation support shared
/// by the KL and JS divergences.
pub fn positive_support_mask<T: Scalar>(
    rho: &DensityField<T>,
    rho_star: &DensityField<T>,
    floor: T,
) -> Result<Vec<bool>> {
    if !rho.grid().same_geometry(rho_star.grid()) {
        return Err(Error::ShapeMismatch(
            "support mask needs matching grids".to_string(),
        ));
    }
    let mask: Vec<bool> = rho
        .mass()
        .iter()
        .zip(rho_star.mass())
        .map(|(&a, &b)| a > floor && b > floor)
        .collect();
    if !mask.iter().any(|&m| m) {
        return Err(Error::DisjointSupport);
    }
    Ok(mask)
}
