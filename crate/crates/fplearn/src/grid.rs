//! Rectangular computational domain with a uniform mesh.
//!
//! Cells are indexed column-major: axis 0 varies fastest. With 0-based
//! per-axis indices `k_i` and strides `S_i` (`S_0 = 1`, `S_i = prod(n_j, j <
//! i)`), the linear index is `j = sum_i k_i * S_i`. The 1-based convention
//! used in the accompanying documentation (`j = k_1 + sum (k_i - 1) S_i`)
//! describes the same bijection shifted by one; tests quote it explicitly
//! where they pin hand-computed values.
//!
//! Cell `j` is centered at `a_i + k_i * dx_i` and owns the half-open box
//! `[center - dx/2, center + dx/2)` on every axis, so the outermost cells
//! straddle the domain boundary by half a spacing.

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Scalar};

/// Which side of a cell a face lies on, along a given axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

/// Uniform rectangular mesh over a d-dimensional box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    bounds: Vec<(T, T)>,
    counts: Vec<usize>,
    spacing: Vec<T>,
    strides: Vec<usize>,
    n_cells: usize,
}

impl<T: Scalar> Grid<T> {
    /// Build a uniform grid. Requires `a_i < b_i`, `n_i >= 3` on every axis
    /// (the interior must exist) and equal spacing across axes: the upwind
    /// scheme assumes a single `dx`.
    pub fn new(bounds: Vec<(T, T)>, counts: Vec<usize>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != counts.len() {
            return Err(Error::InvalidGrid(format!(
                "need matching non-empty bounds/counts, got {} and {}",
                bounds.len(),
                counts.len()
            )));
        }
        for (axis, (&(a, b), &n)) in bounds.iter().zip(&counts).enumerate() {
            if !(a < b) || !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: bounds must satisfy a < b, got ({}, {})",
                    a, b
                )));
            }
            if n < 3 {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis}: need at least 3 cells, got {n}"
                )));
            }
        }
        let spacing: Vec<T> = bounds
            .iter()
            .zip(&counts)
            .map(|(&(a, b), &n)| (b - a) / real::<T>((n - 1) as f64))
            .collect();
        let dx0 = spacing[0];
        let tol = real::<T>(1e-12) * T::max(T::one(), dx0.abs());
        for (axis, &dx) in spacing.iter().enumerate() {
            if (dx - dx0).abs() > tol {
                return Err(Error::InvalidGrid(format!(
                    "non-uniform spacing: axis {axis} has dx = {} but axis 0 has dx = {}",
                    dx, dx0
                )));
            }
        }
        let mut strides = Vec::with_capacity(counts.len());
        let mut acc = 1usize;
        for &n in &counts {
            strides.push(acc);
            acc = acc.checked_mul(n).ok_or_else(|| {
                Error::InvalidGrid("cell count overflows usize".to_string())
            })?;
        }
        Ok(Self {
            bounds,
            counts,
            spacing,
            strides,
            n_cells: acc,
        })
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn bounds(&self) -> &[(T, T)] {
        &self.bounds
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// The common mesh spacing.
    pub fn dx(&self) -> T {
        self.spacing[0]
    }

    /// Per-axis spacing (equal across axes up to the construction tolerance).
    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> T {
        self.spacing.iter().fold(T::one(), |acc, &dx| acc * dx)
    }

    /// Squared diameter of the domain box.
    pub fn diameter_sq(&self) -> T {
        self.bounds
            .iter()
            .map(|&(a, b)| (b - a) * (b - a))
            .fold(T::zero(), |acc, d| acc + d)
    }

    /// Linear index of a 0-based multi-index.
    pub fn linear_index(&self, k: &[usize]) -> Result<usize> {
        if k.len() != self.dim() {
            return Err(Error::IndexOutOfRange(format!(
                "multi-index has {} components, grid has {}",
                k.len(),
                self.dim()
            )));
        }
        let mut j = 0usize;
        for (axis, (&ki, &n)) in k.iter().zip(&self.counts).enumerate() {
            if ki >= n {
                return Err(Error::IndexOutOfRange(format!(
                    "axis {axis}: index {ki} >= count {n}"
                )));
            }
            j += ki * self.strides[axis];
        }
        Ok(j)
    }

    /// 0-based multi-index of a linear index.
    pub fn multi_index(&self, j: usize) -> Result<Vec<usize>> {
        if j >= self.n_cells {
            return Err(Error::IndexOutOfRange(format!(
                "cell {j} >= cell count {}",
                self.n_cells
            )));
        }
        let mut rem = j;
        let mut k = vec![0usize; self.dim()];
        for axis in (0..self.dim()).rev() {
            k[axis] = rem / self.strides[axis];
            rem %= self.strides[axis];
        }
        Ok(k)
    }

    /// Per-axis component of the center of cell `j`.
    #[inline]
    pub fn center_component(&self, axis: usize, k: usize) -> T {
        self.bounds[axis].0 + real::<T>(k as f64) * self.spacing[axis]
    }

    /// Center of cell `j`.
    pub fn cell_center(&self, j: usize) -> Result<Vec<T>> {
        let k = self.multi_index(j)?;
        Ok(k
            .iter()
            .enumerate()
            .map(|(axis, &ki)| self.center_component(axis, ki))
            .collect())
    }

    /// Center of the face of cell `j` on `axis`, at the given side.
    pub fn face_center(&self, j: usize, axis: usize, side: Side) -> Result<Vec<T>> {
        if axis >= self.dim() {
            return Err(Error::IndexOutOfRange(format!(
                "axis {axis} >= dim {}",
                self.dim()
            )));
        }
        let mut x = self.cell_center(j)?;
        let half = self.spacing[axis] / real::<T>(2.0);
        match side {
            Side::Low => x[axis] = x[axis] - half,
            Side::High => x[axis] = x[axis] + half,
        }
        Ok(x)
    }

    /// True when any per-axis index sits in the outermost layer.
    pub fn is_boundary_cell(&self, j: usize) -> bool {
        let mut rem = j;
        for axis in (0..self.dim()).rev() {
            let k = rem / self.strides[axis];
            rem %= self.strides[axis];
            if k == 0 || k + 1 == self.counts[axis] {
                return true;
            }
        }
        false
    }

    /// Locate the cell owning point `x` (half-open cells, ties go to the
    /// higher-index cell). Returns `None` when `x` lies outside the bounds.
    pub fn locate(&self, x: &[T]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut j = 0usize;
        let half = real::<T>(0.5);
        for axis in 0..self.dim() {
            let (a, b) = self.bounds[axis];
            if !(x[axis] >= a && x[axis] <= b) {
                return None;
            }
            let t = (x[axis] - a) / self.spacing[axis] + half;
            let k = t.floor().to_usize()?;
            let k = k.min(self.counts[axis] - 1);
            j += k * self.strides[axis];
        }
        Some(j)
    }

    /// Stability bound for the explicit update: `dt = safety * dx^2 / (2 d
    /// (D + dx vmax))`. With any `dt` at or below the `safety = 1` bound all
    /// entries of the update matrix `I + K` are nonnegative.
    pub fn cfl_dt(&self, d_coeff: T, vmax: T, safety: T) -> Result<T> {
        if d_coeff < T::zero() || vmax < T::zero() {
            return Err(Error::InvalidArgument(
                "cfl_dt needs D >= 0 and vmax >= 0".to_string(),
            ));
        }
        if !(safety > T::zero() && safety < T::one()) {
            return Err(Error::InvalidArgument(format!(
                "cfl safety factor must lie in (0, 1), got {safety}"
            )));
        }
        if d_coeff == T::zero() && vmax == T::zero() {
            return Err(Error::DegenerateDynamics);
        }
        let dx = self.dx();
        let two_d = real::<T>(2.0 * self.dim() as f64);
        Ok(safety * dx * dx / (two_d * (d_coeff + dx * vmax)))
    }

    /// The `safety = 1` stability bound itself.
    pub fn cfl_bound(&self, d_coeff: T, vmax: T) -> Result<T> {
        if d_coeff == T::zero() && vmax == T::zero() {
            return Err(Error::DegenerateDynamics);
        }
        let dx = self.dx();
        let two_d = real::<T>(2.0 * self.dim() as f64);
        Ok(dx * dx / (two_d * (d_coeff + dx * vmax)))
    }

    /// Map between full-grid cells and the interior block (the outermost
    /// layer stripped on every axis).
    pub fn interior(&self) -> InteriorMap {
        InteriorMap::new(&self.counts)
    }

    /// Grid covering only the interior cells (bounds shrunk by one spacing).
    pub fn interior_grid(&self) -> Result<Grid<T>> {
        let bounds = self
            .bounds
            .iter()
            .zip(&self.spacing)
            .map(|(&(a, b), &dx)| (a + dx, b - dx))
            .collect();
        let counts = self.counts.iter().map(|&n| n - 2).collect();
        Grid::new(bounds, counts)
    }

    /// Check another grid shares the same geometry up to round-off.
    pub fn same_geometry(&self, other: &Grid<T>) -> bool {
        if self.counts != other.counts {
            return false;
        }
        let tol = real::<T>(1e-10) * T::max(T::one(), self.dx().abs());
        self.bounds
            .iter()
            .zip(&other.bounds)
            .all(|(&(a, b), &(c, d))| (a - c).abs() <= tol && (b - d).abs() <= tol)
    }

    /// Check the error-report style description of this grid.
    pub fn describe(&self) -> String {
        let counts: Vec<String> = self.counts.iter().map(|n| n.to_string()).collect();
        format!("{}d grid {} dx={}", self.dim(), counts.join("x"), to_f64(self.dx()))
    }
}

/// Index arithmetic between the full grid and its interior block.
///
/// Interior cells (per-axis index in `1..=n-2`) are renumbered consecutively
/// in the same column-major order, which keeps the banded structure of
/// operators restricted to the interior.
#[derive(Debug, Clone)]
pub struct InteriorMap {
    full_counts: Vec<usize>,
    full_strides: Vec<usize>,
    int_counts: Vec<usize>,
    int_strides: Vec<usize>,
    n_interior: usize,
}

impl InteriorMap {
    fn new(counts: &[usize]) -> Self {
        let mut full_strides = Vec::with_capacity(counts.len());
        let mut int_strides = Vec::with_capacity(counts.len());
        let int_counts: Vec<usize> = counts.iter().map(|&n| n - 2).collect();
        let (mut fa, mut ia) = (1usize, 1usize);
        for (&n, &m) in counts.iter().zip(&int_counts) {
            full_strides.push(fa);
            int_strides.push(ia);
            fa *= n;
            ia *= m;
        }
        Self {
            full_counts: counts.to_vec(),
            full_strides,
            int_counts,
            int_strides,
            n_interior: ia,
        }
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn interior_counts(&self) -> &[usize] {
        &self.int_counts
    }

    pub fn interior_strides(&self) -> &[usize] {
        &self.int_strides
    }

    /// Full-grid linear index of interior cell `ji`.
    pub fn to_full(&self, ji: usize) -> usize {
        debug_assert!(ji < self.n_interior);
        let mut rem = ji;
        let mut j = 0usize;
        for axis in (0..self.int_counts.len()).rev() {
            let k = rem / self.int_strides[axis];
            rem %= self.int_strides[axis];
            j += (k + 1) * self.full_strides[axis];
        }
        j
    }

    /// Interior index of full-grid cell `j`, or `None` for boundary cells.
    pub fn to_interior(&self, j: usize) -> Option<usize> {
        let mut rem = j;
        let mut ji = 0usize;
        for axis in (0..self.full_counts.len()).rev() {
            let k = rem / self.full_strides[axis];
            rem %= self.full_strides[axis];
            if k == 0 || k + 1 == self.full_counts[axis] {
                return None;
            }
            ji += (k - 1) * self.int_strides[axis];
        }
        Some(ji)
    }

    /// Scatter an interior vector into a full-grid vector (boundary zero).
    pub fn embed<T: Scalar>(&self, interior: &[T]) -> Vec<T> {
        let n_full: usize = self.full_counts.iter().product();
        let mut full = vec![T::zero(); n_full];
        for (ji, &v) in interior.iter().enumerate() {
            full[self.to_full(ji)] = v;
        }
        full
    }

    /// Gather the interior entries of a full-grid vector.
    pub fn restrict<T: Scalar>(&self, full: &[T]) -> Vec<T> {
        (0..self.n_interior).map(|ji| full[self.to_full(ji)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2(n: usize) -> Grid<f64> {
        Grid::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![n, n]).unwrap()
    }

    #[test]
    fn linear_index_matches_hand_computed_values() {
        // 1-based convention: n = (3, 4), k = (2, 3) -> j = 2 + (3 - 1) * 3 = 8.
        // 0-based equivalent: k = (1, 2) -> j = 1 + 2 * 3 = 7 = 8 - 1.
        let g = Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 1.5)], vec![3, 4]).unwrap();
        assert_eq!(g.linear_index(&[1, 2]).unwrap(), 7);
        // 1-based corner k = (1, 1) -> j = 1; 0-based (0, 0) -> 0.
        assert_eq!(g.linear_index(&[0, 0]).unwrap(), 0);
    }

    #[test]
    fn round_trip_is_exhaustive_on_3x4x5() {
        let g =
            Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 1.5), (0.0, 2.0)], vec![3, 4, 5]).unwrap();
        assert_eq!(g.n_cells(), 60);
        for j in 0..g.n_cells() {
            let k = g.multi_index(j).unwrap();
            assert_eq!(g.linear_index(&k).unwrap(), j);
        }
    }

    #[test]
    fn out_of_range_multi_index_errors() {
        let g = grid2(4);
        assert!(g.linear_index(&[4, 0]).is_err());
        assert!(g.linear_index(&[0]).is_err());
        assert!(g.multi_index(16).is_err());
    }

    #[test]
    fn face_centers_match_arithmetic() {
        // 1-D grid on [0, 1] with 11 points: cell centered at 0.5 has its low
        // face at 0.45.
        let g = Grid::<f64>::new(vec![(0.0, 1.0)], vec![11]).unwrap();
        let j = g.linear_index(&[5]).unwrap();
        let f = g.face_center(j, 0, Side::Low).unwrap();
        assert!((f[0] - 0.45).abs() < 1e-14);

        // 2-D, cell centered at (0, 0), axis 1, high side, dx = 0.2.
        let g = Grid::<f64>::new(vec![(-1.0, 1.0), (-1.0, 1.0)], vec![11, 11]).unwrap();
        let j = g.linear_index(&[5, 5]).unwrap();
        let f = g.face_center(j, 1, Side::High).unwrap();
        assert!(f[0].abs() < 1e-14 && (f[1] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn shared_face_identity_for_interior_cells() {
        let g = Grid::<f64>::new(vec![(-2.0, 2.0), (0.0, 4.0)], vec![9, 9]).unwrap();
        for j in 0..g.n_cells() {
            let k = g.multi_index(j).unwrap();
            for axis in 0..2 {
                if k[axis] + 1 >= g.counts()[axis] {
                    continue;
                }
                let neighbor = j + g.strides()[axis];
                let high = g.face_center(j, axis, Side::High).unwrap();
                let low = g.face_center(neighbor, axis, Side::Low).unwrap();
                for d in 0..2 {
                    assert!((high[d] - low[d]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn cfl_examples() {
        // d = 2, dx = 0.1, D = 0.02, vmax = 1, safety -> 1: dt = 0.25 * 0.01 / 0.12.
        let g = Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![11, 11]).unwrap();
        let bound = g.cfl_bound(0.02, 1.0).unwrap();
        assert!((bound - 0.25 * 0.01 / 0.12).abs() < 1e-15);

        // d = 1, dx = 1, D = 0.5, vmax = 0 -> dt = 0.5 * 1 / 0.5 = 1.
        let g = Grid::<f64>::new(vec![(0.0, 4.0)], vec![5]).unwrap();
        assert!((g.cfl_bound(0.5, 0.0).unwrap() - 1.0).abs() < 1e-15);

        assert!(matches!(
            g.cfl_dt(0.0, 0.0, 0.9),
            Err(Error::DegenerateDynamics)
        ));
    }

    #[test]
    fn non_uniform_spacing_is_rejected() {
        let r = Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 2.0)], vec![11, 11]);
        assert!(matches!(r, Err(Error::InvalidGrid(_))));
        // Same extents, matched counts: accepted.
        assert!(Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 2.0)], vec![11, 21]).is_ok());
    }

    #[test]
    fn interior_map_round_trips() {
        let g = Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 0.75), (0.0, 1.25)], vec![5, 4, 6])
            .unwrap();
        let im = g.interior();
        assert_eq!(im.n_interior(), 3 * 2 * 4);
        let mut seen = vec![false; g.n_cells()];
        for ji in 0..im.n_interior() {
            let j = im.to_full(ji);
            assert!(!g.is_boundary_cell(j));
            assert_eq!(im.to_interior(j), Some(ji));
            seen[j] = true;
        }
        for j in 0..g.n_cells() {
            if g.is_boundary_cell(j) {
                assert_eq!(im.to_interior(j), None);
                assert!(!seen[j]);
            } else {
                assert!(seen[j]);
            }
        }
    }

    #[test]
    fn locate_uses_half_open_cells() {
        let g = Grid::<f64>::new(vec![(0.0, 1.0)], vec![3]).unwrap();
        // Centers at 0, 0.5, 1; boundaries at 0.25 and 0.75 go up.
        assert_eq!(g.locate(&[0.25]), Some(1));
        assert_eq!(g.locate(&[0.75]), Some(2));
        assert_eq!(g.locate(&[0.24]), Some(0));
        assert_eq!(g.locate(&[1.0]), Some(2));
        assert_eq!(g.locate(&[-0.01]), None);
        assert_eq!(g.locate(&[1.01]), None);
    }

    proptest! {
        #[test]
        fn index_bijection_on_random_shapes(
            shape in proptest::collection::vec(3usize..=6, 1..=3),
            seed in 0usize..1000,
        ) {
            let bounds: Vec<(f64, f64)> = shape
                .iter()
                .map(|&n| (0.0, (n - 1) as f64 * 0.37))
                .collect();
            let g = Grid::<f64>::new(bounds, shape.clone()).unwrap();
            let j = seed % g.n_cells();
            let k = g.multi_index(j).unwrap();
            prop_assert_eq!(g.linear_index(&k).unwrap(), j);
            for (axis, &ki) in k.iter().enumerate() {
                prop_assert!(ki < shape[axis]);
            }
        }

        #[test]
        fn cfl_is_monotone_in_d_and_vmax(
            d1 in 0.001f64..1.0, d2 in 0.001f64..1.0,
            v1 in 0.0f64..10.0, v2 in 0.0f64..10.0,
        ) {
            let g = Grid::<f64>::new(vec![(0.0, 1.0), (0.0, 1.0)], vec![11, 11]).unwrap();
            let (dlo, dhi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let (vlo, vhi) = if v1 < v2 { (v1, v2) } else { (v2, v1) };
            let base = g.cfl_dt(dlo, vlo, 0.9).unwrap();
            prop_assert!(g.cfl_dt(dhi, vlo, 0.9).unwrap() <= base);
            prop_assert!(g.cfl_dt(dlo, vhi, 0.9).unwrap() <= base);
        }
    }
}
