//! Velocity parameterizations: piecewise-constant, global monomial
//! polynomial, and single-hidden-layer neural network.
//!
//! Every variant exposes its parameters as one flat vector so optimizers stay
//! variant-agnostic. Layouts:
//!
//! - piecewise-constant: `theta[i * N + j]` is the normal velocity on the low
//!   face of parameter cell `j` along axis `i` (`N` cells on the parameter
//!   grid, which may be coarser than the solver grid);
//! - polynomial of degree `K`: `theta[i * M + l]` is the coefficient of the
//!   `l`-th monomial (graded lexicographic order, `M = C(d + K, K)`) in the
//!   `i`-th velocity component;
//! - neural net with width `H`: `[W1 (H x d, row-major) | b1 (H) | W2 (d x H,
//!   row-major) | b2 (d)]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fvm::FaceVelocity;
use crate::grid::{Grid, Side};
use crate::scalar::{real, Scalar};

/// Smooth activation for the neural-net variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn eval<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation value.
    #[inline]
    pub fn deriv_from_value<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Sigmoid => a * (T::one() - a),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::UnknownTag(format!("activation {other}"))),
        }
    }
}

/// Variant selector plus hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    PiecewiseConstant,
    Polynomial { degree: usize },
    NeuralNet { hidden: usize, activation: Activation },
}

/// All multi-indices `e` in `N^d` with `|e| <= degree`, graded
/// lexicographic: by total degree, then lexicographic.
pub fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if dim == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in 0..=total {
            prefix.push(e);
            rec(dim - 1, total - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree as u32 {
        rec(dim, total, &mut Vec::new(), &mut out);
    }
    out
}

/// `C(d + K, K)`: the number of monomials of degree at most `K` in `d`
/// variables.
pub fn monomial_count(dim: usize, degree: usize) -> usize {
    let mut acc = 1usize;
    for i in 1..=dim {
        acc = acc * (degree + i) / i;
    }
    acc
}

/// Initialization options.
#[derive(Debug, Clone)]
pub struct InitConfig<T> {
    /// Diffusion coefficient the first training stage will use; the
    /// piecewise-constant default scale is chosen well below `D / dx` so
    /// diffusion dominates at the start and every interior cell carries mass.
    pub diffusion_hint: T,
    /// Override for the piecewise-constant fill value.
    pub pc_scale: Option<T>,
}

impl<T: Scalar> Default for InitConfig<T> {
    fn default() -> Self {
        Self {
            diffusion_hint: T::zero(),
            pc_scale: None,
        }
    }
}

#[derive(Debug, Clone)]
enum VariantData {
    Pc,
    Poly { degree: usize, exps: Vec<Vec<u32>> },
    Nn { hidden: usize, activation: Activation },
}

/// A parameterized velocity field `v(x; theta)` tied to a grid.
///
/// For the piecewise-constant variant the grid is the parameter mesh; for the
/// global variants it records the domain on which the model was trained (the
/// field is zero outside by the boundary convention).
#[derive(Debug, Clone)]
pub struct VelocityModel<T> {
    grid: Grid<T>,
    variant: VariantData,
    theta: Vec<T>,
}

impl<T: Scalar> VelocityModel<T> {
    fn variant_data(spec: &ModelSpec, dim: usize) -> Result<VariantData> {
        Ok(match spec {
            ModelSpec::PiecewiseConstant => VariantData::Pc,
            ModelSpec::Polynomial { degree } => VariantData::Poly {
                degree: *degree,
                exps: monomial_exponents(dim, *degree),
            },
            ModelSpec::NeuralNet { hidden, activation } => {
                if *hidden == 0 {
                    return Err(Error::InvalidArgument(
                        "neural net needs at least one hidden node".to_string(),
                    ));
                }
                VariantData::Nn {
                    hidden: *hidden,
                    activation: *activation,
                }
            }
        })
    }

    fn param_len_of(variant: &VariantData, grid: &Grid<T>) -> usize {
        let d = grid.dim();
        match variant {
            VariantData::Pc => d * grid.n_cells(),
            VariantData::Poly { exps, .. } => d * exps.len(),
            VariantData::Nn { hidden, .. } => hidden * d + hidden + d * hidden + d,
        }
    }

    /// All-zero model.
    pub fn zeros(spec: &ModelSpec, grid: Grid<T>) -> Result<Self> {
        let variant = Self::variant_data(spec, grid.dim())?;
        let len = Self::param_len_of(&variant, &grid);
        Ok(Self {
            grid,
            variant,
            theta: vec![T::zero(); len],
        })
    }

    /// Initialized model: small constant velocities for the
    /// piecewise-constant variant, the attracting-circle field for the 2-d
    /// polynomial variant, seeded uniform weights for the neural net.
    pub fn init(spec: &ModelSpec, grid: Grid<T>, cfg: &InitConfig<T>, seed: u64) -> Result<Self> {
        let d = grid.dim();
        let mut model = Self::zeros(spec, grid)?;
        match &model.variant {
            VariantData::Pc => {
                let scale = cfg.pc_scale.unwrap_or_else(|| {
                    if cfg.diffusion_hint > T::zero() {
                        real::<T>(0.01) * cfg.diffusion_hint / model.grid.dx()
                    } else {
                        real::<T>(0.01)
                    }
                });
                for v in model.theta.iter_mut() {
                    *v = scale;
                }
            }
            VariantData::Poly { degree, exps } => {
                if d == 2 && *degree >= 3 {
                    // (-y + x (0.1 - x^2 - y^2), x + y (0.1 - x^2 - y^2)):
                    // a globally attracting circle of squared radius 0.1.
                    let m = exps.len();
                    let mut set = |comp: usize, e: &[u32], val: f64| {
                        let l = exps.iter().position(|x| x.as_slice() == e).unwrap();
                        model.theta[comp * m + l] = real::<T>(val);
                    };
                    set(0, &[0, 1], -1.0);
                    set(0, &[1, 0], 0.1);
                    set(0, &[3, 0], -1.0);
                    set(0, &[1, 2], -1.0);
                    set(1, &[1, 0], 1.0);
                    set(1, &[0, 1], 0.1);
                    set(1, &[0, 3], -1.0);
                    set(1, &[2, 1], -1.0);
                } else if d == 2 && *degree >= 1 {
                    let m = exps.len();
                    let ly = exps.iter().position(|x| x.as_slice() == [0, 1]).unwrap();
                    let lx = exps.iter().position(|x| x.as_slice() == [1, 0]).unwrap();
                    model.theta[ly] = -T::one();
                    model.theta[m + lx] = T::one();
                    log::warn!(
                        "polynomial degree {degree} < 3: falling back to the unit rotation \
                         initializer"
                    );
                } else {
                    log::warn!(
                        "no special polynomial initializer for d = {d}, degree {degree}: \
                         starting from zeros"
                    );
                }
            }
            VariantData::Nn { hidden, .. } => {
                let h = *hidden;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s1 = 1.0 / (d as f64).sqrt();
                let s2 = 1.0 / (h as f64).sqrt();
                for k in 0..h * d {
                    model.theta[k] = real::<T>(rng.gen_range(-s1..s1));
                }
                // b1 stays zero.
                let w2_off = h * d + h;
                for k in 0..d * h {
                    model.theta[w2_off + k] = real::<T>(rng.gen_range(-s2..s2));
                }
                // b2 stays zero.
            }
        }
        Ok(model)
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn spec(&self) -> ModelSpec {
        match &self.variant {
            VariantData::Pc => ModelSpec::PiecewiseConstant,
            VariantData::Poly { degree, .. } => ModelSpec::Polynomial { degree: *degree },
            VariantData::Nn { hidden, activation } => ModelSpec::NeuralNet {
                hidden: *hidden,
                activation: *activation,
            },
        }
    }

    pub fn param_len(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn with_theta(&self, theta: Vec<T>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::ShapeMismatch(format!(
                "theta length {} != expected {}",
                theta.len(),
                self.theta.len()
            )));
        }
        Ok(Self {
            grid: self.grid.clone(),
            variant: self.variant.clone(),
            theta,
        })
    }

    /// Construct from a flat parameter vector (used by deserialization).
    pub fn from_parts(spec: &ModelSpec, grid: Grid<T>, theta: Vec<T>) -> Result<Self> {
        let model = Self::zeros(spec, grid)?;
        model.with_theta(theta)
    }

    fn check_bounds_match(&self, other: &Grid<T>) -> Result<()> {
        if other.dim() != self.grid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "model is {}-dimensional, target grid is {}-dimensional",
                self.grid.dim(),
                other.dim()
            )));
        }
        let tol = real::<T>(1e-9) * T::max(T::one(), self.grid.dx());
        for (axis, (&(a, b), &(c, d))) in
            self.grid.bounds().iter().zip(other.bounds()).enumerate()
        {
            if (a - c).abs() > tol || (b - d).abs() > tol {
                return Err(Error::ShapeMismatch(format!(
                    "model and target grids disagree on axis {axis} bounds"
                )));
            }
        }
        Ok(())
    }

    /// Piecewise-constant parameter cell owning the face of `cell` along
    /// `axis`. Looked up through the owner-cell center, which coincides with
    /// the half-open face assignment on nested meshes but stays clear of
    /// round-off ties.
    fn pc_cell_for_face(&self, target: &Grid<T>, cell: usize, _axis: usize) -> Result<usize> {
        let center = target.cell_center(cell)?;
        self.grid.locate(&center).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "face owner cell {cell} falls outside the parameter mesh"
            ))
        })
    }

    fn poly_eval(&self, exps: &[Vec<u32>], comp: usize, x: &[T]) -> T {
        let m = exps.len();
        let mut acc = T::zero();
        for (l, e) in exps.iter().enumerate() {
            let c = self.theta[comp * m + l];
            if c == T::zero() {
                continue;
            }
            let mut mono = T::one();
            for (xi, &ei) in x.iter().zip(e) {
                if ei > 0 {
                    mono = mono * xi.powi(ei as i32);
                }
            }
            acc += c * mono;
        }
        acc
    }

    fn nn_parts(&self) -> (usize, &[T], &[T], &[T], &[T]) {
        if let VariantData::Nn { hidden, .. } = &self.variant {
            let h = *hidden;
            let d = self.grid.dim();
            let (w1, rest) = self.theta.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(d * h);
            (h, w1, b1, w2, b2)
        } else {
            unreachable!("nn_parts called on a non-network variant")
        }
    }

    fn nn_eval_component(&self, activation: Activation, comp: usize, x: &[T], acts: &mut Vec<T>) -> T {
        let d = self.grid.dim();
        let (h, w1, b1, w2, b2) = self.nn_parts();
        acts.clear();
        for hh in 0..h {
            let mut z = b1[hh];
            for k in 0..d {
                z += w1[hh * d + k] * x[k];
            }
            acts.push(activation.eval(z));
        }
        let mut v = b2[comp];
        for hh in 0..h {
            v += w2[comp * h + hh] * acts[hh];
        }
        v
    }

    /// Sample the model at every in-domain low face of the target grid;
    /// out-of-domain faces carry exactly zero.
    pub fn eval_faces(&self, target: &Grid<T>) -> Result<FaceVelocity<T>> {
        self.check_bounds_match(target)?;
        let d = target.dim();
        let n = target.n_cells();
        let mut comps = vec![vec![T::zero(); n]; d];
        let mut acts: Vec<T> = Vec::new();
        for axis in 0..d {
            let stride = target.strides()[axis];
            let n_axis = target.counts()[axis];
            for j in 0..n {
                let k = (j / stride) % n_axis;
                if k == 0 {
                    continue;
                }
                let v = match &self.variant {
                    VariantData::Pc => {
                        let cell = self.pc_cell_for_face(target, j, axis)?;
                        self.theta[axis * self.grid.n_cells() + cell]
                    }
                    VariantData::Poly { exps, .. } => {
                        let pos = target.face_center(j, axis, Side::Low)?;
                        let v = self.poly_eval(exps, axis, &pos);
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "polynomial velocity overflow at the low face of cell {j} \
                                 (axis {axis})"
                            )));
                        }
                        v
                    }
                    VariantData::Nn { activation, .. } => {
                        let pos = target.face_center(j, axis, Side::Low)?;
                        self.nn_eval_component(*activation, axis, &pos, &mut acts)
                    }
                };
                comps[axis][j] = v;
            }
        }
        FaceVelocity::from_components(target.clone(), comps)
    }

    /// Pointwise evaluation for trajectory simulation. Returns the velocity
    /// and whether `x` lies inside the model's grid; outside the drift is
    /// zero by the boundary convention.
    pub fn eval_point(&self, x: &[T]) -> (Vec<T>, bool) {
        let d = self.grid.dim();
        match self.grid.locate(x) {
            None => (vec![T::zero(); d], false),
            Some(cell) => {
                let v = match &self.variant {
                    VariantData::Pc => {
                        let n = self.grid.n_cells();
                        (0..d).map(|i| self.theta[i * n + cell]).collect()
                    }
                    VariantData::Poly { exps, .. } => {
                        (0..d).map(|i| self.poly_eval(exps, i, x)).collect()
                    }
                    VariantData::Nn { activation, .. } => {
                        let mut acts = Vec::new();
                        (0..d)
                            .map(|i| self.nn_eval_component(*activation, i, x, &mut acts))
                            .collect()
                    }
                };
                (v, true)
            }
        }
    }

    /// Accumulate per-face objective sensitivities into parameter space (the
    /// transpose of the face-evaluation Jacobian). Out-of-domain faces are
    /// ignored: their velocities are pinned at zero.
    pub fn pullback(&self, face_sens: &FaceVelocity<T>) -> Result<Vec<T>> {
        let target = face_sens.grid();
        self.check_bounds_match(target)?;
        let d = target.dim();
        let n = target.n_cells();
        let mut grad = vec![T::zero(); self.theta.len()];
        let mut acts: Vec<T> = Vec::new();
        for axis in 0..d {
            let stride = target.strides()[axis];
            let n_axis = target.counts()[axis];
            let sens = face_sens.component(axis);
            for j in 0..n {
                let k = (j / stride) % n_axis;
                if k == 0 {
                    continue;
                }
                let s = sens[j];
                if s == T::zero() {
                    continue;
                }
                match &self.variant {
                    VariantData::Pc => {
                        let cell = self.pc_cell_for_face(target, j, axis)?;
                        grad[axis * self.grid.n_cells() + cell] += s;
                    }
                    VariantData::Poly { exps, .. } => {
                        let pos = target.face_center(j, axis, Side::Low)?;
                        let m = exps.len();
                        for (l, e) in exps.iter().enumerate() {
                            let mut mono = T::one();
                            for (xi, &ei) in pos.iter().zip(e) {
                                if ei > 0 {
                                    mono = mono * xi.powi(ei as i32);
                                }
                            }
                            grad[axis * m + l] += s * mono;
                        }
                    }
                    VariantData::Nn { hidden, activation } => {
                        let pos = target.face_center(j, axis, Side::Low)?;
                        let h = *hidden;
                        let act = *activation;
                        let dgrid = self.grid.dim();
                        // Forward pass.
                        {
                            let (_, w1, b1, _, _) = self.nn_parts();
                            acts.clear();
                            for hh in 0..h {
                                let mut z = b1[hh];
                                for kk in 0..dgrid {
                                    z += w1[hh * dgrid + kk] * pos[kk];
                                }
                                acts.push(act.eval(z));
                            }
                        }
                        let w2_off = h * dgrid + h;
                        let b2_off = w2_off + dgrid * h;
                        for hh in 0..h {
                            let a = acts[hh];
                            grad[w2_off + axis * h + hh] += s * a;
                            let delta = s
                                * self.theta[w2_off + axis * h + hh]
                                * act.deriv_from_value(a);
                            for kk in 0..dgrid {
                                grad[hh * dgrid + kk] += delta * pos[kk];
                            }
                            grad[h * dgrid + hh] += delta;
                        }
                        grad[b2_off + axis] += s;
                    }
                }
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(n: usize, half: f64) -> Grid<f64> {
        Grid::new(vec![(-half, half), (-half, half)], vec![n, n]).unwrap()
    }

    #[test]
    fn monomial_count_matches_enumeration() {
        for d in 1..=4usize {
            for k in 0..=5usize {
                let exps = monomial_exponents(d, k);
                assert_eq!(exps.len(), monomial_count(d, k), "d={d} k={k}");
                // Complete and duplicate-free.
                let mut seen = std::collections::HashSet::new();
                for e in &exps {
                    assert!(e.iter().sum::<u32>() <= k as u32);
                    assert!(seen.insert(e.clone()));
                }
            }
        }
        assert_eq!(monomial_count(2, 5), 21);
    }

    #[test]
    fn pc_eval_is_identity_on_its_own_mesh() {
        let g = grid2(6, 1.0);
        let mut model = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g.clone()).unwrap();
        for (i, v) in model.theta_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01 - 0.1;
        }
        let fv = model.eval_faces(&g).unwrap();
        let n = g.n_cells();
        for axis in 0..2 {
            let stride = g.strides()[axis];
            for j in 0..n {
                let k = (j / stride) % g.counts()[axis];
                let expected = if k == 0 {
                    0.0
                } else {
                    model.theta()[axis * n + j]
                };
                assert_eq!(fv.component(axis)[j], expected, "axis {axis} cell {j}");
            }
        }
    }

    #[test]
    fn polynomial_evaluation_matches_arithmetic() {
        // v1 = 1 + 2x + 3y evaluated at (0.5, 0.25) is 2.75.
        let g = grid2(5, 1.0);
        let spec = ModelSpec::Polynomial { degree: 1 };
        let mut model = VelocityModel::zeros(&spec, g.clone()).unwrap();
        let exps = monomial_exponents(2, 1);
        let m = exps.len();
        let pos_of = |e: &[u32]| exps.iter().position(|x| x.as_slice() == e).unwrap();
        model.theta_mut()[pos_of(&[0, 0])] = 1.0;
        model.theta_mut()[pos_of(&[1, 0])] = 2.0;
        model.theta_mut()[pos_of(&[0, 1])] = 3.0;
        assert_eq!(m, 3);
        let (v, inside) = model.eval_point(&[0.5, 0.25]);
        assert!(inside);
        assert!((v[0] - 2.75).abs() < 1e-14);
        assert_eq!(v[1], 0.0);

        // Face sampling uses the same formula at the face center.
        let fv = model.eval_faces(&g).unwrap();
        let j = g.linear_index(&[2, 3]).unwrap();
        let face = g.face_center(j, 0, Side::Low).unwrap();
        let expected = 1.0 + 2.0 * face[0] + 3.0 * face[1];
        assert!((fv.component(0)[j] - expected).abs() < 1e-14);
    }

    #[test]
    fn degenerate_network_is_constant_off_boundary() {
        let g = grid2(7, 2.0);
        let spec = ModelSpec::NeuralNet {
            hidden: 4,
            activation: Activation::Tanh,
        };
        let mut model = VelocityModel::init(&spec, g.clone(), &InitConfig::default(), 1).unwrap();
        // Zero the second layer, set b2 = (0.3, -0.7).
        let h = 4;
        let d = 2;
        let w2_off = h * d + h;
        for k in 0..d * h {
            model.theta_mut()[w2_off + k] = 0.0;
        }
        model.theta_mut()[w2_off + d * h] = 0.3;
        model.theta_mut()[w2_off + d * h + 1] = -0.7;
        let fv = model.eval_faces(&g).unwrap();
        for axis in 0..2 {
            let stride = g.strides()[axis];
            let c = [0.3, -0.7][axis];
            for j in 0..g.n_cells() {
                let k = (j / stride) % g.counts()[axis];
                let expected = if k == 0 { 0.0 } else { c };
                assert!((fv.component(axis)[j] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pc_pullback_is_the_identity_on_matching_meshes() {
        let g = grid2(5, 1.0);
        let model = VelocityModel::zeros(&ModelSpec::PiecewiseConstant, g.clone()).unwrap();
        let mut sens = FaceVelocity::zeros(g.clone());
        let n = g.n_cells();
        for axis in 0..2 {
            let stride = g.strides()[axis];
            for j in 0..n {
                let k = (j / stride) % g.counts()[axis];
                if k > 0 {
                    sens.component_mut(axis)[j] = (j as f64) + 10.0 * axis as f64;
                }
            }
        }
        let grad = model.pullback(&sens).unwrap();
        for axis in 0..2 {
            for j in 0..n {
                assert_eq!(grad[axis * n + j], sens.component(axis)[j]);
            }
        }
    }

    #[test]
    fn polynomial_constant_term_gradient_sums_the_sensitivities() {
        let g = grid2(6, 1.0);
        let spec = ModelSpec::Polynomial { degree: 2 };
        let model = VelocityModel::zeros(&spec, g.clone()).unwrap();
        let mut sens = FaceVelocity::zeros(g.clone());
        let mut expected_sum = [0.0f64; 2];
        for axis in 0..2 {
            let stride = g.strides()[axis];
            for j in 0..g.n_cells() {
                let k = (j / stride) % g.counts()[axis];
                if k > 0 {
                    let s = ((j * (axis + 2)) % 7) as f64 * 0.1 - 0.3;
                    sens.component_mut(axis)[j] = s;
                    expected_sum[axis] += s;
                }
            }
        }
        let grad = model.pullback(&sens).unwrap();
        let m = monomial_count(2, 2);
        let exps = monomial_exponents(2, 2);
        let l0 = exps.iter().position(|e| e.iter().all(|&x| x == 0)).unwrap();
        for axis in 0..2 {
            assert!((grad[axis * m + l0] - expected_sum[axis]).abs() < 1e-12);
        }
    }

    #[test]
    fn pullback_matches_finite_differences_of_the_face_map() {
        // For each variant, pullback(s) must be the gradient of
        // theta -> sum_faces s * v_face(theta).
        let g = grid2(5, 1.0);
        let specs = [
            ModelSpec::PiecewiseConstant,
            ModelSpec::Polynomial { degree: 2 },
            ModelSpec::NeuralNet {
                hidden: 5,
                activation: Activation::Tanh,
            },
        ];
        for spec in specs {
            let mut model = VelocityModel::init(
                &spec,
                g.clone(),
                &InitConfig {
                    diffusion_hint: 0.1,
                    pc_scale: None,
                },
                3,
            )
            .unwrap();
            // Nudge parameters away from special points.
            for (i, v) in model.theta_mut().iter_mut().enumerate() {
                *v += ((i % 11) as f64 - 5.0) * 0.013;
            }
            let sens = FaceVelocity::random(g.clone(), 1.0, 17);
            let functional = |m: &VelocityModel<f64>| -> f64 {
                let fv = m.eval_faces(&g).unwrap();
                (0..2)
                    .map(|axis| {
                        fv.component(axis)
                            .iter()
                            .zip(sens.component(axis))
                            .map(|(&v, &s)| v * s)
                            .sum::<f64>()
                    })
                    .sum()
            };
            let grad = model.pullback(&sens).unwrap();
            let scale = grad.iter().fold(0.0f64, |a, &g| a.max(g.abs())).max(1e-12);
            let h = 1e-6;
            for p in 0..model.param_len() {
                let mut tp = model.theta().to_vec();
                tp[p] += h;
                let fp = functional(&model.with_theta(tp.clone()).unwrap());
                tp[p] -= 2.0 * h;
                let fm = functional(&model.with_theta(tp).unwrap());
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - grad[p]).abs() <= 1e-6 * scale.max(fd.abs()),
                    "{spec:?} param {p}: fd {fd} vs pullback {}",
                    grad[p]
                );
            }
        }
    }

    #[test]
    fn pullback_is_linear() {
        let g = grid2(5, 1.0);
        let spec = ModelSpec::NeuralNet {
            hidden: 3,
            activation: Activation::Sigmoid,
        };
        let model = VelocityModel::init(&spec, g.clone(), &InitConfig::default(), 9).unwrap();
        let s1 = FaceVelocity::random(g.clone(), 1.0, 1);
        let s2 = FaceVelocity::random(g.clone(), 0.5, 2);
        let a = 1.7;
        let mut combo = FaceVelocity::zeros(g.clone());
        for axis in 0..2 {
            for j in 0..g.n_cells() {
                combo.component_mut(axis)[j] =
                    a * s1.component(axis)[j] + s2.component(axis)[j];
            }
        }
        let g1 = model.pullback(&s1).unwrap();
        let g2 = model.pullback(&s2).unwrap();
        let gc = model.pullback(&combo).unwrap();
        for p in 0..model.param_len() {
            assert!((gc[p] - (a * g1[p] + g2[p])).abs() < 1e-12);
        }
    }

    #[test]
    fn pc_injection_from_a_coarser_parameter_mesh_is_adjoint_consistent() {
        let coarse = grid2(5, 1.0);
        let fine = grid2(9, 1.0);
        let mut model =
            VelocityModel::zeros(&ModelSpec::PiecewiseConstant, coarse.clone()).unwrap();
        for (i, v) in model.theta_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let sens = FaceVelocity::random(fine.clone(), 1.0, 8);
        // <eval(theta), s> must equal <theta, pullback(s)>.
        let fv = model.eval_faces(&fine).unwrap();
        let lhs: f64 = (0..2)
            .map(|axis| {
                fv.component(axis)
                    .iter()
                    .zip(sens.component(axis))
                    .map(|(&v, &s)| v * s)
                    .sum::<f64>()
            })
            .sum();
        let grad = model.pullback(&sens).unwrap();
        let rhs: f64 = grad
            .iter()
            .zip(model.theta())
            .map(|(&g, &t)| g * t)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn init_scales_and_determinism() {
        let g = grid2(8, 2.0);
        let d_coeff = 0.1;
        let cfg = InitConfig {
            diffusion_hint: d_coeff,
            pc_scale: None,
        };
        let pc = VelocityModel::init(&ModelSpec::PiecewiseConstant, g.clone(), &cfg, 0).unwrap();
        let vmax = pc.theta().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(vmax < 0.1 * d_coeff / g.dx(), "PC init must start diffusion-dominated");

        let spec = ModelSpec::NeuralNet {
            hidden: 6,
            activation: Activation::Tanh,
        };
        let a = VelocityModel::init(&spec, g.clone(), &cfg, 42).unwrap();
        let b = VelocityModel::init(&spec, g.clone(), &cfg, 42).unwrap();
        assert_eq!(a.theta(), b.theta());
        let c = VelocityModel::init(&spec, g, &cfg, 43).unwrap();
        assert_ne!(a.theta(), c.theta());
    }

    #[test]
    fn polynomial_initializer_has_zero_radial_component_on_its_circle() {
        let g = grid2(9, 1.0);
        let spec = ModelSpec::Polynomial { degree: 3 };
        let model = VelocityModel::init(&spec, g, &InitConfig::default(), 0).unwrap();
        let r = 0.1f64.sqrt();
        for k in 0..12 {
            let phi = k as f64 * std::f64::consts::PI / 6.0;
            let x = [r * phi.cos(), r * phi.sin()];
            let (v, _) = model.eval_point(&x);
            let radial = v[0] * x[0] + v[1] * x[1];
            assert!(radial.abs() < 1e-14, "radial component {radial} at angle {phi}");
        }
    }
}
