//! Data-misfit objectives `J(rho, rho*)` and their derivatives with respect
//! to the density.
//!
//! Densities are cell-mass vectors. The squared-L2 objective integrates the
//! piecewise-constant density difference, so the cell volume enters both the
//! value and its gradient; KL and JS compare masses directly (volume factors
//! cancel inside the logarithms) and are evaluated on the shared positive
//! support. The quadratic-Wasserstein objective is solved in entropically
//! regularized dual form, returning the dual potential of the first argument
//! as the gradient.

pub mod transport;

use crate::error::{Error, Result};
use crate::measure::{positive_support_mask, DensityField, SUPPORT_FLOOR};
use crate::scalar::{real, Scalar};

/// Objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    L2,
    Kl,
    Js,
    W2,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::L2 => "l2",
            ObjectiveKind::Kl => "kl",
            ObjectiveKind::Js => "js",
            ObjectiveKind::W2 => "w2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(ObjectiveKind::L2),
            "kl" => Ok(ObjectiveKind::Kl),
            "js" => Ok(ObjectiveKind::Js),
            "w2" => Ok(ObjectiveKind::W2),
            other => Err(Error::UnknownTag(format!("objective {other}"))),
        }
    }
}

/// Objective value and its per-cell derivative.
#[derive(Debug, Clone)]
pub struct ObjectiveResult<T> {
    pub kind: ObjectiveKind,
    pub value: T,
    /// dJ/drho, one entry per cell of the evaluation grid.
    pub grad: Vec<T>,
    /// For W2 only: the debiased transport value (raw value minus the
    /// self-transport bias), the better estimate of the true squared
    /// distance.
    pub debiased: Option<T>,
}

fn check_grids<T: Scalar>(rho: &DensityField<T>, rho_star: &DensityField<T>) -> Result<()> {
    if !rho.grid().same_geometry(rho_star.grid()) {
        return Err(Error::ShapeMismatch(
            "objective needs densities on the same grid".to_string(),
        ));
    }
    Ok(())
}

/// Squared L2 misfit: `1/2 sum (rho_j - rho*_j)^2 * cellvol`.
pub fn l2<T: Scalar>(rho: &DensityField<T>, rho_star: &DensityField<T>) -> Result<ObjectiveResult<T>> {
    check_grids(rho, rho_star)?;
    let vol = rho.grid().cell_volume();
    let half = real::<T>(0.5);
    let mut value = T::zero();
    let grad: Vec<T> = rho
        .mass()
        .iter()
        .zip(rho_star.mass())
        .map(|(&a, &b)| {
            let d = a - b;
            value += half * d * d * vol;
            d * vol
        })
        .collect();
    Ok(ObjectiveResult {
        kind: ObjectiveKind::L2,
        value,
        grad,
        debiased: None,
    })
}

/// KL divergence `sum rho* log(rho*/rho)` restricted to `mask`; the
/// derivative is `-rho*/rho` there and zero elsewhere.
pub fn kl<T: Scalar>(
    rho: &DensityField<T>,
    rho_star: &DensityField<T>,
    mask: &[bool],
) -> Result<ObjectiveResult<T>> {
    check_grids(rho, rho_star)?;
    if mask.len() != rho.mass().len() {
        return Err(Error::ShapeMismatch("mask length mismatch".to_string()));
    }
    let mut value = T::zero();
    let mut grad = vec![T::zero(); mask.len()];
    for j in 0..mask.len() {
        if !mask[j] {
            continue;
        }
        let r = rho.mass()[j];
        let s = rho_star.mass()[j];
        value += s * (s / r).ln();
        grad[j] = -s / r;
    }
    Ok(ObjectiveResult {
        kind: ObjectiveKind::Kl,
        value,
        grad,
        debiased: None,
    })
}

/// JS divergence on `mask`, with derivative `1/2 log(2 rho / (rho + rho*))`.
pub fn js<T: Scalar>(
    rho: &DensityField<T>,
    rho_star: &DensityField<T>,
    mask: &[bool],
) -> Result<ObjectiveResult<T>> {
    check_grids(rho, rho_star)?;
    if mask.len() != rho.mass().len() {
        return Err(Error::ShapeMismatch("mask length mismatch".to_string()));
    }
    let half = real::<T>(0.5);
    let mut value = T::zero();
    let mut grad = vec![T::zero(); mask.len()];
    for j in 0..mask.len() {
        if !mask[j] {
            continue;
        }
        let r = rho.mass()[j];
        let s = rho_star.mass()[j];
        let mid = half * (r + s);
        value += half * (r * (r / mid).ln() + s * (s / mid).ln());
        grad[j] = half * (r / mid).ln();
    }
    Ok(ObjectiveResult {
        kind: ObjectiveKind::Js,
        value,
        grad,
        debiased: None,
    })
}

/// Entropically regularized squared quadratic Wasserstein misfit; see
/// [`transport::w2`].
pub fn w2<T: Scalar>(
    rho: &DensityField<T>,
    rho_star: &DensityField<T>,
    coarsen: usize,
    ent_reg: T,
) -> Result<ObjectiveResult<T>> {
    transport::w2(rho, rho_star, coarsen, ent_reg, transport::DEFAULT_MAX_ITER, None)
}

/// Options shared by the training loop and the CLI.
#[derive(Debug, Clone)]
pub struct ObjectiveOptions<T> {
    /// Positivity floor for the KL/JS support mask.
    pub mask_floor: T,
    /// Pooling factor for the W2 objective.
    pub w2_coarsen: usize,
    /// Entropic regularization as a fraction of the squared domain diameter.
    pub w2_reg_rel: T,
}

impl<T: Scalar> Default for ObjectiveOptions<T> {
    fn default() -> Self {
        Self {
            mask_floor: real(SUPPORT_FLOOR),
            w2_coarsen: 2,
            w2_reg_rel: real(1e-3),
        }
    }
}

/// Evaluate any objective, deriving the support mask internally for KL/JS.
pub fn evaluate<T: Scalar>(
    kind: ObjectiveKind,
    rho: &DensityField<T>,
    rho_star: &DensityField<T>,
    opts: &ObjectiveOptions<T>,
) -> Result<ObjectiveResult<T>> {
    match kind {
        ObjectiveKind::L2 => l2(rho, rho_star),
        ObjectiveKind::Kl => {
            let mask = positive_support_mask(rho, rho_star, opts.mask_floor)?;
            kl(rho, rho_star, &mask)
        }
        ObjectiveKind::Js => {
            let mask = positive_support_mask(rho, rho_star, opts.mask_floor)?;
            js(rho, rho_star, &mask)
        }
        ObjectiveKind::W2 => {
            let reg = opts.w2_reg_rel * rho.grid().diameter_sq();
            w2(rho, rho_star, opts.w2_coarsen, reg)
        }
    }
}
