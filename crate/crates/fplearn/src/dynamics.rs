//! Trajectory simulation (Euler-Maruyama), benchmark systems, and time-delay
//! embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{real, std_normal, Scalar};
use crate::velocity::VelocityModel;

/// Row-major list of d-dimensional states, with optional sample times.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    dim: usize,
    data: Vec<T>,
    times: Option<Vec<T>>,
    excursions: usize,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
            times: None,
            excursions: 0,
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * rows),
            times: None,
            excursions: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[T]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    pub fn push_timed(&mut self, t: T, row: &[T]) {
        self.push(row);
        self.times.get_or_insert_with(Vec::new).push(t);
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn times(&self) -> Option<&[T]> {
        self.times.as_deref()
    }

    /// Steps on which a learned drift was queried outside its grid.
    pub fn excursions(&self) -> usize {
        self.excursions
    }

    /// Copy of one coordinate as a scalar series.
    pub fn column(&self, axis: usize) -> Vec<T> {
        self.rows().map(|r| r[axis]).collect()
    }

    /// Trajectory with the first `fraction` of rows dropped (burn-in).
    pub fn discard_prefix_fraction(&self, fraction: T) -> Trajectory<T> {
        let skip = (real::<T>(self.len() as f64) * fraction)
            .floor()
            .to_usize()
            .unwrap_or(0)
            .min(self.len());
        let mut out = Trajectory::with_capacity(self.dim, self.len() - skip);
        for i in skip..self.len() {
            out.push(self.row(i));
        }
        if let Some(ts) = &self.times {
            out.times = Some(ts[skip..].to_vec());
        }
        out.excursions = self.excursions;
        out
    }
}

/// Built-in benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinSystem {
    VanDerPol,
    Lorenz63,
    ArctanLorenz,
}

impl BuiltinSystem {
    pub fn dim(self) -> usize {
        match self {
            BuiltinSystem::VanDerPol => 2,
            BuiltinSystem::Lorenz63 | BuiltinSystem::ArctanLorenz => 3,
        }
    }

    pub fn param_arity(self) -> usize {
        match self {
            BuiltinSystem::VanDerPol => 1,
            BuiltinSystem::Lorenz63 | BuiltinSystem::ArctanLorenz => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinSystem::VanDerPol => "vdp",
            BuiltinSystem::Lorenz63 => "lorenz63",
            BuiltinSystem::ArctanLorenz => "arctan_lorenz",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "vdp" | "van_der_pol" => Ok(BuiltinSystem::VanDerPol),
            "lorenz63" | "lorenz" => Ok(BuiltinSystem::Lorenz63),
            "arctan_lorenz" => Ok(BuiltinSystem::ArctanLorenz),
            other => Err(Error::UnknownTag(other.to_string())),
        }
    }
}

/// Exact drift of a built-in system at state `x`.
pub fn builtin_drift<T: Scalar>(system: BuiltinSystem, params: &[T], x: &[T]) -> Result<Vec<T>> {
    if params.len() != system.param_arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} parameters, got {}",
            system.name(),
            system.param_arity(),
            params.len()
        )));
    }
    if x.len() != system.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} is {}-dimensional, state has {} components",
            system.name(),
            system.dim(),
            x.len()
        )));
    }
    Ok(match system {
        BuiltinSystem::VanDerPol => {
            let c = params[0];
            vec![x[1], c * (T::one() - x[0] * x[0]) * x[1] - x[0]]
        }
        BuiltinSystem::Lorenz63 => {
            let (c1, c2, c3) = (params[0], params[1], params[2]);
            vec![
                c1 * (x[1] - x[0]),
                x[0] * (c2 - x[2]) - x[1],
                x[0] * x[1] - c3 * x[2],
            ]
        }
        BuiltinSystem::ArctanLorenz => {
            let (c1, c2, c3) = (params[0], params[1], params[2]);
            let fifty = real::<T>(50.0);
            let wrap = |u: T| fifty * (u / fifty).atan();
            vec![
                wrap(c1 * (x[1] - x[0])),
                wrap(x[0] * (c2 - x[2]) - x[1]),
                wrap(x[0] * x[1] - c3 * x[2]),
            ]
        }
    })
}

/// Drift of an SDE: a built-in system or a learned velocity model (optionally
/// rescaled in time).
#[derive(Debug, Clone)]
pub enum Drift<T> {
    Builtin {
        system: BuiltinSystem,
        params: Vec<T>,
    },
    Learned {
        model: VelocityModel<T>,
        scale: T,
    },
}

impl<T: Scalar> Drift<T> {
    pub fn dim(&self) -> usize {
        match self {
            Drift::Builtin { system, .. } => system.dim(),
            Drift::Learned { model, .. } => model.grid().dim(),
        }
    }

    /// Evaluate the drift; returns `false` when a learned model was queried
    /// outside its grid (the drift is zero there by the boundary convention).
    pub fn eval_into(&self, x: &[T], out: &mut Vec<T>) -> Result<bool> {
        match self {
            Drift::Builtin { system, params } => {
                *out = builtin_drift(*system, params, x)?;
                Ok(true)
            }
            Drift::Learned { model, scale } => {
                let (v, inside) = model.eval_point(x);
                out.clear();
                out.extend(v.into_iter().map(|vi| vi * *scale));
                Ok(inside)
            }
        }
    }
}

/// SDE specification: drift plus an isotropic diffusion with scale `sigma`,
/// related to the diffusion coefficient by `D = sigma^2 / 2`.
#[derive(Debug, Clone)]
pub struct SdeSpec<T> {
    pub drift: Drift<T>,
    pub sigma: T,
}

impl<T: Scalar> SdeSpec<T> {
    /// Build from a diffusion coefficient `D >= 0` (`sigma = sqrt(2 D)`).
    pub fn with_diffusion(drift: Drift<T>, d_coeff: T) -> Result<Self> {
        if d_coeff < T::zero() {
            return Err(Error::InvalidArgument(
                "diffusion coefficient must be >= 0".to_string(),
            ));
        }
        Ok(Self {
            drift,
            sigma: (real::<T>(2.0) * d_coeff).sqrt(),
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }
}

/// Euler-Maruyama simulation, deterministic for a given seed.
///
/// Records the initial state and then every `record_every`-th step. With
/// `sigma = 0` this is forward Euler and no random numbers are drawn.
pub fn simulate<T: Scalar>(
    spec: &SdeSpec<T>,
    x0: &[T],
    dt: T,
    steps: usize,
    record_every: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    if dt <= T::zero() || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be > 0, got {dt}")));
    }
    if record_every == 0 {
        return Err(Error::InvalidArgument(
            "record_every must be >= 1".to_string(),
        ));
    }
    let d = spec.dim();
    if x0.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "initial state has {} components, drift is {}-dimensional",
            x0.len(),
            d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = spec.sigma > T::zero();
    let sqrt_dt = dt.sqrt();
    let mut x = x0.to_vec();
    let mut v = Vec::with_capacity(d);
    let mut traj = Trajectory::with_capacity(d, steps / record_every + 2);
    traj.push_timed(T::zero(), &x);
    let mut excursions = 0usize;
    for step in 1..=steps {
        let inside = spec.drift.eval_into(&x, &mut v)?;
        if !inside {
            excursions += 1;
        }
        for i in 0..d {
            x[i] += v[i] * dt;
            if noisy {
                let xi: T = std_normal(&mut rng);
                x[i] += spec.sigma * xi * sqrt_dt;
            }
        }
        if x.iter().any(|c| !c.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        if step % record_every == 0 {
            traj.push_timed(real::<T>(step as f64) * dt, &x);
        }
    }
    traj.excursions = excursions;
    Ok(traj)
}

/// Time-delay embedding specification: embedding dimension and the delay in
/// sample steps (`tau = lag_steps * h` for a series sampled at step `h`).
#[derive(Debug, Clone, Copy)]
pub struct DelaySpec {
    pub dim: usize,
    pub lag_steps: usize,
}

/// Map a scalar series into delay vectors `(s(t), s(t - m), ...,
/// s(t - (d-1) m))`.
pub fn delay_embed<T: Scalar>(series: &[T], spec: &DelaySpec) -> Result<Trajectory<T>> {
    if spec.dim == 0 || spec.lag_steps == 0 {
        return Err(Error::InvalidArgument(
            "delay embedding needs dim >= 1 and lag_steps >= 1".to_string(),
        ));
    }
    let span = (spec.dim - 1) * spec.lag_steps;
    if series.len() <= span {
        return Err(Error::SeriesTooShort {
            needed: span,
            got: series.len(),
        });
    }
    let mut out = Trajectory::with_capacity(spec.dim, series.len() - span);
    let mut row = vec![T::zero(); spec.dim];
    for t in span..series.len() {
        for k in 0..spec.dim {
            row[k] = series[t - k * spec.lag_steps];
        }
        out.push(&row);
    }
    Ok(out)
}
