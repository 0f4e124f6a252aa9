//! Minimal sparse/banded linear algebra for the finite-volume operators.
//!
//! The stationary and adjoint systems are banded with half-bandwidth equal to
//! the largest index stride, so a band LU with partial pivoting covers every
//! desk-scale problem; BiCGSTAB with Jacobi preconditioning takes over when
//! the band factor would not fit the memory budget (large 3-d meshes).

pub mod banded;
pub mod krylov;
pub mod sparse;

pub use banded::{BandedLu, BandedMatrix};
pub use krylov::bicgstab;
pub use sparse::CscMatrix;
