//! Numerical laboratory for a coefficient inverse problem in a second-order
//! mean field games system with final overdetermination.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`] - space-time grids, grid functions, stencils, quadrature, norms
//! * [`kernel`] - nonlocal interaction kernels and the reference bracket
//! * [`mfg`] - forward Crank-Nicolson solvers and data extraction
//! * [`carleman`] - weight functions and the pointwise/integral estimate checks
//! * [`transform`] - reduction of a solution pair to the (v, w) system
//! * [`inversion`] - weighted least-squares reconstruction of the kernel
//!   amplitude, plus an independent interior oracle
//! * [`harness`] - noise model, delta sweeps, slope fits, configs, reports

pub mod carleman;
pub mod grid;
pub mod harness;
pub mod inversion;
pub mod kernel;
pub mod mfg;
pub mod transform;
