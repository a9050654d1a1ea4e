//! Solvers and boundary-control optimization for Cahn–Hilliard systems with
//! dynamic boundary conditions.
//!
//! The crate discretizes the coupled bulk/boundary system
//!
//! ```text
//! ∂_t y − Δw = 0,   w = τ ∂_t y − Δy + f′(y)              in Ω × (0,T)
//! ∂_n w = 0,        ∂_t y_Γ + ∂_n y − Δ_Γ y_Γ + f_Γ′(y_Γ) = u_Γ   on Γ × (0,T)
//! ```
//!
//! with lumped finite elements in space and an energy-stable convex-split
//! implicit Euler scheme in time (τ = 0 is the pure system, τ > 0 the
//! viscous one). On top of the forward solver sit the exact discrete
//! adjoint (built as the transpose of the linearized step), the reduced
//! gradient b₀ u_Γ + q_Γ of the tracking functional, projection onto the
//! admissible control set (pointwise box plus an L² bound on ∂_t u_Γ), a
//! projected-gradient optimizer, first-order optimality diagnostics, and a
//! τ-continuation study that drives the viscous problems toward τ = 0.

pub mod adjoint;
pub mod control;
pub mod grid;
pub mod potential;
pub mod qp;
pub mod solver;
pub mod sparse;
pub mod state;

pub use grid::{BoundaryField, BulkField, Grid, GridError, GridMode, NormSpace};
pub use potential::{check_compatibility, CompatReport, Potential, PotentialError, PotentialKind};
