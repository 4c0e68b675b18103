//! Reference-dependent positively invariant sets for polynomial constrained
//! systems.
//!
//! Given a closed-loop polynomial system, a reference-dependent Lyapunov
//! function `V(x, r)`, and polynomial constraints `c_i(x, r) >= 0`, this crate
//! computes a polynomial (or piecewise-polynomial) lower bound `Γ̂(r)` on the
//! largest level `Γ*(r)` such that the level set `{x : V(x, r) <= Γ̂(r)}` stays
//! inside the constraints for every admissible reference. The bound is
//! certified by a sum-of-squares decomposition solved as a semidefinite
//! program.
//!
//! The crate is organized as:
//!
//! - [`poly`] — sparse multivariate polynomial arithmetic, regions, moments
//! - [`sdp`] — a small dense conic SDP solver (primal-dual interior point)
//! - [`sos`] — SOS program compiler (Gram matrix parameterization) and
//!   certificate checker
//! - [`invariant`] — the level-set engine: assembles and solves the SOS
//!   programs, with optional boundary factorization and piecewise domains
//! - [`oracle`] — brute-force computation of `Γ*` for validation
//! - [`control`] — MPC-for-Tracking and Explicit Reference Governor harnesses
//!   that consume the computed sets
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `rdinvariant` binary for the file-driven pipeline.

pub mod control;
pub mod invariant;
pub mod oracle;
pub mod poly;
pub mod sdp;
pub mod sos;
