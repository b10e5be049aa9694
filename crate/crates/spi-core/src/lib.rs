//! Formal semiclassical path integrals for Lagrangians on ℝᵈ.
//!
//! The propagator near a classical path is computed as a truncated series
//! in ħ whose coefficients are sums over Feynman diagrams, with ultraviolet
//! divergences tracked as polynomials in the formal symbol `δ(0)`.

pub mod amplitude;
pub mod classical;
pub mod expr;
pub mod graphs;
pub mod green;
pub mod harness;
pub mod network;
pub mod ode;
pub mod quad;
pub mod stphase;
