//! Haar wavelet collocation solver for coupled degenerate reaction-diffusion
//! systems of cardiac-tissue type: a parabolic equation for the transmembrane
//! potential v, a possibly degenerate elliptic equation for the extracellular
//! potential u_e, and gating ODEs for the recovery variables w, on boxes in
//! one, two, or three dimensions with homogeneous Neumann boundaries.
//!
//! The spatial discretization expands time derivatives and elliptic unknowns
//! in Haar wavelets and enforces the equations at dyadic collocation
//! midpoints; iterated integrals of the wavelets turn differentiation into
//! dense per-axis matrix algebra, combined across axes through Kronecker
//! products. Time stepping is semi-implicit: the gating system is advanced
//! first with frozen v, then one coupled linear system produces v and u_e at
//! the new time level. Every linear system is solved with restarted GMRES.

pub mod bidomain_model;
pub mod collocation_stepper;
pub mod dense;
pub mod haar_basis;
pub mod krylov;
pub mod verification_harness;
