//! Asymptotic KAM tori for Hamiltonians with time-decaying perturbations.
//!
//! The pipeline: decay envelopes and condition (#) ([`decay`]), Fourier fields on
//! time grids ([`field`]), the split Hamiltonian ([`hamiltonian`]), the transport
//! equation solver ([`homological`]), the quasi-Newton iteration ([`solver`]) and
//! a posteriori checks by direct integration ([`verify`]). [`scenario`] ties them
//! into a reproducible run and [`report`] writes its run directory.

// `!(x > 0.0)` is the NaN-rejecting form throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decay;
pub mod field;
pub mod timegrid;
pub mod homological;
pub mod hamiltonian;
pub mod solver;
pub mod verify;
pub mod scenario;
pub mod report;
