//! Pure-jump Markov processes on a finite state space: path simulation,
//! backward nonlinear Kolmogorov and HJB solvers, and Monte Carlo checks of
//! the associated backward equations and change-of-measure identities.

pub mod bsde;
pub mod cli;
pub mod control;
pub mod mc;
pub mod model;
pub mod pde;
pub mod report;
pub mod simulate;
pub mod spec;
pub mod table;
