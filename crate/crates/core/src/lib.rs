//! Variational Monte Carlo with convolutional neural-network quantum states.
//!
//! The pipeline mirrors a self-learning loop: Metropolis chains sample
//! `|W(S)|^2`, every recorded sample yields a local energy and a log-derivative
//! vector, and stochastic reconfiguration turns those into a parameter update.
//! An exact-diagonalization oracle validates each stage on small lattices.

pub mod driver;
pub mod hamiltonian;
pub mod lattice;
pub mod network;
pub mod optimizer;
pub mod oracle;
pub mod sampler;
