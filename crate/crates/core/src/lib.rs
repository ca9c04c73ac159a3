//! Polymer melt viscosity prediction.
//!
//! The centerpiece is a physics-enforced neural network (PENN): a small MLP
//! maps a polymer fingerprint and PDI to the empirical parameters of
//! established rheological laws, and a hard-coded differentiable physics
//! graph turns those parameters plus (Mw, T, shear rate) into log10
//! viscosity. Physics-unaware ANN and GPR baselines, nonlinear curve
//! fitting of the underlying laws, and the full evaluation protocol
//! (extrapolation sweeps, parameter-distribution KL divergence,
//! extrapolation-success scoring) round out the library.

pub mod data;
pub mod eval;
pub mod fit;
pub mod gpr;
pub mod nn;
pub mod physics;
pub mod synth;
