//! Utility-based perturbed gradient descent (UPGD) and the experiment
//! machinery around it.
//!
//! * [`nn`]: dense networks with a backward pass that yields gradients and
//!   diagonal second derivatives for weights, activations and feature masks.
//! * [`utility`]: true (ablation) and Taylor-approximated weight/feature
//!   utilities, moving averages, scaling and the backward utility recursion.
//! * [`optim`]: SGD, PGD, Anti-PGD, UPS and the UPGD family.
//! * [`tasks`]: task-free data streams (adder problems, MNIST variants).
//! * [`metrics`]: Spearman correlation and run summaries.
//! * [`harness`]: configuration, sweeps, the utility-quality probe and CSV output.

pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tasks;
pub mod utility;
