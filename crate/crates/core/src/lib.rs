//! Stochastic traversability evaluation and risk-aware planning.
//!
//! The stack runs bottom-up: [`gridmap`] stores terrain layers, [`risk`]
//! turns them into per-cell Gaussian risk and CVaR, [`geom`] searches a
//! long-horizon path, and [`mpc`] refines it into a kinodynamically
//! feasible trajectory with [`qp`] as the inner solver. [`sim`] closes the
//! loop for Monte Carlo studies.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod geom;
pub mod gridmap;
pub mod mpc;
pub mod polygeom;
pub mod qp;
pub mod render;
pub mod risk;
pub mod sim;

pub use error::{Error, Result};
