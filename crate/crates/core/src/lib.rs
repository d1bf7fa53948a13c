//! Corrective control of line overloads and voltage violations in an AC
//! transmission grid.
//!
//! The crate is organised bottom-up: [`case`] holds the network model,
//! [`acpf`] solves the AC power flow, [`sensitivity`] derives linear
//! sensitivities from a decoupled load flow model, [`penalty`] defines the
//! smooth violation penalties and their piecewise-linear surrogates, [`lp`]
//! contains the simplex solver and the two per-step linear programs,
//! [`controller`] performs one corrective step, and [`simulator`] closes the
//! loop over time, with optional frequency dynamics.

pub mod acpf;
pub mod controller;
pub mod case;
pub mod data;
pub mod lp;
pub mod matpower;
pub mod penalty;
pub mod sensitivity;
pub mod simulator;
