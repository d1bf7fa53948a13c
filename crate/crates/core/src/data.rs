//! Bundled test systems.

use crate::case::Network;
use crate::matpower::parse_matpower;

/// MATPOWER text of the IEEE 118-bus test case.
pub const IEEE118_MATPOWER: &str = include_str!("../data/case118.m");

/// The IEEE 118-bus system converted to the native model.
pub fn ieee118() -> Network {
    parse_matpower(IEEE118_MATPOWER).expect("bundled case118 is valid")
}
