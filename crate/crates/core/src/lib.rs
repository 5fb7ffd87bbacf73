//! Drivetrain simulation for an insect-scale spinning-wing robot.
//!
//! A resonant magnet-coil actuator drives a flywheel (the wing pair) through
//! a one-way ratchet. The crate covers quasi-steady aerodynamics, the
//! actuator's electrical model, torsion-spring sizing, the hybrid dynamics
//! with event-aware integration, and post-processing into power, lift and
//! ripple figures.

pub mod actuator;
pub mod aero;
pub mod analysis;
pub mod cli;
pub mod drivetrain;
pub mod error;
pub mod params;
pub mod springs;
pub mod units;

pub use error::{Error, Result};
pub use params::{load_config, paper_reference_config, RobotConfig};
