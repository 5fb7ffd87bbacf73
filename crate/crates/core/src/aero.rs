//! Quasi-steady aerodynamics of the spinning wing pair.
//!
//! Each wing sees the air at the center-of-pressure speed v = ω·p̂R and
//! produces F = ½ρ·A·v²·C. The pair gives twice that.

use std::f64::consts::FRAC_PI_2;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::WingGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AeroForces {
    /// Total lift of both wings.
    pub f_lift: f64,
    /// Total drag of both wings.
    pub f_drag: f64,
    pub p_aero: f64,
    /// Drag torque about the spin axis.
    pub tau_aero: f64,
}

/// Lift and drag coefficients at angle of attack `alpha` (rad).
pub fn coefficients(alpha: f64) -> Result<(f64, f64)> {
    if !(0.0..=FRAC_PI_2).contains(&alpha) {
        return Err(Error::Domain(format!(
            "angle of attack {alpha} rad is outside [0, pi/2]"
        )));
    }
    let two = 2.0 * alpha;
    Ok((1.8 * two.sin(), 1.9 - 1.5 * two.cos()))
}

fn coefficients_unchecked(alpha: f64) -> (f64, f64) {
    coefficients(alpha).unwrap_or_else(|_| panic!("wing.alpha {alpha} outside [0, pi/2]"))
}

/// Forces on the pair spinning at `omega` (rad/s).
pub fn forces(geom: &WingGeometry, rho_air: f64, omega: f64) -> AeroForces {
    let (cl, cd) = coefficients_unchecked(geom.alpha);
    let arm = geom.p_hat * geom.radius;
    let v = omega * arm;
    // 2 wings × ½ρ
    let q = rho_air * geom.area() * v * v;
    let f_drag = q * cd;
    AeroForces {
        f_lift: q * cl,
        f_drag,
        p_aero: f_drag * v,
        tau_aero: arm * f_drag,
    }
}

/// b such that the drag torque is b·ω².
pub fn damping_factor(geom: &WingGeometry, rho_air: f64) -> f64 {
    let (_, cd) = coefficients_unchecked(geom.alpha);
    let arm = geom.p_hat * geom.radius;
    rho_air * geom.area() * arm.powi(3) * cd
}
