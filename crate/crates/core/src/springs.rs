//! Serpentine torsion springs.
//!
//! Each beam is a moment-loaded thin beam with rotational stiffness
//! Y·w·t³/(12l). A chain of beams acts in series, chains act in parallel,
//! and grounded (glued) segments drop out of the series count.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{Beam, Material, SpringSpec};

pub fn beam_stiffness(material: &Material, beam: &Beam) -> f64 {
    material.youngs_modulus * beam.w * beam.t.powi(3) / (12.0 * beam.l)
}

fn effective_series(spec: &SpringSpec) -> Result<u32> {
    match spec.n_series.checked_sub(spec.n_grounded) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(Error::Domain(format!(
            "no compliant segments left ({} series, {} grounded)",
            spec.n_series, spec.n_grounded
        ))),
    }
}

pub fn spring_stiffness(spec: &SpringSpec) -> Result<f64> {
    let n = effective_series(spec)?;
    Ok(f64::from(spec.n_chains) * beam_stiffness(&spec.material, &spec.beam) / f64::from(n))
}

/// Fatigue-limited rotation: constant-curvature bending puts strain
/// (t/2)·θ/l on the surface of each beam.
pub fn max_rotation(spec: &SpringSpec) -> Result<f64> {
    let n = effective_series(spec)?;
    Ok(f64::from(n) * 2.0 * spec.material.eps_max * spec.beam.l / spec.beam.t)
}

/// Stiffness that puts an inertia `j` in resonance at `f`.
pub fn resonance_stiffness(j: f64, f: f64) -> f64 {
    let w = 2.0 * PI * f;
    j * w * w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NaturalFrequency {
    pub hz: f64,
    /// `hz / f_drive`.
    pub ratio: f64,
    /// The subsystem can be treated as massless when it rings at least twice
    /// as fast as the drive.
    pub quasi_static: bool,
}

pub fn natural_frequency(k: f64, j: f64, f_drive: f64) -> NaturalFrequency {
    let hz = (k / j).sqrt() / (2.0 * PI);
    let ratio = hz / f_drive;
    NaturalFrequency {
        hz,
        ratio,
        quasi_static: ratio >= 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignBounds {
    pub l: (f64, f64),
    pub w: (f64, f64),
    pub t: (f64, f64),
    /// Grid points per searched axis.
    pub steps: usize,
    /// Largest acceptable |k − k_target|/k_target.
    pub tolerance: f64,
}

impl DesignBounds {
    /// ±50% around the titanium coil spring's beam.
    pub fn around(beam: &Beam) -> Self {
        DesignBounds {
            l: (0.5 * beam.l, 1.5 * beam.l),
            w: (0.5 * beam.w, 1.5 * beam.w),
            t: (0.5 * beam.t, 1.5 * beam.t),
            steps: 41,
            tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub n_chains: u32,
    pub n_series: u32,
    pub n_grounded: u32,
}

fn grid(range: (f64, f64), steps: usize) -> impl Iterator<Item = f64> {
    let (lo, hi) = range;
    let n = steps.max(2);
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Sizes beams for a target stiffness.
///
/// Searches a grid over (l, w). For each pair the thickness that hits the
/// target exactly is solved for and clamped into bounds. Candidates must
/// keep w > t and survive `required_swing`. Best relative error wins, ties
/// go to the lightest spring.
pub fn design_spring(
    k_target: f64,
    material: &Material,
    bounds: &DesignBounds,
    topology: Topology,
    required_swing: f64,
) -> Result<SpringSpec> {
    let make = |l, w, t| SpringSpec {
        material: material.clone(),
        beam: Beam { l, w, t },
        n_chains: topology.n_chains,
        n_series: topology.n_series,
        n_grounded: topology.n_grounded,
    };
    let n_eff = f64::from(effective_series(&make(1.0, 1.0, 1.0))?);
    let k_beam = k_target * n_eff / f64::from(topology.n_chains);

    let mut best: Option<(f64, f64, SpringSpec)> = None;
    let mut closest_k = f64::NAN;
    let mut closest_err = f64::INFINITY;
    for l in grid(bounds.l, bounds.steps) {
        for w in grid(bounds.w, bounds.steps) {
            let t_exact = (12.0 * l * k_beam / (material.youngs_modulus * w)).cbrt();
            let t = t_exact.clamp(bounds.t.0, bounds.t.1);
            if w <= t {
                continue;
            }
            let spec = make(l, w, t);
            let k = spring_stiffness(&spec)?;
            let err = (k - k_target).abs() / k_target;
            if max_rotation(&spec)? < required_swing {
                continue;
            }
            if err < closest_err {
                closest_err = err;
                closest_k = k;
            }
            let mass =
                material.density * f64::from(topology.n_chains * topology.n_series) * l * w * t;
            let better = match &best {
                None => true,
                Some((be, bm, _)) => err < be - 1e-9 || (err <= be + 1e-9 && mass < *bm),
            };
            if better {
                best = Some((err, mass, spec));
            }
        }
    }
    match best {
        Some((err, _, spec)) if err <= bounds.tolerance => Ok(spec),
        _ => Err(Error::Infeasible {
            message: format!(
                "no beam within bounds reaches {k_target:.4e} N*m/rad to {:.1}% while surviving {:.1} deg",
                bounds.tolerance * 100.0,
                required_swing.to_degrees()
            ),
            best: closest_k,
        }),
    }
}
