//! Post-processing: steady state, ripple, duty, budgets and scaling.
//!
//! Averages are taken over whole coil cycles delimited by the drive-flip
//! checkpoints in the trace, so they are phase exact.

use std::f64::consts::PI;

use serde::Serialize;

use crate::actuator::{quasi_static_cycle, CycleReport, FieldProfile};
use crate::aero::{self, AeroForces};
use crate::drivetrain::{Checkpoint, Trace};
use crate::error::{Error, Result};
use crate::params::RobotConfig;
use crate::springs::{self, NaturalFrequency};

/// Standard gravity, for newtons to gram-force.
pub const G0: f64 = 9.80665;

pub fn newtons_to_grams(f: f64) -> f64 {
    f / G0 * 1e3
}

/// Cycles needed before steady state can be judged.
pub const MIN_CYCLES: usize = 20;
/// Cycles in the settling window.
pub const SETTLE_WINDOW: usize = 10;
/// Allowed spread of cycle means across the window.
pub const SETTLE_TOLERANCE: f64 = 1e-3;

/// Flip checkpoints at coil-cycle boundaries (every fourth flip).
fn cycle_bounds(trace: &Trace) -> Vec<&Checkpoint> {
    trace.checkpoints.iter().step_by(4).collect()
}

fn cycle_means(bounds: &[&Checkpoint]) -> Vec<f64> {
    bounds
        .windows(2)
        .map(|w| (w[1].state.theta_wing - w[0].state.theta_wing) / (w[1].state.t - w[0].state.t))
        .collect()
}

/// Start of the first coil cycle after which every run of ten consecutive
/// cycle-mean flywheel speeds stays within 0.1%. `None` if that never holds
/// through the end of the trace.
pub fn detect_steady_state(trace: &Trace) -> Result<Option<f64>> {
    let bounds = cycle_bounds(trace);
    let means = cycle_means(&bounds);
    if means.len() < MIN_CYCLES {
        return Err(Error::TraceTooShort(format!(
            "{} whole coil cycles, need {MIN_CYCLES}",
            means.len()
        )));
    }
    let settled = |w: &[f64]| {
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        max - min <= SETTLE_TOLERANCE * mean.abs() || max - min <= 1e-12
    };
    let ok: Vec<bool> = means.windows(SETTLE_WINDOW).map(settled).collect();
    if !ok.last().copied().unwrap_or(false) {
        return Ok(None);
    }
    let first = ok.iter().rposition(|&b| !b).map_or(0, |i| i + 1);
    Ok(Some(bounds[first].state.t))
}

/// Summary over whole cycles between two flip checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Window<'a> {
    start: &'a Checkpoint,
    end: &'a Checkpoint,
    inner: &'a [Checkpoint],
}

fn window_from(trace: &Trace, from: f64) -> Option<Window<'_>> {
    let cps = &trace.checkpoints;
    let bounds: Vec<usize> = (0..cps.len()).step_by(4).collect();
    let first = bounds
        .iter()
        .copied()
        .find(|&i| cps[i].state.t >= from - 1e-12)?;
    let last = *bounds.last()?;
    if last <= first {
        return None;
    }
    Some(Window {
        start: &cps[first],
        end: &cps[last],
        inner: &cps[first + 1..=last],
    })
}

impl Window<'_> {
    fn duration(&self) -> f64 {
        self.end.state.t - self.start.state.t
    }

    fn cycles(&self) -> usize {
        self.inner.len() / 4
    }

    fn mean_omega_wing(&self) -> f64 {
        (self.end.state.theta_wing - self.start.state.theta_wing) / self.duration()
    }
}

/// Ripple (peak-to-peak over twice the mean, in percent) and engaged
/// fraction over whole cycles from `from` to the end of the trace.
pub fn ripple_and_duty(trace: &Trace, from: f64) -> Result<(f64, f64)> {
    let w = window_from(trace, from)
        .ok_or_else(|| Error::TraceTooShort(format!("no whole coil cycle after t = {from} s")))?;
    Ok(window_ripple_duty(&w))
}

fn window_ripple_duty(w: &Window) -> (f64, f64) {
    let max = w
        .inner
        .iter()
        .map(|c| c.omega_wing_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let min = w
        .inner
        .iter()
        .map(|c| c.omega_wing_min)
        .fold(f64::INFINITY, f64::min);
    let mean = w.mean_omega_wing();
    let ripple = if mean > 0.0 {
        100.0 * (max - min) / (2.0 * mean)
    } else {
        0.0
    };
    let duty = (w.end.work.engaged_time - w.start.work.engaged_time) / w.duration();
    (ripple, duty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToggleModel {
    pub energy_drop_frac: f64,
    pub speed_drop_frac: f64,
    /// ± half the speed drop, in percent.
    pub ripple_pct: f64,
}

/// Two-state flywheel estimate: it loses `p_leak·half_period` while the
/// ratchet is open and gets it back while engaged.
pub fn flywheel_toggle_model(j: f64, f_ss: f64, p_leak: f64, half_period: f64) -> ToggleModel {
    let w = 2.0 * PI * f_ss;
    let energy = 0.5 * j * w * w;
    let energy_drop_frac = p_leak * half_period / energy;
    let speed_drop_frac = energy_drop_frac / 2.0;
    ToggleModel {
        energy_drop_frac,
        speed_drop_frac,
        ripple_pct: 100.0 * speed_drop_frac / 2.0,
    }
}

pub fn scale_lift_to_power(ltp: f64, mass_ratio: f64) -> f64 {
    ltp * mass_ratio.powf(2.0 / 3.0)
}

/// Per-beam contact force with the torque shared equally.
pub fn ratchet_beam_load(tau: f64, r_shaft: f64, n_beams: u32) -> f64 {
    tau / (r_shaft * f64::from(n_beams))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateReport {
    pub steady_state_reached: bool,
    pub settled_at_s: Option<f64>,
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub cycles_averaged: usize,
    pub f_wing_ss_hz: f64,
    pub f_wing_ss_rev_s: f64,
    pub omega_wing_ss_rad_s: f64,
    pub ripple_pct: f64,
    pub duty_engaged: f64,
    pub theta_coil_max_rad: f64,
    pub theta_coil_max_deg: f64,
    pub theta_coil_min_rad: f64,
    pub theta_coil_min_deg: f64,
    /// |θ_min| − |θ_max|
    pub swing_asymmetry_deg: f64,
    /// Largest |θ_coil| anywhere in the run, spin-up included.
    pub theta_coil_peak_rad: f64,
    pub theta_coil_peak_deg: f64,
    pub p_mech_avg_w: f64,
    pub p_mech_avg_mw: f64,
    pub p_heat_avg_w: f64,
    pub p_heat_avg_mw: f64,
    pub p_net_avg_w: f64,
    pub p_net_avg_mw: f64,
    pub p_aero_avg_w: f64,
    pub p_aero_avg_mw: f64,
    pub p_friction_avg_w: f64,
    pub p_friction_avg_mw: f64,
    pub f_lift_avg_n: f64,
    pub f_lift_avg_mg: f64,
    pub lift_to_power_g_per_w: f64,
    pub spring_torque_avg_nm: f64,
    pub load_torque_avg_nm: f64,
    pub energy_residual_j: f64,
    pub energy_residual_rel: f64,
    pub collision_warning: bool,
    pub collision_first_t_s: Option<f64>,
    pub collision_count: u64,
}

/// Cycle-averaged metrics. Without a detected steady state the report
/// averages over the second half of the trace and says so.
pub fn steady_state_report(trace: &Trace, cfg: &RobotConfig) -> Result<SteadyStateReport> {
    let settled = match detect_steady_state(trace) {
        Ok(s) => s,
        Err(Error::TraceTooShort(_)) => None,
        Err(e) => return Err(e),
    };
    let from = settled.unwrap_or(0.5 * (trace.initial.t + trace.t_end));
    let w = window_from(trace, from)
        .or_else(|| window_from(trace, trace.initial.t))
        .ok_or_else(|| Error::TraceTooShort("trace holds no whole coil cycle".to_string()))?;
    let dt = w.duration();
    let (a, b) = (&w.start.work, &w.end.work);
    let avg = |x: f64, y: f64| (y - x) / dt;
    let (ripple, duty) = window_ripple_duty(&w);
    let omega = w.mean_omega_wing();
    let th_max = w
        .inner
        .iter()
        .map(|c| c.theta_coil_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let th_min = w
        .inner
        .iter()
        .map(|c| c.theta_coil_min)
        .fold(f64::INFINITY, f64::min);
    let peak = trace
        .checkpoints
        .iter()
        .map(|c| c.theta_coil_max.max(-c.theta_coil_min))
        .chain([
            trace.initial.theta_coil.abs(),
            trace.final_state.theta_coil.abs(),
        ])
        .fold(0.0, f64::max);
    let p_mech = avg(a.mech, b.mech);
    let p_heat = avg(a.heat, b.heat);
    let p_net = avg(a.net, b.net);
    let p_aero = avg(a.aero, b.aero);
    let p_fric = avg(a.friction, b.friction);
    let lift = avg(a.lift_impulse, b.lift_impulse);
    let ledger = trace.ledger(cfg);
    let residual_rel = if ledger.w_mech != 0.0 {
        ledger.residual.abs() / ledger.w_mech.abs()
    } else {
        0.0
    };
    Ok(SteadyStateReport {
        steady_state_reached: settled.is_some(),
        settled_at_s: settled,
        window_start_s: w.start.state.t,
        window_end_s: w.end.state.t,
        cycles_averaged: w.cycles(),
        f_wing_ss_hz: omega / (2.0 * PI),
        f_wing_ss_rev_s: omega / (2.0 * PI),
        omega_wing_ss_rad_s: omega,
        ripple_pct: ripple,
        duty_engaged: duty,
        theta_coil_max_rad: th_max,
        theta_coil_max_deg: th_max.to_degrees(),
        theta_coil_min_rad: th_min,
        theta_coil_min_deg: th_min.to_degrees(),
        swing_asymmetry_deg: th_min.abs().to_degrees() - th_max.abs().to_degrees(),
        theta_coil_peak_rad: peak,
        theta_coil_peak_deg: peak.to_degrees(),
        p_mech_avg_w: p_mech,
        p_mech_avg_mw: p_mech * 1e3,
        p_heat_avg_w: p_heat,
        p_heat_avg_mw: p_heat * 1e3,
        p_net_avg_w: p_net,
        p_net_avg_mw: p_net * 1e3,
        p_aero_avg_w: p_aero,
        p_aero_avg_mw: p_aero * 1e3,
        p_friction_avg_w: p_fric,
        p_friction_avg_mw: p_fric * 1e3,
        f_lift_avg_n: lift,
        f_lift_avg_mg: newtons_to_grams(lift) * 1e3,
        lift_to_power_g_per_w: lift_to_power(lift, p_net),
        spring_torque_avg_nm: avg(a.spring_impulse, b.spring_impulse),
        load_torque_avg_nm: avg(a.load_impulse, b.load_impulse),
        energy_residual_j: ledger.residual,
        energy_residual_rel: residual_rel,
        collision_warning: trace.collision.count > 0,
        collision_first_t_s: trace.collision.first_t,
        collision_count: trace.collision.count,
    })
}

/// Grams of lift per watt of electrical power.
pub fn lift_to_power(f_lift: f64, p_net: f64) -> f64 {
    if p_net > 0.0 {
        newtons_to_grams(f_lift) / p_net
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub name: &'static str,
    pub watts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Budgets {
    pub mass_total_kg: f64,
    pub mass_total_mg: f64,
    pub lift_mg: f64,
    /// Lift in milligram-force minus the robot's mass.
    pub lift_margin_mg: f64,
    pub power: Vec<PowerRow>,
}

pub fn budgets(cfg: &RobotConfig, report: &SteadyStateReport) -> Budgets {
    let mass = cfg.total_mass();
    let lift_mg = report.f_lift_avg_mg;
    Budgets {
        mass_total_kg: mass,
        mass_total_mg: mass * 1e6,
        lift_mg,
        lift_margin_mg: lift_mg - mass * 1e6,
        power: vec![
            PowerRow {
                name: "P_mech",
                watts: report.p_mech_avg_w,
            },
            PowerRow {
                name: "P_heat",
                watts: report.p_heat_avg_w,
            },
            PowerRow {
                name: "P_net",
                watts: report.p_net_avg_w,
            },
            PowerRow {
                name: "P_aero",
                watts: report.p_aero_avg_w,
            },
            PowerRow {
                name: "P_friction",
                watts: report.p_friction_avg_w,
            },
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpringCheck {
    pub stiffness: f64,
    pub configured_stiffness: f64,
    pub max_rotation_deg: f64,
    pub required_rotation_deg: f64,
    pub ok: bool,
}

/// Closed-form numbers that need no ODE run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuasiStaticBudget {
    pub spin_rate_rev_s: f64,
    pub aero: AeroForces,
    pub damping_b: f64,
    pub friction_torque: f64,
    pub cycle: CycleReport,
    pub ti_spring: SpringCheck,
    pub steel_spring: SpringCheck,
    pub shaft: NaturalFrequency,
    pub coil_resonance_stiffness: f64,
    pub mass_total_mg: f64,
    pub lift_mg: f64,
    pub lift_margin_mg: f64,
    pub lift_to_power_g_per_w: f64,
    pub flywheel_energy_j: f64,
    pub toggle: ToggleModel,
}

pub fn quasi_static_budget(cfg: &RobotConfig, profile: &FieldProfile) -> Result<QuasiStaticBudget> {
    let f = cfg.wing.target_spin_rate;
    let omega = 2.0 * PI * f;
    let aero = aero::forces(&cfg.wing, cfg.rho_air, omega);
    let cycle = quasi_static_cycle(
        cfg,
        profile,
        cfg.drive.f_coil,
        cfg.coil.y_max,
        cfg.drive.v_max,
    )?;
    let ti_k = springs::spring_stiffness(&cfg.ti_spring)?;
    let ti_rot = springs::max_rotation(&cfg.ti_spring)?;
    let st_k = springs::spring_stiffness(&cfg.steel_spring)?;
    let st_rot = springs::max_rotation(&cfg.steel_spring)?;
    let lift_mg = newtons_to_grams(aero.f_lift) * 1e3;
    let mass_mg = cfg.total_mass() * 1e6;
    let half = 0.5 / cfg.drive.f_coil;
    Ok(QuasiStaticBudget {
        spin_rate_rev_s: f,
        aero,
        damping_b: cfg.damping_b(),
        friction_torque: cfg.losses.tau(),
        ti_spring: SpringCheck {
            stiffness: ti_k,
            configured_stiffness: cfg.k_coil,
            max_rotation_deg: ti_rot.to_degrees(),
            required_rotation_deg: cfg.coil.design_swing.to_degrees(),
            ok: ti_rot >= cfg.coil.design_swing,
        },
        steel_spring: SpringCheck {
            stiffness: st_k,
            configured_stiffness: cfg.k_con,
            max_rotation_deg: st_rot.to_degrees(),
            required_rotation_deg: 0.0,
            ok: st_rot > 0.0,
        },
        shaft: springs::natural_frequency(cfg.k_con, cfg.ratchet.shaft_inertia(), cfg.drive.f_coil),
        coil_resonance_stiffness: springs::resonance_stiffness(cfg.j_coil, cfg.drive.f_coil),
        mass_total_mg: mass_mg,
        lift_mg,
        lift_margin_mg: lift_mg - mass_mg,
        lift_to_power_g_per_w: lift_to_power(aero.f_lift, cycle.p_net_avg),
        flywheel_energy_j: 0.5 * cfg.j_wing * omega * omega,
        toggle: flywheel_toggle_model(cfg.j_wing, f, cycle.p_mech_avg, half),
        cycle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::resolve_field;
    use crate::drivetrain::simulate;
    use crate::params::paper_reference_config;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn toggle_model_reference_numbers() {
        let m = flywheel_toggle_model(5.333e-9, 47.0, 8.8e-3, 2e-3);
        // oracle: 17.6 µJ over ½·J·(2π·47)²
        let e = 0.5 * 5.333e-9 * (2.0 * PI * 47.0f64).powi(2);
        assert_relative_eq!(m.energy_drop_frac, 8.8e-3 * 2e-3 / e, max_relative = 1e-14);
        assert!((m.energy_drop_frac * 100.0 - 7.6).abs() < 0.1);
        assert!((m.speed_drop_frac * 100.0 - 3.8).abs() < 0.05);
        assert!((m.ripple_pct - 1.9).abs() < 0.02);
        assert_eq!(
            flywheel_toggle_model(5.333e-9, 47.0, 0.0, 2e-3).ripple_pct,
            0.0
        );
        let heavy = flywheel_toggle_model(2.0 * 5.333e-9, 47.0, 8.8e-3, 2e-3);
        assert_relative_eq!(heavy.ripple_pct, m.ripple_pct / 2.0, max_relative = 1e-14);
    }

    #[test]
    fn lift_to_power_scaling() {
        assert!((scale_lift_to_power(2.3, 2.0) - 3.651).abs() < 1e-3);
        assert_eq!(scale_lift_to_power(2.3, 1.0), 2.3);
        assert_relative_eq!(scale_lift_to_power(2.3, 8.0), 9.2, max_relative = 1e-14);
    }

    #[test]
    fn beam_load_redesign_ratio() {
        let before = ratchet_beam_load(1e-4, 1e-3, 6);
        let after = ratchet_beam_load(1e-4, 1.4e-3, 10);
        assert_relative_eq!(after / before, 6.0 / 14.0, max_relative = 1e-14);
        assert_relative_eq!(
            ratchet_beam_load(1e-4, 1e-3, 12),
            before / 2.0,
            max_relative = 1e-14
        );
        assert_eq!(ratchet_beam_load(0.0, 1e-3, 6), 0.0);
    }

    #[test]
    fn reference_mass_and_closed_form_lift() {
        let cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        let b = quasi_static_budget(&cfg, &p).unwrap();
        assert!((b.mass_total_mg - 133.0).abs() < 1e-9);
        assert!((b.lift_mg - 143.1).abs() < 0.5, "{}", b.lift_mg);
        assert!(b.ti_spring.ok);
        assert!(b.shaft.quasi_static);
    }

    #[test]
    fn short_trace_is_rejected() {
        let cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        let tr = simulate(&cfg, &p, 0.05).unwrap();
        assert!(matches!(
            detect_steady_state(&tr),
            Err(Error::TraceTooShort(_))
        ));
        let r = steady_state_report(&tr, &cfg).unwrap();
        assert!(!r.steady_state_reached);
    }

    #[test]
    fn unpowered_trace_settles_at_rest() {
        let mut cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        cfg.drive.v_max = 0.0;
        let tr = simulate(&cfg, &p, 0.1).unwrap();
        assert_eq!(
            detect_steady_state(&tr).unwrap(),
            Some(tr.checkpoints[0].state.t)
        );
        let r = steady_state_report(&tr, &cfg).unwrap();
        assert_eq!(r.f_wing_ss_rev_s, 0.0);
    }

    #[test]
    fn coasting_flywheel_never_engages() {
        let mut cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        cfg.drive.v_max = 0.0;
        let mut s0 = crate::drivetrain::SystemState::at_rest();
        s0.omega_wing = 2.0 * PI * 47.0;
        let tr = crate::drivetrain::simulate_from(&cfg, &p, &s0, 0.05).unwrap();
        let (ripple, duty) = ripple_and_duty(&tr, 0.0).unwrap();
        assert_eq!(duty, 0.0);
        assert!(ripple > 0.0);
    }

    /// Without losses the flywheel keeps accelerating until it catches the
    /// coil's peak speed; a trace ending inside that spin-up has no steady state.
    #[test]
    fn lossless_spin_up_never_settles() {
        let mut cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        cfg.losses.target_loss_power = None;
        cfg.losses.tau_losses = Some(0.0);
        cfg.losses.b = Some(0.0);
        let tr = simulate(&cfg, &p, 0.15).unwrap();
        assert_eq!(detect_steady_state(&tr).unwrap(), None);
    }

    proptest! {
        #[test]
        fn toggle_ripple_scales_inversely_with_inertia(
            j in 1e-10f64..1e-7, f in 1.0f64..200.0, p in 0.0f64..0.1, k in 1.1f64..10.0
        ) {
            let a = flywheel_toggle_model(j, f, p, 2e-3);
            let b = flywheel_toggle_model(j * k, f, p, 2e-3);
            prop_assert!((a.ripple_pct - k * b.ripple_pct).abs() <= 1e-12 * a.ripple_pct.max(1e-300));
        }
    }
}
