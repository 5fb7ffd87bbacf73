//! Hybrid drivetrain dynamics.
//!
//! The coil oscillates on the Ti spring, driven by the Lorentz force. While
//! the ratchet is engaged, the steel spring (deflection θ_con) couples the
//! coil to the flywheel. It disengages when θ_con returns to zero and
//! re-engages once the coil overtakes the flywheel.
//!
//! ```text
//! J_c·ω̇_c = −k_coil·θ_c − k_con·θ_con + r·F_coil(rθ_c, rω_c, t)
//! J_w·ω̇_w =  k_con·θ_con − b·ω_w² − τ_losses
//! θ̇_con   =  ω_c − ω_w   if θ_con > 0 or ω_c > ω_w, else 0
//! ```
//!
//! Integration is classical RK4 with the ratchet mode frozen over each step.
//! Drive flips are never straddled, and the ratchet and flywheel-stop guards
//! are located by bisection.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::actuator::{drive_voltage, electrical_state_at, ElectricalState, FieldProfile};
use crate::aero::{self, AeroForces};
use crate::error::{Error, Result};
use crate::params::{DriveSignal, RobotConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Engaged,
    Freewheel,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Engaged => "engaged",
            Mode::Freewheel => "freewheel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemState {
    pub t: f64,
    pub theta_coil: f64,
    pub omega_coil: f64,
    pub theta_wing: f64,
    pub omega_wing: f64,
    pub theta_con: f64,
    pub mode: Mode,
}

impl SystemState {
    pub fn at_rest() -> Self {
        SystemState {
            t: 0.0,
            theta_coil: 0.0,
            omega_coil: 0.0,
            theta_wing: 0.0,
            omega_wing: 0.0,
            theta_con: 0.0,
            mode: Mode::Freewheel,
        }
    }

    /// The ratchet switching rule applied to this state.
    pub fn classify(&self) -> Mode {
        classify(self.theta_con, self.omega_coil - self.omega_wing, 0.0)
    }
}

fn classify(theta_con: f64, slip: f64, threshold: f64) -> Mode {
    if theta_con > 0.0 || slip > threshold {
        Mode::Engaged
    } else {
        Mode::Freewheel
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateRates {
    pub theta_coil: f64,
    pub omega_coil: f64,
    pub theta_wing: f64,
    pub omega_wing: f64,
    pub theta_con: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DriveFlip,
    Engage,
    Disengage,
    FlywheelStop,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::DriveFlip => "drive_flip",
            EventKind::Engage => "engage",
            EventKind::Disengage => "disengage",
            EventKind::FlywheelStop => "flywheel_stop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
}

// State vector layout. Work integrals ride along with the dynamics so they
// get the same RK4 accuracy.
const TH_C: usize = 0;
const OM_C: usize = 1;
const TH_W: usize = 2;
const OM_W: usize = 3;
const TH_CON: usize = 4;
const W_MECH: usize = 5;
const W_HEAT: usize = 6;
const W_NET: usize = 7;
const W_AERO: usize = 8;
const W_FRIC: usize = 9;
const IMP_LIFT: usize = 10;
const IMP_SPRING: usize = 11;
const IMP_LOAD: usize = 12;
const NX: usize = 13;

type X = [f64; NX];

/// Time integrals accumulated since t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Work {
    pub mech: f64,
    pub heat: f64,
    pub net: f64,
    pub aero: f64,
    pub friction: f64,
    /// ∫F_L dt
    pub lift_impulse: f64,
    /// ∫k_con·θ_con dt
    pub spring_impulse: f64,
    /// ∫(b·ω² + friction) dt
    pub load_impulse: f64,
    /// Time spent engaged.
    pub engaged_time: f64,
}

impl Work {
    fn from_x(x: &X, engaged_time: f64) -> Work {
        Work {
            mech: x[W_MECH],
            heat: x[W_HEAT],
            net: x[W_NET],
            aero: x[W_AERO],
            friction: x[W_FRIC],
            lift_impulse: x[IMP_LIFT],
            spring_impulse: x[IMP_SPRING],
            load_impulse: x[IMP_LOAD],
            engaged_time,
        }
    }
}

struct Model<'a> {
    cfg: &'a RobotConfig,
    profile: &'a FieldProfile,
    r: f64,
    j_c: f64,
    j_w: f64,
    k_c: f64,
    k_con: f64,
    b: f64,
    tau: f64,
    lift_k: f64,
}

impl<'a> Model<'a> {
    fn new(cfg: &'a RobotConfig, profile: &'a FieldProfile) -> Self {
        let arm = cfg.wing.p_hat * cfg.wing.radius;
        let (cl, _) = aero::coefficients(cfg.wing.alpha).unwrap_or((f64::NAN, f64::NAN));
        Model {
            cfg,
            profile,
            r: cfg.coil.arm_radius,
            j_c: cfg.j_coil,
            j_w: cfg.j_wing,
            k_c: cfg.k_coil,
            k_con: cfg.k_con,
            b: cfg.damping_b(),
            tau: cfg.losses.tau(),
            lift_k: cfg.rho_air * cfg.wing.area() * arm * arm * cl,
        }
    }

    /// Friction torque. Sliding: τ against the motion. At rest: whatever
    /// holds the flywheel, up to τ either way.
    fn friction(&self, omega_w: f64, drive_torque: f64) -> f64 {
        if omega_w > 0.0 {
            self.tau
        } else if omega_w < 0.0 {
            -self.tau
        } else {
            drive_torque.clamp(-self.tau, self.tau)
        }
    }

    fn rates(&self, x: &X, v_s: f64, mode: Mode) -> Result<(X, ElectricalState)> {
        let (th, om, om_w, th_con) = (x[TH_C], x[OM_C], x[OM_W], x[TH_CON]);
        let b_field = self.profile.field_at(self.r * th)?;
        let e = electrical_state_at(&self.cfg.coil, b_field, v_s, self.r * om);
        let spring = self.k_con * th_con;
        let drag = self.b * om_w * om_w.abs();
        let fric = self.friction(om_w, spring - drag);
        let mut d = [0.0; NX];
        d[TH_C] = om;
        d[OM_C] = (-self.k_c * th - spring + self.r * e.f_coil) / self.j_c;
        d[TH_W] = om_w;
        d[OM_W] = (spring - drag - fric) / self.j_w;
        d[TH_CON] = match mode {
            Mode::Engaged => om - om_w,
            Mode::Freewheel => 0.0,
        };
        d[W_MECH] = e.p_mech;
        d[W_HEAT] = e.p_heat;
        d[W_NET] = e.p_net;
        d[W_AERO] = drag * om_w;
        d[W_FRIC] = fric * om_w;
        d[IMP_LIFT] = self.lift_k * om_w * om_w;
        d[IMP_SPRING] = spring;
        d[IMP_LOAD] = drag + fric;
        Ok((d, e))
    }

    fn rk4(&self, x: &X, h: f64, v_s: f64, mode: Mode) -> Result<X> {
        let f = |x: &X| self.rates(x, v_s, mode).map(|r| r.0);
        let add = |x: &X, k: &X, s: f64| {
            let mut y = *x;
            for i in 0..NX {
                y[i] += s * k[i];
            }
            y
        };
        let k1 = f(x)?;
        let k2 = f(&add(x, &k1, h / 2.0))?;
        let k3 = f(&add(x, &k2, h / 2.0))?;
        let k4 = f(&add(x, &k3, h))?;
        let mut y = *x;
        for i in 0..NX {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        Ok(y)
    }
}

fn to_x(s: &SystemState) -> X {
    let mut x = [0.0; NX];
    x[TH_C] = s.theta_coil;
    x[OM_C] = s.omega_coil;
    x[TH_W] = s.theta_wing;
    x[OM_W] = s.omega_wing;
    x[TH_CON] = s.theta_con;
    x
}

fn to_state(x: &X, t: f64) -> SystemState {
    SystemState {
        t,
        theta_coil: x[TH_C],
        omega_coil: x[OM_C],
        theta_wing: x[TH_W],
        omega_wing: x[OM_W],
        theta_con: x[TH_CON],
        mode: classify(x[TH_CON], x[OM_C] - x[OM_W], 0.0),
    }
}

/// Time derivative of the state at time `t`, using the ratchet rule on the
/// state itself.
pub fn derivatives(
    state: &SystemState,
    t: f64,
    cfg: &RobotConfig,
    profile: &FieldProfile,
) -> Result<StateRates> {
    let m = Model::new(cfg, profile);
    let (d, _) = m.rates(&to_x(state), drive_voltage(&cfg.drive, t), state.classify())?;
    Ok(StateRates {
        theta_coil: d[TH_C],
        omega_coil: d[OM_C],
        theta_wing: d[TH_W],
        omega_wing: d[OM_W],
        theta_con: d[TH_CON],
    })
}

/// One plain RK4 step with the mode of `state` held fixed and the supply
/// voltage taken at the step midpoint. No event handling.
pub fn rk4(
    state: &SystemState,
    h: f64,
    cfg: &RobotConfig,
    profile: &FieldProfile,
) -> Result<SystemState> {
    let m = Model::new(cfg, profile);
    let v_s = drive_voltage(&cfg.drive, state.t + h / 2.0);
    let y = m.rk4(&to_x(state), h, v_s, state.classify())?;
    Ok(to_state(&y, state.t + h))
}

/// Largest step allowed: one coil cycle over `steps_per_cycle`.
pub fn max_step(cfg: &RobotConfig) -> f64 {
    1.0 / (cfg.drive.f_coil * f64::from(cfg.integrator.steps_per_cycle))
}

/// Times where the square wave changes sign: (m − phase/π)/(4f).
fn flip_time(drive: &DriveSignal, m: i64) -> f64 {
    (m as f64 - drive.phase / PI) / (4.0 * drive.f_coil)
}

/// Index of the first flip strictly after `t` (flips within `tol` of `t`
/// count as at `t`).
fn next_flip(drive: &DriveSignal, t: f64, tol: f64) -> i64 {
    let mut m = (4.0 * drive.f_coil * t + drive.phase / PI).floor() as i64;
    while flip_time(drive, m) <= t + tol {
        m += 1;
    }
    while m > i64::MIN && flip_time(drive, m - 1) > t + tol {
        m -= 1;
    }
    m
}

const MAX_BISECTIONS: usize = 64;
const MAX_EVENTS_PER_STEP: usize = 64;

#[derive(Clone, Copy)]
enum Guard {
    Disengage,
    Engage(f64),
    Stop,
}

impl Guard {
    /// Negative once the guard has fired.
    fn value(self, x: &X) -> f64 {
        match self {
            Guard::Disengage => x[TH_CON],
            Guard::Engage(threshold) => threshold - (x[OM_C] - x[OM_W]),
            Guard::Stop => x[OM_W],
        }
    }
}

struct Stepper<'a> {
    model: Model<'a>,
    eps: f64,
    x: X,
    t: f64,
    engaged_time: f64,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a RobotConfig, profile: &'a FieldProfile, state: &SystemState) -> Self {
        Stepper {
            model: Model::new(cfg, profile),
            eps: cfg.integrator.event_tolerance,
            x: to_x(state),
            t: state.t,
            engaged_time: 0.0,
        }
    }

    fn state(&self) -> SystemState {
        to_state(&self.x, self.t)
    }

    fn fault(&self, t: f64, message: impl Into<String>) -> Error {
        Error::IntegrationFault {
            t,
            message: message.into(),
            state: Box::new(self.state()),
        }
    }

    /// Bisects for the first time in (0, h] where `guard` fires, returning a
    /// sub-step on the fired side with |g| < ε.
    fn locate(&self, h: f64, v_s: f64, mode: Mode, guard: Guard) -> Result<f64> {
        let (mut lo, mut hi) = (0.0, h);
        let mut g_hi = guard.value(&self.model.rk4(&self.x, hi, v_s, mode)?);
        for _ in 0..MAX_BISECTIONS {
            if g_hi.abs() < self.eps {
                return Ok(hi);
            }
            let mid = 0.5 * (lo + hi);
            let g = guard.value(&self.model.rk4(&self.x, mid, v_s, mode)?);
            if g < 0.0 {
                hi = mid;
                g_hi = g;
            } else {
                lo = mid;
            }
        }
        if g_hi.abs() < self.eps {
            return Ok(hi);
        }
        Err(self.fault(
            self.t + hi,
            format!("event bisection did not converge in {MAX_BISECTIONS} iterations"),
        ))
    }

    /// Advances by `h` with a constant supply voltage, handling ratchet and
    /// flywheel-stop events inside the interval.
    fn advance(&mut self, h: f64, v_s: f64, events: &mut Vec<Event>) -> Result<()> {
        let t_end = self.t + h;
        let mut remaining = h;
        let mut threshold = 0.0;
        let mut count = 0;
        loop {
            if remaining <= 0.0 {
                self.t = t_end;
                return Ok(());
            }
            let mode = classify(self.x[TH_CON], self.x[OM_C] - self.x[OM_W], threshold);
            let y = self.model.rk4(&self.x, remaining, v_s, mode)?;

            let mut guards = Vec::with_capacity(2);
            match mode {
                Mode::Engaged if y[TH_CON] < 0.0 => guards.push(Guard::Disengage),
                Mode::Freewheel if y[OM_C] - y[OM_W] > threshold => {
                    guards.push(Guard::Engage(threshold))
                }
                _ => {}
            }
            if self.x[OM_W] > 0.0 && y[OM_W] < 0.0 {
                guards.push(Guard::Stop);
            }

            if guards.is_empty() {
                let mut y = y;
                if y[OM_W] < 0.0 {
                    // stuck flywheel nudged below zero by a stage evaluation
                    y[OM_W] = 0.0;
                }
                self.accept(y, t_end, mode, events)?;
                return Ok(());
            }

            count += 1;
            if count > MAX_EVENTS_PER_STEP {
                return Err(self.fault(self.t, "too many events in one step"));
            }
            let mut first: Option<(f64, Guard)> = None;
            for g in guards {
                let at = self.locate(remaining, v_s, mode, g)?;
                if first.is_none_or(|(best, _)| at < best) {
                    first = Some((at, g));
                }
            }
            let (at, guard) = first.expect("at least one guard fired");
            let mut y = self.model.rk4(&self.x, at, v_s, mode)?;
            match guard {
                Guard::Disengage => {
                    y[TH_CON] = 0.0;
                    threshold = self.eps;
                }
                Guard::Stop => {
                    y[OM_W] = 0.0;
                    events.push(Event {
                        t: self.t + at,
                        kind: EventKind::FlywheelStop,
                    });
                }
                Guard::Engage(_) => {}
            }
            let t_at = if at >= remaining { t_end } else { self.t + at };
            remaining -= at;
            self.accept(y, t_at, mode, events)?;
        }
    }

    fn accept(&mut self, y: X, t: f64, mode: Mode, events: &mut Vec<Event>) -> Result<()> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(self.fault(t, "state became non-finite"));
        }
        let before = to_state(&self.x, self.t).mode;
        if mode == Mode::Engaged {
            self.engaged_time += t - self.t;
        }
        self.x = y;
        self.t = t;
        let after = to_state(&self.x, self.t).mode;
        if before != after {
            events.push(Event {
                t,
                kind: match after {
                    Mode::Engaged => EventKind::Engage,
                    Mode::Freewheel => EventKind::Disengage,
                },
            });
        }
        Ok(())
    }

    /// Advances by `dt`, splitting at drive flips.
    fn step_by(&mut self, dt: f64, events: &mut Vec<Event>) -> Result<()> {
        let drive = self.model.cfg.drive.clone();
        let t_end = self.t + dt;
        let tol = 1e-9 * dt;
        let mut first = true;
        while self.t < t_end - tol {
            let m = next_flip(&drive, self.t, tol);
            let tf = flip_time(&drive, m);
            let (stop, flip) = if tf < t_end - tol {
                (tf, true)
            } else {
                (t_end, (tf - t_end).abs() <= tol)
            };
            // an unsplit step uses dt itself, not (t + dt) − t
            let h = if first && stop == t_end {
                dt
            } else {
                stop - self.t
            };
            first = false;
            let v_s = drive_voltage(&drive, 0.5 * (self.t + stop));
            self.advance(h, v_s, events)?;
            self.t = stop;
            if flip {
                events.push(Event {
                    t: stop,
                    kind: EventKind::DriveFlip,
                });
            }
        }
        self.t = t_end;
        Ok(())
    }
}

/// One event-aware step of length `dt`.
pub fn step(
    state: &SystemState,
    dt: f64,
    cfg: &RobotConfig,
    profile: &FieldProfile,
) -> Result<(SystemState, Vec<Event>)> {
    let dt_max = max_step(cfg);
    if !(dt > 0.0 && dt <= dt_max * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!(
            "step {dt:e} s outside (0, {dt_max:e}] s"
        )));
    }
    let mut s = Stepper::new(cfg, profile, state);
    let mut events = Vec::new();
    s.step_by(dt, &mut events)?;
    Ok((s.state(), events))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub state: SystemState,
    pub electrical: ElectricalState,
    pub aero: AeroForces,
    pub e_total: f64,
}

/// Snapshot taken at every drive flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub state: SystemState,
    pub work: Work,
    /// Extremes since the previous flip.
    pub theta_coil_max: f64,
    pub theta_coil_min: f64,
    pub omega_wing_max: f64,
    pub omega_wing_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CollisionFlag {
    pub first_t: Option<f64>,
    /// Number of separate excursions beyond the limit.
    pub count: u64,
}

/// Arm-to-magnet collision angle.
pub const COLLISION_LIMIT: f64 = 30.0 * PI / 180.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub checkpoints: Vec<Checkpoint>,
    pub initial: SystemState,
    pub final_state: SystemState,
    pub final_work: Work,
    pub collision: CollisionFlag,
    pub f_coil: f64,
    pub dt: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyLedger {
    pub e_kin_coil: f64,
    pub e_spring_ti: f64,
    pub e_spring_steel: f64,
    pub e_kin_wing: f64,
    pub w_mech: f64,
    pub w_heat: f64,
    pub w_aero: f64,
    pub w_friction: f64,
    /// (E_total(t) − E_total(0)) − ∫(P_mech − P_aero − P_friction) dt
    pub residual: f64,
}

impl EnergyLedger {
    pub fn e_total(&self) -> f64 {
        self.e_kin_coil + self.e_spring_ti + self.e_spring_steel + self.e_kin_wing
    }
}

/// Stored energies of a state. Work integrals and residual are zero.
pub fn energy_ledger(state: &SystemState, cfg: &RobotConfig) -> EnergyLedger {
    EnergyLedger {
        e_kin_coil: 0.5 * cfg.j_coil * state.omega_coil * state.omega_coil,
        e_spring_ti: 0.5 * cfg.k_coil * state.theta_coil * state.theta_coil,
        e_spring_steel: 0.5 * cfg.k_con * state.theta_con * state.theta_con,
        e_kin_wing: 0.5 * cfg.j_wing * state.omega_wing * state.omega_wing,
        ..EnergyLedger::default()
    }
}

impl Trace {
    /// Energy accounting from t = 0 to the end of the run.
    pub fn ledger(&self, cfg: &RobotConfig) -> EnergyLedger {
        let e0 = energy_ledger(&self.initial, cfg).e_total();
        let mut l = energy_ledger(&self.final_state, cfg);
        let w = &self.final_work;
        l.w_mech = w.mech;
        l.w_heat = w.heat;
        l.w_aero = w.aero;
        l.w_friction = w.friction;
        l.residual = (l.e_total() - e0) - (w.mech - w.aero - w.friction);
        l
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Domain(format!("writing trace: {e}"));
        w.write_record(TRACE_COLUMNS).map_err(io)?;
        for s in &self.samples {
            let st = &s.state;
            let e = &s.electrical;
            let row = [
                st.t,
                st.theta_coil,
                st.omega_coil,
                st.theta_wing,
                st.omega_wing,
                st.theta_con,
            ];
            let tail = [
                e.v_s,
                e.v_emf,
                e.i_current,
                e.f_coil,
                e.p_mech,
                e.p_heat,
                s.aero.f_lift,
                s.aero.f_drag,
                s.e_total,
            ];
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(st.mode.as_str().to_string());
            rec.extend(tail.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Domain(format!("writing trace: {e}")))?;
        Ok(())
    }

    pub fn write_events_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Domain(format!("writing events: {e}"));
        w.write_record(["t", "event_kind"]).map_err(io)?;
        for e in &self.events {
            w.write_record([e.t.to_string(), e.kind.as_str().to_string()])
                .map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::Domain(format!("writing events: {e}")))?;
        Ok(())
    }
}

pub const TRACE_COLUMNS: [&str; 16] = [
    "t",
    "theta_coil",
    "omega_coil",
    "theta_wing",
    "omega_wing",
    "theta_con",
    "mode",
    "V_s",
    "V_emf",
    "I_current",
    "F_coil",
    "P_mech",
    "P_heat",
    "F_L",
    "F_D",
    "E_total",
];

fn sample(s: &Stepper, cfg: &RobotConfig) -> Result<Sample> {
    let state = s.state();
    let b = s
        .model
        .profile
        .field_at(cfg.coil.arm_radius * state.theta_coil)?;
    let electrical = electrical_state_at(
        &cfg.coil,
        b,
        drive_voltage(&cfg.drive, state.t),
        cfg.coil.arm_radius * state.omega_coil,
    );
    Ok(Sample {
        state,
        electrical,
        aero: aero::forces(&cfg.wing, cfg.rho_air, state.omega_wing.max(0.0)),
        e_total: energy_ledger(&state, cfg).e_total(),
    })
}

/// Integrates from rest (plus the configured coil seed) to `t_end`.
pub fn simulate(cfg: &RobotConfig, profile: &FieldProfile, t_end: f64) -> Result<Trace> {
    let mut initial = SystemState::at_rest();
    initial.theta_coil = cfg.integrator.seed_theta_coil;
    simulate_from(cfg, profile, &initial, t_end)
}

/// Integrates from `initial` for `duration`.
pub fn simulate_from(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    initial: &SystemState,
    duration: f64,
) -> Result<Trace> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::Domain(format!(
            "t_end must be positive (got {duration})"
        )));
    }
    aero::coefficients(cfg.wing.alpha)?;
    let dt = max_step(cfg);
    let out = cfg.integrator.output_interval;
    let t0 = initial.t;
    let t_end = t0 + duration;
    let tol = 1e-9 * dt;
    let drive = cfg.drive.clone();

    let mut s = Stepper::new(cfg, profile, initial);
    let mut events = Vec::new();
    let mut samples = vec![sample(&s, cfg)?];
    let mut checkpoints = Vec::new();
    let mut collision = CollisionFlag::default();
    let mut beyond = false;
    let (mut th_max, mut th_min) = (initial.theta_coil, initial.theta_coil);
    let (mut om_max, mut om_min) = (initial.omega_wing, initial.omega_wing);

    let mut i_grid: u64 = 1;
    let mut k_out: u64 = 1;
    let mut m_flip = next_flip(&drive, t0, tol);
    while s.t < t_end - tol {
        let tg = t0 + i_grid as f64 * dt;
        let to = t0 + k_out as f64 * out;
        let tf = flip_time(&drive, m_flip);
        let target = tg.min(to).min(tf).min(t_end);

        let v_s = drive_voltage(&drive, 0.5 * (s.t + target));
        s.advance(target - s.t, v_s, &mut events)?;
        s.t = target;

        let st = s.state();
        th_max = th_max.max(st.theta_coil);
        th_min = th_min.min(st.theta_coil);
        om_max = om_max.max(st.omega_wing);
        om_min = om_min.min(st.omega_wing);
        let now_beyond = st.theta_coil.abs() > COLLISION_LIMIT;
        if now_beyond && !beyond {
            collision.count += 1;
            collision.first_t.get_or_insert(st.t);
        }
        beyond = now_beyond;

        if (tf - target).abs() <= tol {
            events.push(Event {
                t: target,
                kind: EventKind::DriveFlip,
            });
            checkpoints.push(Checkpoint {
                state: st,
                work: Work::from_x(&s.x, s.engaged_time),
                theta_coil_max: th_max,
                theta_coil_min: th_min,
                omega_wing_max: om_max,
                omega_wing_min: om_min,
            });
            (th_max, th_min) = (st.theta_coil, st.theta_coil);
            (om_max, om_min) = (st.omega_wing, st.omega_wing);
            m_flip += 1;
        }
        if (to - target).abs() <= tol {
            samples.push(sample(&s, cfg)?);
            k_out += 1;
        }
        if (tg - target).abs() <= tol {
            i_grid += 1;
        }
    }

    Ok(Trace {
        samples,
        events,
        checkpoints,
        initial: *initial,
        final_state: s.state(),
        final_work: Work::from_x(&s.x, s.engaged_time),
        collision,
        f_coil: cfg.drive.f_coil,
        dt,
        t_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::resolve_field;
    use crate::params::paper_reference_config;
    use proptest::prelude::*;

    fn setup() -> (RobotConfig, FieldProfile) {
        let cfg = paper_reference_config();
        let p = resolve_field(&cfg).unwrap();
        (cfg, p)
    }

    fn state(th: f64, om: f64, om_w: f64, th_con: f64) -> SystemState {
        let mut s = SystemState {
            t: 0.0,
            theta_coil: th,
            omega_coil: om,
            theta_wing: 0.0,
            omega_wing: om_w,
            theta_con: th_con,
            mode: Mode::Freewheel,
        };
        s.mode = s.classify();
        s
    }

    #[test]
    fn freewheeling_flywheel_feels_no_spring() {
        let (cfg, p) = setup();
        let d = derivatives(&state(0.1, 100.0, 300.0, 0.0), 1e-4, &cfg, &p).unwrap();
        assert_eq!(d.theta_con, 0.0);
        let drag = cfg.damping_b() * 300.0 * 300.0;
        let expect = -(drag + cfg.losses.tau()) / cfg.j_wing;
        assert!((d.omega_wing - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn loaded_spring_unwinds() {
        let (cfg, p) = setup();
        let d = derivatives(&state(0.1, 100.0, 300.0, 0.01), 1e-4, &cfg, &p).unwrap();
        assert_eq!(d.theta_con, 100.0 - 300.0);
    }

    #[test]
    fn start_from_rest_moves_only_the_coil() {
        let (cfg, p) = setup();
        let s = state(1e-3, 0.0, 0.0, 0.0);
        let d = derivatives(&s, 1e-9, &cfg, &p).unwrap();
        assert_eq!(d.omega_wing, 0.0);
        assert!(d.omega_coil != 0.0);
        let rest = derivatives(&SystemState::at_rest(), 1e-9, &cfg, &p).unwrap();
        assert_eq!(rest.omega_coil, 0.0);
        assert_eq!(rest.omega_wing, 0.0);
    }

    #[test]
    fn smooth_step_is_plain_rk4() {
        let (cfg, p) = setup();
        let mut s = state(0.2, 300.0, 200.0, 0.004);
        s.t = 1.1e-4;
        let dt = max_step(&cfg);
        let (a, events) = step(&s, dt, &cfg, &p).unwrap();
        assert!(events.is_empty());
        let b = rk4(&s, dt, &cfg, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_is_split_at_drive_flip() {
        let (cfg, p) = setup();
        let dt = max_step(&cfg);
        let mut s = state(0.2, -300.0, 200.0, 0.0);
        s.t = 1e-3 - 0.5 * dt;
        let (a, events) = step(&s, dt, &cfg, &p).unwrap();
        let flips: Vec<_> = events
            .iter()
            .filter(|e| e.kind == EventKind::DriveFlip)
            .collect();
        assert_eq!(flips.len(), 1);
        assert!((flips[0].t - 1e-3).abs() < 1e-15);
        let mid = rk4(&s, 0.5 * dt, &cfg, &p).unwrap();
        let b = rk4(&mid, 0.5 * dt, &cfg, &p).unwrap();
        assert!((a.omega_coil - b.omega_coil).abs() < 1e-9);
    }

    #[test]
    fn disengage_snaps_spring_to_zero() {
        let (cfg, p) = setup();
        // spring nearly unwound, flywheel overtaking the coil
        let s = state(0.3, 100.0, 300.0, 1e-4);
        let (a, events) = step(&s, max_step(&cfg), &cfg, &p).unwrap();
        assert_eq!(a.theta_con, 0.0);
        assert_eq!(a.mode, Mode::Freewheel);
        let ev: Vec<_> = events.iter().map(|e| e.kind).collect();
        assert_eq!(ev, vec![EventKind::Disengage]);
        assert!(events[0].t > 0.0 && events[0].t < max_step(&cfg));
        // located to |θ_con| < ε: the unwind rate is ~200 rad/s
        assert!((events[0].t - 1e-4 / 200.0).abs() < 1e-7);
    }

    #[test]
    fn engage_is_detected() {
        let (cfg, p) = setup();
        let s = state(-0.3, 299.0, 300.0, 0.0);
        let (a, events) = step(&s, max_step(&cfg), &cfg, &p).unwrap();
        assert_eq!(
            events.iter().map(|e| e.kind).collect::<Vec<_>>(),
            vec![EventKind::Engage]
        );
        assert_eq!(a.mode, Mode::Engaged);
        assert!(a.theta_con > 0.0);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let (cfg, p) = setup();
        assert!(step(&SystemState::at_rest(), 2.0 * max_step(&cfg), &cfg, &p).is_err());
    }

    #[test]
    fn flywheel_ledger_at_47_rev_s() {
        let cfg = paper_reference_config();
        let mut s = SystemState::at_rest();
        s.omega_wing = 2.0 * PI * 47.0;
        let l = energy_ledger(&s, &cfg);
        assert!((l.e_kin_wing - 232.5e-6).abs() < 0.1e-6, "{}", l.e_kin_wing);
        assert_eq!(l.e_spring_steel, 0.0);
        assert_eq!(
            energy_ledger(&SystemState::at_rest(), &cfg),
            EnergyLedger::default()
        );
    }

    #[test]
    fn unpowered_run_stays_still() {
        let (mut cfg, p) = setup();
        cfg.drive.v_max = 0.0;
        let tr = simulate(&cfg, &p, 0.05).unwrap();
        assert!(tr.samples.iter().all(|s| s.state.omega_wing == 0.0));
        assert!(tr
            .samples
            .windows(2)
            .all(|w| w[1].e_total <= w[0].e_total * (1.0 + 1e-9)));
    }

    #[test]
    fn zero_seed_rest_is_equilibrium() {
        let (mut cfg, p) = setup();
        cfg.integrator.seed_theta_coil = 0.0;
        let tr = simulate(&cfg, &p, 0.01).unwrap();
        assert!(tr
            .samples
            .iter()
            .all(|s| s.state.theta_coil == 0.0 && s.state.omega_wing == 0.0));
    }

    #[test]
    fn trace_is_well_formed() {
        let (cfg, p) = setup();
        let tr = simulate(&cfg, &p, 0.05).unwrap();
        assert!(tr.samples.windows(2).all(|w| w[1].state.t > w[0].state.t));
        assert_eq!(tr.samples.len(), 501);
        assert!(tr
            .samples
            .iter()
            .all(|s| s.state.theta_con >= 0.0 && s.state.omega_wing >= 0.0));
        let flips = tr
            .events
            .iter()
            .filter(|e| e.kind == EventKind::DriveFlip)
            .count();
        assert_eq!(flips, 50);
        assert_eq!(tr.checkpoints.len(), 50);
        // every mode change between samples is backed by an event
        for w in tr.samples.windows(2) {
            if w[0].state.mode != w[1].state.mode {
                assert!(tr.events.iter().any(|e| {
                    e.t > w[0].state.t
                        && e.t <= w[1].state.t
                        && matches!(e.kind, EventKind::Engage | EventKind::Disengage)
                }));
            }
        }
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRACE_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 502);
    }

    #[test]
    fn collision_is_flagged_not_enforced() {
        let (mut cfg, p) = setup();
        cfg.integrator.seed_theta_coil = 35f64.to_radians();
        cfg.drive.v_max = 0.0;
        let tr = simulate(&cfg, &p, 0.01).unwrap();
        assert!(tr.collision.count >= 1);
        assert_eq!(tr.collision.first_t, Some(tr.samples[0].state.t + tr.dt));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ratchet_never_back_drives(
            th in -0.6f64..0.6, om in -1500.0f64..1500.0, om_w in 0.0f64..400.0, th_con in 0.0f64..0.05
        ) {
            let (cfg, p) = setup();
            let s = state(th, om, om_w, th_con);
            let (a, _) = step(&s, max_step(&cfg), &cfg, &p).unwrap();
            prop_assert!(a.theta_con >= 0.0);
            prop_assert!(a.omega_wing >= 0.0);
            prop_assert!(cfg.k_con * a.theta_con * a.omega_wing >= 0.0);
            prop_assert_eq!(a.mode, a.classify());
        }
    }
}
