#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::OnceLock;

use spinwing::actuator::{resolve_field, FieldProfile};
use spinwing::drivetrain::{simulate, simulate_from, EventKind, SystemState, Trace};
use spinwing::RobotConfig;

pub fn reference() -> &'static (RobotConfig, FieldProfile) {
    static R: OnceLock<(RobotConfig, FieldProfile)> = OnceLock::new();
    R.get_or_init(|| {
        let cfg = spinwing::paper_reference_config();
        let profile = resolve_field(&cfg).expect("reference field");
        (cfg, profile)
    })
}

/// The 2 s reference run, shared within one test binary.
pub fn reference_trace() -> &'static Trace {
    static T: OnceLock<Trace> = OnceLock::new();
    T.get_or_init(|| {
        let (cfg, profile) = reference();
        simulate(cfg, profile, 2.0).expect("reference run")
    })
}

/// Brute-force fixed-step integrator written directly from the governing
/// equations. Shares nothing with the library but the config values and the
/// calibrated lobe amplitude.
pub struct BruteForce {
    j_c: f64,
    j_w: f64,
    k_c: f64,
    k_con: f64,
    r: f64,
    b: f64,
    tau: f64,
    n_l: f64,
    r_coil: f64,
    v_max: f64,
    f_coil: f64,
    b_peak: f64,
    y_p: f64,
    sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfState {
    pub theta_c: f64,
    pub omega_c: f64,
    pub theta_w: f64,
    pub omega_w: f64,
    pub theta_con: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BfCounts {
    pub engage: usize,
    pub disengage: usize,
}

impl BruteForce {
    pub fn new(cfg: &RobotConfig, profile: &FieldProfile) -> Self {
        let FieldProfile::Parametric { b_peak, y_p, sigma } = *profile else {
            panic!("oracle needs the parametric field");
        };
        let w = &cfg.wing;
        let c_d = 1.9 - 1.5 * (2.0 * w.alpha).cos();
        let area = w.radius * w.radius / w.aspect_ratio;
        let b = cfg.rho_air * area * (w.p_hat * w.radius).powi(3) * c_d;
        let tau = cfg.losses.target_loss_power.expect("loss power")
            / (2.0 * PI * cfg.losses.reference_spin_rate);
        BruteForce {
            j_c: 2.0 * cfg.coil.mass * cfg.coil.arm_radius.powi(2),
            j_w: w.mass_per_wing * 2.0 * (2.0 * w.radius).powi(2) / 12.0,
            k_c: cfg.k_coil,
            k_con: cfg.k_con,
            r: cfg.coil.arm_radius,
            b,
            tau,
            n_l: f64::from(cfg.coil.n_turns) * cfg.coil.l_coil,
            r_coil: cfg.coil.resistance,
            v_max: cfg.drive.v_max,
            f_coil: cfg.drive.f_coil,
            b_peak,
            y_p,
            sigma,
        }
    }

    fn field(&self, y: f64) -> f64 {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.b_peak * ((-(y - self.y_p).powi(2) / s2).exp() - (-(y + self.y_p).powi(2) / s2).exp())
    }

    fn supply(&self, t: f64) -> f64 {
        if (4.0 * PI * self.f_coil * t).sin() >= 0.0 {
            self.v_max
        } else {
            -self.v_max
        }
    }

    fn rates(&self, s: &BfState, v: f64, engaged: bool) -> [f64; 5] {
        let bl = self.field(self.r * s.theta_c) * self.n_l;
        let i = (v - bl * self.r * s.omega_c) / self.r_coil;
        let f = bl * i;
        let spring = self.k_con * s.theta_con;
        let drag = self.b * s.omega_w * s.omega_w.abs();
        let net = spring - drag;
        let fric = if s.omega_w > 0.0 {
            self.tau
        } else if s.omega_w < 0.0 {
            -self.tau
        } else {
            net.clamp(-self.tau, self.tau)
        };
        [
            s.omega_c,
            (-self.k_c * s.theta_c - spring + self.r * f) / self.j_c,
            s.omega_w,
            (net - fric) / self.j_w,
            if engaged { s.omega_c - s.omega_w } else { 0.0 },
        ]
    }

    fn add(s: &BfState, k: &[f64; 5], h: f64) -> BfState {
        BfState {
            theta_c: s.theta_c + h * k[0],
            omega_c: s.omega_c + h * k[1],
            theta_w: s.theta_w + h * k[2],
            omega_w: s.omega_w + h * k[3],
            theta_con: s.theta_con + h * k[4],
        }
    }

    fn engaged(s: &BfState) -> bool {
        s.theta_con > 0.0 || s.omega_c > s.omega_w
    }

    /// Integrates `steps` steps of `dt` from `t0`, clamping θ_con at zero
    /// after every step. Returns the final state and mode-change counts.
    pub fn run(&self, start: BfState, t0: f64, dt: f64, steps: usize) -> (BfState, BfCounts) {
        let mut s = start;
        let mut counts = BfCounts::default();
        let mut engaged = Self::engaged(&s);
        for n in 0..steps {
            let t = t0 + n as f64 * dt;
            let v = self.supply(t + 0.5 * dt);
            let k1 = self.rates(&s, v, engaged);
            let k2 = self.rates(&Self::add(&s, &k1, dt / 2.0), v, engaged);
            let k3 = self.rates(&Self::add(&s, &k2, dt / 2.0), v, engaged);
            let k4 = self.rates(&Self::add(&s, &k3, dt), v, engaged);
            let mut k = [0.0; 5];
            for i in 0..5 {
                k[i] = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
            }
            s = Self::add(&s, &k, dt);
            s.theta_con = s.theta_con.max(0.0);
            if s.omega_w < 0.0 {
                s.omega_w = 0.0;
            }
            let now = Self::engaged(&s);
            if now != engaged {
                if now {
                    counts.engage += 1;
                } else {
                    counts.disengage += 1;
                }
            }
            engaged = now;
        }
        (s, counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleComparison {
    /// Largest |Δθ_wing| over the 1 ms sample grid.
    pub worst: f64,
    /// (engage, disengage) from the event-aware run.
    pub events: (usize, usize),
    /// (engage, disengage) from the brute-force run.
    pub oracle: (usize, usize),
}

/// Runs the event-aware simulator and the brute-force stepper side by side
/// for `span` seconds from `initial`, comparing θ_wing every millisecond.
pub fn compare_with_oracle(initial: &SystemState, span: f64, dt: f64) -> OracleComparison {
    let (cfg, profile) = reference();
    let trace = simulate_from(cfg, profile, initial, span).expect("event-aware run");
    let oracle = BruteForce::new(cfg, profile);
    let per = (1e-3 / dt).round() as usize;
    let blocks = (span / 1e-3).round() as usize;
    let mut s = BfState {
        theta_c: initial.theta_coil,
        omega_c: initial.omega_coil,
        theta_w: initial.theta_wing,
        omega_w: initial.omega_wing,
        theta_con: initial.theta_con,
    };
    let mut total = (0, 0);
    let mut worst: f64 = 0.0;
    for block in 0..blocks {
        let t0 = initial.t + (block * per) as f64 * dt;
        let (next, c) = oracle.run(s, t0, dt, per);
        s = next;
        total.0 += c.engage;
        total.1 += c.disengage;
        let t = t0 + per as f64 * dt;
        let sample = trace
            .samples
            .iter()
            .find(|x| (x.state.t - t).abs() < 1e-9)
            .expect("sample on the 1 ms grid");
        worst = worst.max((sample.state.theta_wing - s.theta_w).abs());
    }
    let n = |k: EventKind| trace.events.iter().filter(|e| e.kind == k).count();
    OracleComparison {
        worst,
        events: (n(EventKind::Engage), n(EventKind::Disengage)),
        oracle: total,
    }
}
