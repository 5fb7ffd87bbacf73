//! Magnet-coil Lorentz actuator.
//!
//! The coil (l_coil per turn, n_turns) moves through the field B(y) of the
//! magnet. The supply is a square wave at twice the coil frequency because
//! the coil crosses each pole face twice per cycle.

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{CoilSpec, DriveSignal, FieldKind, RobotConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum FieldProfile {
    /// Two opposed Gaussian lobes at ±y_p, odd in y.
    Parametric { b_peak: f64, y_p: f64, sigma: f64 },
    /// Linear interpolation over strictly increasing y.
    Tabulated { y: Vec<f64>, b: Vec<f64> },
}

impl FieldProfile {
    pub fn field_at(&self, y: f64) -> Result<f64> {
        match self {
            FieldProfile::Parametric { b_peak, y_p, sigma } => {
                let s2 = 2.0 * sigma * sigma;
                let a = y - y_p;
                let c = y + y_p;
                Ok(b_peak * ((-a * a / s2).exp() - (-c * c / s2).exp()))
            }
            FieldProfile::Tabulated { y: ys, b } => {
                let (lo, hi) = (ys[0], ys[ys.len() - 1]);
                if !(lo..=hi).contains(&y) {
                    return Err(Error::Domain(format!(
                        "y = {:.6} mm is outside the field table [{:.6}, {:.6}] mm",
                        y * 1e3,
                        lo * 1e3,
                        hi * 1e3
                    )));
                }
                let i = ys.partition_point(|&v| v <= y).clamp(1, ys.len() - 1);
                let (y0, y1) = (ys[i - 1], ys[i]);
                let f = (y - y0) / (y1 - y0);
                Ok(b[i - 1] + f * (b[i] - b[i - 1]))
            }
        }
    }

    /// Same shape with every field value multiplied by `s`.
    pub fn scaled(&self, s: f64) -> FieldProfile {
        match self {
            FieldProfile::Parametric { b_peak, y_p, sigma } => FieldProfile::Parametric {
                b_peak: b_peak * s,
                y_p: *y_p,
                sigma: *sigma,
            },
            FieldProfile::Tabulated { y, b } => FieldProfile::Tabulated {
                y: y.clone(),
                b: b.iter().map(|v| v * s).collect(),
            },
        }
    }

    /// Whether `field_at` is defined on all of [−y, y].
    pub fn covers(&self, y: f64) -> bool {
        match self {
            FieldProfile::Parametric { .. } => true,
            FieldProfile::Tabulated { y: ys, .. } => ys[0] <= -y && ys[ys.len() - 1] >= y,
        }
    }

    pub fn from_table(y: Vec<f64>, b: Vec<f64>) -> Result<FieldProfile> {
        if y.len() < 2 || y.len() != b.len() {
            return Err(Error::Domain(
                "a field table needs at least two (y, B) rows".to_string(),
            ));
        }
        if let Some(i) = y.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Domain(format!(
                "field table y is not strictly increasing at row {}",
                i + 2
            )));
        }
        if y.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "field table has a non-finite value".to_string(),
            ));
        }
        Ok(FieldProfile::Tabulated { y, b })
    }

    /// Reads a two-column CSV of y [mm] and B [T]. A non-numeric first row
    /// is taken as a header.
    pub fn load_table(path: &Path) -> Result<FieldProfile> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(file);
        let (mut ys, mut bs) = (Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::parse(
                    format!("{}:{}", path.display(), i + 1),
                    "expected two columns: y [mm], B [T]",
                ));
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|s| s.parse::<f64>()).collect();
            match parsed {
                Ok(v) => {
                    ys.push(v[0] * 1e-3);
                    bs.push(v[1]);
                }
                Err(_) if i == 0 => continue,
                Err(e) => {
                    return Err(Error::parse(
                        format!("{}:{}", path.display(), i + 1),
                        e.to_string(),
                    ))
                }
            }
        }
        FieldProfile::from_table(ys, bs)
    }
}

/// V_max·sign(sin(2π·2f_coil·t + phase)), with sign(0) = +1.
pub fn drive_voltage(drive: &DriveSignal, t: f64) -> f64 {
    if (2.0 * PI * 2.0 * drive.f_coil * t + drive.phase).sin() >= 0.0 {
        drive.v_max
    } else {
        -drive.v_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ElectricalState {
    pub v_s: f64,
    pub v_emf: f64,
    pub i_current: f64,
    pub f_coil: f64,
    pub p_mech: f64,
    pub p_heat: f64,
    pub p_net: f64,
}

/// Electrical state for a known supply voltage. The coil is purely resistive.
pub fn electrical_state_at(coil: &CoilSpec, b: f64, v_s: f64, ydot: f64) -> ElectricalState {
    let bl = b * coil.wire_length();
    let v_emf = bl * ydot;
    let i = (v_s - v_emf) / coil.resistance;
    ElectricalState {
        v_s,
        v_emf,
        i_current: i,
        f_coil: bl * i,
        p_mech: v_emf * i,
        p_heat: i * i * coil.resistance,
        p_net: v_s * i,
    }
}

pub fn electrical_state(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    y: f64,
    ydot: f64,
    t: f64,
) -> Result<ElectricalState> {
    let b = profile.field_at(y)?;
    Ok(electrical_state_at(
        &cfg.coil,
        b,
        drive_voltage(&cfg.drive, t),
        ydot,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleSample {
    pub t: f64,
    pub y: f64,
    pub ydot: f64,
    #[serde(flatten)]
    pub electrical: ElectricalState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    pub p_mech_avg: f64,
    pub p_heat_avg: f64,
    pub p_net_avg: f64,
    #[serde(skip)]
    pub samples: Vec<CycleSample>,
}

pub const DEFAULT_CYCLE_SAMPLES: usize = 8192;
const MIN_CYCLE_SAMPLES: usize = 4096;

/// Averages over one cycle of prescribed motion y = y_max·sin(2πf·t),
/// sampled at interval midpoints so no sample sits on a drive flip.
pub fn quasi_static_cycle(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    f_coil: f64,
    y_max: f64,
    v_max: f64,
) -> Result<CycleReport> {
    quasi_static_cycle_n(cfg, profile, f_coil, y_max, v_max, DEFAULT_CYCLE_SAMPLES)
}

pub fn quasi_static_cycle_n(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    f_coil: f64,
    y_max: f64,
    v_max: f64,
    n: usize,
) -> Result<CycleReport> {
    let n = n.max(MIN_CYCLE_SAMPLES);
    let drive = DriveSignal {
        v_max,
        f_coil,
        phase: cfg.drive.phase,
    };
    let w = 2.0 * PI * f_coil;
    let mut samples = Vec::with_capacity(n);
    let (mut pm, mut ph, mut pn) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let t = (i as f64 + 0.5) / (n as f64 * f_coil);
        let y = y_max * (w * t).sin();
        let ydot = y_max * w * (w * t).cos();
        let b = profile.field_at(y)?;
        let e = electrical_state_at(&cfg.coil, b, drive_voltage(&drive, t), ydot);
        pm += e.p_mech;
        ph += e.p_heat;
        pn += e.p_net;
        samples.push(CycleSample {
            t,
            y,
            ydot,
            electrical: e,
        });
    }
    let nf = n as f64;
    Ok(CycleReport {
        p_mech_avg: pm / nf,
        p_heat_avg: ph / nf,
        p_net_avg: pn / nf,
        samples,
    })
}

/// Scales `profile` so the quasi-static cycle of the configured drive
/// delivers `target` mechanical power.
///
/// P_mech is concave in the field scale s (it is s·⟨e₁V_s⟩/R − s²⟨e₁²⟩/R).
/// The root on the rising branch, between 0 and the vertex, is found by
/// bisection.
pub fn calibrate_field(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    target: f64,
) -> Result<FieldProfile> {
    let r = cfg.coil.resistance;
    let v = cfg.drive.v_max;
    let ceiling = v * v / (4.0 * r);
    if target > ceiling {
        return Err(Error::Infeasible {
            message: format!(
                "target P_mech {:.4} mW exceeds the matched-load limit (V_max/2)^2/R",
                target * 1e3
            ),
            best: ceiling,
        });
    }
    if target <= 0.0 {
        return Ok(profile.scaled(0.0));
    }
    let (f, y_max) = (cfg.drive.f_coil, cfg.coil.y_max);
    let p_mech = |s: f64| -> Result<f64> {
        Ok(quasi_static_cycle(cfg, &profile.scaled(s), f, y_max, v)?.p_mech_avg)
    };

    // Recover the quadratic's coefficients from two probes to place the vertex.
    let p1 = p_mech(1.0)?;
    let p2 = p_mech(2.0)?;
    let quad = (2.0 * p1 - p2) / 2.0;
    let lin = p1 + quad;
    if lin <= 0.0 || quad <= 0.0 {
        return Err(Error::Infeasible {
            message: "field shape delivers no positive mechanical power with this drive"
                .to_string(),
            best: 0.0,
        });
    }
    let vertex = lin / (2.0 * quad);
    let best = p_mech(vertex)?;
    if target > best {
        return Err(Error::Infeasible {
            message: format!(
                "target P_mech {:.4} mW exceeds what this field shape can deliver",
                target * 1e3
            ),
            best,
        });
    }

    let (mut lo, mut hi) = (0.0, vertex);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p_mech(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(profile.scaled(0.5 * (lo + hi)))
}

/// Builds the field profile a config describes, calibrating it when the
/// config asks for a target P_mech instead of an explicit field.
pub fn resolve_field(cfg: &RobotConfig) -> Result<FieldProfile> {
    let f = &cfg.field;
    let base = match f.kind {
        FieldKind::Parametric => FieldProfile::Parametric {
            b_peak: f.b_peak.unwrap_or(1.0),
            y_p: f.y_p,
            sigma: f.sigma,
        },
        FieldKind::Tabulated => {
            let path = f
                .table
                .as_ref()
                .ok_or_else(|| Error::Domain("tabulated field without field.table".to_string()))?;
            let p = FieldProfile::load_table(path)?;
            if !p.covers(cfg.coil.y_max) {
                return Err(Error::Domain(format!(
                    "field table does not cover the stroke +-{} mm",
                    cfg.coil.y_max * 1e3
                )));
            }
            p
        }
    };
    let explicit = f.kind == FieldKind::Parametric && f.b_peak.is_some();
    match f.target_p_mech {
        Some(target) if !explicit => calibrate_field(cfg, &base, target),
        _ => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::paper_reference_config;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> RobotConfig {
        paper_reference_config()
    }

    fn lobes(b_peak: f64) -> FieldProfile {
        FieldProfile::Parametric {
            b_peak,
            y_p: 0.8e-3,
            sigma: 0.8e-3,
        }
    }

    #[test]
    fn parametric_field_is_odd() {
        let p = lobes(0.07);
        assert_eq!(p.field_at(0.0).unwrap(), 0.0);
        for y in [0.1e-3, 0.8e-3, 1.7e-3, 5e-3] {
            assert_eq!(p.field_at(-y).unwrap(), -p.field_at(y).unwrap());
        }
        // oracle: B_peak·(1 − exp(−2y_p²/σ²)) at the lobe center
        let at_center = 0.07 * (1.0 - (-2.0f64 * 0.64 / 0.64).exp());
        assert_relative_eq!(p.field_at(0.8e-3).unwrap(), at_center, max_relative = 1e-14);
    }

    #[test]
    fn tabulated_interpolates_and_guards_coverage() {
        let p = FieldProfile::from_table(vec![-2e-3, 0.0, 2e-3], vec![-0.1, 0.0, 0.1]).unwrap();
        assert_relative_eq!(p.field_at(1e-3).unwrap(), 0.05, max_relative = 1e-14);
        assert_eq!(p.field_at(2e-3).unwrap(), 0.1);
        assert!(matches!(p.field_at(2.1e-3), Err(Error::Domain(_))));
        assert!(p.covers(1.8e-3));
        assert!(!p.covers(2.5e-3));
        assert!(FieldProfile::from_table(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn table_csv_is_in_millimetres() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        std::fs::write(&path, "y_mm,B_T\n-2,-0.1\n0,0\n2,0.1\n").unwrap();
        let p = FieldProfile::load_table(&path).unwrap();
        assert_relative_eq!(p.field_at(1e-3).unwrap(), 0.05, max_relative = 1e-14);
        std::fs::write(&path, "0,0\n-1,0.1\n").unwrap();
        assert!(FieldProfile::load_table(&path).is_err());
    }

    #[test]
    fn square_wave_runs_at_twice_coil_frequency() {
        let d = cfg().drive;
        assert_eq!(drive_voltage(&d, 0.0), 2.75);
        assert_eq!(drive_voltage(&d, 1e-9), 2.75);
        let quarter = 1.0 / (4.0 * d.f_coil);
        assert_eq!(drive_voltage(&d, quarter + 1e-9), -2.75);
        assert_eq!(drive_voltage(&d, 2.0 * quarter + 1e-9), 2.75);
        for t in [0.3e-3, 0.77e-3, 1.5e-3] {
            assert_eq!(
                drive_voltage(&d, t),
                drive_voltage(&d, t + 1.0 / (2.0 * d.f_coil))
            );
        }
    }

    #[test]
    fn stalled_coil_is_a_resistor() {
        let c = cfg();
        let e = electrical_state(&c, &lobes(0.07), 0.5e-3, 0.0, 1e-4).unwrap();
        assert_eq!(e.v_emf, 0.0);
        assert_relative_eq!(e.i_current, 2.75 / 108.0, max_relative = 1e-15);
        assert!((e.i_current - 25.46e-3).abs() < 0.01e-3);
    }

    #[test]
    fn zero_field_exerts_no_force() {
        let c = cfg();
        let e = electrical_state(&c, &lobes(0.07), 0.0, 1.3, 1e-4).unwrap();
        assert_eq!(e.f_coil, 0.0);
        assert_eq!(e.p_mech, 0.0);
        assert!(e.i_current != 0.0);
    }

    #[test]
    fn zero_field_cycle_is_resistor_only() {
        let c = cfg();
        let r = quasi_static_cycle(&c, &lobes(0.0), 250.0, 1.8e-3, 2.75).unwrap();
        assert_eq!(r.p_mech_avg, 0.0);
        // oracle: ±2.75 V across 108 Ω
        assert_relative_eq!(r.p_heat_avg, 2.75 * 2.75 / 108.0, max_relative = 1e-12);
        assert!((r.p_heat_avg - 70.0e-3).abs() < 0.1e-3);
    }

    #[test]
    fn unpowered_cycle_generates() {
        let c = cfg();
        let r = quasi_static_cycle(&c, &lobes(0.07), 250.0, 1.8e-3, 0.0).unwrap();
        assert!(r.p_mech_avg < 0.0);
        assert!(r.p_heat_avg > 0.0);
        assert!(r.p_net_avg.abs() < 1e-15);
        assert_relative_eq!(r.p_mech_avg + r.p_heat_avg, r.p_net_avg, epsilon = 1e-15);
    }

    #[test]
    fn identity_holds_at_every_sample() {
        let c = cfg();
        let p = resolve_field(&c).unwrap();
        let r = quasi_static_cycle(&c, &p, 250.0, 1.8e-3, 2.75).unwrap();
        assert!(r.samples.len() >= 4096);
        for s in &r.samples {
            let e = s.electrical;
            let scale = e.p_net.abs().max(e.p_mech.abs()).max(e.p_heat);
            assert!((e.p_net - e.p_mech - e.p_heat).abs() <= 1e-12 * scale);
            assert!(e.p_heat >= 0.0);
        }
    }

    /// Closed-form oracle: P_mech(s) = s·a − s²·c with a = ⟨e₁V_s⟩/R and
    /// c = ⟨e₁²⟩/R, so the rising root is (a − √(a² − 4c·P))/(2c).
    fn oracle_scale(c: &RobotConfig, shape: &FieldProfile, target: f64) -> f64 {
        let n = 8192;
        let (mut a, mut q) = (0.0, 0.0);
        let w = 2.0 * PI * 250.0;
        let wl = c.coil.l_coil * 384.0;
        for i in 0..n {
            let t = (i as f64 + 0.5) / (n as f64 * 250.0);
            let y = 1.8e-3 * (w * t).sin();
            let yd = 1.8e-3 * w * (w * t).cos();
            let e1 = shape.field_at(y).unwrap() * wl * yd;
            let vs = if (2.0 * w * t).sin() >= 0.0 {
                2.75
            } else {
                -2.75
            };
            a += e1 * vs / 108.0;
            q += e1 * e1 / 108.0;
        }
        a /= n as f64;
        q /= n as f64;
        (a - (a * a - 4.0 * q * target).sqrt()) / (2.0 * q)
    }

    #[test]
    fn calibration_hits_target_on_rising_branch() {
        let c = cfg();
        let shape = lobes(1.0);
        let p = calibrate_field(&c, &shape, 8.8e-3).unwrap();
        let r = quasi_static_cycle(&c, &p, 250.0, 1.8e-3, 2.75).unwrap();
        assert!((r.p_mech_avg - 8.8e-3).abs() / 8.8e-3 < 1e-3);
        let FieldProfile::Parametric { b_peak, .. } = p else {
            unreachable!()
        };
        assert_relative_eq!(
            b_peak,
            oracle_scale(&c, &shape, 8.8e-3),
            max_relative = 1e-9
        );
        assert!((b_peak - 0.0726).abs() < 0.001, "{b_peak}");
        assert!(
            r.p_heat_avg > 46e-3 && r.p_heat_avg < 56e-3,
            "{}",
            r.p_heat_avg
        );
        assert!(
            r.p_net_avg > 55e-3 && r.p_net_avg < 65e-3,
            "{}",
            r.p_net_avg
        );
    }

    #[test]
    fn calibration_of_zero_target_zeroes_field() {
        let p = calibrate_field(&cfg(), &lobes(1.0), 0.0).unwrap();
        assert_eq!(p, lobes(0.0));
    }

    #[test]
    fn matched_load_limit_is_reported() {
        match calibrate_field(&cfg(), &lobes(1.0), 20e-3) {
            Err(Error::Infeasible { best, .. }) => {
                assert_relative_eq!(best, 2.75 * 2.75 / 4.0 / 108.0, max_relative = 1e-14);
                assert!((best - 17.5e-3).abs() < 0.05e-3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_limit_is_reported() {
        match calibrate_field(&cfg(), &lobes(1.0), 15e-3) {
            Err(Error::Infeasible { best, .. }) => assert!(best < 15e-3 && best > 8.8e-3),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn power_split_identity(
            b in -0.2f64..0.2, v_s in -5.0f64..5.0, ydot in -10.0f64..10.0
        ) {
            let e = electrical_state_at(&cfg().coil, b, v_s, ydot);
            let scale = e.p_net.abs().max(e.p_mech.abs()).max(e.p_heat).max(1e-300);
            prop_assert!((e.p_net - e.p_mech - e.p_heat).abs() <= 1e-12 * scale);
            prop_assert!(e.p_heat >= 0.0);
        }

        #[test]
        fn generator_never_delivers_power(
            b_peak in 0.0f64..0.3, y_max in 0.1e-3f64..2e-3, f in 10.0f64..500.0
        ) {
            let r = quasi_static_cycle_n(&cfg(), &lobes(b_peak), f, y_max, 0.0, 4096).unwrap();
            prop_assert!(r.p_mech_avg <= 0.0);
            prop_assert!(r.p_heat_avg >= 0.0);
        }

        #[test]
        fn turns_trade_against_field(
            b in 0.0f64..0.2, v_s in -3.0f64..3.0, ydot in -5.0f64..5.0
        ) {
            let c = cfg().coil;
            let mut doubled = c.clone();
            doubled.n_turns *= 2;
            let e1 = electrical_state_at(&c, b, v_s, ydot);
            let e2 = electrical_state_at(&doubled, b / 2.0, v_s, ydot);
            prop_assert!((e1.v_emf - e2.v_emf).abs() <= 1e-12 * e1.v_emf.abs().max(1e-300));
            prop_assert!((e1.f_coil - e2.f_coil).abs() <= 1e-12 * e1.f_coil.abs().max(1e-300));
        }
    }
}
