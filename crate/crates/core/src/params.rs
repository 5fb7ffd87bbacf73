//! Physical and numerical configuration.
//!
//! A config file is a TOML tree whose scalars carry unit suffixes
//! (`wing.R = "20 mm"`). Everything is stored in SI once loaded. The key
//! table in [`SCHEMA`] drives loading, serialization, `set_key` and the
//! `schema` subcommand, so adding a parameter means touching one list.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::springs;
use crate::units::{format_quantity, parse_quantity, Dimension};

#[derive(Debug, Clone, PartialEq)]
pub struct WingGeometry {
    /// Wing length R.
    pub radius: f64,
    pub aspect_ratio: f64,
    /// Angle of attack.
    pub alpha: f64,
    /// Center of pressure as a fraction of R.
    pub p_hat: f64,
    pub mass_per_wing: f64,
    pub n_wings: u32,
    /// Spin rate used for closed-form aero budgets (rev/s).
    pub target_spin_rate: f64,
}

impl WingGeometry {
    /// Planform area of one wing, R²/A_r.
    pub fn area(&self) -> f64 {
        self.radius * self.radius / self.aspect_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoilSpec {
    pub n_turns: u32,
    /// Mean turn circumference.
    pub l_coil: f64,
    pub resistance: f64,
    pub mass: f64,
    /// Radius of the arc the coil travels on.
    pub arm_radius: f64,
    /// Stroke half-amplitude used for quasi-static budgets.
    pub y_max: f64,
    /// Coil swing the Ti spring must survive.
    pub design_swing: f64,
}

impl CoilSpec {
    /// Effective conductor length l_coil·n_turns.
    pub fn wire_length(&self) -> f64 {
        self.l_coil * f64::from(self.n_turns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriveSignal {
    pub v_max: f64,
    /// Coil oscillation frequency; the supply runs at twice this.
    pub f_coil: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub youngs_modulus: f64,
    pub eps_max: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub l: f64,
    pub w: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpringSpec {
    pub material: Material,
    pub beam: Beam,
    pub n_chains: u32,
    pub n_series: u32,
    pub n_grounded: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossModel {
    pub tau_losses: Option<f64>,
    pub target_loss_power: Option<f64>,
    /// Quadratic aero damping; derived from the wing when absent.
    pub b: Option<f64>,
    /// Spin rate at which `target_loss_power` is drained (rev/s).
    pub reference_spin_rate: f64,
}

impl LossModel {
    /// Constant friction torque, resolving a power target if that was given.
    pub fn tau(&self) -> f64 {
        match (self.tau_losses, self.target_loss_power) {
            (Some(t), _) => t,
            (None, Some(p)) => p / (2.0 * PI * self.reference_spin_rate),
            (None, None) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Parametric,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub kind: FieldKind,
    /// Explicit peak field; when absent the profile is calibrated.
    pub b_peak: Option<f64>,
    pub y_p: f64,
    pub sigma: f64,
    pub table: Option<PathBuf>,
    /// Quasi-static P_mech the profile is scaled to hit.
    pub target_p_mech: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatchetSpec {
    pub shaft_radius: f64,
    pub shaft_mass: f64,
    pub n_beams: u32,
}

impl RatchetSpec {
    /// Shaft treated as a solid cylinder.
    pub fn shaft_inertia(&self) -> f64 {
        0.5 * self.shaft_mass * self.shaft_radius * self.shaft_radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSettings {
    pub steps_per_cycle: u32,
    pub event_tolerance: f64,
    pub output_interval: f64,
    /// Initial coil deflection. Rest is an equilibrium of any odd field, so
    /// a zero seed never moves.
    pub seed_theta_coil: f64,
    /// Relative tolerance when a derived quantity is also given explicitly.
    pub consistency_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassPart {
    pub name: String,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotConfig {
    pub wing: WingGeometry,
    pub coil: CoilSpec,
    pub field: FieldSpec,
    pub drive: DriveSignal,
    pub ti_spring: SpringSpec,
    pub steel_spring: SpringSpec,
    pub ratchet: RatchetSpec,
    pub k_coil: f64,
    pub k_con: f64,
    pub j_coil: f64,
    pub j_wing: f64,
    pub losses: LossModel,
    pub rho_air: f64,
    pub integrator: IntegratorSettings,
    pub mass_parts: Vec<MassPart>,
    /// Derivable keys that were given explicitly rather than derived.
    pub explicit: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub reason: String,
}

impl Violation {
    fn new(path: &str, reason: impl Into<String>) -> Self {
        Violation {
            path: path.to_string(),
            reason: reason.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Schema

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Quantity(Dimension),
    Count,
    Text,
    Parts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presence {
    Required,
    Default(&'static str),
    /// May be absent; absence has a documented meaning.
    Optional,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    pub kind: ValueKind,
    pub presence: Presence,
    pub doc: &'static str,
}

use Dimension as D;
use Presence::{Default as Def, Optional, Required};
use ValueKind::{Count, Parts, Quantity as Q, Text};

macro_rules! key {
    ($k:expr, $kind:expr, $p:expr, $doc:expr) => {
        KeySpec {
            key: $k,
            kind: $kind,
            presence: $p,
            doc: $doc,
        }
    };
}

/// Every accepted config key.
pub const SCHEMA: &[KeySpec] = &[
    key!("wing.R", Q(D::Length), Required, "wing length"),
    key!(
        "wing.aspect_ratio",
        Q(D::Dimensionless),
        Required,
        "aspect ratio R²/area"
    ),
    key!("wing.alpha", Q(D::Angle), Required, "angle of attack"),
    key!(
        "wing.p_hat",
        Q(D::Dimensionless),
        Required,
        "center of pressure as a fraction of R"
    ),
    key!(
        "wing.mass_per_wing",
        Q(D::Mass),
        Required,
        "mass of one wing"
    ),
    key!(
        "wing.n_wings",
        Count,
        Def("2"),
        "number of wings (must be 2)"
    ),
    key!(
        "wing.target_spin_rate",
        Q(D::Frequency),
        Def("47 rev/s"),
        "spin rate for closed-form aero budgets"
    ),
    key!("coil.n_turns", Count, Required, "number of turns"),
    key!(
        "coil.l_coil",
        Q(D::Length),
        Required,
        "mean turn circumference"
    ),
    key!(
        "coil.resistance",
        Q(D::Resistance),
        Required,
        "coil resistance"
    ),
    key!("coil.mass", Q(D::Mass), Required, "mass of one coil"),
    key!(
        "coil.arm_radius",
        Q(D::Length),
        Required,
        "radius of the coil path"
    ),
    key!(
        "coil.y_max",
        Q(D::Length),
        Required,
        "stroke half-amplitude for quasi-static budgets"
    ),
    key!(
        "coil.design_swing",
        Q(D::Angle),
        Def("26 deg"),
        "coil swing the Ti spring must survive"
    ),
    key!(
        "field.kind",
        Text,
        Def("parametric"),
        "parametric | tabulated"
    ),
    key!(
        "field.b_peak",
        Q(D::Field),
        Optional,
        "peak field; calibrated to field.target_p_mech when absent"
    ),
    key!("field.y_p", Q(D::Length), Def("0.8 mm"), "lobe center"),
    key!("field.sigma", Q(D::Length), Def("0.6 mm"), "lobe width"),
    key!(
        "field.table",
        Text,
        Optional,
        "CSV of y [mm], B [T] for the tabulated kind"
    ),
    key!(
        "field.target_p_mech",
        Q(D::Power),
        Optional,
        "quasi-static P_mech the profile is scaled to"
    ),
    key!(
        "drive.v_max",
        Q(D::Voltage),
        Required,
        "square-wave amplitude"
    ),
    key!(
        "drive.f_coil",
        Q(D::Frequency),
        Required,
        "coil frequency (supply runs at 2x)"
    ),
    key!(
        "drive.phase",
        Q(D::Angle),
        Def("0 rad"),
        "square-wave phase offset"
    ),
    key!("ti_spring.Y", Q(D::Pressure), Required, "Young's modulus"),
    key!(
        "ti_spring.eps_max",
        Q(D::Dimensionless),
        Required,
        "fatigue strain limit"
    ),
    key!(
        "ti_spring.density",
        Q(D::Density),
        Required,
        "material density"
    ),
    key!("ti_spring.l", Q(D::Length), Required, "beam length"),
    key!("ti_spring.w", Q(D::Length), Required, "beam width"),
    key!("ti_spring.t", Q(D::Length), Required, "beam thickness"),
    key!("ti_spring.n_chains", Count, Required, "parallel chains"),
    key!("ti_spring.n_series", Count, Required, "beams per chain"),
    key!(
        "ti_spring.n_grounded",
        Count,
        Def("0"),
        "segments rigidified by gluing"
    ),
    key!(
        "steel_spring.Y",
        Q(D::Pressure),
        Required,
        "Young's modulus"
    ),
    key!(
        "steel_spring.eps_max",
        Q(D::Dimensionless),
        Required,
        "fatigue strain limit"
    ),
    key!(
        "steel_spring.density",
        Q(D::Density),
        Required,
        "material density"
    ),
    key!("steel_spring.l", Q(D::Length), Required, "beam length"),
    key!("steel_spring.w", Q(D::Length), Required, "beam width"),
    key!("steel_spring.t", Q(D::Length), Required, "beam thickness"),
    key!("steel_spring.n_chains", Count, Required, "parallel chains"),
    key!("steel_spring.n_series", Count, Required, "beams per chain"),
    key!(
        "steel_spring.n_grounded",
        Count,
        Def("0"),
        "segments rigidified by gluing"
    ),
    key!(
        "ratchet.shaft_radius",
        Q(D::Length),
        Def("1.4 mm"),
        "inner shaft radius"
    ),
    key!(
        "ratchet.shaft_mass",
        Q(D::Mass),
        Def("7 mg"),
        "inner shaft mass"
    ),
    key!(
        "ratchet.n_beams",
        Count,
        Def("10"),
        "elastic pawl beams sharing the load"
    ),
    key!(
        "k_coil",
        Q(D::Stiffness),
        Optional,
        "coil spring stiffness; J_coil(2 pi f_coil)^2 when absent"
    ),
    key!(
        "k_con",
        Q(D::Stiffness),
        Optional,
        "ratchet spring stiffness; from steel_spring when absent"
    ),
    key!(
        "J_coil",
        Q(D::Inertia),
        Optional,
        "coil inertia; 2 m_coil r^2 when absent"
    ),
    key!(
        "J_wing",
        Q(D::Inertia),
        Optional,
        "wing inertia; rod approximation when absent"
    ),
    key!(
        "losses.tau_losses",
        Q(D::Torque),
        Optional,
        "constant friction torque (exclusive with target_loss_power)"
    ),
    key!(
        "losses.target_loss_power",
        Q(D::Power),
        Optional,
        "friction power drained at reference_spin_rate"
    ),
    key!(
        "losses.b",
        Q(D::Damping),
        Optional,
        "aero damping factor; from the wing when absent"
    ),
    key!(
        "losses.reference_spin_rate",
        Q(D::Frequency),
        Def("47.3 rev/s"),
        "spin rate for target_loss_power"
    ),
    key!("rho_air", Q(D::Density), Def("1.22 kg/m^3"), "air density"),
    key!(
        "integrator.steps_per_cycle",
        Count,
        Def("400"),
        "RK4 steps per coil cycle (>= 400, multiple of 4)"
    ),
    key!(
        "integrator.event_tolerance",
        Q(D::Dimensionless),
        Def("1e-9"),
        "guard bisection tolerance"
    ),
    key!(
        "integrator.output_interval",
        Q(D::Time),
        Def("0.1 ms"),
        "trace sample spacing"
    ),
    key!(
        "integrator.seed_theta_coil",
        Q(D::Angle),
        Def("1e-3 rad"),
        "initial coil deflection"
    ),
    key!(
        "integrator.consistency_tolerance",
        Q(D::Dimensionless),
        Def("10 %"),
        "allowed mismatch between given and derived values"
    ),
    key!(
        "mass_parts",
        Parts,
        Def("[]"),
        "array of {name, mass} tables"
    ),
];

/// Keys that can be derived and are only serialized when given explicitly.
const DERIVABLE: &[&str] = &["k_coil", "k_con", "J_coil", "J_wing"];

pub fn schema_entry(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

/// Schema as JSON, for the `schema` subcommand.
pub fn schema_json() -> serde_json::Value {
    let rows: Vec<_> = SCHEMA
        .iter()
        .map(|s| {
            let (kind, unit) = match s.kind {
                Q(d) => ("quantity", d.si_unit()),
                Count => ("count", ""),
                Text => ("text", ""),
                Parts => ("parts", "kg"),
            };
            let (required, default) = match s.presence {
                Required => (true, None),
                Def(d) => (false, Some(d)),
                Optional => (false, None),
            };
            serde_json::json!({
                "key": s.key,
                "kind": kind,
                "unit": unit,
                "required": required,
                "default": default,
                "doc": s.doc,
            })
        })
        .collect();
    serde_json::Value::Array(rows)
}

// ---------------------------------------------------------------------------
// Loading

type Flat = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&path, t, out),
            _ => {
                out.insert(path, v.clone());
            }
        }
    }
}

struct Reader<'a> {
    map: &'a Flat,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Result<Option<toml::Value>> {
        let spec = schema_entry(key).expect("key missing from schema");
        if let Some(v) = self.map.get(key) {
            return Ok(Some(v.clone()));
        }
        match spec.presence {
            Required => Err(Error::MissingKey(key.to_string())),
            Optional => Ok(None),
            Def(d) => Ok(Some(match spec.kind {
                Count => toml::Value::Integer(d.parse().expect("bad count default")),
                Parts => toml::Value::Array(vec![]),
                _ => toml::Value::String(d.to_string()),
            })),
        }
    }

    fn opt_q(&self, key: &str) -> Result<Option<f64>> {
        let dim = match schema_entry(key).map(|s| s.kind) {
            Some(Q(d)) => d,
            _ => unreachable!("{key} is not a quantity"),
        };
        match self.raw(key)? {
            None => Ok(None),
            Some(toml::Value::String(s)) => parse_quantity(&s, dim)
                .map(Some)
                .map_err(|m| Error::parse(key, m)),
            Some(toml::Value::Float(f)) => Ok(Some(f)),
            Some(toml::Value::Integer(i)) => Ok(Some(i as f64)),
            Some(other) => Err(Error::parse(
                key,
                format!(
                    "expected a quantity string or number, got {}",
                    other.type_str()
                ),
            )),
        }
    }

    fn q(&self, key: &str) -> Result<f64> {
        Ok(self.opt_q(key)?.expect("defaulted quantity"))
    }

    fn count(&self, key: &str) -> Result<u32> {
        match self.raw(key)?.expect("defaulted count") {
            toml::Value::Integer(i) => {
                u32::try_from(i).map_err(|_| Error::parse(key, format!("{i} is not a valid count")))
            }
            toml::Value::String(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::parse(key, format!("`{s}` is not a valid count"))),
            other => Err(Error::parse(
                key,
                format!("expected an integer, got {}", other.type_str()),
            )),
        }
    }

    fn opt_text(&self, key: &str) -> Result<Option<String>> {
        match self.raw(key)? {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(Error::parse(
                key,
                format!("expected a string, got {}", other.type_str()),
            )),
        }
    }

    fn parts(&self, key: &str) -> Result<Vec<MassPart>> {
        let arr = match self.raw(key)?.expect("defaulted parts") {
            toml::Value::Array(a) => a,
            other => {
                return Err(Error::parse(
                    key,
                    format!("expected an array of tables, got {}", other.type_str()),
                ))
            }
        };
        arr.iter()
            .enumerate()
            .map(|(i, item)| {
                let at = format!("{key}[{i}]");
                let t = item
                    .as_table()
                    .ok_or_else(|| Error::parse(&at, "expected a table with name and mass"))?;
                for k in t.keys() {
                    if k != "name" && k != "mass" {
                        return Err(Error::UnknownKey(format!("{at}.{k}")));
                    }
                }
                let name = t
                    .get("name")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| Error::MissingKey(format!("{at}.name")))?
                    .to_string();
                let mass = match t.get("mass") {
                    Some(toml::Value::String(s)) => parse_quantity(s, D::Mass)
                        .map_err(|m| Error::parse(format!("{at}.mass"), m))?,
                    Some(toml::Value::Float(f)) => *f,
                    Some(toml::Value::Integer(i)) => *i as f64,
                    Some(_) => return Err(Error::parse(format!("{at}.mass"), "expected a mass")),
                    None => return Err(Error::MissingKey(format!("{at}.mass"))),
                };
                Ok(MassPart { name, mass })
            })
            .collect()
    }
}

fn spring_from(r: &Reader, p: &str) -> Result<SpringSpec> {
    let k = |s: &str| format!("{p}.{s}");
    Ok(SpringSpec {
        material: Material {
            youngs_modulus: r.q(&k("Y"))?,
            eps_max: r.q(&k("eps_max"))?,
            density: r.q(&k("density"))?,
        },
        beam: Beam {
            l: r.q(&k("l"))?,
            w: r.q(&k("w"))?,
            t: r.q(&k("t"))?,
        },
        n_chains: r.count(&k("n_chains"))?,
        n_series: r.count(&k("n_series"))?,
        n_grounded: r.count(&k("n_grounded"))?,
    })
}

fn from_flat(map: &Flat, base_dir: Option<&Path>) -> Result<RobotConfig> {
    for key in map.keys() {
        if schema_entry(key).is_none() {
            return Err(Error::UnknownKey(key.clone()));
        }
    }
    let r = Reader { map };

    let wing = WingGeometry {
        radius: r.q("wing.R")?,
        aspect_ratio: r.q("wing.aspect_ratio")?,
        alpha: r.q("wing.alpha")?,
        p_hat: r.q("wing.p_hat")?,
        mass_per_wing: r.q("wing.mass_per_wing")?,
        n_wings: r.count("wing.n_wings")?,
        target_spin_rate: r.q("wing.target_spin_rate")?,
    };
    let coil = CoilSpec {
        n_turns: r.count("coil.n_turns")?,
        l_coil: r.q("coil.l_coil")?,
        resistance: r.q("coil.resistance")?,
        mass: r.q("coil.mass")?,
        arm_radius: r.q("coil.arm_radius")?,
        y_max: r.q("coil.y_max")?,
        design_swing: r.q("coil.design_swing")?,
    };
    let kind = match r.opt_text("field.kind")?.as_deref() {
        Some("parametric") => FieldKind::Parametric,
        Some("tabulated") => FieldKind::Tabulated,
        Some(other) => {
            return Err(Error::parse(
                "field.kind",
                format!("`{other}` is not one of parametric, tabulated"),
            ))
        }
        None => unreachable!(),
    };
    let table = r.opt_text("field.table")?.map(|t| {
        let p = PathBuf::from(t);
        match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        }
    });
    let field = FieldSpec {
        kind,
        b_peak: r.opt_q("field.b_peak")?,
        y_p: r.q("field.y_p")?,
        sigma: r.q("field.sigma")?,
        table,
        target_p_mech: r.opt_q("field.target_p_mech")?,
    };
    let drive = DriveSignal {
        v_max: r.q("drive.v_max")?,
        f_coil: r.q("drive.f_coil")?,
        phase: r.q("drive.phase")?,
    };
    let ti_spring = spring_from(&r, "ti_spring")?;
    let steel_spring = spring_from(&r, "steel_spring")?;
    let ratchet = RatchetSpec {
        shaft_radius: r.q("ratchet.shaft_radius")?,
        shaft_mass: r.q("ratchet.shaft_mass")?,
        n_beams: r.count("ratchet.n_beams")?,
    };
    let losses = LossModel {
        tau_losses: r.opt_q("losses.tau_losses")?,
        target_loss_power: r.opt_q("losses.target_loss_power")?,
        b: r.opt_q("losses.b")?,
        reference_spin_rate: r.q("losses.reference_spin_rate")?,
    };
    let integrator = IntegratorSettings {
        steps_per_cycle: r.count("integrator.steps_per_cycle")?,
        event_tolerance: r.q("integrator.event_tolerance")?,
        output_interval: r.q("integrator.output_interval")?,
        seed_theta_coil: r.q("integrator.seed_theta_coil")?,
        consistency_tolerance: r.q("integrator.consistency_tolerance")?,
    };

    let explicit: BTreeSet<String> = DERIVABLE
        .iter()
        .filter(|k| map.contains_key(**k))
        .map(|k| k.to_string())
        .collect();

    let j_coil = match r.opt_q("J_coil")? {
        Some(j) => j,
        None => derived_j_coil(&coil),
    };
    let j_wing = match r.opt_q("J_wing")? {
        Some(j) => j,
        None => derived_j_wing(&wing),
    };
    let k_coil = match r.opt_q("k_coil")? {
        Some(k) => k,
        None => springs::resonance_stiffness(j_coil, drive.f_coil),
    };
    let k_con = match r.opt_q("k_con")? {
        Some(k) => k,
        None => springs::spring_stiffness(&steel_spring).unwrap_or(f64::NAN),
    };

    let cfg = RobotConfig {
        wing,
        coil,
        field,
        drive,
        ti_spring,
        steel_spring,
        ratchet,
        k_coil,
        k_con,
        j_coil,
        j_wing,
        losses,
        rho_air: r.q("rho_air")?,
        integrator,
        mass_parts: r.parts("mass_parts")?,
        explicit,
    };
    let violations = validate(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Validation(violations))
    }
}

/// J_coil = 2·m_coil·r² (coil plus its balancing dead coil).
pub fn derived_j_coil(coil: &CoilSpec) -> f64 {
    2.0 * coil.mass * coil.arm_radius * coil.arm_radius
}

/// Uniform rod spanning both wings: (1/12)·m_total·(2R)².
pub fn derived_j_wing(wing: &WingGeometry) -> f64 {
    let m = wing.mass_per_wing * f64::from(wing.n_wings);
    let span = 2.0 * wing.radius;
    m * span * span / 12.0
}

/// Parses config text. Relative table paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RobotConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::parse(span_key(text, &e), e.message().to_string()))?;
    let mut flat = Flat::new();
    flatten("", &table, &mut flat);
    from_flat(&flat, base_dir)
}

fn span_key(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let line = text[..span.start].matches('\n').count() + 1;
            format!("line {line}")
        }
        None => "<document>".to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<RobotConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent())
}

// ---------------------------------------------------------------------------
// Serialization

fn q(v: f64, d: Dimension) -> toml::Value {
    toml::Value::String(format_quantity(v, d))
}

fn n(v: u32) -> toml::Value {
    toml::Value::Integer(i64::from(v))
}

fn spring_to(out: &mut Flat, p: &str, s: &SpringSpec) {
    let k = |s: &str| format!("{p}.{s}");
    out.insert(k("Y"), q(s.material.youngs_modulus, D::Pressure));
    out.insert(k("eps_max"), q(s.material.eps_max, D::Dimensionless));
    out.insert(k("density"), q(s.material.density, D::Density));
    out.insert(k("l"), q(s.beam.l, D::Length));
    out.insert(k("w"), q(s.beam.w, D::Length));
    out.insert(k("t"), q(s.beam.t, D::Length));
    out.insert(k("n_chains"), n(s.n_chains));
    out.insert(k("n_series"), n(s.n_series));
    out.insert(k("n_grounded"), n(s.n_grounded));
}

impl RobotConfig {
    fn to_flat(&self) -> Flat {
        let mut m = Flat::new();
        let w = &self.wing;
        m.insert("wing.R".into(), q(w.radius, D::Length));
        m.insert(
            "wing.aspect_ratio".into(),
            q(w.aspect_ratio, D::Dimensionless),
        );
        m.insert("wing.alpha".into(), q(w.alpha, D::Angle));
        m.insert("wing.p_hat".into(), q(w.p_hat, D::Dimensionless));
        m.insert("wing.mass_per_wing".into(), q(w.mass_per_wing, D::Mass));
        m.insert("wing.n_wings".into(), n(w.n_wings));
        m.insert(
            "wing.target_spin_rate".into(),
            q(w.target_spin_rate, D::Frequency),
        );
        let c = &self.coil;
        m.insert("coil.n_turns".into(), n(c.n_turns));
        m.insert("coil.l_coil".into(), q(c.l_coil, D::Length));
        m.insert("coil.resistance".into(), q(c.resistance, D::Resistance));
        m.insert("coil.mass".into(), q(c.mass, D::Mass));
        m.insert("coil.arm_radius".into(), q(c.arm_radius, D::Length));
        m.insert("coil.y_max".into(), q(c.y_max, D::Length));
        m.insert("coil.design_swing".into(), q(c.design_swing, D::Angle));
        let f = &self.field;
        let kind = match f.kind {
            FieldKind::Parametric => "parametric",
            FieldKind::Tabulated => "tabulated",
        };
        m.insert("field.kind".into(), toml::Value::String(kind.into()));
        if let Some(b) = f.b_peak {
            m.insert("field.b_peak".into(), q(b, D::Field));
        }
        m.insert("field.y_p".into(), q(f.y_p, D::Length));
        m.insert("field.sigma".into(), q(f.sigma, D::Length));
        if let Some(t) = &f.table {
            m.insert(
                "field.table".into(),
                toml::Value::String(t.to_string_lossy().into_owned()),
            );
        }
        if let Some(p) = f.target_p_mech {
            m.insert("field.target_p_mech".into(), q(p, D::Power));
        }
        m.insert("drive.v_max".into(), q(self.drive.v_max, D::Voltage));
        m.insert("drive.f_coil".into(), q(self.drive.f_coil, D::Frequency));
        m.insert("drive.phase".into(), q(self.drive.phase, D::Angle));
        spring_to(&mut m, "ti_spring", &self.ti_spring);
        spring_to(&mut m, "steel_spring", &self.steel_spring);
        m.insert(
            "ratchet.shaft_radius".into(),
            q(self.ratchet.shaft_radius, D::Length),
        );
        m.insert(
            "ratchet.shaft_mass".into(),
            q(self.ratchet.shaft_mass, D::Mass),
        );
        m.insert("ratchet.n_beams".into(), n(self.ratchet.n_beams));
        for (key, v, d) in [
            ("k_coil", self.k_coil, D::Stiffness),
            ("k_con", self.k_con, D::Stiffness),
            ("J_coil", self.j_coil, D::Inertia),
            ("J_wing", self.j_wing, D::Inertia),
        ] {
            if self.explicit.contains(key) {
                m.insert(key.into(), q(v, d));
            }
        }
        let l = &self.losses;
        if let Some(t) = l.tau_losses {
            m.insert("losses.tau_losses".into(), q(t, D::Torque));
        }
        if let Some(p) = l.target_loss_power {
            m.insert("losses.target_loss_power".into(), q(p, D::Power));
        }
        if let Some(b) = l.b {
            m.insert("losses.b".into(), q(b, D::Damping));
        }
        m.insert(
            "losses.reference_spin_rate".into(),
            q(l.reference_spin_rate, D::Frequency),
        );
        m.insert("rho_air".into(), q(self.rho_air, D::Density));
        let i = &self.integrator;
        m.insert("integrator.steps_per_cycle".into(), n(i.steps_per_cycle));
        m.insert(
            "integrator.event_tolerance".into(),
            q(i.event_tolerance, D::Dimensionless),
        );
        m.insert(
            "integrator.output_interval".into(),
            q(i.output_interval, D::Time),
        );
        m.insert(
            "integrator.seed_theta_coil".into(),
            q(i.seed_theta_coil, D::Angle),
        );
        m.insert(
            "integrator.consistency_tolerance".into(),
            q(i.consistency_tolerance, D::Dimensionless),
        );
        let parts = self
            .mass_parts
            .iter()
            .map(|p| {
                let mut t = toml::Table::new();
                t.insert("name".into(), toml::Value::String(p.name.clone()));
                t.insert("mass".into(), q(p.mass, D::Mass));
                toml::Value::Table(t)
            })
            .collect();
        m.insert("mass_parts".into(), toml::Value::Array(parts));
        m
    }

    /// Serializes every key in SI. Loading the result gives back an equal config.
    pub fn to_toml_string(&self) -> String {
        let mut root = toml::Table::new();
        for (key, v) in self.to_flat() {
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("empty key");
            let mut t = &mut root;
            for p in parts {
                t = t
                    .entry(p)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("key collides with a table");
            }
            t.insert(leaf.into(), v);
        }
        toml::to_string(&root).expect("config serializes")
    }

    /// Overrides one key (same syntax as the file) and re-derives dependent
    /// values. Used by sweeps and tuning.
    pub fn with_key(&self, key: &str, value: &str) -> Result<RobotConfig> {
        self.with_keys([(key, value)])
    }

    /// Applies several overrides at once; validation sees only the final set.
    pub fn with_keys<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<RobotConfig> {
        let mut flat = self.to_flat();
        for (key, value) in overrides {
            let spec = schema_entry(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
            let v =
                match spec.kind {
                    Count => toml::Value::Integer(value.trim().parse().map_err(|_| {
                        Error::parse(key, format!("`{value}` is not a valid count"))
                    })?),
                    Parts => return Err(Error::parse(key, "mass_parts cannot be overridden")),
                    _ => toml::Value::String(value.to_string()),
                };
            if key == "losses.tau_losses" {
                flat.remove("losses.target_loss_power");
            } else if key == "losses.target_loss_power" {
                flat.remove("losses.tau_losses");
            }
            flat.insert(key.to_string(), v);
        }
        from_flat(&flat, None)
    }

    /// Same as [`with_key`](Self::with_key) for an SI value.
    pub fn with_si(&self, key: &str, value: f64) -> Result<RobotConfig> {
        match schema_entry(key).map(|s| s.kind) {
            Some(Count) => self.with_key(key, &format!("{}", value.round())),
            _ => self.with_key(key, &format!("{value}")),
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_parts.iter().map(|p| p.mass).sum()
    }

    /// Quadratic aero damping, explicit or derived from the wing.
    pub fn damping_b(&self) -> f64 {
        self.losses
            .b
            .unwrap_or_else(|| crate::aero::damping_factor(&self.wing, self.rho_air))
    }
}

// ---------------------------------------------------------------------------
// Validation

fn positive(v: &mut Vec<Violation>, path: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        v.push(Violation::new(path, format!("must be positive (got {x})")));
    }
}

fn non_negative(v: &mut Vec<Violation>, path: &str, x: f64) {
    if !(x >= 0.0 && x.is_finite()) {
        v.push(Violation::new(path, format!("must be >= 0 (got {x})")));
    }
}

fn check_spring(v: &mut Vec<Violation>, p: &str, s: &SpringSpec) {
    positive(v, &format!("{p}.Y"), s.material.youngs_modulus);
    positive(v, &format!("{p}.eps_max"), s.material.eps_max);
    positive(v, &format!("{p}.density"), s.material.density);
    positive(v, &format!("{p}.l"), s.beam.l);
    positive(v, &format!("{p}.w"), s.beam.w);
    positive(v, &format!("{p}.t"), s.beam.t);
    if s.beam.w <= s.beam.t {
        v.push(Violation::new(
            &format!("{p}.w"),
            "beam must be wider than it is thick",
        ));
    }
    if s.n_chains == 0 {
        v.push(Violation::new(
            &format!("{p}.n_chains"),
            "must be at least 1",
        ));
    }
    if s.n_series == 0 {
        v.push(Violation::new(
            &format!("{p}.n_series"),
            "must be at least 1",
        ));
    }
    if s.n_grounded >= s.n_series {
        v.push(Violation::new(
            &format!("{p}.n_grounded"),
            format!(
                "must be less than n_series ({} >= {})",
                s.n_grounded, s.n_series
            ),
        ));
    }
}

fn check_agreement(v: &mut Vec<Violation>, path: &str, given: f64, derived: f64, tol: f64) {
    if derived.is_finite() && derived > 0.0 && ((given - derived) / derived).abs() > tol {
        v.push(Violation::new(
            path,
            format!(
                "given {given:.6e} disagrees with derived {derived:.6e} by more than {:.1}%",
                tol * 100.0
            ),
        ));
    }
}

/// Lists every broken invariant. Empty means the config is usable.
pub fn validate(cfg: &RobotConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let w = &cfg.wing;
    positive(&mut v, "wing.R", w.radius);
    positive(&mut v, "wing.aspect_ratio", w.aspect_ratio);
    if !(w.alpha > 0.0 && w.alpha < PI / 2.0) {
        v.push(Violation::new(
            "wing.alpha",
            format!(
                "must lie in (0, 90) deg (got {:.3} deg)",
                w.alpha.to_degrees()
            ),
        ));
    }
    if !(w.p_hat > 0.0 && w.p_hat <= 1.0) {
        v.push(Violation::new(
            "wing.p_hat",
            format!("must lie in (0, 1] (got {})", w.p_hat),
        ));
    }
    positive(&mut v, "wing.mass_per_wing", w.mass_per_wing);
    if w.n_wings != 2 {
        v.push(Violation::new(
            "wing.n_wings",
            "the model assumes exactly 2 wings",
        ));
    }
    non_negative(&mut v, "wing.target_spin_rate", w.target_spin_rate);

    let c = &cfg.coil;
    if c.n_turns == 0 {
        v.push(Violation::new("coil.n_turns", "must be at least 1"));
    }
    positive(&mut v, "coil.l_coil", c.l_coil);
    positive(&mut v, "coil.resistance", c.resistance);
    positive(&mut v, "coil.mass", c.mass);
    positive(&mut v, "coil.arm_radius", c.arm_radius);
    positive(&mut v, "coil.y_max", c.y_max);
    positive(&mut v, "coil.design_swing", c.design_swing);
    if c.y_max >= c.arm_radius * PI / 6.0 {
        v.push(Violation::new(
            "coil.y_max",
            "stroke exceeds the 30 deg collision limit of the arm",
        ));
    }

    let f = &cfg.field;
    if let Some(b) = f.b_peak {
        non_negative(&mut v, "field.b_peak", b);
    }
    if let Some(p) = f.target_p_mech {
        non_negative(&mut v, "field.target_p_mech", p);
    }
    match f.kind {
        FieldKind::Parametric => {
            positive(&mut v, "field.y_p", f.y_p);
            positive(&mut v, "field.sigma", f.sigma);
            if f.b_peak.is_none() && f.target_p_mech.is_none() {
                v.push(Violation::new(
                    "field.b_peak",
                    "give b_peak or target_p_mech for a parametric field",
                ));
            }
        }
        FieldKind::Tabulated => {
            if f.table.is_none() {
                v.push(Violation::new(
                    "field.table",
                    "required for a tabulated field",
                ));
            }
        }
    }

    non_negative(&mut v, "drive.v_max", cfg.drive.v_max);
    positive(&mut v, "drive.f_coil", cfg.drive.f_coil);
    if !cfg.drive.phase.is_finite() {
        v.push(Violation::new("drive.phase", "must be finite"));
    }

    check_spring(&mut v, "ti_spring", &cfg.ti_spring);
    check_spring(&mut v, "steel_spring", &cfg.steel_spring);

    positive(&mut v, "ratchet.shaft_radius", cfg.ratchet.shaft_radius);
    positive(&mut v, "ratchet.shaft_mass", cfg.ratchet.shaft_mass);
    if cfg.ratchet.n_beams == 0 {
        v.push(Violation::new("ratchet.n_beams", "must be at least 1"));
    }

    positive(&mut v, "k_coil", cfg.k_coil);
    positive(&mut v, "k_con", cfg.k_con);
    positive(&mut v, "J_coil", cfg.j_coil);
    positive(&mut v, "J_wing", cfg.j_wing);
    positive(&mut v, "rho_air", cfg.rho_air);

    let tol = cfg.integrator.consistency_tolerance;
    if cfg.explicit.contains("k_coil") {
        if let Ok(k) = springs::spring_stiffness(&cfg.ti_spring) {
            check_agreement(&mut v, "k_coil", cfg.k_coil, k, tol);
        }
    }
    if cfg.explicit.contains("k_con") {
        if let Ok(k) = springs::spring_stiffness(&cfg.steel_spring) {
            check_agreement(&mut v, "k_con", cfg.k_con, k, tol);
        }
    }
    if cfg.explicit.contains("J_coil") {
        check_agreement(&mut v, "J_coil", cfg.j_coil, derived_j_coil(c), tol);
    }
    if cfg.explicit.contains("J_wing") {
        check_agreement(&mut v, "J_wing", cfg.j_wing, derived_j_wing(w), tol);
    }

    let l = &cfg.losses;
    match (l.tau_losses, l.target_loss_power) {
        (Some(_), Some(_)) => v.push(Violation::new(
            "losses",
            "give exactly one of tau_losses and target_loss_power (both set)",
        )),
        (None, None) => v.push(Violation::new(
            "losses",
            "give exactly one of tau_losses and target_loss_power (neither set)",
        )),
        _ => {}
    }
    if let Some(t) = l.tau_losses {
        non_negative(&mut v, "losses.tau_losses", t);
    }
    if let Some(p) = l.target_loss_power {
        non_negative(&mut v, "losses.target_loss_power", p);
        positive(&mut v, "losses.reference_spin_rate", l.reference_spin_rate);
    }
    if let Some(b) = l.b {
        non_negative(&mut v, "losses.b", b);
    }

    let i = &cfg.integrator;
    if i.steps_per_cycle < 400 || !i.steps_per_cycle.is_multiple_of(4) {
        v.push(Violation::new(
            "integrator.steps_per_cycle",
            format!(
                "must be a multiple of 4 and at least 400 (got {})",
                i.steps_per_cycle
            ),
        ));
    }
    positive(&mut v, "integrator.event_tolerance", i.event_tolerance);
    positive(&mut v, "integrator.output_interval", i.output_interval);
    non_negative(&mut v, "integrator.seed_theta_coil", i.seed_theta_coil);
    non_negative(
        &mut v,
        "integrator.consistency_tolerance",
        i.consistency_tolerance,
    );

    for (idx, p) in cfg.mass_parts.iter().enumerate() {
        non_negative(&mut v, &format!("mass_parts[{idx}].mass"), p.mass);
    }
    v
}

// ---------------------------------------------------------------------------
// Reference device

/// Coil spring stiffness of the reference device. This is the stiffness at
/// which the loaded coil (coil spring plus the intermittently engaged ratchet
/// spring) resonates with the 250 Hz drive, found with `tune --target
/// resonance`. The unloaded formula gives 1.027e-3.
pub const REFERENCE_K_COIL: f64 = 955.6e-6;

pub const TITANIUM: Material = Material {
    youngs_modulus: 114e9,
    eps_max: 0.0043,
    density: 4430.0,
};

/// Spring steel. Not given for the device; this pair reproduces both the
/// stiffness and the rotation limit of the steel spring.
pub const STEEL: Material = Material {
    youngs_modulus: 200e9,
    eps_max: 0.0025,
    density: 7850.0,
};

pub fn reference_ti_spring() -> SpringSpec {
    SpringSpec {
        material: TITANIUM,
        beam: Beam {
            l: 1.83e-3,
            w: 0.4e-3,
            t: 100e-6,
        },
        n_chains: 2,
        n_series: 4,
        n_grounded: 0,
    }
}

/// Steel spring as fabricated, before any segments are grounded.
pub fn reference_steel_spring() -> SpringSpec {
    SpringSpec {
        material: STEEL,
        beam: Beam {
            l: 2.13e-3,
            w: 0.29e-3,
            t: 50.8e-6,
        },
        n_chains: 1,
        n_series: 4,
        n_grounded: 0,
    }
}

pub fn reference_mass_parts() -> Vec<MassPart> {
    [
        ("Coil", 13.0),
        ("Dead coil", 13.0),
        ("Magnet", 24.0),
        ("Ti spring", 8.0),
        ("Ratchet shaft", 7.0),
        ("Ratchet ring", 1.0),
        ("Steel spring", 7.0),
        ("Wing assembly", 47.0),
        ("Support base", 13.0),
    ]
    .into_iter()
    .map(|(name, mg)| MassPart {
        name: name.to_string(),
        mass: mg / 1e6,
    })
    .collect()
}

/// The built-in configuration of the reference device.
pub fn paper_reference_config() -> RobotConfig {
    let wing = WingGeometry {
        radius: 20e-3,
        aspect_ratio: 4.0,
        alpha: 30f64.to_radians(),
        p_hat: 0.46,
        mass_per_wing: 20e-6,
        n_wings: 2,
        target_spin_rate: 47.0,
    };
    let coil = CoilSpec {
        n_turns: 48 * 8,
        l_coil: 2.0 * PI * 2.2e-3,
        resistance: 108.0,
        mass: 13e-6,
        arm_radius: 4e-3,
        y_max: 1.8e-3,
        design_swing: 26f64.to_radians(),
    };
    let j_coil = derived_j_coil(&coil);
    let j_wing = derived_j_wing(&wing);
    let mut steel_spring = reference_steel_spring();
    steel_spring.n_grounded = 2;
    RobotConfig {
        wing,
        coil,
        field: FieldSpec {
            kind: FieldKind::Parametric,
            b_peak: None,
            y_p: 0.8e-3,
            sigma: 0.78e-3,
            table: None,
            target_p_mech: Some(8.8e-3),
        },
        drive: DriveSignal {
            v_max: 2.75,
            f_coil: 250.0,
            phase: 0.0,
        },
        ti_spring: reference_ti_spring(),
        steel_spring,
        ratchet: RatchetSpec {
            shaft_radius: 1.4e-3,
            shaft_mass: 7e-6,
            n_beams: 10,
        },
        k_coil: REFERENCE_K_COIL,
        k_con: 150e-6,
        j_coil,
        j_wing,
        losses: LossModel {
            tau_losses: None,
            target_loss_power: Some(6e-3),
            b: None,
            reference_spin_rate: 47.3,
        },
        rho_air: 1.22,
        integrator: IntegratorSettings {
            steps_per_cycle: 400,
            event_tolerance: 1e-9,
            output_interval: 1e-4,
            seed_theta_coil: 1e-3,
            consistency_tolerance: 0.10,
        },
        mass_parts: reference_mass_parts(),
        explicit: ["k_coil", "k_con"].iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_text() -> String {
        std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/reference.toml"
        ))
        .expect("configs/reference.toml")
    }

    #[test]
    fn reference_is_valid() {
        assert_eq!(validate(&paper_reference_config()), vec![]);
    }

    #[test]
    fn config_file_matches_builtin() {
        let cfg = parse_config(&reference_text(), None).unwrap();
        let builtin = paper_reference_config();
        assert!((cfg.j_coil - 4.16e-10).abs() < 1e-22);
        assert!((cfg.j_wing - 5.333e-9).abs() / 5.333e-9 < 1e-3);
        assert_eq!(
            cfg.j_coil,
            2.0 * cfg.coil.mass * cfg.coil.arm_radius * cfg.coil.arm_radius
        );
        for (a, b, what) in [
            (cfg.wing.alpha, builtin.wing.alpha, "alpha"),
            (cfg.coil.l_coil, builtin.coil.l_coil, "l_coil"),
            (cfg.k_coil, builtin.k_coil, "k_coil"),
            (cfg.k_con, builtin.k_con, "k_con"),
            (cfg.j_wing, builtin.j_wing, "J_wing"),
            (cfg.total_mass(), builtin.total_mass(), "mass"),
        ] {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{what}: {a} vs {b}");
        }
        assert_eq!(cfg, builtin);
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = paper_reference_config();
        let back = parse_config(&cfg.to_toml_string(), None).unwrap();
        assert_eq!(back, cfg);
        let again = parse_config(&back.to_toml_string(), None).unwrap();
        assert_eq!(again, back);
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let text = reference_text().replace("alpha = \"30 deg\"", "alpha = \"-10 deg\"");
        match parse_config(&text, None) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].path, "wing.alpha");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_key_is_named() {
        let text = reference_text().replace("resistance = \"108 ohm\"\n", "");
        match parse_config(&text, None) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "coil.resistance"),
            other => panic!("expected missing key, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("bogus = 1\n{}", reference_text());
        assert!(matches!(parse_config(&text, None), Err(Error::UnknownKey(k)) if k == "bogus"));
    }

    #[test]
    fn bad_unit_names_key() {
        let text = reference_text().replace("R = \"20 mm\"", "R = \"20 mg\"");
        assert!(
            matches!(parse_config(&text, None), Err(Error::Parse { key, .. }) if key == "wing.R")
        );
    }

    #[test]
    fn grounding_every_segment_is_one_violation() {
        let mut cfg = paper_reference_config();
        cfg.ti_spring.n_grounded = cfg.ti_spring.n_series;
        let v = validate(&cfg);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].path, "ti_spring.n_grounded");
    }

    #[test]
    fn both_loss_specs_is_one_violation() {
        let mut cfg = paper_reference_config();
        cfg.losses.tau_losses = Some(2e-5);
        let v = validate(&cfg);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].path, "losses");
    }

    #[test]
    fn all_violations_are_listed() {
        let mut cfg = paper_reference_config();
        cfg.wing.p_hat = 1.5;
        cfg.rho_air = -1.0;
        cfg.drive.f_coil = 0.0;
        assert_eq!(validate(&cfg).len(), 3);
    }

    #[test]
    fn derived_values_follow_overrides() {
        let cfg = paper_reference_config();
        let heavier = cfg.with_key("coil.mass", "26 mg").unwrap();
        assert_eq!(heavier.j_coil, 2.0 * 26e-6 * 4e-3 * 4e-3);
        let no_k = {
            let mut c = cfg.clone();
            c.explicit.remove("k_coil");
            parse_config(&c.to_toml_string(), None).unwrap()
        };
        let k = springs::resonance_stiffness(no_k.j_coil, 250.0);
        assert_eq!(no_k.k_coil, k);
        assert!((k - 1.0264e-3).abs() < 1e-7);
    }

    #[test]
    fn mismatched_explicit_stiffness_is_flagged() {
        let cfg = paper_reference_config();
        let err = cfg.with_key("k_con", "75 uN*m").unwrap_err();
        assert!(matches!(err, Error::Validation(v) if v[0].path == "k_con"));
    }

    #[test]
    fn reference_masses_total_133_mg() {
        let total = paper_reference_config().total_mass();
        assert!((total - 133e-6).abs() < 1e-15);
    }

    #[test]
    fn schema_covers_every_serialized_key() {
        let cfg = paper_reference_config();
        for key in cfg.to_flat().keys() {
            assert!(schema_entry(key).is_some(), "{key}");
        }
    }
}
