//! Command-line front end: `simulate`, `budget`, `tune`, `sweep`, `schema`.
//!
//! Exit codes: 0 success, 1 runtime fault, 2 usage or validation error.
//! Every command that writes files also writes `manifest.json` listing the
//! outputs and the SHA-256 of the canonical config.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::actuator::{self, FieldProfile};
use crate::aero;
use crate::analysis::{self, QuasiStaticBudget, SteadyStateReport};
use crate::drivetrain::{self, Trace};
use crate::error::Error;
use crate::params::{self, RobotConfig};
use crate::springs;
use crate::units::{format_quantity, parse_quantity, Dimension};

pub const OUT_DIR_ENV: &str = "SPINWING_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "spinwing-out";
pub const DEFAULT_MAX_POINTS: usize = 10_000;

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "spinwing",
    version,
    about = "Drivetrain simulation and design tools for a spinning-wing insect-scale robot"
)]
pub struct Cli {
    /// Config file (TOML, unit-suffixed values such as "20 mm").
    /// Defaults to the built-in reference device.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the hybrid simulation; writes trace.csv, events.csv, report.json.
    Simulate(SimulateArgs),
    /// Print closed-form aero, power, spring and mass budgets (no ODE run).
    Budget(BudgetArgs),
    /// Tune one design variable against a simulated steady-state target.
    Tune(TuneArgs),
    /// Run a grid of design points; writes sweep.csv with one row per point.
    Sweep(SweepArgs),
    /// Print every config key with its SI unit and default as JSON.
    Schema,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = DEFAULT_OUT_DIR, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulated duration, e.g. "2 s" or "500 ms".
    #[arg(long, default_value = "2 s", value_parser = parse_time, value_name = "TIME")]
    pub t_end: f64,

    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    /// Print the budget as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TuneTarget {
    /// Bisect k_con so the peak coil swing over the whole run, spin-up
    /// included, stays at or below --limit (default 30 deg).
    KconMaxSwing,
    /// Bisect drive.v_max for steady lift of at least --limit (default 138 mg).
    VmaxLift,
    /// Golden-section search on k_coil for the highest steady spin rate.
    Resonance,
}

impl TuneTarget {
    fn key(self) -> &'static str {
        match self {
            TuneTarget::KconMaxSwing => "k_con",
            TuneTarget::VmaxLift => "drive.v_max",
            TuneTarget::Resonance => "k_coil",
        }
    }

    fn name(self) -> &'static str {
        match self {
            TuneTarget::KconMaxSwing => "kcon-max-swing",
            TuneTarget::VmaxLift => "vmax-lift",
            TuneTarget::Resonance => "resonance",
        }
    }

    fn dimension(self) -> Dimension {
        match self {
            TuneTarget::VmaxLift => Dimension::Voltage,
            _ => Dimension::Stiffness,
        }
    }

    fn default_bounds(self) -> (&'static str, &'static str) {
        match self {
            TuneTarget::KconMaxSwing => ("75 uN*m", "200 uN*m"),
            TuneTarget::VmaxLift => ("1.5 V", "4 V"),
            TuneTarget::Resonance => ("900 uN*m", "1030 uN*m"),
        }
    }
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long, value_enum)]
    pub target: TuneTarget,

    /// Lower bound of the tuning variable, with unit (e.g. "100 uN*m", "2 V").
    #[arg(long, value_name = "QUANTITY")]
    pub lo: Option<String>,

    /// Upper bound of the tuning variable, with unit.
    #[arg(long, value_name = "QUANTITY")]
    pub hi: Option<String>,

    /// Target threshold: an angle for kcon-max-swing, a mass-force for vmax-lift.
    #[arg(long, value_name = "QUANTITY")]
    pub limit: Option<String>,

    /// Simulated duration of each probe.
    #[arg(long, default_value = "2 s", value_parser = parse_time, value_name = "TIME")]
    pub t_end: f64,

    /// Stop when the bracket is narrower than this fraction of the value.
    #[arg(long, default_value_t = 1e-3)]
    pub rel_tol: f64,

    /// Iteration cap for the search.
    #[arg(long, default_value_t = 60)]
    pub max_iter: usize,

    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep spec (TOML): `metric`, optional `mode`, `parallelism`,
    /// `t_end`, `max_points`, and one `[[axis]]` table per swept key.
    #[arg(long, value_name = "PATH")]
    pub spec: PathBuf,

    /// Worker threads; overrides the spec's `parallelism`.
    #[arg(long)]
    pub jobs: Option<usize>,

    #[command(flatten)]
    pub out: OutArgs,
}

fn parse_time(s: &str) -> Result<f64, String> {
    let t = parse_quantity(s, Dimension::Time)?;
    if t > 0.0 && t.is_finite() {
        Ok(t)
    } else {
        Err(format!("`{s}` is not a positive duration"))
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse { .. }
            | Error::MissingKey(_)
            | Error::UnknownKey(_)
            | Error::Validation(_)
            | Error::Usage(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! emitln {
    ($($t:tt)*) => { emit(&(format!($($t)*) + "\n")) };
}

type CmdResult<T = ()> = Result<T, Failure>;

/// Entry point used by the `spinwing` binary.
pub fn run() -> ExitCode {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Schema => {
            emitln!("{}", pretty(&params::schema_json()));
            Ok(())
        }
        Command::Simulate(a) => cmd_simulate(&load(cli)?, a),
        Command::Budget(a) => cmd_budget(&load(cli)?, a),
        Command::Tune(a) => cmd_tune(&load(cli)?, a),
        Command::Sweep(a) => cmd_sweep(&load(cli)?, a),
    }
}

/// A loaded config plus where it came from.
pub struct Loaded {
    pub config: RobotConfig,
    pub source: String,
}

fn load(cli: &Cli) -> CmdResult<Loaded> {
    match &cli.config {
        Some(path) => {
            let config = params::load_config(path).map_err(|e| Failure {
                code: EXIT_USAGE,
                message: e.to_string(),
            })?;
            Ok(Loaded {
                config,
                source: path.display().to_string(),
            })
        }
        None => Ok(Loaded {
            config: params::paper_reference_config(),
            source: "builtin:reference".to_string(),
        }),
    }
}

/// SHA-256 of the canonical SI serialization.
pub fn config_hash(cfg: &RobotConfig) -> String {
    sha256_hex(cfg.to_toml_string().as_bytes())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Joins a multi-line message into one line for CSV cells.
fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(s: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_source: String,
    pub config_sha256: String,
    pub outputs: Vec<ManifestEntry>,
}

/// Collects files written by one command and finishes with the manifest.
struct Outputs {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> CmdResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CmdResult {
        let path = self.dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        self.entries.push(ManifestEntry {
            file: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn finish(mut self, command: &str, loaded: &Loaded) -> CmdResult<Vec<String>> {
        let manifest = Manifest {
            command: command.to_string(),
            config_source: loaded.source.clone(),
            config_sha256: config_hash(&loaded.config),
            outputs: std::mem::take(&mut self.entries),
        };
        let mut names: Vec<String> = manifest.outputs.iter().map(|e| e.file.clone()).collect();
        let text = pretty(&manifest) + "\n";
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
        names.push("manifest.json".to_string());
        Ok(names)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FieldSummary {
    Parametric {
        b_peak_t: f64,
        y_p_m: f64,
        sigma_m: f64,
    },
    Tabulated {
        points: usize,
        b_abs_max_t: f64,
    },
}

pub fn field_summary(profile: &FieldProfile) -> FieldSummary {
    match profile {
        FieldProfile::Parametric { b_peak, y_p, sigma } => FieldSummary::Parametric {
            b_peak_t: *b_peak,
            y_p_m: *y_p,
            sigma_m: *sigma,
        },
        FieldProfile::Tabulated { y, b } => FieldSummary::Tabulated {
            points: y.len(),
            b_abs_max_t: b.iter().fold(0.0, |m, v| v.abs().max(m)),
        },
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub t_end_s: f64,
    pub config_sha256: String,
    pub field: FieldSummary,
    pub samples: usize,
    pub events: usize,
    pub event_counts: BTreeMap<&'static str, usize>,
    pub report: SteadyStateReport,
    pub budgets: analysis::Budgets,
    pub ledger: drivetrain::EnergyLedger,
}

pub fn simulation_output(
    cfg: &RobotConfig,
    profile: &FieldProfile,
    trace: &Trace,
    report: &SteadyStateReport,
) -> SimulationOutput {
    let mut event_counts = BTreeMap::new();
    for e in &trace.events {
        *event_counts.entry(e.kind.as_str()).or_insert(0) += 1;
    }
    SimulationOutput {
        t_end_s: trace.t_end,
        config_sha256: config_hash(cfg),
        field: field_summary(profile),
        samples: trace.samples.len(),
        events: trace.events.len(),
        event_counts,
        report: report.clone(),
        budgets: analysis::budgets(cfg, report),
        ledger: trace.ledger(cfg),
    }
}

fn cmd_simulate(loaded: &Loaded, args: &SimulateArgs) -> CmdResult {
    let cfg = &loaded.config;
    let profile = actuator::resolve_field(cfg)?;
    let trace = drivetrain::simulate(cfg, &profile, args.t_end)?;
    let report = analysis::steady_state_report(&trace, cfg)?;

    let mut out = Outputs::new(&args.out.out)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    out.write("trace.csv", &buf)?;
    buf.clear();
    trace.write_events_csv(&mut buf)?;
    out.write("events.csv", &buf)?;
    let json = pretty(&simulation_output(cfg, &profile, &trace, &report)) + "\n";
    out.write("report.json", json.as_bytes())?;
    let names = out.finish("simulate", loaded)?;

    emit(&report_summary(&report));
    emitln!("wrote {} to {}", names.join(", "), args.out.out.display());
    Ok(())
}

/// Human-readable summary of a steady-state report.
pub fn report_summary(r: &SteadyStateReport) -> String {
    let mut s = String::new();
    match r.settled_at_s {
        Some(t) => writeln!(s, "steady state      reached at {t:.4} s"),
        None => writeln!(
            s,
            "steady state      NOT reached; averages use the second half of the run"
        ),
    }
    .unwrap();
    let _ = writeln!(
        s,
        "averaging window  {:.4} .. {:.4} s ({} cycles)",
        r.window_start_s, r.window_end_s, r.cycles_averaged
    );
    let _ = writeln!(s, "spin rate         {:.3} rev/s", r.f_wing_ss_rev_s);
    let _ = writeln!(s, "speed ripple      +/-{:.3} %", r.ripple_pct);
    let _ = writeln!(s, "engagement duty   {:.3}", r.duty_engaged);
    let _ = writeln!(
        s,
        "coil swing        max {:.2} deg, min {:.2} deg, asymmetry {:.2} deg",
        r.theta_coil_max_deg, r.theta_coil_min_deg, r.swing_asymmetry_deg
    );
    let _ = writeln!(
        s,
        "peak coil swing   {:.2} deg over the whole run",
        r.theta_coil_peak_deg
    );
    let _ = writeln!(
        s,
        "power             P_mech {:.3} mW, P_heat {:.3} mW, P_net {:.3} mW",
        r.p_mech_avg_mw, r.p_heat_avg_mw, r.p_net_avg_mw
    );
    let _ = writeln!(
        s,
        "losses            P_aero {:.3} mW, P_friction {:.3} mW",
        r.p_aero_avg_mw, r.p_friction_avg_mw
    );
    let _ = writeln!(
        s,
        "lift              {:.2} mg, lift-to-power {:.3} g/W",
        r.f_lift_avg_mg, r.lift_to_power_g_per_w
    );
    let _ = writeln!(
        s,
        "energy residual   {:.3e} of W_mech",
        r.energy_residual_rel
    );
    if r.collision_warning {
        let _ = writeln!(
            s,
            "warning           coil swing passed 30 deg {} times (first at t = {:.4} s)",
            r.collision_count,
            r.collision_first_t_s.unwrap_or(f64::NAN)
        );
    }
    s
}

fn cmd_budget(loaded: &Loaded, args: &BudgetArgs) -> CmdResult {
    let cfg = &loaded.config;
    let profile = actuator::resolve_field(cfg)?;
    let b = analysis::quasi_static_budget(cfg, &profile)?;
    if args.json {
        emitln!("{}", pretty(&b));
    } else {
        emit(&budget_table(cfg, &profile, &b));
    }
    Ok(())
}

pub fn budget_table(cfg: &RobotConfig, profile: &FieldProfile, b: &QuasiStaticBudget) -> String {
    let (cl, cd) = aero::coefficients(cfg.wing.alpha).unwrap_or((f64::NAN, f64::NAN));
    let mut rows: Vec<(String, String)> = Vec::new();
    let mut row = |k: &str, v: String| rows.push((k.to_string(), v));
    row("spin rate", format!("{:.2} rev/s", b.spin_rate_rev_s));
    row("C_L / C_D", format!("{cl:.4} / {cd:.4}"));
    row(
        "F_L",
        format!("{:.4} mN ({:.1} mg)", b.aero.f_lift * 1e3, b.lift_mg),
    );
    row("F_D", format!("{:.4} mN", b.aero.f_drag * 1e3));
    row("P_aero", format!("{:.3} mW", b.aero.p_aero * 1e3));
    row("damping b", format!("{:.4e} N*m*s^2", b.damping_b));
    row("friction torque", format!("{:.4e} N*m", b.friction_torque));
    match field_summary(profile) {
        FieldSummary::Parametric {
            b_peak_t,
            y_p_m,
            sigma_m,
        } => row(
            "field",
            format!(
                "B_peak {:.4} mT, y_p {:.3} mm, sigma {:.3} mm",
                b_peak_t * 1e3,
                y_p_m * 1e3,
                sigma_m * 1e3
            ),
        ),
        FieldSummary::Tabulated {
            points,
            b_abs_max_t,
        } => row(
            "field",
            format!(
                "table, {points} points, |B| max {:.4} mT",
                b_abs_max_t * 1e3
            ),
        ),
    }
    row(
        "P_mech (quasi-static)",
        format!("{:.3} mW", b.cycle.p_mech_avg * 1e3),
    );
    row(
        "P_heat (quasi-static)",
        format!("{:.3} mW", b.cycle.p_heat_avg * 1e3),
    );
    row(
        "P_net (quasi-static)",
        format!("{:.3} mW", b.cycle.p_net_avg * 1e3),
    );
    row(
        "Ti spring",
        format!(
            "k {:.1} uN*m (config {:.1}), theta_max {:.2} deg vs required {:.1} deg: {}",
            b.ti_spring.stiffness * 1e6,
            b.ti_spring.configured_stiffness * 1e6,
            b.ti_spring.max_rotation_deg,
            b.ti_spring.required_rotation_deg,
            if b.ti_spring.ok { "ok" } else { "TOO SMALL" }
        ),
    );
    row(
        "steel spring",
        format!(
            "k {:.1} uN*m (config {:.1}), theta_max {:.2} deg",
            b.steel_spring.stiffness * 1e6,
            b.steel_spring.configured_stiffness * 1e6,
            b.steel_spring.max_rotation_deg
        ),
    );
    row(
        "shaft natural freq",
        format!(
            "{:.0} Hz ({:.1}x drive, {})",
            b.shaft.hz,
            b.shaft.ratio,
            if b.shaft.quasi_static {
                "quasi-static"
            } else {
                "dynamic"
            }
        ),
    );
    row(
        "resonance k_coil",
        format!(
            "{:.1} uN*m (configured {:.1})",
            b.coil_resonance_stiffness * 1e6,
            cfg.k_coil * 1e6
        ),
    );
    row(
        "flywheel energy",
        format!("{:.2} uJ", b.flywheel_energy_j * 1e6),
    );
    row(
        "toggle model",
        format!(
            "energy drop {:.2} %, speed drop {:.2} %, ripple +/-{:.2} %",
            b.toggle.energy_drop_frac * 100.0,
            b.toggle.speed_drop_frac * 100.0,
            b.toggle.ripple_pct
        ),
    );
    row("mass", format!("{:.1} mg", b.mass_total_mg));
    row("lift margin", format!("{:+.1} mg", b.lift_margin_mg));
    row(
        "lift-to-power",
        format!("{:.3} g/W", b.lift_to_power_g_per_w),
    );
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::new();
    for (k, v) in rows {
        let _ = writeln!(s, "{k:<width$}  {v}");
    }
    s
}

// ---------------------------------------------------------------------------
// tune

/// One evaluation of the tuning variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub value: f64,
    pub metric: f64,
    pub satisfied: Option<bool>,
}

/// Evaluates design points by full simulation, caching by config hash.
pub struct Prober {
    base: RobotConfig,
    profile: FieldProfile,
    key: &'static str,
    t_end: f64,
    cache: HashMap<String, SteadyStateReport>,
    pub probes: Vec<Probe>,
}

impl Prober {
    pub fn new(base: &RobotConfig, key: &'static str, t_end: f64) -> crate::Result<Self> {
        Ok(Prober {
            profile: actuator::resolve_field(base)?,
            base: base.clone(),
            key,
            t_end,
            cache: HashMap::new(),
            probes: Vec::new(),
        })
    }

    /// The base config with the tuning variable set. The value is written
    /// straight into the config so hypothetical stiffnesses are not rejected
    /// against the spring geometry.
    pub fn config_at(&self, x: f64) -> RobotConfig {
        let mut c = self.base.clone();
        match self.key {
            "k_con" => c.k_con = x,
            "k_coil" => c.k_coil = x,
            "drive.v_max" => c.drive.v_max = x,
            other => unreachable!("no tuning support for {other}"),
        }
        if params::schema_entry(self.key).is_some_and(|s| s.presence == params::Presence::Optional)
        {
            c.explicit.insert(self.key.to_string());
        }
        c
    }

    pub fn evaluate(&mut self, x: f64) -> crate::Result<SteadyStateReport> {
        let cfg = self.config_at(x);
        let hash =
            sha256_hex(format!("{}\nt_end = {:e}", cfg.to_toml_string(), self.t_end).as_bytes());
        if let Some(r) = self.cache.get(&hash) {
            return Ok(r.clone());
        }
        let trace = drivetrain::simulate(&cfg, &self.profile, self.t_end)?;
        let r = analysis::steady_state_report(&trace, &cfg)?;
        self.cache.insert(hash, r.clone());
        Ok(r)
    }

    pub fn evaluations(&self) -> usize {
        self.cache.len()
    }
}

/// Outcome of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneOutcome {
    pub target: &'static str,
    pub key: &'static str,
    pub value_si: f64,
    pub value: String,
    pub limit_si: Option<f64>,
    pub bracket: [f64; 2],
    pub t_end_s: f64,
    pub simulations: usize,
    pub probes: Vec<Probe>,
    pub report: SteadyStateReport,
}

/// Bisection on a monotone pass/fail criterion. Returns the passing end of
/// the final bracket.
pub fn bisect(
    prober: &mut Prober,
    lo: f64,
    hi: f64,
    metric: impl Fn(&SteadyStateReport) -> f64,
    pass: impl Fn(f64) -> bool,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(f64, [f64; 2]), Failure> {
    let probe = |p: &mut Prober, x: f64| -> CmdResult<bool> {
        let m = metric(&p.evaluate(x)?);
        let ok = pass(m);
        p.probes.push(Probe {
            value: x,
            metric: m,
            satisfied: Some(ok),
        });
        Ok(ok)
    };
    let ok_lo = probe(prober, lo)?;
    let ok_hi = probe(prober, hi)?;
    if ok_lo == ok_hi {
        let (m_lo, m_hi) = (prober.probes[0].metric, prober.probes[1].metric);
        return Err(Failure::runtime(format!(
            "target not bracketed by [{lo:e}, {hi:e}]: metric {m_lo:.6} at lo, {m_hi:.6} at hi ({} end satisfies the target)",
            if ok_lo { "each" } else { "neither" }
        )));
    }
    let (mut good, mut bad) = if ok_lo { (lo, hi) } else { (hi, lo) };
    for _ in 0..max_iter {
        if (good - bad).abs() <= rel_tol * good.abs().max(bad.abs()) {
            break;
        }
        let mid = 0.5 * (good + bad);
        if probe(prober, mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok((good, [good.min(bad), good.max(bad)]))
}

/// Golden-section search for the maximum of a unimodal metric.
pub fn golden_max(
    prober: &mut Prober,
    lo: f64,
    hi: f64,
    metric: impl Fn(&SteadyStateReport) -> f64,
    rel_tol: f64,
    max_iter: usize,
) -> crate::Result<(f64, [f64; 2])> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let f = |p: &mut Prober, x: f64| -> crate::Result<f64> {
        let m = metric(&p.evaluate(x)?);
        p.probes.push(Probe {
            value: x,
            metric: m,
            satisfied: None,
        });
        Ok(m)
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(prober, c)?;
    let mut fd = f(prober, d)?;
    for _ in 0..max_iter {
        if (b - a).abs() <= rel_tol * a.abs().max(b.abs()) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(prober, c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(prober, d)?;
        }
    }
    let best = if fc >= fd { c } else { d };
    Ok((best, [a, b]))
}

/// Runs a tuning search without writing files.
pub fn tune(cfg: &RobotConfig, args: &TuneArgs) -> CmdResult<TuneOutcome> {
    let target = args.target;
    let dim = target.dimension();
    let (dlo, dhi) = target.default_bounds();
    let quantity = |flag: &str, s: &str, d: Dimension| {
        parse_quantity(s, d).map_err(|e| Failure::usage(format!("--{flag}: {e}")))
    };
    let lo = quantity("lo", args.lo.as_deref().unwrap_or(dlo), dim)?;
    let hi = quantity("hi", args.hi.as_deref().unwrap_or(dhi), dim)?;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Failure::usage(format!(
            "bounds must satisfy 0 < lo < hi (got {lo:e}, {hi:e})"
        )));
    }
    if args.rel_tol.is_nan() || args.rel_tol <= 0.0 {
        return Err(Failure::usage("--rel-tol must be positive"));
    }
    let mut prober = Prober::new(cfg, target.key(), args.t_end)?;
    let (value, bracket, limit) = match target {
        TuneTarget::KconMaxSwing => {
            let limit = quantity(
                "limit",
                args.limit.as_deref().unwrap_or("30 deg"),
                Dimension::Angle,
            )?;
            let (v, br) = bisect(
                &mut prober,
                lo,
                hi,
                |r| r.theta_coil_peak_rad,
                |m| m <= limit,
                args.rel_tol,
                args.max_iter,
            )?;
            (v, br, Some(limit))
        }
        TuneTarget::VmaxLift => {
            let limit = quantity(
                "limit",
                args.limit.as_deref().unwrap_or("138 mg"),
                Dimension::Mass,
            )?;
            let (v, br) = bisect(
                &mut prober,
                lo,
                hi,
                |r| r.f_lift_avg_mg * 1e-6,
                |m| m >= limit,
                args.rel_tol,
                args.max_iter,
            )?;
            (v, br, Some(limit))
        }
        TuneTarget::Resonance => {
            if args.limit.is_some() {
                return Err(Failure::usage(
                    "--limit does not apply to the resonance target",
                ));
            }
            let (v, br) = golden_max(
                &mut prober,
                lo,
                hi,
                |r| r.f_wing_ss_rev_s,
                args.rel_tol,
                args.max_iter,
            )?;
            (v, br, None)
        }
    };
    let report = prober.evaluate(value)?;
    Ok(TuneOutcome {
        target: target.name(),
        key: target.key(),
        value_si: value,
        value: format_quantity(value, dim),
        limit_si: limit,
        bracket,
        t_end_s: args.t_end,
        simulations: prober.evaluations(),
        probes: prober.probes.clone(),
        report,
    })
}

/// The base config with the tuned value, plus a resized spring when the
/// value no longer matches the fabricated geometry.
pub fn tuned_config(
    base: &RobotConfig,
    key: &'static str,
    value: f64,
) -> (RobotConfig, Option<String>) {
    let mut cfg = base.clone();
    match key {
        "k_con" => cfg.k_con = value,
        "k_coil" => cfg.k_coil = value,
        "drive.v_max" => cfg.drive.v_max = value,
        other => unreachable!("no tuning support for {other}"),
    }
    if let Some(s) = params::schema_entry(key).filter(|s| s.presence == params::Presence::Optional)
    {
        cfg.explicit.insert(s.key.to_string());
    }
    let (name, swing) = match key {
        "k_con" => ("steel_spring", 0.0),
        "k_coil" => ("ti_spring", base.coil.design_swing),
        _ => return (cfg, None),
    };
    let spec = if name == "ti_spring" {
        &mut cfg.ti_spring
    } else {
        &mut cfg.steel_spring
    };
    match springs::spring_stiffness(spec) {
        Ok(k) if ((k - value) / value).abs() <= base.integrator.consistency_tolerance => {
            return (cfg, None)
        }
        _ => {}
    }
    let topology = springs::Topology {
        n_chains: spec.n_chains,
        n_series: spec.n_series,
        n_grounded: spec.n_grounded,
    };
    let bounds = springs::DesignBounds::around(&spec.beam);
    let note = match springs::design_spring(value, &spec.material, &bounds, topology, swing) {
        Ok(new) => {
            *spec = new;
            format!(
                "{name} resized to l = {:.4} mm, w = {:.4} mm, t = {:.4} mm",
                spec.beam.l * 1e3,
                spec.beam.w * 1e3,
                spec.beam.t * 1e3
            )
        }
        Err(e) => format!("{name} no longer matches {key} and could not be resized: {e}"),
    };
    (cfg, Some(note))
}

fn cmd_tune(loaded: &Loaded, args: &TuneArgs) -> CmdResult {
    let outcome = tune(&loaded.config, args)?;
    let (tuned, note) = tuned_config(&loaded.config, outcome.key, outcome.value_si);

    let mut out = Outputs::new(&args.out.out)?;
    out.write("tune.json", (pretty(&outcome) + "\n").as_bytes())?;
    out.write("tuned.toml", tuned.to_toml_string().as_bytes())?;
    let names = out.finish("tune", loaded)?;

    emitln!(
        "{} = {} after {} simulations (bracket {:e} .. {:e})",
        outcome.key,
        outcome.value,
        outcome.simulations,
        outcome.bracket[0],
        outcome.bracket[1]
    );
    if let Some(n) = &note {
        emitln!("note: {n}");
    }
    emit(&report_summary(&outcome.report));
    emitln!("wrote {} to {}", names.join(", "), args.out.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Full simulation to steady state per point.
    #[default]
    Simulate,
    /// Closed-form budgets only.
    ClosedForm,
}

/// A validated sweep description.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    /// (config key, values as written) in declaration order.
    pub axes: Vec<(String, Vec<String>)>,
    pub metrics: Vec<String>,
    pub mode: SweepMode,
    pub parallelism: usize,
    pub t_end: f64,
    pub max_points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    metric: OneOrMany,
    #[serde(default)]
    mode: SweepMode,
    parallelism: Option<usize>,
    t_end: Option<String>,
    max_points: Option<usize>,
    #[serde(default)]
    axis: Vec<AxisFile>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisFile {
    key: String,
    values: Vec<toml::Value>,
}

type MetricFn<T> = fn(&T) -> f64;

const SIMULATE_METRICS: &[(&str, MetricFn<SteadyStateReport>)] = &[
    ("f_wing_ss", |r| r.f_wing_ss_rev_s),
    ("ripple", |r| r.ripple_pct),
    ("duty", |r| r.duty_engaged),
    ("theta_coil_max", |r| r.theta_coil_max_deg),
    ("theta_coil_min", |r| r.theta_coil_min_deg),
    ("swing_asymmetry", |r| r.swing_asymmetry_deg),
    ("theta_coil_peak", |r| r.theta_coil_peak_deg),
    ("p_mech", |r| r.p_mech_avg_mw),
    ("p_heat", |r| r.p_heat_avg_mw),
    ("p_net", |r| r.p_net_avg_mw),
    ("p_aero", |r| r.p_aero_avg_mw),
    ("p_friction", |r| r.p_friction_avg_mw),
    ("lift", |r| r.f_lift_avg_mg),
    ("lift_to_power", |r| r.lift_to_power_g_per_w),
    ("steady_state", |r| {
        f64::from(u8::from(r.steady_state_reached))
    }),
    ("settled_at", |r| r.settled_at_s.unwrap_or(f64::NAN)),
    ("energy_residual", |r| r.energy_residual_rel),
    ("collisions", |r| r.collision_count as f64),
];

/// Closed-form metrics, computed from the quasi-static budget.
pub struct ClosedForm {
    pub c_l: f64,
    pub c_d: f64,
    pub budget: QuasiStaticBudget,
}

const CLOSED_FORM_METRICS: &[(&str, MetricFn<ClosedForm>)] = &[
    ("C_L", |c| c.c_l),
    ("C_D", |c| c.c_d),
    ("lift", |c| c.budget.lift_mg),
    ("drag", |c| c.budget.aero.f_drag * 1e6 / analysis::G0),
    ("p_aero", |c| c.budget.aero.p_aero * 1e3),
    ("p_mech", |c| c.budget.cycle.p_mech_avg * 1e3),
    ("p_heat", |c| c.budget.cycle.p_heat_avg * 1e3),
    ("p_net", |c| c.budget.cycle.p_net_avg * 1e3),
    ("lift_to_power", |c| c.budget.lift_to_power_g_per_w),
    ("lift_margin", |c| c.budget.lift_margin_mg),
    ("mass", |c| c.budget.mass_total_mg),
    ("ti_stiffness", |c| c.budget.ti_spring.stiffness * 1e6),
    ("ti_max_rotation", |c| c.budget.ti_spring.max_rotation_deg),
    ("steel_stiffness", |c| c.budget.steel_spring.stiffness * 1e6),
    ("flywheel_energy", |c| c.budget.flywheel_energy_j * 1e6),
    ("toggle_ripple", |c| c.budget.toggle.ripple_pct),
];

/// Metric names available in a sweep mode. Units: rev/s, %, deg, mW, mg,
/// g/W, uN*m, uJ as appropriate.
pub fn metric_names(mode: SweepMode) -> Vec<&'static str> {
    match mode {
        SweepMode::Simulate => SIMULATE_METRICS.iter().map(|m| m.0).collect(),
        SweepMode::ClosedForm => CLOSED_FORM_METRICS.iter().map(|m| m.0).collect(),
    }
}

fn toml_scalar(v: &toml::Value) -> Option<String> {
    match v {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        _ => None,
    }
}

impl SweepSpec {
    pub fn parse(text: &str) -> crate::Result<SweepSpec> {
        let usage = |m: String| Error::Usage(format!("sweep spec: {m}"));
        let file: SweepFile = toml::from_str(text).map_err(|e| usage(e.message().to_string()))?;
        if file.axis.is_empty() {
            return Err(usage("at least one [[axis]] is required".into()));
        }
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        for a in file.axis {
            match params::schema_entry(&a.key) {
                None => return Err(usage(format!("unknown config key `{}`", a.key))),
                Some(s) if s.kind == params::ValueKind::Parts => {
                    return Err(usage(format!("`{}` cannot be swept", a.key)))
                }
                Some(_) => {}
            }
            if axes.iter().any(|(k, _)| *k == a.key) {
                return Err(usage(format!("`{}` appears twice", a.key)));
            }
            if a.values.is_empty() {
                return Err(usage(format!("empty value list for `{}`", a.key)));
            }
            let values = a
                .values
                .iter()
                .map(|v| {
                    toml_scalar(v).ok_or_else(|| {
                        usage(format!("`{}`: values must be strings or numbers", a.key))
                    })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            axes.push((a.key, values));
        }
        let metrics = match file.metric {
            OneOrMany::One(m) => vec![m],
            OneOrMany::Many(m) => m,
        };
        if metrics.is_empty() {
            return Err(usage("no metric given".into()));
        }
        let known = metric_names(file.mode);
        for m in &metrics {
            if !known.contains(&m.as_str()) {
                return Err(usage(format!(
                    "unknown metric `{m}` for this mode (available: {})",
                    known.join(", ")
                )));
            }
        }
        let max_points = file.max_points.unwrap_or(DEFAULT_MAX_POINTS);
        let total = axes
            .iter()
            .try_fold(1usize, |n, (_, v)| n.checked_mul(v.len()))
            .filter(|&n| n <= max_points)
            .ok_or_else(|| usage(format!("more than {max_points} design points")))?;
        debug_assert!(total >= 1);
        let parallelism = file.parallelism.unwrap_or_else(rayon::current_num_threads);
        if parallelism == 0 {
            return Err(usage("parallelism must be at least 1".into()));
        }
        let t_end = match file.t_end {
            Some(s) => parse_time(&s).map_err(|e| usage(format!("t_end: {e}")))?,
            None => 2.0,
        };
        Ok(SweepSpec {
            axes,
            metrics,
            mode: file.mode,
            parallelism,
            t_end,
            max_points,
        })
    }

    pub fn point_count(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    /// Design point `i` in cartesian order, last axis varying fastest.
    pub fn point(&self, mut i: usize) -> Vec<(&str, &str)> {
        let mut out = vec![("", ""); self.axes.len()];
        for (slot, (key, values)) in out.iter_mut().zip(&self.axes).rev() {
            *slot = (key.as_str(), values[i % values.len()].as_str());
            i /= values.len();
        }
        out
    }
}

/// Result of one design point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub values: Vec<String>,
    pub outcome: Result<Vec<f64>, String>,
}

fn run_point(
    base: &RobotConfig,
    base_profile: Option<&FieldProfile>,
    spec: &SweepSpec,
    point: &[(&str, &str)],
) -> crate::Result<Vec<f64>> {
    let cfg = base.with_keys(point.iter().copied())?;
    // The magnet is calibrated against the base drive and coil, so only
    // field.* keys change it.
    let field_keys: Vec<_> = point
        .iter()
        .copied()
        .filter(|(k, _)| k.starts_with("field."))
        .collect();
    let profile = match base_profile {
        Some(p) if field_keys.is_empty() => p.clone(),
        _ => actuator::resolve_field(&base.with_keys(field_keys)?)?,
    };
    match spec.mode {
        SweepMode::Simulate => {
            let trace = drivetrain::simulate(&cfg, &profile, spec.t_end)?;
            let r = analysis::steady_state_report(&trace, &cfg)?;
            Ok(spec
                .metrics
                .iter()
                .map(|m| {
                    SIMULATE_METRICS
                        .iter()
                        .find(|e| e.0 == m)
                        .expect("checked")
                        .1(&r)
                })
                .collect())
        }
        SweepMode::ClosedForm => {
            let (c_l, c_d) = aero::coefficients(cfg.wing.alpha)?;
            let c = ClosedForm {
                c_l,
                c_d,
                budget: analysis::quasi_static_budget(&cfg, &profile)?,
            };
            Ok(spec
                .metrics
                .iter()
                .map(|m| {
                    CLOSED_FORM_METRICS
                        .iter()
                        .find(|e| e.0 == m)
                        .expect("checked")
                        .1(&c)
                })
                .collect())
        }
    }
}

/// Runs every design point. Rows come back in cartesian order whatever the
/// execution order.
pub fn run_sweep(base: &RobotConfig, spec: &SweepSpec) -> crate::Result<Vec<SweepRow>> {
    // Resolved once and shared unless a point changes the field itself.
    let base_profile = actuator::resolve_field(base).ok();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    let rows = pool.install(|| {
        (0..spec.point_count())
            .into_par_iter()
            .map(|i| {
                let point = spec.point(i);
                SweepRow {
                    index: i,
                    values: point.iter().map(|(_, v)| v.to_string()).collect(),
                    outcome: run_point(base, base_profile.as_ref(), spec, &point)
                        .map_err(|e| one_line(&e.to_string())),
                }
            })
            .collect()
    });
    Ok(rows)
}

pub fn sweep_csv(spec: &SweepSpec, rows: &[SweepRow]) -> crate::Result<Vec<u8>> {
    let io = |e: csv::Error| Error::Domain(format!("writing sweep: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["index".to_string()];
    header.extend(spec.axes.iter().map(|(k, _)| k.clone()));
    header.push("status".into());
    header.extend(spec.metrics.iter().cloned());
    header.push("error".into());
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.index.to_string()];
        rec.extend(r.values.iter().cloned());
        match &r.outcome {
            Ok(m) => {
                rec.push("ok".into());
                rec.extend(m.iter().map(|v| v.to_string()));
                rec.push(String::new());
            }
            Err(e) => {
                rec.push("failed".into());
                rec.extend(spec.metrics.iter().map(|_| String::new()));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.into_inner()
        .map_err(|e| Error::Domain(format!("writing sweep: {e}")))
}

fn cmd_sweep(loaded: &Loaded, args: &SweepArgs) -> CmdResult {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.spec.display())))?;
    let mut spec = SweepSpec::parse(&text)?;
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        spec.parallelism = j;
    }
    let rows = run_sweep(&loaded.config, &spec)?;
    let mut out = Outputs::new(&args.out.out)?;
    out.write("sweep.csv", &sweep_csv(&spec, &rows)?)?;
    let names = out.finish("sweep", loaded)?;

    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    for r in rows.iter().filter(|r| r.outcome.is_err()) {
        if let Err(e) = &r.outcome {
            eprintln!("point {} failed: {e}", r.index);
        }
    }
    emitln!(
        "{} points, {} ok, {} failed; wrote {} to {}",
        rows.len(),
        rows.len() - failed,
        failed,
        names.join(", "),
        args.out.out.display()
    );
    if failed == rows.len() {
        return Err(Failure::runtime("every design point failed"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::paper_reference_config;

    const TWO_AXES: &str = r#"
metric = ["lift", "p_net"]
mode = "closed-form"
parallelism = 2
[[axis]]
key = "drive.v_max"
values = ["2 V", "2.5 V", "3 V"]
[[axis]]
key = "wing.alpha"
values = ["20 deg", "40 deg"]
"#;

    #[test]
    fn last_axis_varies_fastest() {
        let s = SweepSpec::parse(TWO_AXES).unwrap();
        assert_eq!(s.point_count(), 6);
        assert_eq!(s.parallelism, 2);
        assert_eq!(
            s.point(0),
            vec![("drive.v_max", "2 V"), ("wing.alpha", "20 deg")]
        );
        assert_eq!(
            s.point(1),
            vec![("drive.v_max", "2 V"), ("wing.alpha", "40 deg")]
        );
        assert_eq!(
            s.point(4),
            vec![("drive.v_max", "3 V"), ("wing.alpha", "20 deg")]
        );
    }

    #[test]
    fn numeric_values_are_accepted() {
        let s = SweepSpec::parse("metric = \"lift\"\nmode = \"closed-form\"\n[[axis]]\nkey = \"coil.n_turns\"\nvalues = [100, 200]\n").unwrap();
        assert_eq!(s.point(1), vec![("coil.n_turns", "200")]);
        assert_eq!(s.mode, SweepMode::ClosedForm);
    }

    #[test]
    fn bad_specs_are_usage_errors() {
        let axis = "[[axis]]\nkey = \"drive.v_max\"\nvalues = [\"2 V\"]\n";
        for text in [
            "metric = \"lift\"\n".to_string(),
            format!("metric = \"nope\"\n{axis}"),
            format!("metric = []\n{axis}"),
            format!("metric = \"lift\"\nextra = 1\n{axis}"),
            format!("metric = \"lift\"\n{axis}{axis}"),
            "metric = \"lift\"\n[[axis]]\nkey = \"no.such\"\nvalues = [\"1\"]\n".to_string(),
            "metric = \"lift\"\n[[axis]]\nkey = \"drive.v_max\"\nvalues = []\n".to_string(),
            "metric = \"lift\"\n[[axis]]\nkey = \"mass_parts\"\nvalues = [\"1\"]\n".to_string(),
            format!("metric = \"lift\"\nparallelism = 0\n{axis}"),
            format!("metric = \"lift\"\nmax_points = 2\n{axis}[[axis]]\nkey = \"wing.alpha\"\nvalues = [\"1 deg\", \"2 deg\", \"3 deg\"]\n"),
        ] {
            let e = SweepSpec::parse(&text).unwrap_err();
            assert!(matches!(e, Error::Usage(_)), "{text}: {e}");
        }
    }

    #[test]
    fn one_line_flattens_messages() {
        assert_eq!(one_line("  a\n\n   b  \nc"), "a b c");
        assert_eq!(one_line(""), "");
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::Usage("x".into())).code, EXIT_USAGE);
        assert_eq!(
            Failure::from(Error::MissingKey("k".into())).code,
            EXIT_USAGE
        );
        assert_eq!(Failure::from(Error::Domain("x".into())).code, EXIT_RUNTIME);
    }

    #[test]
    fn prober_caches_identical_configs() {
        let cfg = paper_reference_config();
        let mut p = Prober::new(&cfg, "k_con", 0.02).unwrap();
        let a = p.evaluate(150e-6).unwrap();
        let b = p.evaluate(150e-6).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.evaluations(), 1);
        p.evaluate(140e-6).unwrap();
        assert_eq!(p.evaluations(), 2);
    }
}
