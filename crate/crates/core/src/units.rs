//! Unit-suffixed scalar parsing for config files.
//!
//! Values are written as `"<number> <unit>"`, e.g. `"20 mm"`, `"150 uN*m"`,
//! `"5333 mg*mm^2"`. Everything is converted to SI on the way in. Spaces,
//! `*` and `·` inside the unit are ignored, `µ` is accepted for `u`, and
//! `^2`/`²` style exponents are both fine.

use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Dimensionless,
    Length,
    Mass,
    Angle,
    Time,
    Frequency,
    Voltage,
    Resistance,
    Power,
    Torque,
    Stiffness,
    Inertia,
    Density,
    Pressure,
    Field,
    Damping,
    Count,
}

impl Dimension {
    /// Canonical SI unit, used when serializing.
    pub fn si_unit(self) -> &'static str {
        match self {
            Dimension::Dimensionless | Dimension::Count => "",
            Dimension::Length => "m",
            Dimension::Mass => "kg",
            Dimension::Angle => "rad",
            Dimension::Time => "s",
            Dimension::Frequency => "Hz",
            Dimension::Voltage => "V",
            Dimension::Resistance => "ohm",
            Dimension::Power => "W",
            Dimension::Torque => "N*m",
            Dimension::Stiffness => "N*m/rad",
            Dimension::Inertia => "kg*m^2",
            Dimension::Density => "kg/m^3",
            Dimension::Pressure => "Pa",
            Dimension::Field => "T",
            Dimension::Damping => "N*m*s^2",
        }
    }

    /// (unit, numerator, denominator): SI = value * num / den. Dividing by an
    /// exact power of ten keeps `"13 mg"` identical to the literal `13e-6`.
    fn units(self) -> &'static [(&'static str, f64, f64)] {
        match self {
            Dimension::Dimensionless => &[("", 1.0, 1.0), ("%", 1.0, 1e2)],
            Dimension::Count => &[("", 1.0, 1.0)],
            Dimension::Length => &[
                ("m", 1.0, 1.0),
                ("cm", 1.0, 1e2),
                ("mm", 1.0, 1e3),
                ("um", 1.0, 1e6),
                ("nm", 1.0, 1e9),
            ],
            Dimension::Mass => &[
                ("kg", 1.0, 1.0),
                ("g", 1.0, 1e3),
                ("mg", 1.0, 1e6),
                ("ug", 1.0, 1e9),
            ],
            Dimension::Angle => &[
                ("rad", 1.0, 1.0),
                ("mrad", 1.0, 1e3),
                ("deg", PI, 180.0),
                ("°", PI, 180.0),
            ],
            Dimension::Time => &[("s", 1.0, 1.0), ("ms", 1.0, 1e3), ("us", 1.0, 1e6)],
            Dimension::Frequency => &[
                ("Hz", 1.0, 1.0),
                ("rev/s", 1.0, 1.0),
                ("kHz", 1e3, 1.0),
                ("rpm", 1.0, 60.0),
            ],
            Dimension::Voltage => &[("V", 1.0, 1.0), ("mV", 1.0, 1e3)],
            Dimension::Resistance => &[("ohm", 1.0, 1.0), ("Ω", 1.0, 1.0), ("kohm", 1e3, 1.0)],
            Dimension::Power => &[("W", 1.0, 1.0), ("mW", 1.0, 1e3), ("uW", 1.0, 1e6)],
            Dimension::Torque => &[("N*m", 1.0, 1.0), ("mN*m", 1.0, 1e3), ("uN*m", 1.0, 1e6)],
            Dimension::Stiffness => &[
                ("N*m/rad", 1.0, 1.0),
                ("mN*m/rad", 1.0, 1e3),
                ("uN*m/rad", 1.0, 1e6),
                ("N*m", 1.0, 1.0),
                ("mN*m", 1.0, 1e3),
                ("uN*m", 1.0, 1e6),
            ],
            Dimension::Inertia => &[
                ("kg*m^2", 1.0, 1.0),
                ("g*mm^2", 1.0, 1e9),
                ("mg*mm^2", 1.0, 1e12),
            ],
            Dimension::Density => &[("kg/m^3", 1.0, 1.0), ("g/cm^3", 1e3, 1.0)],
            Dimension::Pressure => &[
                ("Pa", 1.0, 1.0),
                ("kPa", 1e3, 1.0),
                ("MPa", 1e6, 1.0),
                ("GPa", 1e9, 1.0),
            ],
            Dimension::Field => &[("T", 1.0, 1.0), ("mT", 1.0, 1e3)],
            Dimension::Damping => &[("N*m*s^2", 1.0, 1.0)],
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.si_unit();
        if s.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(s)
        }
    }
}

fn normalize_unit(u: &str) -> String {
    let mut out = String::with_capacity(u.len());
    for c in u.chars() {
        match c {
            ' ' | '*' | '·' | '^' => {}
            'µ' | 'μ' => out.push('u'),
            '²' => out.push('2'),
            '³' => out.push('3'),
            // SI prefixes are case sensitive for m/M; everything else we fold.
            'M' => out.push('M'),
            c => out.extend(c.to_lowercase()),
        }
    }
    out
}

/// Parses `"<number> [unit]"` into SI. A bare number is taken as already SI.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, String> {
    let text = text.trim();
    let split = text
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || c == '+'
                || c == '-'
                || ((c == 'e' || c == 'E') && i > 0 && next_is_exponent(&text[i..])))
        })
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    let (num, unit) = text.split_at(split);
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("`{text}` does not start with a number"))?;
    let unit = normalize_unit(unit.trim());
    if unit.is_empty() {
        return Ok(value);
    }
    let &(_, n, d) = dim
        .units()
        .iter()
        .find(|(u, _, _)| normalize_unit(u) == unit)
        .ok_or_else(|| format!("unit `{}` is not a valid {dim:?} unit", unit))?;
    match (power_of_ten(n), power_of_ten(d)) {
        // Shift the decimal exponent so "0.78 mm" parses to the same double as 0.78e-3.
        (Some(pn), Some(pd)) => shift_exponent(num.trim(), pn - pd)
            .ok_or_else(|| format!("`{text}` does not start with a number")),
        _ => Ok(value * n / d),
    }
}

fn power_of_ten(x: f64) -> Option<i32> {
    let e = x.log10().round() as i32;
    (10f64.powi(e) == x).then_some(e)
}

fn shift_exponent(num: &str, shift: i32) -> Option<f64> {
    let (mantissa, exp) = match num.find(['e', 'E']) {
        Some(i) => (&num[..i], num[i + 1..].parse::<i32>().ok()?),
        None => (num, 0),
    };
    format!("{mantissa}e{}", exp + shift).parse().ok()
}

fn next_is_exponent(rest: &str) -> bool {
    let mut chars = rest.chars().skip(1);
    match chars.next() {
        Some(c) if c.is_ascii_digit() => true,
        Some('+') | Some('-') => chars.next().is_some_and(|c| c.is_ascii_digit()),
        _ => false,
    }
}

/// Formats an SI value with its canonical unit. `{}` on f64 round-trips exactly.
pub fn format_quantity(value: f64, dim: Dimension) -> String {
    match dim.si_unit() {
        "" => format!("{value}"),
        u => format!("{value} {u}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engineering_units() {
        assert_eq!(parse_quantity("20 mm", Dimension::Length).unwrap(), 0.02);
        assert_eq!(
            parse_quantity("0.78 mm", Dimension::Length).unwrap(),
            0.78e-3
        );
        assert_eq!(
            parse_quantity("955.6 uN*m", Dimension::Stiffness).unwrap(),
            955.6e-6
        );
        assert_eq!(
            parse_quantity("1.5e-1 mm", Dimension::Length).unwrap(),
            1.5e-4
        );
        assert_eq!(
            parse_quantity("114 GPa", Dimension::Pressure).unwrap(),
            114e9
        );
        assert_eq!(parse_quantity("13 mg", Dimension::Mass).unwrap(), 13e-6);
        assert!((parse_quantity("150 uN*m", Dimension::Stiffness).unwrap() - 150e-6).abs() < 1e-18);
        assert!((parse_quantity("150 µN·m", Dimension::Stiffness).unwrap() - 150e-6).abs() < 1e-18);
        assert!(
            (parse_quantity("30 deg", Dimension::Angle).unwrap() - 30f64.to_radians()).abs()
                < 1e-15
        );
        assert!(
            (parse_quantity("5333 mg*mm^2", Dimension::Inertia).unwrap() - 5.333e-9).abs() < 1e-20
        );
        assert!(
            (parse_quantity("5333 mg·mm²", Dimension::Inertia).unwrap() - 5.333e-9).abs() < 1e-20
        );
        assert_eq!(
            parse_quantity("114 GPa", Dimension::Pressure).unwrap(),
            114e9
        );
        assert!(
            (parse_quantity("0.43 %", Dimension::Dimensionless).unwrap() - 0.0043).abs() < 1e-18
        );
        assert_eq!(
            parse_quantity("47 rev/s", Dimension::Frequency).unwrap(),
            47.0
        );
        assert_eq!(
            parse_quantity("1.22 kg/m^3", Dimension::Density).unwrap(),
            1.22
        );
        assert_eq!(parse_quantity("8.8 mW", Dimension::Power).unwrap(), 8.8e-3);
        assert_eq!(parse_quantity("1e-3", Dimension::Angle).unwrap(), 1e-3);
        assert_eq!(parse_quantity("2.5e-3 s", Dimension::Time).unwrap(), 2.5e-3);
    }

    #[test]
    fn milli_vs_mega() {
        assert_eq!(parse_quantity("3 MPa", Dimension::Pressure).unwrap(), 3e6);
        assert_eq!(parse_quantity("3 mV", Dimension::Voltage).unwrap(), 3e-3);
    }

    #[test]
    fn rejects_wrong_dimension() {
        assert!(parse_quantity("20 mg", Dimension::Length).is_err());
        assert!(parse_quantity("mm", Dimension::Length).is_err());
    }

    #[test]
    fn si_format_round_trips() {
        for &(v, d) in &[
            (0.02, Dimension::Length),
            (4.16e-10, Dimension::Inertia),
            (1.0264e-3, Dimension::Stiffness),
            (0.1 + 0.2, Dimension::Power),
        ] {
            assert_eq!(parse_quantity(&format_quantity(v, d), d).unwrap(), v);
        }
    }
}
