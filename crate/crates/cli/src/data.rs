//! CSV ingestion and output, preprocessing and atomic file writes.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use cph_core::Observation;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Affine change of units `x ↦ (x − shift)·scale` applied before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Preprocessing { shift: 0.0, scale: 1.0 }
    }
}

impl Preprocessing {
    pub fn new(shift: f64, scale: f64) -> CliResult<Self> {
        if !shift.is_finite() {
            return Err(CliError::usage(format!("shift must be finite, got {shift}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(CliError::usage(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(Preprocessing { shift, scale })
    }

    pub fn is_identity(&self) -> bool {
        self.shift == 0.0 && self.scale == 1.0
    }

    /// Original units to model units.
    pub fn forward(&self, x: f64) -> f64 {
        (x - self.shift) * self.scale
    }

    /// Model units to original units.
    pub fn inverse(&self, y: f64) -> f64 {
        y / self.scale + self.shift
    }

    /// Transforms an observation given in original units. Lower censoring
    /// bounds that fall at or below the shift become left-censoring.
    pub fn apply(&self, obs: Observation) -> Result<Observation, String> {
        let lower = |v: f64| if v == 0.0 { 0.0 } else { self.forward(v).max(0.0) };
        let out = match obs {
            Observation::Exact(x) => Observation::Exact(self.forward(x)),
            Observation::Interval(v, w) => Observation::Interval(lower(v), self.forward(w)),
            Observation::RightCensored(v) => {
                let v = lower(v);
                if v == 0.0 {
                    Observation::Interval(0.0, f64::INFINITY)
                } else {
                    Observation::RightCensored(v)
                }
            }
        };
        out.validate().map_err(|_| format!("{obs} is not positive after preprocessing"))?;
        Ok(out)
    }
}

/// Observations in model units with the transformation that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn has_censoring(&self) -> bool {
        self.observations.iter().any(|o| o.is_censored())
    }
}

fn parse_number(field: &str, line: u64, column: &str) -> CliResult<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| CliError::data(format!("line {line}: cannot parse {column} '{field}' as a number")))?;
    if !v.is_finite() {
        return Err(CliError::data(format!("line {line}: {column} must be finite, got {field}")));
    }
    Ok(v)
}

/// Reads observations from CSV text with a `value` or `lower,upper`
/// header. An empty `upper` is right-censoring and `lower == upper` an
/// exact value.
pub fn parse_observations<R: Read>(input: R, pre: Preprocessing) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let interval = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["value"] => false,
        ["lower", "upper"] => true,
        [] | [""] => return Err(CliError::data("no observations")),
        other => {
            return Err(CliError::data(format!(
                "header must be 'value' or 'lower,upper', found '{}'",
                other.join(",")
            )))
        }
    };
    let mut observations = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::data(format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let obs = if interval {
            let lower = parse_number(record.get(0).unwrap_or(""), line, "lower")?;
            match record.get(1).unwrap_or("") {
                "" if lower == 0.0 => Observation::Interval(0.0, f64::INFINITY),
                "" => Observation::RightCensored(lower),
                upper => match parse_number(upper, line, "upper")? {
                    u if u == lower => Observation::Exact(lower),
                    u => Observation::Interval(lower, u),
                },
            }
        } else {
            Observation::Exact(parse_number(record.get(0).unwrap_or(""), line, "value")?)
        };
        obs.validate().map_err(|_| CliError::data(format!("line {line}: invalid observation {obs}")))?;
        let obs = pre.apply(obs).map_err(|m| CliError::data(format!("line {line}: {m}")))?;
        observations.push(obs);
    }
    if observations.is_empty() {
        return Err(CliError::data("no observations"));
    }
    Ok(Dataset { observations, preprocessing: pre })
}

pub fn load_dataset(path: &Path, pre: Preprocessing) -> CliResult<Dataset> {
    let file = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    parse_observations(file, pre).map_err(|e| e.context(&path.display().to_string()))
}

/// Writes `value` rows in shortest round-trip form.
pub fn write_values<W: Write + ?Sized>(out: &mut W, values: &[f64]) -> io::Result<()> {
    writeln!(out, "value")?;
    for v in values {
        writeln!(out, "{v}")?;
    }
    Ok(())
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so a failed command leaves no partial output.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::data(format!("cannot create a file in {}: {e}", dir.display())))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| CliError::data(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= digits as i32 {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_layouts() {
        let d = parse_observations("value\n1.5\n2\n".as_bytes(), Preprocessing::default()).unwrap();
        assert_eq!(d.observations, vec![Observation::Exact(1.5), Observation::Exact(2.0)]);
        let d = parse_observations("lower,upper\n1,2\n3,\n0,4\n5,5\n".as_bytes(), Preprocessing::default()).unwrap();
        assert_eq!(
            d.observations,
            vec![
                Observation::Interval(1.0, 2.0),
                Observation::RightCensored(3.0),
                Observation::Interval(0.0, 4.0),
                Observation::Exact(5.0)
            ]
        );
        assert!(d.has_censoring());
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse_observations("value\n1\nabc\n".as_bytes(), Preprocessing::default()).unwrap_err();
        assert!(matches!(&e, CliError::Data(m) if m.contains("line 3")), "{e}");
        let e = parse_observations("value\n1\n-2\n".as_bytes(), Preprocessing::default()).unwrap_err();
        assert!(matches!(&e, CliError::Data(m) if m.contains("line 3")), "{e}");
        let e = parse_observations("lower,upper\n2,1\n".as_bytes(), Preprocessing::default()).unwrap_err();
        assert!(matches!(&e, CliError::Data(m) if m.contains("line 2")), "{e}");
    }

    #[test]
    fn empty_input_has_no_observations() {
        for text in ["", "value\n"] {
            let e = parse_observations(text.as_bytes(), Preprocessing::default()).unwrap_err();
            assert!(matches!(&e, CliError::Data(m) if m.contains("no observations")), "{e}");
        }
        assert!(parse_observations("x\n1\n".as_bytes(), Preprocessing::default()).is_err());
    }

    #[test]
    fn preprocessing_round_trip() {
        let pre = Preprocessing::new(1e6, 1e-6).unwrap();
        for x in [1.0e6 + 1.0, 3.5e6, 2.0e7] {
            assert!((pre.inverse(pre.forward(x)) - x).abs() <= 1e-12 * x);
        }
        let d = parse_observations("lower,upper\n1500000,2000000\n500000,1200000\n".as_bytes(), pre).unwrap();
        assert_eq!(d.observations[0], Observation::Interval(0.5, 1.0));
        // The lower bound falls below the shift and becomes left-censoring.
        assert!(matches!(d.observations[1], Observation::Interval(v, _) if v == 0.0));
        assert!(parse_observations("value\n900000\n".as_bytes(), pre).is_err());
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(format_sig(0.75, 12), "0.75");
        assert_eq!(format_sig(1.0, 12), "1");
        assert_eq!(format_sig(1.0 / 3.0, 12), "0.333333333333");
        assert_eq!(format_sig(1234567.0, 12), "1234567");
        assert_eq!(format_sig(1.5e-9, 12), "1.5e-9");
        assert_eq!(format_sig(-2.5e20, 12), "-2.5e20");
    }

    #[test]
    fn values_round_trip_exactly() {
        let xs = [0.1, 1.0 / 3.0, 2.0f64.sqrt() * 1e-300, 123456.789e10];
        let mut buf = Vec::new();
        write_values(&mut buf, &xs).unwrap();
        let d = parse_observations(buf.as_slice(), Preprocessing::default()).unwrap();
        let back: Vec<f64> = d.observations.iter().map(|o| o.value()).collect();
        assert_eq!(back, xs);
    }
}
