use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str = "seed,episode,strategy,alpha,return,steps,greedy_return,wall_ms";

/// One episode of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub episode: usize,
    pub strategy: String,
    pub alpha: Option<f64>,
    pub ret: f64,
    pub steps: usize,
    pub greedy_return: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRow {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        self.seed == other.seed
            && self.episode == other.episode
            && self.strategy == other.strategy
            && bits(self.alpha) == bits(other.alpha)
            && self.ret.to_bits() == other.ret.to_bits()
            && self.steps == other.steps
            && bits(self.greedy_return) == bits(other.greedy_return)
    }

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.episode,
            self.strategy,
            opt(self.alpha),
            format_sig(self.ret),
            self.steps,
            opt(self.greedy_return),
            format_sig(self.wall_ms)
        )
    }
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig(x: f64) -> String {
    const DIGITS: i32 = 6;
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (DIGITS - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, render_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize) -> MetricsRow {
        MetricsRow {
            seed: 7,
            episode,
            strategy: "ent".into(),
            alpha: Some(-0.5),
            ret: 12.0,
            steps: 500,
            greedy_return: None,
            wall_ms: 1.23456789,
        }
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_sig(0.0), "0");
        assert_eq!(format_sig(12.0), "12");
        assert_eq!(format_sig(1.23456789), "1.23457");
        assert_eq!(format_sig(-0.5), "-0.5");
        assert_eq!(format_sig(123456.7), "123457");
        assert_eq!(format_sig(1234567.0), "1.23457e+06");
        assert_eq!(format_sig(0.0001), "0.0001");
        assert_eq!(format_sig(0.00001234567), "1.23457e-05");
        assert_eq!(format_sig(999999.5), "1e+06");
    }

    #[test]
    fn empty_run_is_header_only() {
        assert_eq!(render_csv(&[]), format!("{HEADER}\n"));
    }

    #[test]
    fn three_episodes_four_lines() {
        let rows: Vec<_> = (0..3).map(row).collect();
        let text = render_csv(&rows);
        assert_eq!(text.lines().count(), 4);
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().nth(1).unwrap(), "7,0,ent,-0.5,12,500,,1.23457");
    }

    #[test]
    fn re_emission_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..3).map(row).collect();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b/c.csv"));
        write_csv(&a, &rows).unwrap();
        write_csv(&b, &rows).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn write_error_carries_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_csv(&blocker.join("m.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
