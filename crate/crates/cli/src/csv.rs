//! Metrics serialization: `#`-prefixed header lines carrying the resolved
//! configuration, one header row, then one row per record with floats at
//! 17 significant digits.

use ef_landing::diagnostics::MetricsRecord;
use std::fmt::Write as _;

pub const BASE_COLUMNS: &str = "iter,loss_gap,constraint_violation,rgrad_norm_sq,bytes_up_cum,wall_ms";
pub const DIAG_COLUMNS: &str = ",lyapunov,err_G,err_P_tilde,err_P,cc_dist";

/// 17 significant digits, enough for exact f64 round trips.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn render(
    echo: &[(String, String)],
    records: &[MetricsRecord],
    diagnostics: bool,
) -> String {
    let mut out = String::new();
    for (key, value) in echo {
        let _ = writeln!(out, "# {key} = {value}");
    }
    out.push_str(BASE_COLUMNS);
    if diagnostics {
        out.push_str(DIAG_COLUMNS);
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            format_float(r.loss_gap),
            format_float(r.constraint_violation),
            format_float(r.rgrad_norm_sq),
            r.bytes_up_cum,
            format_float(r.wall_ms),
        );
        if diagnostics {
            for v in [r.lyapunov, r.err_g, r.err_p_tilde, r.err_p, r.cc_dist] {
                let _ = write!(out, ",{}", format_float(v.unwrap_or(f64::NAN)));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for x in [0.1, -2.355112e0, 1.0 / 3.0, 8.437695e-15, 123456.789] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }

    #[test]
    fn renders_header_and_rows() {
        let rec = MetricsRecord {
            iter: 3,
            loss_gap: 0.5,
            constraint_violation: 0.0,
            rgrad_norm_sq: 1.0,
            bytes_up_cum: 42,
            wall_ms: 1.5,
            lyapunov: None,
            err_g: None,
            err_p_tilde: None,
            err_p: None,
            cc_dist: None,
        };
        let text = render(&[("seed".into(), "1".into())], &[rec], false);
        assert!(text.starts_with("# seed = 1\n"));
        assert!(text.contains(BASE_COLUMNS));
        assert!(text.contains("\n3,5.0000000000000000e-1,"));
    }
}
