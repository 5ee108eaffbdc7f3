//! CSV output: header row, comma separated, 12 significant digits.

use std::io::{self, Write};

use super::tv::{SizeRow, TvCurve};

/// Format like C's `%.{sig}g`: fixed notation for moderate exponents,
/// scientific otherwise, trailing zeros trimmed.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sig = sig.max(1);
    // exponent after rounding to `sig` digits
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -5 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_tv_curve(curve: &TvCurve, w: &mut (impl Write + ?Sized)) -> io::Result<()> {
    writeln!(
        w,
        "sampling_level,measure_level,fraction,target,achieved,tv_sampling,tv_measure"
    )?;
    for p in &curve.points {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            curve.sampling_level,
            curve.measure_level,
            format_sig(p.fraction, 12),
            p.target,
            p.achieved,
            format_sig(p.tv_sampling, 12),
            format_sig(p.tv_measure, 12)
        )?;
    }
    Ok(())
}

pub fn write_size_histogram(rows: &[SizeRow], w: &mut (impl Write + ?Sized)) -> io::Result<()> {
    writeln!(w, "cluster_id,size,log10_size")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.cluster_id, r.size, format_sig(r.log10_size, 12))?;
    }
    Ok(())
}
