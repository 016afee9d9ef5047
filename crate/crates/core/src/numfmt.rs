//! Fixed-precision numeric output (9 significant digits) for reproducible diffs.

const SIG: i32 = 9;

/// Formats `x` with 9 significant digits, trimming trailing zeros.
pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..SIG).contains(&exp) {
        let decimals = (SIG - 1 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        // rounding can carry into a new digit (9.9999999995 -> 10.00000000)
        trim_fixed(&s)
    } else {
        let s = format!("{:.*e}", (SIG - 1) as usize, x);
        let (mantissa, exponent) = s.split_once('e').expect("scientific format");
        format!("{}e{}", trim_fixed(mantissa), exponent)
    }
}

fn trim_fixed(s: &str) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" {
            "0".into()
        } else {
            t.into()
        }
    } else {
        s.into()
    }
}

/// Rounds `x` to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    sig9(x).parse().unwrap_or(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(sig9(25907.2), "25907.2");
        assert_eq!(sig9(0.0024), "0.0024");
        assert_eq!(sig9(1.0e12), "1e12");
        assert_eq!(sig9(-3.5e-7), "-3.5e-7");
        assert_eq!(sig9(123456789.4), "123456789");
        assert_eq!(round9(1.0 / 3.0), 0.333333333);
    }
}
