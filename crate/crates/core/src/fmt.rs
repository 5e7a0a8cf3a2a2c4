//! Locale-independent float formatting for CSV artifacts: shortest
//! representation after rounding to 6 significant digits. NaN renders as
//! the literal token `NAN` (never silently zeroed).

pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "NAN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "INF".into() } else { "-INF".into() };
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(5 - exp);
    let rounded = (x * scale).round() / scale;
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::fmt6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(1.0), "1");
        assert_eq!(fmt6(0.5), "0.5");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt6(123456789.0), "123457000");
        assert_eq!(fmt6(-0.000123456789), "-0.000123457");
        assert_eq!(fmt6(f64::NAN), "NAN");
        assert_eq!(fmt6(std::f64::consts::PI), "3.14159");
    }

    #[test]
    fn deterministic_across_calls() {
        for i in 0..1000 {
            let x = (i as f64 * 0.7391).sin() * 1834.2;
            assert_eq!(fmt6(x), fmt6(x));
        }
    }
}
