//! Decimal digits of pi from Machin's arctangent identity in fixed-point
//! big-integer arithmetic.

use num_bigint::BigUint;
use num_traits::Zero;

/// Extra decimal places carried through the series and cut at the end.
pub const GUARD_DIGITS: u32 = 10;

/// `10^scale * arctan(1/x)`, truncated.
fn arctan_inv(x: u32, scale: &BigUint) -> BigUint {
    let x2 = BigUint::from(x) * x;
    let mut term = scale / x;
    let mut pos = BigUint::zero();
    let mut neg = BigUint::zero();
    let mut k: u32 = 0;
    while !term.is_zero() {
        let t = &term / (2 * k + 1);
        if k % 2 == 0 {
            pos += t;
        } else {
            neg += t;
        }
        term /= &x2;
        k += 1;
    }
    pos - neg
}

/// Pi as `"3."` followed by `digits` decimals.
pub fn machin(digits: u32) -> String {
    let scale = BigUint::from(10u32).pow(digits + GUARD_DIGITS);
    let pi = (arctan_inv(5, &scale) * 4u32 - arctan_inv(239, &scale)) * 4u32;
    let truncated = pi / BigUint::from(10u32).pow(GUARD_DIGITS);
    let s = truncated.to_string();
    let (int, frac) = s.split_at(1);
    if digits == 0 {
        return int.to_string();
    }
    format!("{int}.{frac}")
}

/// Work units charged for `digits` digits: each series term costs a
/// division of a number with `digits` decimals, and the term count grows
/// linearly with `digits`.
pub fn work(digits: u32) -> f64 {
    let d = (digits + GUARD_DIGITS) as f64;
    d * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_prefix() {
        assert_eq!(machin(0), "3");
        assert_eq!(machin(5), "3.14159");
        assert_eq!(machin(50), "3.14159265358979323846264338327950288419716939937510");
    }

    #[test]
    fn longer_runs_extend_shorter_ones() {
        let long = machin(300);
        assert_eq!(long.len(), 302);
        assert!(long.starts_with(&machin(120)));
    }

    #[test]
    fn arctan_series_truncates_each_term() {
        // 10^20 * (1e-6 - 1e-18 / 3), term by term
        let s = BigUint::from(10u32).pow(20);
        let want = BigUint::from(10u32).pow(14) - BigUint::from(33u32);
        assert_eq!(arctan_inv(1_000_000, &s), want);
    }
}
