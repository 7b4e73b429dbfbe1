//! Digamma, trigamma and log-gamma for positive real arguments.

use crate::error::{Error, Result};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

const SHIFT_THRESHOLD: f64 = 6.0;

/// Digamma function Ψ(x) for x > 0.
///
/// Shifts the argument above 6 with Ψ(x) = Ψ(x+1) − 1/x, then evaluates
/// the asymptotic expansion through the x⁻¹⁴ term.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("digamma requires x > 0, got {x}")));
    }
    Ok(digamma_unchecked(x))
}

/// Trigamma function Ψ′(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("trigamma requires x > 0, got {x}")));
    }
    Ok(trigamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k) for k = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + Σ B_2k / x^(2k+1)
    let series = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + series
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(x) for x > 0 (Lanczos approximation, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// ln B(a, b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-10);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-10);
        // Ψ(1/2) = −γ − 2 ln 2
        let half = -EULER_GAMMA - 2.0 * 2f64.ln();
        assert!((digamma(0.5).unwrap() - half).abs() < 1e-10);
    }

    #[test]
    fn trigamma_at_one_is_basel_sum() {
        // Σ 1/n² summed in reverse with the 1/N tail correction.
        let n = 2_000_000u64;
        let mut s = 0.0;
        for k in (1..=n).rev() {
            let k = k as f64;
            s += 1.0 / (k * k);
        }
        let nf = n as f64;
        s += 1.0 / nf - 1.0 / (2.0 * nf * nf);
        assert!((trigamma(1.0).unwrap() - s).abs() < 1e-10);
        assert!((trigamma(1.0).unwrap() - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-10);
    }

    #[test]
    fn recurrence_holds() {
        for k in 1..=100 {
            let x = k as f64 * 0.1;
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() < 1e-10, "x={x}");
            let t = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap();
            assert!((t - 1.0 / (x * x)).abs() < 1e-9 * (1.0 / (x * x)).max(1.0), "x={x}");
        }
    }

    #[test]
    fn trigamma_is_derivative_of_digamma() {
        for &x in &[0.3, 1.0, 2.5, 7.0, 40.0] {
            let h = 1e-5;
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert!((fd - trigamma(x).unwrap()).abs() < 1e-6 * trigamma(x).unwrap().max(1.0));
        }
    }

    #[test]
    fn rejects_non_positive() {
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.5).is_err());
        assert!(trigamma(0.0).is_err());
    }

    #[test]
    fn ln_gamma_factorials() {
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        assert!((ln_beta(2.0, 3.0) - (1.0f64 / 12.0).ln()).abs() < 1e-12);
    }
}
