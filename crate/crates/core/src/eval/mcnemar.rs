//! McNemar's test on paired classifier correctness.

use crate::error::{Error, Result};

const LANCZOS: [f64; 9] = [
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

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + 7.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: series below `a + 1`,
/// Lentz continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let prefactor = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        1.0 - sum * prefactor
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        prefactor * h
    }
}

/// Upper tail of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    gamma_q(dof / 2.0, x / 2.0)
}

/// Paired correctness counts of classifiers A and B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairedCounts {
    pub both_correct: u64,
    /// A correct, B wrong.
    pub only_a: u64,
    /// A wrong, B correct.
    pub only_b: u64,
    pub both_wrong: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McNemarResult {
    pub chi2_corrected: f64,
    pub p_corrected: f64,
    pub chi2: f64,
    pub p: f64,
}

/// Continuity-corrected `max(0, |b - c| - 1)^2 / (b + c)` and uncorrected
/// `(b - c)^2 / (b + c)`, each with its 1-dof chi-square p-value.
pub fn mcnemar_test(counts: &PairedCounts) -> Result<McNemarResult> {
    let (b, c) = (counts.only_a as f64, counts.only_b as f64);
    if b + c == 0.0 {
        return Err(Error::InsufficientData("McNemar's test needs at least one discordant pair".into()));
    }
    let corrected = ((b - c).abs() - 1.0).max(0.0).powi(2) / (b + c);
    let plain = (b - c).powi(2) / (b + c);
    Ok(McNemarResult {
        chi2_corrected: corrected,
        p_corrected: chi_square_sf(corrected, 1.0),
        chi2: plain,
        p: chi_square_sf(plain, 1.0),
    })
}

/// Pairs per-cell correctness of two maps against a reference. With
/// `class = Some(k)` correctness is one-vs-rest for class `k`: a map is
/// correct where it agrees with the reference on membership in `k`.
pub fn paired_counts(
    map_a: &[Option<u8>],
    map_b: &[Option<u8>],
    reference: &[Option<u8>],
    class: Option<u8>,
) -> Result<PairedCounts> {
    if map_a.len() != reference.len() || map_b.len() != reference.len() {
        return Err(Error::invalid("maps and reference differ in length"));
    }
    let mut out = PairedCounts::default();
    for ((a, b), r) in map_a.iter().zip(map_b).zip(reference) {
        let (Some(a), Some(b), Some(r)) = (a, b, r) else {
            continue;
        };
        let ok = |m: &u8| match class {
            None => m == r,
            Some(k) => (*m == k) == (*r == k),
        };
        match (ok(a), ok(b)) {
            (true, true) => out.both_correct += 1,
            (true, false) => out.only_a += 1,
            (false, true) => out.only_b += 1,
            (false, false) => out.both_wrong += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn counts(b: u64, c: u64) -> PairedCounts {
        PairedCounts {
            both_correct: 100,
            only_a: b,
            only_b: c,
            both_wrong: 7,
        }
    }

    #[test]
    fn textbook_values() {
        let r = mcnemar_test(&counts(10, 30)).unwrap();
        assert!((r.chi2_corrected - 9.025).abs() < 1e-12);
        assert!((r.chi2 - 10.0).abs() < 1e-12);
        let tied = mcnemar_test(&counts(12, 12)).unwrap();
        assert_eq!(tied.chi2, 0.0);
        assert_eq!(tied.p, 1.0);
        assert!((chi_square_sf(3.841, 1.0) - 0.05).abs() < 1e-3);
        assert!(mcnemar_test(&counts(0, 0)).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!(ln_gamma(1.0).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_vs_rest_pairing() {
        let r = [Some(0), Some(1), Some(2), Some(1)];
        let a = [Some(0), Some(1), Some(1), Some(1)];
        let b = [Some(0), Some(2), Some(2), None];
        let overall = paired_counts(&a, &b, &r, None).unwrap();
        assert_eq!(overall, PairedCounts { both_correct: 1, only_a: 1, only_b: 1, both_wrong: 0 });
        let class1 = paired_counts(&a, &b, &r, Some(1)).unwrap();
        assert_eq!(class1, PairedCounts { both_correct: 1, only_a: 1, only_b: 1, both_wrong: 0 });
    }

    proptest! {
        #[test]
        fn sf_matches_statrs(x in 0.0f64..60.0) {
            let oracle = ChiSquared::new(1.0).unwrap().sf(x);
            prop_assert!((chi_square_sf(x, 1.0) - oracle).abs() < 1e-10);
            let oracle3 = ChiSquared::new(3.0).unwrap().sf(x);
            prop_assert!((chi_square_sf(x, 3.0) - oracle3).abs() < 1e-10);
        }

        #[test]
        fn corrected_never_exceeds_plain(b in 0u64..500, c in 0u64..500) {
            prop_assume!(b + c > 0);
            let r = mcnemar_test(&counts(b, c)).unwrap();
            prop_assert!(r.chi2_corrected <= r.chi2);
            prop_assert!(r.p_corrected >= r.p);
        }
    }
}
