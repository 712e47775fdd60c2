//! Photon-number distributions for the light sources used in calibration.
//!
//! All means are the mean photon number incident on the detector. For the
//! two-mode squeezed vacuum that is the combined beam, i.e. twice the
//! per-mode mean.

use std::fmt;

use crate::error::{invalid, Result};
use crate::numerics::kahan_sum;

/// Default bound on the probability mass discarded by truncation.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

/// Truncated probability vector over photon number `n = 0..=n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonDistribution {
    probs: Vec<f64>,
    declared_mean: f64,
    tail_tol: f64,
}

impl PhotonDistribution {
    /// Wraps an arbitrary probability vector, e.g. an empirical histogram.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("probs", "empty distribution"));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid("probs", format!("entry {bad} outside [0, 1]")));
        }
        let mean = kahan_sum(probs.iter().enumerate().map(|(n, p)| n as f64 * p));
        Ok(Self {
            probs,
            declared_mean: mean,
            tail_tol: 0.0,
        })
    }

    /// Normalised histogram of counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(invalid("counts", "no events"));
        }
        Self::from_probs(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn n_max(&self) -> usize {
        self.probs.len() - 1
    }

    /// Probability of `n` photons; zero beyond the truncation point.
    pub fn prob(&self, n: usize) -> f64 {
        self.probs.get(n).copied().unwrap_or(0.0)
    }

    /// Analytic mean of the untruncated state.
    pub fn declared_mean(&self) -> f64 {
        self.declared_mean
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    pub fn total(&self) -> f64 {
        kahan_sum(&self.probs)
    }

    pub fn mean(&self) -> f64 {
        kahan_sum(self.probs.iter().enumerate().map(|(n, p)| n as f64 * p))
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

fn check_mean(mean: f64) -> Result<()> {
    if mean.is_finite() && mean >= 0.0 {
        Ok(())
    } else {
        Err(invalid("mean", format!("{mean} must be finite and >= 0")))
    }
}

fn check_tail_tol(tail_tol: f64) -> Result<()> {
    if tail_tol > 0.0 && tail_tol < 1.0 {
        Ok(())
    } else {
        Err(invalid("tail_tol", format!("{tail_tol} must lie in (0, 1)")))
    }
}

fn vacuum() -> PhotonDistribution {
    PhotonDistribution {
        probs: vec![1.0],
        declared_mean: 0.0,
        tail_tol: 0.0,
    }
}

/// Fock state with exactly `n` photons.
pub fn fock(n: usize) -> PhotonDistribution {
    let mut probs = vec![0.0; n + 1];
    probs[n] = 1.0;
    PhotonDistribution {
        probs,
        declared_mean: n as f64,
        tail_tol: 0.0,
    }
}

/// Single-mode thermal light, `P(n) = (1-x) x^n` with `x = mean / (1 + mean)`.
pub fn thermal(mean: f64, tail_tol: f64) -> Result<PhotonDistribution> {
    check_mean(mean)?;
    check_tail_tol(tail_tol)?;
    if mean == 0.0 {
        return Ok(vacuum());
    }
    let x = mean / (1.0 + mean);
    let q = 1.0 / (1.0 + mean);
    // Mass beyond n is x^(n+1).
    let mut probs = vec![q];
    let mut tail = x;
    while tail > tail_tol || probs.len() % 2 == 0 {
        let last = *probs.last().unwrap();
        probs.push(last * x);
        tail *= x;
    }
    Ok(PhotonDistribution {
        probs,
        declared_mean: mean,
        tail_tol,
    })
}

/// Both modes of a two-mode squeezed vacuum combined into one beam.
///
/// `P(2n) = (1-x) x^n` with `x = m / (1 + m)` for per-mode mean `m`; the
/// declared mean is `2 m`.
pub fn tmsv_combined(mean_per_mode: f64, tail_tol: f64) -> Result<PhotonDistribution> {
    let single = thermal(mean_per_mode, tail_tol)?;
    let pairs = single.probs.len();
    let mut probs = vec![0.0; 2 * (pairs - 1) + 1];
    for (n, &p) in single.probs.iter().enumerate() {
        probs[2 * n] = p;
    }
    Ok(PhotonDistribution {
        probs,
        declared_mean: 2.0 * mean_per_mode,
        tail_tol: single.tail_tol,
    })
}

/// Single-mode squeezed vacuum with mean photon number `mean = sinh² r`.
///
/// Even terms follow `P(n+2) / P(n) = tanh² r (n+1) / (n+2)` from
/// `P(0) = 1 / cosh r`; odd terms are exactly zero.
pub fn smsv(mean: f64, tail_tol: f64) -> Result<PhotonDistribution> {
    check_mean(mean)?;
    check_tail_tol(tail_tol)?;
    if mean == 0.0 {
        return Ok(vacuum());
    }
    let r = mean.sqrt().asinh();
    let tanh2 = mean / (1.0 + mean);
    let mut probs = vec![1.0 / r.cosh()];
    let mut n = 0usize;
    loop {
        // The ratio to the next even term never exceeds tanh² r, so the
        // remaining mass is below P(n) tanh² r / (1 - tanh² r).
        let tail_bound = probs[n] * tanh2 / (1.0 - tanh2);
        if tail_bound <= tail_tol {
            break;
        }
        let next = probs[n] * tanh2 * (n + 1) as f64 / (n + 2) as f64;
        probs.push(0.0);
        probs.push(next);
        n += 2;
    }
    Ok(PhotonDistribution {
        probs,
        declared_mean: mean,
        tail_tol,
    })
}

/// Light source description, parameterised by mean incident photon number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source {
    Fock(usize),
    Thermal(f64),
    Smsv(f64),
    /// Two-mode squeezed vacuum with both modes on the detector; the mean
    /// is the combined-beam mean.
    Tmsv(f64),
}

impl Source {
    /// Mean photon number incident on the detector.
    pub fn mean(&self) -> f64 {
        match *self {
            Source::Fock(n) => n as f64,
            Source::Thermal(m) | Source::Smsv(m) | Source::Tmsv(m) => m,
        }
    }

    pub fn distribution(&self, tail_tol: f64) -> Result<PhotonDistribution> {
        match *self {
            Source::Fock(n) => Ok(fock(n)),
            Source::Thermal(m) => thermal(m, tail_tol),
            Source::Smsv(m) => smsv(m, tail_tol),
            Source::Tmsv(m) => tmsv_combined(m / 2.0, tail_tol),
        }
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            Source::Fock(_) => SourceKind::Fock,
            Source::Thermal(_) => SourceKind::Thermal,
            Source::Smsv(_) => SourceKind::Smsv,
            Source::Tmsv(_) => SourceKind::Tmsv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Fock,
    Thermal,
    Smsv,
    Tmsv,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::Fock => "fock",
            SourceKind::Thermal => "thermal",
            SourceKind::Smsv => "smsv",
            SourceKind::Tmsv => "tmsv",
        })
    }
}

impl std::str::FromStr for SourceKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fock" => Ok(SourceKind::Fock),
            "thermal" => Ok(SourceKind::Thermal),
            "smsv" => Ok(SourceKind::Smsv),
            "tmsv" => Ok(SourceKind::Tmsv),
            other => Err(invalid("source", format!("unknown source kind `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TOL: f64 = DEFAULT_TAIL_TOL;

    #[test]
    fn fock_examples() {
        assert_eq!(fock(0).probs(), &[1.0]);
        assert_eq!(fock(3).probs(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(fock(5).mean(), 5.0);
        assert_eq!(fock(5).declared_mean(), 5.0);
    }

    #[test]
    fn vacuum_limits() {
        for d in [
            smsv(0.0, TOL).unwrap(),
            thermal(0.0, TOL).unwrap(),
            tmsv_combined(0.0, TOL).unwrap(),
        ] {
            assert_eq!(d.probs(), &[1.0]);
            assert_eq!(d.declared_mean(), 0.0);
        }
    }

    #[test]
    fn smsv_unit_mean() {
        let d = smsv(1.0, TOL).unwrap();
        // sinh r = 1, cosh r = sqrt 2, tanh² r = 1/2.
        assert_abs_diff_eq!(d.prob(0), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob(2), 1.0 / (4.0 * 2f64.sqrt()), epsilon = 1e-15);
        assert_eq!(d.prob(1), 0.0);
        // Direct closed form at n = 4: 4!/(2^4 (2!)^2) tanh^4 r / cosh r.
        let p4 = 24.0 / (16.0 * 4.0) * 0.25 / 2f64.sqrt();
        assert_abs_diff_eq!(d.prob(4), p4, epsilon = 1e-15);
        assert_abs_diff_eq!(d.mean(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn tmsv_unit_mean_per_mode() {
        let d = tmsv_combined(1.0, TOL).unwrap();
        assert_abs_diff_eq!(d.prob(0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob(2), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(d.prob(4), 0.125, epsilon = 1e-15);
        assert_eq!(d.declared_mean(), 2.0);
        assert_abs_diff_eq!(d.total(), 1.0, epsilon = 1e-11);
        assert_abs_diff_eq!(d.mean(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn thermal_examples() {
        let d = thermal(1.0, TOL).unwrap();
        for n in 0..20 {
            assert_abs_diff_eq!(d.prob(n), 0.5f64.powi(n as i32 + 1), epsilon = 1e-16);
        }
        assert_abs_diff_eq!(thermal(0.5, TOL).unwrap().mean(), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn invalid_means_rejected() {
        assert!(smsv(-0.1, TOL).is_err());
        assert!(thermal(f64::NAN, TOL).is_err());
        assert!(tmsv_combined(1.0, 0.0).is_err());
    }

    #[test]
    fn source_tmsv_uses_combined_mean() {
        let d = Source::Tmsv(2.0).distribution(TOL).unwrap();
        assert_eq!(d, tmsv_combined(1.0, TOL).unwrap());
        assert_eq!(Source::Tmsv(2.0).mean(), 2.0);
    }

    #[test]
    fn truncation_length_is_odd() {
        // Smallest even n_max means an odd-length vector.
        for mean in [0.01, 0.3, 1.0, 4.0] {
            for d in [
                smsv(mean, TOL).unwrap(),
                thermal(mean, TOL).unwrap(),
                tmsv_combined(mean, TOL).unwrap(),
            ] {
                assert_eq!(d.n_max() % 2, 0);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn check_common(d: &PhotonDistribution) -> std::result::Result<(), TestCaseError> {
            let total = d.total();
            prop_assert!(total >= 1.0 - d.tail_tol() - 1e-15 && total <= 1.0 + 1e-14);
            prop_assert!(d.probs().iter().all(|p| (0.0..=1.0).contains(p)));
            let bound = d.tail_tol() * d.n_max() as f64 + 1e-9;
            prop_assert!((d.mean() - d.declared_mean()).abs() <= bound);
            Ok(())
        }

        proptest! {
            #[test]
            fn smsv_invariants(mean in 0.0f64..5.0) {
                let d = smsv(mean, TOL).unwrap();
                check_common(&d)?;
                prop_assert!(d.probs().iter().skip(1).step_by(2).all(|&p| p == 0.0));
            }

            #[test]
            fn tmsv_invariants(mean in 0.0f64..5.0) {
                let d = tmsv_combined(mean, TOL).unwrap();
                check_common(&d)?;
                prop_assert!(d.probs().iter().skip(1).step_by(2).all(|&p| p == 0.0));
                let th = thermal(mean, TOL).unwrap();
                let evens: Vec<f64> = d.probs().iter().step_by(2).copied().collect();
                prop_assert_eq!(evens.as_slice(), th.probs());
            }

            #[test]
            fn thermal_invariants(mean in 0.0f64..5.0) {
                check_common(&thermal(mean, TOL).unwrap())?;
            }
        }
    }
}
