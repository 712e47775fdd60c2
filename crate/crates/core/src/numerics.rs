//! Cancellation-safe combinatorial and probabilistic primitives.
//!
//! Everything the analytic detector model needs: binomial coefficients and
//! probability mass functions, Stirling numbers of the second kind, the
//! balls-into-bins occupancy distribution and compensated summation.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul};

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

/// Default cap on `m` for [`stirling2`].
pub const STIRLING_DEFAULT_BOUND: usize = 200;

/// Largest `n` for which binomial coefficients are computed exactly in integers.
const EXACT_BINOMIAL_MAX_N: u64 = 60;

/// A probability stored on the natural-log scale. Zero probability is `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(f64::NEG_INFINITY);
    pub const ONE: LogProb = LogProb(0.0);

    /// Wraps a log-scale value, clamping round-off above zero.
    pub fn from_ln(value: f64) -> Self {
        debug_assert!(value <= 1e-12, "log probability {value} above zero");
        LogProb(value.min(0.0))
    }

    pub fn from_prob(p: f64) -> Self {
        LogProb(p.ln().min(0.0))
    }

    pub fn ln(self) -> f64 {
        self.0
    }

    pub fn prob(self) -> f64 {
        self.0.exp()
    }
}

impl Mul for LogProb {
    type Output = LogProb;

    fn mul(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "exp({})", self.0)
    }
}

/// Exact `C(n, k)` when it fits the integer path, `None` otherwise.
fn exact_binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    if n > EXACT_BINOMIAL_MAX_N {
        return None;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc * u128::from(n - i) / u128::from(i + 1);
    }
    Some(acc)
}

/// Natural log of the binomial coefficient `C(n, k)`; `-inf` when `k > n`.
pub fn log_binomial(n: u64, k: u64) -> f64 {
    match exact_binomial(n, k) {
        Some(0) => f64::NEG_INFINITY,
        Some(c) => (c as f64).ln(),
        None => {
            use statrs::function::gamma::ln_gamma;
            let (n, k) = (n as f64, k as f64);
            ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
        }
    }
}

/// Binomial coefficient as a float.
pub fn binomial(n: u64, k: u64) -> f64 {
    match exact_binomial(n, k) {
        Some(c) => c as f64,
        None => log_binomial(n, k).exp(),
    }
}

/// Binomial probability mass `C(n, k) p^k (1-p)^(n-k)`, exact at `p ∈ {0, 1}`.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln = log_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p();
    LogProb::from_ln(ln).prob()
}

/// Row `m` of the Stirling numbers of the second kind, `S(m, 0..=m)`.
///
/// Uses `S(m, k) = k S(m-1, k) + S(m-1, k-1)` in exact integers.
pub fn stirling2_row(m: usize, bound: usize) -> Result<Vec<BigUint>> {
    if m > bound {
        return Err(Error::BoundExceeded { m, bound });
    }
    let mut row = vec![BigUint::one()];
    for i in 1..=m {
        let mut next = vec![BigUint::zero(); i + 1];
        for k in 1..=i {
            let mut v = row[k - 1].clone();
            if k < i {
                v += &row[k] * BigUint::from(k);
            }
            next[k] = v;
        }
        row = next;
    }
    Ok(row)
}

/// Exact Stirling number of the second kind `S(m, k)` with the default bound.
pub fn stirling2(m: usize, k: usize) -> Result<BigUint> {
    stirling2_bounded(m, k, STIRLING_DEFAULT_BOUND)
}

pub fn stirling2_bounded(m: usize, k: usize, bound: usize) -> Result<BigUint> {
    let row = stirling2_row(m, bound)?;
    Ok(row.get(k).cloned().unwrap_or_default())
}

/// Occupancy distribution for `m_max` photons over `elements` bins.
///
/// `table[m][k]` is the probability that `m` photons, each landing on a
/// uniformly random element, occupy exactly `k` distinct elements. Row `m` has
/// length `min(m_max, elements) + 1`.
pub fn occupancy_table(m_max: usize, elements: usize) -> Vec<Vec<f64>> {
    assert!(elements >= 1, "occupancy needs at least one element");
    let width = m_max.min(elements) + 1;
    let n = elements as f64;
    let mut table = Vec::with_capacity(m_max + 1);
    let mut col = vec![0.0; width];
    col[0] = 1.0;
    table.push(col.clone());
    for m in 1..=m_max {
        let mut next = vec![0.0; width];
        let top = m.min(elements).min(width - 1);
        for (k, slot) in next.iter_mut().enumerate().take(top + 1).skip(1) {
            let stay = col[k] * k as f64 / n;
            let grow = col[k - 1] * (elements - k + 1) as f64 / n;
            *slot = stay + grow;
        }
        col = next;
        table.push(col.clone());
    }
    table
}

/// Probability that `m` photons hit exactly `k` distinct elements out of `elements`.
///
/// Equal to `C(N,k) k! S(m,k) / N^m`, evaluated by the positive-term
/// recurrence. Out-of-range `k` returns zero.
pub fn occupancy_prob(k: usize, m: usize, elements: usize) -> f64 {
    if k > m || k > elements {
        return 0.0;
    }
    let width = m.min(elements) + 1;
    let n = elements as f64;
    let mut col = vec![0.0; width];
    col[0] = 1.0;
    for step in 1..=m {
        let top = step.min(k);
        let low = k.saturating_sub(m - step);
        for j in (low.max(1)..=top).rev() {
            col[j] = col[j] * j as f64 / n + col[j - 1] * (elements - j + 1) as f64 / n;
        }
        col[0] = 0.0;
    }
    col[k]
}

/// Neumaier-compensated running sum.
///
/// Also tracks `Σ|term|`, the scale against which round-off is measured.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
    abs_sum: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, term: f64) {
        let t = self.sum + term;
        if self.sum.abs() >= term.abs() {
            self.compensation += (self.sum - t) + term;
        } else {
            self.compensation += (term - t) + self.sum;
        }
        self.sum = t;
        self.abs_sum += term.abs();
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }

    /// `Σ|term|` over everything added so far.
    pub fn abs_sum(&self) -> f64 {
        self.abs_sum
    }
}

impl AddAssign<f64> for CompensatedSum {
    fn add_assign(&mut self, term: f64) {
        self.add(term);
    }
}

impl Add<f64> for CompensatedSum {
    type Output = CompensatedSum;

    fn add(mut self, term: f64) -> CompensatedSum {
        CompensatedSum::add(&mut self, term);
        self
    }
}

impl Sum<f64> for CompensatedSum {
    fn sum<I: Iterator<Item = f64>>(iter: I) -> Self {
        iter.fold(CompensatedSum::new(), |acc, x| acc + x)
    }
}

impl<'a> Sum<&'a f64> for CompensatedSum {
    fn sum<I: Iterator<Item = &'a f64>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

/// Compensated sum of a sequence of floats.
pub fn kahan_sum<I>(terms: I) -> f64
where
    I: IntoIterator,
    I::Item: std::borrow::Borrow<f64>,
{
    use std::borrow::Borrow;
    terms
        .into_iter()
        .map(|t| *t.borrow())
        .sum::<CompensatedSum>()
        .value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::ToPrimitive;

    #[test]
    fn log_binomial_values() {
        assert_abs_diff_eq!(log_binomial(5, 2), 10f64.ln(), epsilon = 1e-15);
        assert_eq!(log_binomial(17, 0), 0.0);
        assert_eq!(log_binomial(3, 5), f64::NEG_INFINITY);
        // C(60, 30) = 118264581564861424 exactly.
        assert_abs_diff_eq!(
            log_binomial(60, 30),
            118_264_581_564_861_424f64.ln(),
            epsilon = 1e-14
        );
        // Gamma path stays continuous with the exact path.
        let via_sum: f64 = (1..=30u64).map(|i| ((31 + i) as f64 / i as f64).ln()).sum();
        assert_abs_diff_eq!(log_binomial(61, 30), via_sum, epsilon = 1e-11);
    }

    #[test]
    fn binomial_pmf_edges() {
        assert_eq!(binomial_pmf(4, 0, 0.0), 1.0);
        assert_eq!(binomial_pmf(4, 1, 0.0), 0.0);
        assert_eq!(binomial_pmf(4, 4, 1.0), 1.0);
        assert_eq!(binomial_pmf(4, 3, 1.0), 0.0);
        assert_eq!(binomial_pmf(2, 3, 0.5), 0.0);
        assert_abs_diff_eq!(binomial_pmf(2, 1, 0.5), 0.5, epsilon = 1e-15);
    }

    /// Brute-force count of set partitions of `{0..m}` into exactly `k` blocks.
    fn count_partitions(m: usize, k: usize) -> u64 {
        // Restricted growth strings.
        fn rec(i: usize, m: usize, used: usize, k: usize) -> u64 {
            if i == m {
                return u64::from(used == k);
            }
            let mut total = 0;
            for b in 0..=used.min(k - 1) {
                total += rec(i + 1, m, used.max(b + 1), k);
            }
            total
        }
        if k == 0 {
            return u64::from(m == 0);
        }
        rec(0, m, 0, k)
    }

    #[test]
    fn stirling_small_values() {
        assert_eq!(stirling2(0, 0).unwrap(), BigUint::one());
        for m in 1..12 {
            assert_eq!(stirling2(m, 1).unwrap(), BigUint::one());
            assert_eq!(stirling2(m, 0).unwrap(), BigUint::zero());
        }
        assert_eq!(stirling2(3, 2).unwrap(), BigUint::from(3u32));
        for m in 0..9 {
            for k in 0..=m {
                assert_eq!(
                    stirling2(m, k).unwrap(),
                    BigUint::from(count_partitions(m, k)),
                    "S({m},{k})"
                );
            }
        }
        assert_eq!(stirling2(4, 7).unwrap(), BigUint::zero());
    }

    #[test]
    fn stirling_bound_is_enforced() {
        assert_eq!(
            stirling2(201, 3),
            Err(Error::BoundExceeded { m: 201, bound: 200 })
        );
        assert!(stirling2(200, 100).is_ok());
        assert!(stirling2_bounded(30, 2, 10).is_err());
    }

    #[test]
    fn stirling_falling_factorial_identity() {
        for m in 0..=15usize {
            let row = stirling2_row(m, 15).unwrap();
            for n in 0..=15u64 {
                let mut total = BigUint::zero();
                let mut falling = BigUint::one();
                for (k, s) in row.iter().enumerate() {
                    if k > 0 {
                        falling *= BigUint::from(n.saturating_sub(k as u64 - 1));
                    }
                    total += s * &falling;
                }
                assert_eq!(total, BigUint::from(n).pow(m as u32), "m={m} N={n}");
            }
        }
    }

    #[test]
    fn occupancy_examples() {
        for m in 1..20 {
            assert_eq!(occupancy_prob(1, m, 1), 1.0);
        }
        assert_eq!(occupancy_prob(0, 0, 7), 1.0);
        assert_abs_diff_eq!(occupancy_prob(1, 2, 2), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(occupancy_prob(2, 3, 4), 0.5625, epsilon = 1e-15);
        assert_eq!(occupancy_prob(5, 3, 10), 0.0);
        assert_eq!(occupancy_prob(3, 5, 2), 0.0);
        assert_eq!(occupancy_prob(0, 4, 3), 0.0);
    }

    #[test]
    fn occupancy_table_matches_pointwise() {
        let table = occupancy_table(12, 5);
        for (m, row) in table.iter().enumerate() {
            assert_eq!(row.len(), 6);
            for (k, &v) in row.iter().enumerate() {
                assert_abs_diff_eq!(v, occupancy_prob(k, m, 5), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn occupancy_normalised() {
        for m in 0..=100 {
            for n in 1..=100 {
                let total = kahan_sum((0..=m.min(n)).map(|k| occupancy_prob(k, m, n)));
                assert!((total - 1.0).abs() <= 1e-12, "m={m} N={n} sum={total}");
            }
        }
    }

    #[test]
    fn occupancy_matches_exact_closed_form() {
        for n in 1..=25usize {
            for m in 0..=25usize {
                let row = stirling2_row(m, 25).unwrap();
                for k in 0..=m.min(n) {
                    // C(N,k) k! = N!/(N-k)!
                    let mut falling = BigInt::one();
                    for i in 0..k {
                        falling *= BigInt::from(n - i);
                    }
                    let num = falling * BigInt::from(row[k].clone());
                    let den = BigInt::from(n).pow(m as u32);
                    let exact = BigRational::new(num, den).to_f64().unwrap();
                    let got = occupancy_prob(k, m, n);
                    assert!(
                        (got - exact).abs() <= 1e-13,
                        "k={k} m={m} N={n}: {got} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn kahan_examples() {
        assert_eq!(kahan_sum([1.0, -1.0]), 0.0);
        assert_eq!(kahan_sum([1e16, 1.0, -1e16]), 1.0);
        let tenths = vec![0.1; 10_000];
        assert_abs_diff_eq!(kahan_sum(&tenths), 1000.0, epsilon = 1e-9);
        let naive: f64 = [1e16, 1.0, -1e16].iter().sum();
        assert_eq!(naive, 0.0);
    }

    #[test]
    fn log_prob_combines() {
        let half = LogProb::from_prob(0.5);
        assert_abs_diff_eq!((half * half).prob(), 0.25, epsilon = 1e-15);
        assert_eq!(LogProb::ZERO.prob(), 0.0);
        assert_eq!((LogProb::ONE * LogProb::ZERO).prob(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kahan_within_bound(terms in prop::collection::vec(-1e6f64..1e6, 0..200)) {
                // Reference: exact rational sum of the binary floats.
                let exact: BigRational = terms
                    .iter()
                    .map(|&t| BigRational::from_float(t).unwrap())
                    .fold(BigRational::zero(), |a, b| a + b);
                let exact = exact.to_f64().unwrap();
                let scale: f64 = terms.iter().map(|t| t.abs()).sum();
                let got = kahan_sum(&terms);
                prop_assert!((got - exact).abs() <= 2.0 * f64::EPSILON * scale + f64::MIN_POSITIVE);
            }

            #[test]
            fn binomial_pmf_sums_to_one(n in 0u64..300, p in 0.0f64..=1.0) {
                let total = kahan_sum((0..=n).map(|k| binomial_pmf(n, k, p)));
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
