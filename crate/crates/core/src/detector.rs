//! Analytic model of a multiplexed photon-number-resolving detector.
//!
//! Incident light passes four stages, each a column-stochastic transfer
//! matrix: photon loss, finite detector size (several photons on one element
//! give one click), dark counts on the remaining idle elements, and
//! nearest-neighbour cross-talk with an effective neighbour count. The
//! composition `XT · D · FS · L` maps a photon-number distribution to a
//! click-count distribution.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{check_probability, invalid, Error, Result};
use crate::numerics::{binomial, binomial_pmf, occupancy_table, CompensatedSum};
use crate::sources::{PhotonDistribution, Source};

/// Column sums of every transfer matrix must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Above this the single-cross-talk approximation is outside its regime.
pub const WEAK_CROSSTALK_LIMIT: f64 = 0.2;

/// Full character of a multiplexed detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    elements: usize,
    eta: f64,
    dark: f64,
    xtalk: f64,
}

impl DetectorParams {
    pub fn new(elements: usize, eta: f64, dark: f64, xtalk: f64) -> Result<Self> {
        if elements == 0 {
            return Err(invalid("elements", "need at least one element"));
        }
        check_probability("eta", eta)?;
        check_probability("dark", dark)?;
        check_probability("xtalk", xtalk)?;
        let params = Self {
            elements,
            eta,
            dark,
            xtalk,
        };
        if params.xtalk_eff() > 1.0 {
            return Err(invalid(
                "xtalk",
                format!(
                    "effective cross-talk {} exceeds 1 for N = {elements}",
                    params.xtalk_eff()
                ),
            ));
        }
        if xtalk > WEAK_CROSSTALK_LIMIT {
            log::warn!(
                "cross-talk probability {xtalk} is above {WEAK_CROSSTALK_LIMIT}; \
                 the single cross-talk model assumes x << 1"
            );
        }
        Ok(params)
    }

    /// A single-photon detector (one element, no cross-talk).
    pub fn spd(eta: f64, dark: f64) -> Result<Self> {
        Self::new(1, eta, dark, 0.0)
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn dark(&self) -> f64 {
        self.dark
    }

    pub fn xtalk(&self) -> f64 {
        self.xtalk
    }

    /// Effective cross-talk `4x (N - √N) / (N - 1)`, zero for a single element.
    pub fn xtalk_eff(&self) -> f64 {
        effective_crosstalk(self.elements, self.xtalk)
    }

    /// Same detector behind an attenuator of transmission `t`.
    pub fn attenuated(&self, t: f64) -> Result<Self> {
        check_probability("t", t)?;
        Ok(Self {
            eta: self.eta * t,
            ..*self
        })
    }
}

fn effective_crosstalk(elements: usize, xtalk: f64) -> f64 {
    if elements <= 1 {
        return 0.0;
    }
    let n = elements as f64;
    4.0 * xtalk * (n - n.sqrt()) / (n - 1.0)
}

/// Which physical effect a transfer matrix represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Effect {
    Loss,
    FiniteSize,
    Dark,
    Crosstalk,
    Composed,
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Effect::Loss => "loss",
            Effect::FiniteSize => "finite_size",
            Effect::Dark => "dark",
            Effect::Crosstalk => "crosstalk",
            Effect::Composed => "composed",
        })
    }
}

/// Conditional probability matrix, `entry(out, in) = P(out | in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    entries: DMatrix<f64>,
    effect: Effect,
}

impl TransferMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn entry(&self, out: usize, input: usize) -> f64 {
        self.entries[(out, input)]
    }

    pub fn in_dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn effect(&self) -> Effect {
        self.effect
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.entries
            .column_iter()
            .map(|c| c.iter().sum::<CompensatedSum>().value())
            .collect()
    }

    /// Largest deviation of a column sum from one.
    pub fn max_column_defect(&self) -> f64 {
        self.column_sums()
            .into_iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_column_stochastic(&self, tol: f64) -> bool {
        self.max_column_defect() <= tol
            && self.entries.iter().all(|&e| (0.0..=1.0 + tol).contains(&e))
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: v.len(),
            });
        }
        let out = &self.entries * DVector::from_column_slice(v);
        Ok(out.iter().copied().collect())
    }

    /// `self · inner`, zero-padding or rejecting on a dimension mismatch.
    ///
    /// A shorter inner output is padded with impossible (zero) rows.
    pub fn compose(&self, inner: &TransferMatrix) -> Result<TransferMatrix> {
        if inner.out_dim() > self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                got: inner.out_dim(),
            });
        }
        let used = self.entries.columns(0, inner.out_dim());
        Ok(TransferMatrix {
            entries: used * &inner.entries,
            effect: Effect::Composed,
        })
    }
}

/// Loss: `entry(m, n) = C(n, m) η^m (1-η)^(n-m)`.
pub fn loss_matrix(eta: f64, n_max: usize) -> Result<TransferMatrix> {
    check_probability("eta", eta)?;
    let entries = DMatrix::from_fn(n_max + 1, n_max + 1, |m, n| {
        binomial_pmf(n as u64, m as u64, eta)
    });
    Ok(TransferMatrix {
        entries,
        effect: Effect::Loss,
    })
}

/// Finite size: `entry(k, m)` is the probability that `m` photons occupy `k`
/// distinct elements. Output dimension is `min(n_max, N) + 1`.
pub fn finite_size_matrix(elements: usize, n_max: usize) -> Result<TransferMatrix> {
    if elements == 0 {
        return Err(invalid("elements", "need at least one element"));
    }
    let table = occupancy_table(n_max, elements);
    let rows = n_max.min(elements) + 1;
    let entries = DMatrix::from_fn(rows, n_max + 1, |k, m| table[m][k]);
    Ok(TransferMatrix {
        entries,
        effect: Effect::FiniteSize,
    })
}

/// Dark counts: `entry(p, k) = C(N-k, p-k) d^(p-k) (1-d)^(N-p)` for `k <= p`.
pub fn dark_matrix(elements: usize, dark: f64) -> Result<TransferMatrix> {
    dark_matrix_columns(elements, dark, elements)
}

/// Dark-count matrix restricted to input columns `0..=k_max`.
fn dark_matrix_columns(elements: usize, dark: f64, k_max: usize) -> Result<TransferMatrix> {
    if elements == 0 {
        return Err(invalid("elements", "need at least one element"));
    }
    check_probability("dark", dark)?;
    let n = elements;
    let entries = DMatrix::from_fn(n + 1, k_max.min(n) + 1, |p, k| {
        if p < k {
            0.0
        } else {
            binomial_pmf((n - k) as u64, (p - k) as u64, dark)
        }
    });
    Ok(TransferMatrix {
        entries,
        effect: Effect::Dark,
    })
}

/// Column `p` of the cross-talk matrix: click distribution `s = 0..=N`
/// after `p` fired elements each ignite at most one neighbour with
/// probability `x̃ (1 - p/N)`. Mass above `N` is folded into `s = N`.
fn crosstalk_column(elements: usize, xtalk_eff: f64, p: usize) -> Vec<f64> {
    let n = elements;
    let mut col = vec![0.0; n + 1];
    if xtalk_eff == 0.0 || p == 0 || p == n {
        col[p] = 1.0;
        return col;
    }
    let q = xtalk_eff * (1.0 - p as f64 / n as f64);
    let free = n - p;
    if p <= free {
        for extra in 0..=p {
            col[p + extra] = binomial_pmf(p as u64, extra as u64, q);
        }
    } else {
        let mut below = CompensatedSum::new();
        for extra in 0..free {
            let v = binomial_pmf(p as u64, extra as u64, q);
            col[p + extra] = v;
            below += v;
        }
        // Folded overflow: P(extra >= free).
        col[n] = (1.0 - below.value()).max(0.0);
    }
    col
}

/// Cross-talk: `entry(s, p) = C(p, s-p) (x̃(1-p/N))^(s-p) (1 - x̃(1-p/N))^(2p-s)`.
pub fn crosstalk_matrix(elements: usize, xtalk: f64) -> Result<TransferMatrix> {
    if elements == 0 {
        return Err(invalid("elements", "need at least one element"));
    }
    check_probability("xtalk", xtalk)?;
    let xt = effective_crosstalk(elements, xtalk);
    if xt > 1.0 {
        return Err(invalid("xtalk", format!("effective cross-talk {xt} exceeds 1")));
    }
    let n = elements;
    let mut entries = DMatrix::zeros(n + 1, n + 1);
    for p in 0..=n {
        let col = crosstalk_column(n, xt, p);
        entries.set_column(p, &DVector::from_vec(col));
    }
    Ok(TransferMatrix {
        entries,
        effect: Effect::Crosstalk,
    })
}

/// Mass moved into `s = N` by the overflow fold, per input column.
pub fn crosstalk_folded_mass(elements: usize, xtalk: f64) -> Vec<f64> {
    let xt = effective_crosstalk(elements, xtalk);
    (0..=elements)
        .map(|p| {
            let free = elements - p;
            if xt == 0.0 || p <= free {
                return 0.0;
            }
            let q = xt * (1.0 - p as f64 / elements as f64);
            ((free + 1)..=p)
                .map(|extra| binomial_pmf(p as u64, extra as u64, q))
                .sum::<CompensatedSum>()
                .value()
        })
        .collect()
}

/// The four stage matrices for a detector and input truncation `n_max`.
#[derive(Debug, Clone)]
pub struct DetectorMatrices {
    pub loss: TransferMatrix,
    pub finite_size: TransferMatrix,
    pub dark: TransferMatrix,
    pub crosstalk: TransferMatrix,
}

impl DetectorMatrices {
    pub fn new(params: &DetectorParams, n_max: usize) -> Result<Self> {
        Ok(Self {
            loss: loss_matrix(params.eta, n_max)?,
            finite_size: finite_size_matrix(params.elements, n_max)?,
            dark: dark_matrix(params.elements, params.dark)?,
            crosstalk: crosstalk_matrix(params.elements, params.xtalk)?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransferMatrix> {
        [&self.loss, &self.finite_size, &self.dark, &self.crosstalk].into_iter()
    }

    /// `XT · D · FS · L`, mapping photon number to click count.
    pub fn composed(&self) -> Result<TransferMatrix> {
        let inner = self.finite_size.compose(&self.loss)?;
        let inner = self.dark.compose(&inner)?;
        self.crosstalk.compose(&inner)
    }
}

/// Click-count distribution `s = 0..=N` for incident light `p_real`.
///
/// Applies loss, finite size, dark counts and cross-talk in that order.
pub fn detected_distribution(
    p_real: &PhotonDistribution,
    params: &DetectorParams,
) -> Result<PhotonDistribution> {
    let probs = detected_probs(p_real.probs(), params)?;
    PhotonDistribution::from_probs(probs)
}

fn detected_probs(p_real: &[f64], params: &DetectorParams) -> Result<Vec<f64>> {
    if p_real.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    let n_max = p_real.len() - 1;
    let n = params.elements;
    let after_loss = loss_matrix(params.eta, n_max)?.apply(p_real)?;
    let occupied = finite_size_matrix(n, n_max)?.apply(&after_loss)?;
    // Only columns k <= min(n_max, N) of the dark matrix can carry mass.
    let fired = dark_matrix_columns(n, params.dark, occupied.len() - 1)?.apply(&occupied)?;
    let clicks = crosstalk_matrix(n, params.xtalk)?.apply(&fired)?;
    Ok(clicks.into_iter().map(|p| p.clamp(0.0, 1.0)).collect())
}

/// How the alternating sum inside the closed form is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumMode {
    /// Binary floating point with compensated summation and an error estimate.
    Compensated,
    /// Exact integer arithmetic on the binary values of `η` and `d`.
    Exact,
}

/// Relative error budget of [`SumMode::Compensated`].
pub const CLOSED_FORM_REL_TOL: f64 = 1e-8;
/// Absolute error that is accepted regardless of the result's size.
pub const CLOSED_FORM_ABS_FLOOR: f64 = 1e-10;

/// `q_p = C(N, p) Σ_j C(p, j) (-1)^(p-j) (1-d)^(N-j) (1 - η + jη/N)^n`, the
/// probability that `p` elements have fired before cross-talk, together
/// with an estimate of the absolute round-off in each.
fn fired_before_crosstalk(
    n_photons: usize,
    params: &DetectorParams,
    mode: SumMode,
) -> (Vec<f64>, Vec<f64>) {
    match mode {
        SumMode::Compensated => fired_compensated(n_photons, params),
        SumMode::Exact => {
            let q = fired_exact(n_photons, params);
            let err = vec![0.0; q.len()];
            (q, err)
        }
    }
}

fn fired_compensated(n_photons: usize, params: &DetectorParams) -> (Vec<f64>, Vec<f64>) {
    let big_n = params.elements;
    let (eta, d) = (params.eta, params.dark);
    let weights: Vec<f64> = (0..=big_n)
        .map(|j| {
            let base = 1.0 - eta + j as f64 * eta / big_n as f64;
            (1.0 - d).powi((big_n - j) as i32) * base.powi(n_photons as i32)
        })
        .collect();
    // Each term carries O(n + N) roundings from the powers and products.
    let per_term = (n_photons + big_n + 8) as f64 * f64::EPSILON;
    let mut q = Vec::with_capacity(big_n + 1);
    let mut err = Vec::with_capacity(big_n + 1);
    for p in 0..=big_n {
        let mut acc = CompensatedSum::new();
        let mut c = 1.0; // C(p, j)
        for (j, w) in weights.iter().enumerate().take(p + 1) {
            let sign = if (p - j) % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * c * w;
            c = c * (p - j) as f64 / (j + 1) as f64;
        }
        let scale = binomial(big_n as u64, p as u64);
        q.push(scale * acc.value());
        err.push(scale * (acc.abs_sum() * per_term + 2.0 * f64::EPSILON * acc.value().abs()));
    }
    (q, err)
}

/// A binary float `value = num / 2^shift`.
struct Dyadic {
    num: BigInt,
    shift: u32,
}

impl Dyadic {
    fn from_unit_f64(value: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&value));
        if value == 0.0 {
            return Dyadic {
                num: BigInt::zero(),
                shift: 0,
            };
        }
        let (mantissa, exponent, _) = num_traits::float::FloatCore::integer_decode(value);
        let mut num = mantissa;
        let mut shift = (-exponent) as u32;
        while num % 2 == 0 && shift > 0 {
            num /= 2;
            shift -= 1;
        }
        Dyadic {
            num: BigInt::from(num),
            shift,
        }
    }
}

fn fired_exact(n_photons: usize, params: &DetectorParams) -> Vec<f64> {
    let big_n = params.elements;
    let n_big = BigInt::from(big_n);
    let eta = Dyadic::from_unit_f64(params.eta);
    let d = Dyadic::from_unit_f64(params.dark);
    let one_eta = BigInt::one() << eta.shift;
    let one_d = BigInt::one() << d.shift;
    let not_dark = &one_d - &d.num;
    // Common denominator 2^(l N) (N 2^k)^n turns every weight into an integer:
    // W_j = (2^l - b)^(N-j) 2^(l j) (N (2^k - a) + j a)^n.
    let base0 = &n_big * (&one_eta - &eta.num);
    let weights: Vec<BigInt> = (0..=big_n)
        .map(|j| {
            let dark_part = num_traits::pow(not_dark.clone(), big_n - j) << (d.shift as usize * j);
            let base = &base0 + BigInt::from(j) * &eta.num;
            dark_part * num_traits::pow(base, n_photons)
        })
        .collect();
    let denom = (BigInt::one() << (d.shift as usize * big_n))
        * num_traits::pow(&n_big << eta.shift, n_photons);

    let mut binom_n = BigInt::one(); // C(N, p)
    let mut out = Vec::with_capacity(big_n + 1);
    for p in 0..=big_n {
        let mut acc = BigInt::zero();
        let mut c = BigInt::one(); // C(p, j)
        for (j, w) in weights.iter().enumerate().take(p + 1) {
            if (p - j) % 2 == 0 {
                acc += &c * w;
            } else {
                acc -= &c * w;
            }
            c = c * BigInt::from(p - j) / BigInt::from(j + 1);
        }
        let value = BigRational::new(&binom_n * acc, denom.clone());
        let value = if value.is_negative() {
            0.0
        } else {
            value.to_f64().unwrap_or(0.0)
        };
        out.push(value);
        binom_n = binom_n * BigInt::from(big_n - p) / BigInt::from(p + 1);
    }
    out
}

/// Closed-form click distribution for an `n`-photon Fock state.
///
/// Evaluates the triple sum directly rather than composing matrices. The
/// cross-talk overflow above `s = N` is folded into `s = N`, matching the
/// matrix path. In [`SumMode::Compensated`] an
/// [`Error::NumericalInstability`] is returned when the estimated round-off
/// of any entry exceeds `1e-8` of its value (and the `1e-10` floor).
pub fn fock_closed_form_distribution(
    n_photons: usize,
    params: &DetectorParams,
    mode: SumMode,
) -> Result<Vec<f64>> {
    let big_n = params.elements;
    let (fired, fired_err) = fired_before_crosstalk(n_photons, params, mode);
    let xt = params.xtalk_eff();
    let mut out = Vec::with_capacity(big_n + 1);
    for s in 0..=big_n {
        let mut acc = CompensatedSum::new();
        let mut err = 0.0;
        // Terms vanish unless p <= s <= 2p.
        for p in s.div_ceil(2)..=s.min(big_n) {
            let col = crosstalk_column(big_n, xt, p);
            acc += col[s] * fired[p];
            err += col[s] * fired_err[p];
        }
        let value = acc.value();
        if mode == SumMode::Compensated
            && err > CLOSED_FORM_REL_TOL * value.abs()
            && err > CLOSED_FORM_ABS_FLOOR
        {
            return Err(Error::NumericalInstability {
                value,
                estimated_error: err,
            });
        }
        out.push(value.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Probability of `s` clicks for an `n`-photon Fock state, compensated mode.
pub fn fock_closed_form(s: usize, n_photons: usize, params: &DetectorParams) -> Result<f64> {
    check_clicks(s, params)?;
    Ok(fock_closed_form_distribution(n_photons, params, SumMode::Compensated)?[s])
}

/// As [`fock_closed_form`] but with the alternating sum in exact arithmetic.
pub fn fock_closed_form_exact(s: usize, n_photons: usize, params: &DetectorParams) -> Result<f64> {
    check_clicks(s, params)?;
    Ok(fock_closed_form_distribution(n_photons, params, SumMode::Exact)?[s])
}

fn check_clicks(s: usize, params: &DetectorParams) -> Result<()> {
    if s > params.elements {
        return Err(invalid(
            "s",
            format!("{s} clicks on a {}-element detector", params.elements),
        ));
    }
    Ok(())
}

/// Click probability of a single-photon detector.
///
/// `mean` is the mean photon number incident on the detector (for TMSV the
/// combined two-mode beam).
pub fn spd_click_probability(source: Source, eta: f64, dark: f64) -> Result<f64> {
    check_probability("eta", eta)?;
    check_probability("dark", dark)?;
    if source.mean() < 0.0 || !source.mean().is_finite() {
        return Err(invalid("mean", format!("{} must be >= 0", source.mean())));
    }
    let no_click = match source {
        Source::Fock(n) => (1.0 - dark) * (1.0 - eta).powi(n as i32),
        Source::Thermal(m) => (1.0 - dark) / (1.0 + eta * m),
        Source::Tmsv(m) => {
            let per_mode = m / 2.0;
            let x = per_mode / (1.0 + per_mode);
            (1.0 - dark) * (1.0 - x) / (1.0 - x * (1.0 - eta).powi(2))
        }
        Source::Smsv(m) => (1.0 - dark) / (1.0 + (2.0 * eta - eta * eta) * m).sqrt(),
    };
    Ok(1.0 - no_click)
}

/// Squeezed-vacuum source for the odds formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SqueezedKind {
    Smsv,
    Tmsv,
}

impl SqueezedKind {
    pub fn source(self, mean: f64) -> Source {
        match self {
            SqueezedKind::Smsv => Source::Smsv(mean),
            SqueezedKind::Tmsv => Source::Tmsv(mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OddsForm {
    Exact,
    /// Second order in `t`; the small-mean expansion.
    Quadratic,
}

/// Detection odds `P(click) / P(no click)` behind an attenuator of transmission `t`.
pub fn odds(kind: SqueezedKind, eta: f64, t: f64, dark: f64, mean: f64, form: OddsForm) -> f64 {
    let et = eta * t;
    let quadratic = ((1.0 - et / 2.0) * et * mean + dark) / (1.0 - dark);
    match (kind, form) {
        (SqueezedKind::Smsv, OddsForm::Exact) => {
            (1.0 + (2.0 - et) * et * mean).sqrt() / (1.0 - dark) - 1.0
        }
        _ => quadratic,
    }
}
