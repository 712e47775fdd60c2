//! Reference-free efficiency calibration from attenuation scans.
//!
//! A single-photon detector watches squeezed vacuum through an attenuator
//! of known transmission `t`. The detection odds are quadratic in `t`,
//! `a2 t² + a1 t + a0`, with `η = -2 a2 / a1`. The fit is weighted by the
//! binomial counting noise of each scan point.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::detector::{odds, OddsForm, SqueezedKind};
use crate::error::{invalid, Error, Result};

/// Minimum number of scan points for a quadratic fit with uncertainties.
pub const MIN_FIT_POINTS: usize = 4;

/// Light source that produced a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanSource {
    Smsv,
    Tmsv,
    Unknown,
}

impl fmt::Display for ScanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanSource::Smsv => "smsv",
            ScanSource::Tmsv => "tmsv",
            ScanSource::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for ScanSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "smsv" => Ok(ScanSource::Smsv),
            "tmsv" => Ok(ScanSource::Tmsv),
            "unknown" | "" => Ok(ScanSource::Unknown),
            other => Err(invalid("source", format!("unknown scan source `{other}`"))),
        }
    }
}

/// One attenuator setting of a scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub t: f64,
    /// Gates with at least one click.
    pub clicks: u64,
    pub trials: u64,
    /// Full click-count histogram, kept for multi-element detectors.
    pub histogram: Option<Vec<u64>>,
}

impl ScanPoint {
    pub fn new(t: f64, clicks: u64, trials: u64) -> Self {
        Self {
            t,
            clicks,
            trials,
            histogram: None,
        }
    }
}

/// An attenuation scan: click counts versus transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData {
    pub points: Vec<ScanPoint>,
    pub source: ScanSource,
    /// Free-form provenance (seed, generating parameters, ...).
    pub meta: BTreeMap<String, String>,
}

impl ScanData {
    pub fn new(points: Vec<ScanPoint>, source: ScanSource) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.t) {
                return Err(invalid("t", format!("point {i}: {} not in [0, 1]", p.t)));
            }
            if p.trials == 0 {
                return Err(invalid("trials", format!("point {i}: zero trials")));
            }
            if p.clicks > p.trials {
                return Err(invalid(
                    "clicks",
                    format!("point {i}: {} clicks exceed {} trials", p.clicks, p.trials),
                ));
            }
        }
        let mut ts: Vec<f64> = points.iter().map(|p| p.t).collect();
        ts.sort_by(f64::total_cmp);
        if ts.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("t", "transmission values must be distinct"));
        }
        Ok(Self {
            points,
            source,
            meta: BTreeMap::new(),
        })
    }

    pub fn odds_points(&self) -> Result<Vec<OddsPoint>> {
        self.points
            .iter()
            .map(|p| {
                let (odds, variance) = odds_point(p.clicks, p.trials)?;
                Ok(OddsPoint {
                    t: p.t,
                    odds,
                    variance,
                })
            })
            .collect()
    }
}

/// Detection odds at one transmission with their variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OddsPoint {
    pub t: f64,
    pub odds: f64,
    pub variance: f64,
}

/// Odds `clicks / (trials - clicks)` and their delta-method variance
/// `p / (T (1-p)³)` under binomial counting with `p = clicks / T`.
///
/// An empty point gets the variance of a single click so it cannot carry
/// infinite weight.
pub fn odds_point(clicks: u64, trials: u64) -> Result<(f64, f64)> {
    if trials == 0 || clicks >= trials {
        return Err(Error::DegeneratePoint { clicks, trials });
    }
    let t = trials as f64;
    let odds = clicks as f64 / (trials - clicks) as f64;
    let p = if clicks == 0 { 1.0 / t } else { clicks as f64 / t };
    let variance = p / (t * (1.0 - p).powi(3));
    Ok((odds, variance))
}

/// Weighted quadratic fit of odds against transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    /// Covariance of `(a0, a1, a2)`.
    pub covariance: Matrix3<f64>,
    pub eta_hat: f64,
    pub eta_sigma: f64,
    pub chi2_per_dof: f64,
    pub points: usize,
}

impl FitResult {
    pub fn coefficients(&self) -> [f64; 3] {
        [self.a0, self.a1, self.a2]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[(i, i)].sqrt()
    }

    pub fn predict(&self, t: f64) -> f64 {
        self.a0 + t * (self.a1 + t * self.a2)
    }

    /// Whether the extracted efficiency is physical.
    pub fn eta_in_range(&self) -> bool {
        (0.0..=1.0).contains(&self.eta_hat)
    }

    /// Dark-count probability read off the offset, `a0 / (1 + a0)`.
    ///
    /// Any transmission-independent background is folded into this number.
    pub fn dark_estimate(&self) -> f64 {
        self.a0 / (1.0 + self.a0)
    }
}

/// Weighted least squares of `odds ≈ a0 + a1 t + a2 t²` with weights `1 / variance`.
pub fn fit_quadratic_odds(points: &[OddsPoint]) -> Result<FitResult> {
    if points.len() < MIN_FIT_POINTS {
        return Err(Error::TooFewPoints {
            needed: MIN_FIT_POINTS,
            got: points.len(),
        });
    }
    let mut distinct: Vec<f64> = points
        .iter()
        .filter(|p| p.variance > 0.0 && p.variance.is_finite())
        .map(|p| p.t)
        .collect();
    if distinct.len() != points.len() {
        return Err(invalid("variance", "every point needs a finite positive variance"));
    }
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::SingularDesign(format!(
            "{} distinct transmissions, need 3",
            distinct.len()
        )));
    }

    let n = points.len();
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let p = &points[i];
        p.t.powi(j as i32) / p.variance.sqrt()
    });
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.odds / p.variance.sqrt()));
    let qr = design.qr();
    let r: Matrix3<f64> = qr.r().fixed_view::<3, 3>(0, 0).into_owned();
    let qtb = qr.q().transpose() * rhs;
    let qtb = Vector3::new(qtb[0], qtb[1], qtb[2]);
    let diag_max = (0..3).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..3).any(|i| r[(i, i)].abs() <= 1e-13 * diag_max) {
        return Err(Error::SingularDesign("rank-deficient design matrix".into()));
    }
    let coeffs = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::SingularDesign("R not invertible".into()))?;
    let covariance = r_inv * r_inv.transpose();
    let covariance = (covariance + covariance.transpose()) * 0.5;

    let (a0, a1, a2) = (coeffs[0], coeffs[1], coeffs[2]);
    if a1 == 0.0 {
        return Err(Error::DivisionByZero("linear coefficient a1 is zero"));
    }
    let eta_hat = -2.0 * a2 / a1;
    let grad = Vector3::new(0.0, 2.0 * a2 / (a1 * a1), -2.0 / a1);
    let eta_sigma = (grad.transpose() * covariance * grad)[(0, 0)].max(0.0).sqrt();
    let chi2: f64 = points
        .iter()
        .map(|p| {
            let model = a0 + p.t * (a1 + p.t * a2);
            (p.odds - model).powi(2) / p.variance
        })
        .sum();
    let fit = FitResult {
        a0,
        a1,
        a2,
        covariance,
        eta_hat,
        eta_sigma,
        chi2_per_dof: chi2 / (n - 3).max(1) as f64,
        points: n,
    };
    if !fit.eta_in_range() {
        log::warn!("extracted efficiency {eta_hat} is outside [0, 1]; data inconsistent with model");
    }
    Ok(fit)
}

/// Quadratic self-calibration fit of a scan.
pub fn fit_quadratic(scan: &ScanData) -> Result<FitResult> {
    fit_quadratic_odds(&scan.odds_points()?)
}

/// Fit of the full square-root odds of single-mode squeezed vacuum.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSmsvFit {
    pub eta: f64,
    pub mean: f64,
    pub dark: f64,
    /// Covariance of `(eta, mean, dark)`.
    pub covariance: Matrix3<f64>,
    pub chi2_per_dof: f64,
    pub iterations: usize,
}

impl ExactSmsvFit {
    pub fn eta_sigma(&self) -> f64 {
        self.covariance[(0, 0)].sqrt()
    }

    pub fn mean_sigma(&self) -> f64 {
        self.covariance[(1, 1)].sqrt()
    }

    pub fn dark_sigma(&self) -> f64 {
        self.covariance[(2, 2)].sqrt()
    }

    pub fn predict(&self, t: f64) -> f64 {
        odds(SqueezedKind::Smsv, self.eta, t, self.dark, self.mean, OddsForm::Exact)
    }
}

pub const EXACT_FIT_MAX_ITERATIONS: usize = 100;
pub const EXACT_FIT_STEP_TOL: f64 = 1e-10;

struct SmsvProblem<'a> {
    points: &'a [OddsPoint],
}

impl SmsvProblem<'_> {
    /// Model odds and gradient w.r.t. `(eta, mean, dark)`; `None` outside
    /// the model's domain.
    fn eval(theta: &Vector3<f64>, t: f64) -> Option<(f64, Vector3<f64>)> {
        let (eta, mean, dark) = (theta[0], theta[1], theta[2]);
        let u = eta * t;
        let g = 1.0 + (2.0 - u) * u * mean;
        if g <= 0.0 || dark >= 1.0 {
            return None;
        }
        let root = g.sqrt();
        let k = 1.0 / (1.0 - dark);
        let value = root * k - 1.0;
        let grad = Vector3::new(
            mean * t * (1.0 - u) / root * k,
            (2.0 - u) * u / (2.0 * root) * k,
            root * k * k,
        );
        Some((value, grad))
    }

    fn chi2(&self, theta: &Vector3<f64>) -> Option<f64> {
        let mut total = 0.0;
        for p in self.points {
            let (v, _) = Self::eval(theta, p.t)?;
            total += (p.odds - v).powi(2) / p.variance;
        }
        Some(total)
    }

    /// Weighted normal matrix `JᵀWJ` and gradient `JᵀW r`.
    fn normal(&self, theta: &Vector3<f64>) -> Option<(Matrix3<f64>, Vector3<f64>)> {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for p in self.points {
            let (v, g) = Self::eval(theta, p.t)?;
            let w = 1.0 / p.variance;
            jtj += g * g.transpose() * w;
            jtr += g * (p.odds - v) * w;
        }
        Some((jtj, jtr))
    }
}

/// Levenberg-Marquardt fit of the exact single-mode squeezed vacuum odds
/// over `(eta, mean, dark)`, started from the quadratic fit.
pub fn fit_exact_smsv_odds(points: &[OddsPoint]) -> Result<ExactSmsvFit> {
    let quad = fit_quadratic_odds(points)?;
    let eta0 = if quad.eta_hat.is_finite() && quad.eta_hat > 0.0 {
        quad.eta_hat.min(0.99)
    } else {
        0.5
    };
    let dark0 = quad.dark_estimate().clamp(0.0, 0.5);
    let mean0 = (quad.a1 * (1.0 - dark0) / eta0).max(1e-6);
    fit_exact_smsv_from(points, Vector3::new(eta0, mean0, dark0))
}

fn fit_exact_smsv_from(points: &[OddsPoint], start: Vector3<f64>) -> Result<ExactSmsvFit> {
    let problem = SmsvProblem { points };
    let mut theta = start;
    let mut chi2 = problem
        .chi2(&theta)
        .ok_or_else(|| invalid("start", "initial guess outside the model domain"))?;
    let mut lambda = 1e-3;
    let dof = (points.len() - 3).max(1) as f64;

    for iteration in 1..=EXACT_FIT_MAX_ITERATIONS {
        let (jtj, jtr) = problem
            .normal(&theta)
            .ok_or_else(|| invalid("theta", "iterate left the model domain"))?;
        let converged;
        loop {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(f64::MIN_POSITIVE);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = theta + step;
            let rel_step = (0..3)
                .map(|i| step[i].abs() / theta[i].abs().max(1e-12))
                .fold(0.0, f64::max);
            match problem.chi2(&candidate) {
                Some(c) if c <= chi2 => {
                    theta = candidate;
                    chi2 = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    converged = rel_step < EXACT_FIT_STEP_TOL;
                    break;
                }
                _ => {
                    // Even a vanishing step cannot lower chi2: at the minimum.
                    if rel_step < EXACT_FIT_STEP_TOL {
                        converged = true;
                        break;
                    }
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        converged = true;
                        break;
                    }
                }
            }
        }
        if converged {
            let (jtj, _) = problem
                .normal(&theta)
                .ok_or_else(|| invalid("theta", "solution outside the model domain"))?;
            let covariance = jtj
                .try_inverse()
                .ok_or_else(|| Error::SingularDesign("exact SMSV normal matrix".into()))?;
            return Ok(ExactSmsvFit {
                eta: theta[0],
                mean: theta[1],
                dark: theta[2],
                covariance,
                chi2_per_dof: chi2 / dof,
                iterations: iteration,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: EXACT_FIT_MAX_ITERATIONS,
        eta: theta[0],
        mean: theta[1],
        dark: theta[2],
        chi2,
    })
}

/// Exact square-root fit of a single-mode squeezed vacuum scan.
pub fn fit_exact_smsv(scan: &ScanData) -> Result<ExactSmsvFit> {
    if scan.source == ScanSource::Tmsv {
        return Err(invalid("source", "exact SMSV fit applied to a TMSV scan"));
    }
    fit_exact_smsv_odds(&scan.odds_points()?)
}

/// Quadratic and exact fits of the same SMSV scan side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct SmsvFitComparison {
    pub quadratic: FitResult,
    pub exact: ExactSmsvFit,
}

impl SmsvFitComparison {
    pub fn new(scan: &ScanData) -> Result<Self> {
        Ok(Self {
            quadratic: fit_quadratic(scan)?,
            exact: fit_exact_smsv(scan)?,
        })
    }

    /// Shift of the quadratic estimate relative to the exact one.
    pub fn quadratic_bias(&self) -> f64 {
        self.quadratic.eta_hat - self.exact.eta
    }

    /// Bias in units of the quadratic fit's own uncertainty.
    pub fn bias_significance(&self) -> f64 {
        self.quadratic_bias() / self.quadratic.eta_sigma
    }

    /// The small-mean expansion is visibly biased at three sigma.
    pub fn quadratic_biased(&self) -> bool {
        self.bias_significance().abs() > 3.0
    }
}

/// Two-detector (Klyshko) efficiency estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlyshkoEstimate {
    pub eta1: f64,
    pub eta2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// `eta1 = C / S2`, `eta2 = C / S1`, each with binomial uncertainty
/// `sqrt(η (1-η) / S)` on its conditioning singles.
pub fn klyshko_estimate(singles1: u64, singles2: u64, coincidences: u64) -> Result<KlyshkoEstimate> {
    if singles1 == 0 {
        return Err(Error::DivisionByZero("singles1 is zero"));
    }
    if singles2 == 0 {
        return Err(Error::DivisionByZero("singles2 is zero"));
    }
    if coincidences > singles1.min(singles2) {
        return Err(invalid(
            "coincidences",
            format!("{coincidences} exceeds the singles ({singles1}, {singles2})"),
        ));
    }
    let ratio = |c: u64, s: u64| {
        let s_f = s as f64;
        let eta = c as f64 / s_f;
        let p = if c == 0 { 1.0 / s_f } else { eta };
        (eta, (p * (1.0 - p) / s_f).sqrt())
    };
    let (eta1, sigma1) = ratio(coincidences, singles2);
    let (eta2, sigma2) = ratio(coincidences, singles1);
    Ok(KlyshkoEstimate {
        eta1,
        eta2,
        sigma1,
        sigma2,
    })
}

/// Cross-scan summary of independent calibrations.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub fits: Vec<Result<FitResult>>,
    pub mean_eta: f64,
    /// Sample standard deviation of the fitted efficiencies.
    pub std_eta: f64,
    pub mean_sigma: f64,
}

impl SweepReport {
    /// Scatter across scans agrees with the per-scan errors (std ≤ 2 × mean σ).
    pub fn consistent(&self) -> bool {
        self.std_eta <= 2.0 * self.mean_sigma
    }

    pub fn successful(&self) -> impl Iterator<Item = &FitResult> {
        self.fits.iter().filter_map(|f| f.as_ref().ok())
    }
}

/// Fits every scan independently and summarises the spread of `eta_hat`.
///
/// Scans whose fit fails keep their error in the report and are left out
/// of the statistics.
pub fn power_sweep_report(scans: &[ScanData]) -> Result<SweepReport> {
    if scans.len() < 2 {
        return Err(invalid("scans", format!("a sweep needs at least 2 scans, got {}", scans.len())));
    }
    let fits: Vec<Result<FitResult>> = scans.iter().map(fit_quadratic).collect();
    let ok: Vec<&FitResult> = fits.iter().filter_map(|f| f.as_ref().ok()).collect();
    let count = ok.len() as f64;
    let (mean_eta, std_eta, mean_sigma) = if ok.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = ok.iter().map(|f| f.eta_hat).sum::<f64>() / count;
        let std = if ok.len() > 1 {
            (ok.iter().map(|f| (f.eta_hat - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        let sigma = ok.iter().map(|f| f.eta_sigma).sum::<f64>() / count;
        (mean, std, sigma)
    };
    Ok(SweepReport {
        fits,
        mean_eta,
        std_eta,
        mean_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(count: usize) -> Vec<f64> {
        (1..=count).map(|i| i as f64 / count as f64).collect()
    }

    /// Noise-free odds with variances of a nominal 10⁶-trial scan.
    fn noiseless(ts: &[f64], f: impl Fn(f64) -> f64) -> Vec<OddsPoint> {
        ts.iter()
            .map(|&t| {
                let o = f(t);
                let p = o / (1.0 + o);
                let (_, variance) = odds_point((p * 1e6).round().max(1.0) as u64, 1_000_000).unwrap();
                OddsPoint { t, odds: o, variance }
            })
            .collect()
    }

    #[test]
    fn odds_point_examples() {
        assert_eq!(odds_point(0, 1000).unwrap().0, 0.0);
        assert!(odds_point(0, 1000).unwrap().1 > 0.0);
        assert_eq!(odds_point(500_000, 1_000_000).unwrap().0, 1.0);
        let (o, v) = odds_point(100, 1_000_000).unwrap();
        assert_abs_diff_eq!(o, 100.0 / 999_900.0, epsilon = 1e-18);
        assert_abs_diff_eq!(o, 1.0001e-4, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 1.0e-10, epsilon = 1e-13);
        assert_eq!(
            odds_point(7, 7),
            Err(Error::DegeneratePoint { clicks: 7, trials: 7 })
        );
    }

    #[test]
    fn scan_validation() {
        assert!(ScanData::new(vec![ScanPoint::new(0.5, 3, 2)], ScanSource::Tmsv).is_err());
        assert!(ScanData::new(vec![ScanPoint::new(1.5, 1, 2)], ScanSource::Tmsv).is_err());
        assert!(ScanData::new(
            vec![ScanPoint::new(0.5, 1, 2), ScanPoint::new(0.5, 1, 2)],
            ScanSource::Tmsv
        )
        .is_err());
        assert!(ScanData::new(vec![ScanPoint::new(0.5, 0, 0)], ScanSource::Tmsv).is_err());
    }

    #[test]
    fn noiseless_tmsv_is_exact() {
        let ts = grid(40);
        let pts = noiseless(&ts, |t| {
            odds(SqueezedKind::Tmsv, 0.2, t, 0.001, 0.1, OddsForm::Exact)
        });
        let fit = fit_quadratic_odds(&pts).unwrap();
        assert_abs_diff_eq!(fit.eta_hat, 0.2, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.dark_estimate(), 0.001, epsilon = 1e-9);
        assert!(fit.chi2_per_dof < 1e-12);
    }

    #[test]
    fn linear_odds_give_zero_efficiency() {
        let pts = noiseless(&grid(20), |t| 0.01 * t);
        let fit = fit_quadratic_odds(&pts).unwrap();
        assert_abs_diff_eq!(fit.eta_hat, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn eta_identity_holds() {
        let pts = noiseless(&grid(12), |t| 0.003 + 0.02 * t - 0.004 * t * t);
        let fit = fit_quadratic_odds(&pts).unwrap();
        assert_eq!(fit.eta_hat * fit.a1 + 2.0 * fit.a2, 0.0);
    }

    #[test]
    fn fit_error_paths() {
        let pts = noiseless(&grid(3), |t| t);
        assert_eq!(
            fit_quadratic_odds(&pts).unwrap_err(),
            Error::TooFewPoints { needed: 4, got: 3 }
        );
        let mut same: Vec<OddsPoint> = noiseless(&[0.5, 0.6], |t| 0.1 * t);
        same.extend(noiseless(&[0.5, 0.6], |t| 0.1 * t));
        assert!(matches!(
            fit_quadratic_odds(&same).unwrap_err(),
            Error::SingularDesign(_)
        ));
        let scan = ScanData::new(
            vec![
                ScanPoint::new(0.1, 1, 10),
                ScanPoint::new(0.2, 2, 10),
                ScanPoint::new(0.3, 10, 10),
                ScanPoint::new(0.4, 3, 10),
            ],
            ScanSource::Tmsv,
        )
        .unwrap();
        assert!(matches!(
            fit_quadratic(&scan).unwrap_err(),
            Error::DegeneratePoint { .. }
        ));
    }

    #[test]
    fn attenuation_rescaling() {
        let ts = grid(30);
        let f = |t: f64| odds(SqueezedKind::Tmsv, 0.3, t, 1e-4, 0.5, OddsForm::Exact);
        let base = fit_quadratic_odds(&noiseless(&ts, f)).unwrap();
        let c = 0.5;
        let scaled: Vec<OddsPoint> = noiseless(&ts, f)
            .into_iter()
            .map(|p| OddsPoint { t: p.t * c, ..p })
            .collect();
        let fit = fit_quadratic_odds(&scaled).unwrap();
        assert_abs_diff_eq!(fit.a1, base.a1 / c, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.a2, base.a2 / (c * c), epsilon = 1e-9);
        assert_abs_diff_eq!(fit.eta_hat * c, base.eta_hat, epsilon = 1e-9);
    }

    #[test]
    fn exact_smsv_self_consistent() {
        let ts: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let pts = noiseless(&ts, |t| {
            odds(SqueezedKind::Smsv, 0.3, t, 0.001, 0.5, OddsForm::Exact)
        });
        let fit = fit_exact_smsv_odds(&pts).unwrap();
        assert_abs_diff_eq!(fit.eta, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.mean, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.dark, 0.001, epsilon = 1e-6);
        assert!(fit.iterations < EXACT_FIT_MAX_ITERATIONS);
        assert!(fit.eta_sigma() > 0.0);
    }

    #[test]
    fn exact_smsv_reports_non_convergence() {
        let ts = grid(10);
        let pts = noiseless(&ts, |t| odds(SqueezedKind::Smsv, 0.3, t, 0.0, 0.5, OddsForm::Exact));
        let problem_start = Vector3::new(0.3, 0.5, 0.0);
        // Converges in a handful of steps from the truth ...
        assert!(fit_exact_smsv_from(&pts, problem_start).is_ok());
        // ... but a start outside the domain is rejected outright.
        assert!(fit_exact_smsv_from(&pts, Vector3::new(0.3, 0.5, 1.5)).is_err());
    }

    #[test]
    fn exact_fit_rejects_tmsv_scan() {
        let scan = ScanData::new(
            (1..=5).map(|i| ScanPoint::new(i as f64 / 5.0, i, 100)).collect(),
            ScanSource::Tmsv,
        )
        .unwrap();
        assert!(fit_exact_smsv(&scan).is_err());
    }

    #[test]
    fn klyshko_examples() {
        let k = klyshko_estimate(500, 500, 500).unwrap();
        assert_eq!((k.eta1, k.eta2), (1.0, 1.0));
        let k = klyshko_estimate(500, 400, 0).unwrap();
        assert_eq!((k.eta1, k.eta2), (0.0, 0.0));
        let k = klyshko_estimate(1000, 400, 100).unwrap();
        assert_abs_diff_eq!(k.eta1, 0.25);
        assert_abs_diff_eq!(k.eta2, 0.1);
        assert_abs_diff_eq!(k.sigma1, (0.25f64 * 0.75 / 400.0).sqrt());
        assert!(matches!(klyshko_estimate(0, 5, 0), Err(Error::DivisionByZero(_))));
        assert!(matches!(klyshko_estimate(5, 0, 0), Err(Error::DivisionByZero(_))));
        assert!(klyshko_estimate(5, 5, 6).is_err());
    }

    fn synthetic_scan(eta: f64, mean: f64, seed_shift: u64) -> ScanData {
        let ts = grid(40);
        let points = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let o = odds(SqueezedKind::Tmsv, eta, t, 1e-4, mean, OddsForm::Exact);
                let p = o / (1.0 + o);
                // Deterministic pseudo-noise of about one sigma.
                let jitter = (((i as u64 + seed_shift) * 2654435761) % 1000) as f64 / 500.0 - 1.0;
                let clicks = (p * 1e7 + jitter * (p * 1e7).sqrt()).round() as u64;
                ScanPoint::new(t, clicks, 10_000_000)
            })
            .collect();
        ScanData::new(points, ScanSource::Tmsv).unwrap()
    }

    #[test]
    fn sweep_identical_scans_have_zero_spread() {
        let s = synthetic_scan(0.172, 1.0, 0);
        let report = power_sweep_report(&[s.clone(), s.clone(), s]).unwrap();
        assert_eq!(report.std_eta, 0.0);
        assert!(report.consistent());
    }

    #[test]
    fn sweep_flags_incompatible_efficiencies() {
        let report =
            power_sweep_report(&[synthetic_scan(0.1, 1.0, 1), synthetic_scan(0.2, 1.0, 2)]).unwrap();
        assert!(!report.consistent());
        assert!(report.std_eta > 0.05);
    }

    #[test]
    fn sweep_needs_two_scans_and_keeps_errors() {
        assert!(power_sweep_report(&[synthetic_scan(0.1, 1.0, 1)]).is_err());
        let bad = ScanData::new(
            (1..=3).map(|i| ScanPoint::new(i as f64 / 3.0, i, 100)).collect(),
            ScanSource::Tmsv,
        )
        .unwrap();
        let good = synthetic_scan(0.17, 1.0, 3);
        let report = power_sweep_report(&[good.clone(), bad, good]).unwrap();
        assert!(report.fits[1].is_err());
        assert_eq!(report.successful().count(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn quadratic_truth_recovered_for_any_weights(
                a0 in -1.0f64..1.0,
                a1 in 0.1f64..2.0,
                a2 in -1.0f64..1.0,
                weights in prop::collection::vec(1e-6f64..1e6, 12),
            ) {
                let pts: Vec<OddsPoint> = weights
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let t = (i + 1) as f64 / 12.0;
                        OddsPoint { t, odds: a0 + a1 * t + a2 * t * t, variance: 1.0 / w }
                    })
                    .collect();
                let fit = fit_quadratic_odds(&pts).unwrap();
                for (got, want) in fit.coefficients().iter().zip([a0, a1, a2]) {
                    prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
                }
            }

            #[test]
            fn fitted_chi2_is_minimal(
                noise in prop::collection::vec(-1.0f64..1.0, 20),
                perturb in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 100),
            ) {
                let pts: Vec<OddsPoint> = noise
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let t = (i + 1) as f64 / 20.0;
                        let truth = 0.001 + 0.02 * t - 0.002 * t * t;
                        OddsPoint { t, odds: truth + 1e-4 * e, variance: 1e-8 }
                    })
                    .collect();
                let fit = fit_quadratic_odds(&pts).unwrap();
                let chi2 = |c: [f64; 3]| -> f64 {
                    pts.iter()
                        .map(|p| (p.odds - c[0] - c[1] * p.t - c[2] * p.t * p.t).powi(2) / p.variance)
                        .sum()
                };
                let best = chi2(fit.coefficients());
                for d in perturb {
                    let c = [
                        fit.a0 + 1e-5 * d[0],
                        fit.a1 + 1e-5 * d[1],
                        fit.a2 + 1e-5 * d[2],
                    ];
                    prop_assert!(best <= chi2(c) * (1.0 + 1e-12));
                }
            }
        }
    }
}
