//! Monte Carlo oracle for the detector model.
//!
//! Photons are dropped on an explicit `side × side` grid of elements, so the
//! finite-size and cross-talk effects come from geometry rather than from
//! the analytic matrices. Cross-talk ignites von Neumann neighbours; edge
//! and corner elements simply have fewer of them.
//!
//! Randomness is drawn from ChaCha8 streams keyed by the master seed. Shots
//! are grouped in fixed-size batches and batch `b` always uses stream `b`,
//! so results are identical for any number of worker threads.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Geometric};
use rayon::prelude::*;

use crate::calibration::{ScanData, ScanPoint, ScanSource};
use crate::detector::{detected_distribution, spd_click_probability, DetectorParams};
use crate::error::{check_probability, invalid, Result};
use crate::sources::{PhotonDistribution, Source, DEFAULT_TAIL_TOL};

/// Shots per RNG stream.
pub const BATCH_SIZE: u64 = 8192;

const IDLE: u8 = 0;
const FIRED: u8 = 1;
const CROSSTALK: u8 = 2;

/// Stream index for batch `batch` of scan point `point`.
fn stream_id(point: usize, batch: u64) -> u64 {
    ((point as u64) << 32) | batch
}

fn batch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Square array of detector elements.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDetector {
    side: usize,
    params: DetectorParams,
}

impl GridDetector {
    /// Requires the element count of `params` to be a perfect square.
    pub fn new(params: DetectorParams) -> Result<Self> {
        let n = params.elements();
        let side = n.isqrt();
        if side * side != n {
            return Err(invalid(
                "elements",
                format!("{n} is not a perfect square; the grid is side x side"),
            ));
        }
        Ok(Self { side, params })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    /// Same grid behind an attenuator of transmission `t`.
    pub fn attenuated(&self, t: f64) -> Result<Self> {
        Ok(Self {
            side: self.side,
            params: self.params.attenuated(t)?,
        })
    }

    /// Runs one shot with fresh scratch state.
    pub fn simulate_shot<R: Rng + ?Sized>(&self, n_photons: usize, rng: &mut R) -> ShotOutcome {
        self.simulator().shot(n_photons, rng)
    }

    /// Reusable per-worker simulator.
    pub fn simulator(&self) -> ShotSimulator<'_> {
        let d = self.params.dark();
        let dark_gap = if d > 0.0 && d < 1.0 {
            Some(Geometric::new(d).expect("dark probability checked"))
        } else {
            None
        };
        ShotSimulator {
            det: self,
            state: vec![IDLE; self.params.elements()],
            touched: Vec::new(),
            firers: Vec::new(),
            dark_gap,
        }
    }
}

/// Result of one detection gate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShotOutcome {
    /// Distinct fired elements.
    pub clicks: usize,
    pub n_incident: usize,
    /// Photons that survived loss, before collisions on the same element.
    pub n_detected_signal: usize,
    /// Dark counts on elements still idle after the photons landed.
    pub n_dark: usize,
    /// Successful cross-talk ignitions, including repeats on one neighbour.
    pub n_crosstalk: usize,
}

/// Scratch state for simulating shots on one [`GridDetector`].
pub struct ShotSimulator<'a> {
    det: &'a GridDetector,
    state: Vec<u8>,
    touched: Vec<usize>,
    firers: Vec<usize>,
    dark_gap: Option<Geometric>,
}

impl ShotSimulator<'_> {
    pub fn shot<R: Rng + ?Sized>(&mut self, n_photons: usize, rng: &mut R) -> ShotOutcome {
        let params = self.det.params;
        let n = params.elements();
        let mut out = ShotOutcome {
            n_incident: n_photons,
            ..ShotOutcome::default()
        };

        // Loss, then each survivor lands on a uniformly random element.
        let eta = params.eta();
        for _ in 0..n_photons {
            if eta >= 1.0 || (eta > 0.0 && rng.random::<f64>() < eta) {
                out.n_detected_signal += 1;
                let idx = if n == 1 { 0 } else { rng.random_range(0..n) };
                if self.state[idx] == IDLE {
                    self.state[idx] = FIRED;
                    self.touched.push(idx);
                }
            }
        }

        // Dark counts: each idle element fires independently.
        if params.dark() >= 1.0 {
            for idx in 0..n {
                self.dark_fire(idx, &mut out);
            }
        } else if let Some(gap) = self.dark_gap {
            let mut pos = gap.sample(rng);
            while pos < n as u64 {
                self.dark_fire(pos as usize, &mut out);
                pos += 1 + gap.sample(rng);
            }
        }

        // One cross-talk pass from everything fired so far, against the
        // same snapshot; ignited neighbours do not propagate.
        let x = params.xtalk();
        if x > 0.0 && n > 1 {
            self.firers.clear();
            self.firers.extend_from_slice(&self.touched);
            let side = self.det.side;
            for i in 0..self.firers.len() {
                let idx = self.firers[i];
                let (row, col) = (idx / side, idx % side);
                let neighbours = [
                    (row > 0).then(|| idx - side),
                    (row + 1 < side).then(|| idx + side),
                    (col > 0).then(|| idx - 1),
                    (col + 1 < side).then(|| idx + 1),
                ];
                for nb in neighbours.into_iter().flatten() {
                    if self.state[nb] == FIRED {
                        continue;
                    }
                    if rng.random::<f64>() < x {
                        out.n_crosstalk += 1;
                        if self.state[nb] == IDLE {
                            self.state[nb] = CROSSTALK;
                            self.touched.push(nb);
                        }
                    }
                }
            }
        }

        out.clicks = self.touched.len();
        for &idx in &self.touched {
            self.state[idx] = IDLE;
        }
        self.touched.clear();
        out
    }

    fn dark_fire(&mut self, idx: usize, out: &mut ShotOutcome) {
        if self.state[idx] == IDLE {
            self.state[idx] = FIRED;
            self.touched.push(idx);
            out.n_dark += 1;
        }
    }
}

/// Click-count histogram with per-cause diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickHistogram {
    /// `counts[s]` is the number of shots with `s` clicks, `s = 0..=N`.
    pub counts: Vec<u64>,
    pub shots: u64,
    pub n_incident: u64,
    pub n_detected_signal: u64,
    pub n_dark: u64,
    pub n_crosstalk: u64,
}

impl ClickHistogram {
    fn empty(elements: usize) -> Self {
        Self {
            counts: vec![0; elements + 1],
            shots: 0,
            n_incident: 0,
            n_detected_signal: 0,
            n_dark: 0,
            n_crosstalk: 0,
        }
    }

    fn record(&mut self, shot: &ShotOutcome) {
        self.counts[shot.clicks] += 1;
        self.shots += 1;
        self.n_incident += shot.n_incident as u64;
        self.n_detected_signal += shot.n_detected_signal as u64;
        self.n_dark += shot.n_dark as u64;
        self.n_crosstalk += shot.n_crosstalk as u64;
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.shots += other.shots;
        self.n_incident += other.n_incident;
        self.n_detected_signal += other.n_detected_signal;
        self.n_dark += other.n_dark;
        self.n_crosstalk += other.n_crosstalk;
        self
    }

    pub fn fraction(&self, s: usize) -> f64 {
        self.counts.get(s).copied().unwrap_or(0) as f64 / self.shots as f64
    }

    /// Shots with at least one click.
    pub fn any_click(&self) -> u64 {
        self.shots - self.counts[0]
    }

    pub fn total_clicks(&self) -> u64 {
        self.counts
            .iter()
            .enumerate()
            .map(|(s, &c)| s as u64 * c)
            .sum()
    }

    /// Empirical click distribution.
    pub fn distribution(&self) -> Result<PhotonDistribution> {
        PhotonDistribution::from_counts(&self.counts)
    }
}

fn photon_sampler(source: &PhotonDistribution) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(source.probs().iter().copied())
        .map_err(|e| invalid("source", format!("cannot sample photon numbers: {e}")))
}

fn histogram_stream(
    det: &GridDetector,
    sampler: &WeightedIndex<f64>,
    shots: u64,
    seed: u64,
    point: usize,
) -> ClickHistogram {
    let n = det.params.elements();
    let batches = shots.div_ceil(BATCH_SIZE);
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = batch_rng(seed, stream_id(point, b));
            let mut sim = det.simulator();
            let mut hist = ClickHistogram::empty(n);
            let len = BATCH_SIZE.min(shots - b * BATCH_SIZE);
            for _ in 0..len {
                let photons = sampler.sample(&mut rng);
                let shot = sim.shot(photons, &mut rng);
                hist.record(&shot);
            }
            hist
        })
        .reduce(|| ClickHistogram::empty(n), ClickHistogram::merge)
}

/// Click histogram of `shots` gates with photon numbers drawn from `source`.
pub fn simulate_histogram(
    det: &GridDetector,
    source: &PhotonDistribution,
    shots: u64,
    seed: u64,
) -> Result<ClickHistogram> {
    if shots == 0 {
        return Err(invalid("shots", "need at least one shot"));
    }
    let sampler = photon_sampler(source)?;
    Ok(histogram_stream(det, &sampler, shots, seed, 0))
}

fn check_scan_inputs(t_values: &[f64], trials: u64) -> Result<()> {
    if trials == 0 {
        return Err(invalid("trials", "need at least one trial per point"));
    }
    if t_values.is_empty() {
        return Err(invalid("t_values", "empty scan"));
    }
    for &t in t_values {
        check_probability("t", t)?;
    }
    Ok(())
}

fn scan_source(source: &Source) -> ScanSource {
    match source {
        Source::Smsv(_) => ScanSource::Smsv,
        Source::Tmsv(_) => ScanSource::Tmsv,
        _ => ScanSource::Unknown,
    }
}

fn scan_meta(
    scan: &mut ScanData,
    mode: &str,
    params: &DetectorParams,
    source: &Source,
    seed: u64,
) {
    scan.meta.insert("mode".into(), mode.into());
    scan.meta.insert("seed".into(), seed.to_string());
    scan.meta.insert("elements".into(), params.elements().to_string());
    scan.meta.insert("eta".into(), params.eta().to_string());
    scan.meta.insert("dark".into(), params.dark().to_string());
    scan.meta.insert("xtalk".into(), params.xtalk().to_string());
    scan.meta.insert("source".into(), source.kind().to_string());
    scan.meta.insert("mean".into(), source.mean().to_string());
}

/// Attenuation scan simulated shot by shot on the grid.
///
/// `source` is the light at full transmission; each scan point runs the
/// detector with efficiency `η t`. Detectors with more than one element
/// also keep the full click histogram of every point.
pub fn simulate_scan(
    det: &GridDetector,
    source: &Source,
    t_values: &[f64],
    shots_per_point: u64,
    seed: u64,
) -> Result<ScanData> {
    check_scan_inputs(t_values, shots_per_point)?;
    let dist = source.distribution(DEFAULT_TAIL_TOL)?;
    let sampler = photon_sampler(&dist)?;
    let mut points = Vec::with_capacity(t_values.len());
    for (i, &t) in t_values.iter().enumerate() {
        let att = det.attenuated(t)?;
        let hist = histogram_stream(&att, &sampler, shots_per_point, seed, i);
        points.push(ScanPoint {
            t,
            clicks: hist.any_click(),
            trials: shots_per_point,
            histogram: (det.params.elements() > 1).then(|| hist.counts.clone()),
        });
    }
    let mut scan = ScanData::new(points, scan_source(source))?;
    scan_meta(&mut scan, "montecarlo", &det.params, source, seed);
    Ok(scan)
}

/// Attenuation scan with clicks drawn from the analytic click distribution.
///
/// Much cheaper than [`simulate_scan`]; the only randomness is the
/// multinomial counting noise of `trials` gates per point.
pub fn simulate_scan_binomial(
    params: &DetectorParams,
    source: &Source,
    t_values: &[f64],
    trials: u64,
    seed: u64,
) -> Result<ScanData> {
    check_scan_inputs(t_values, trials)?;
    let dist = if params.elements() > 1 {
        Some(source.distribution(DEFAULT_TAIL_TOL)?)
    } else {
        None
    };
    let mut points = Vec::with_capacity(t_values.len());
    for (i, &t) in t_values.iter().enumerate() {
        let att = params.attenuated(t)?;
        let mut rng = batch_rng(seed, stream_id(i, 0));
        let probs = match &dist {
            Some(dist) => detected_distribution(dist, &att)?.into_probs(),
            None => {
                let p = spd_click_probability(*source, att.eta(), att.dark())?;
                vec![1.0 - p, p]
            }
        };
        let counts = multinomial(&probs, trials, &mut rng)?;
        points.push(ScanPoint {
            t,
            clicks: trials - counts[0],
            trials,
            histogram: (params.elements() > 1).then_some(counts),
        });
    }
    let mut scan = ScanData::new(points, scan_source(source))?;
    scan_meta(&mut scan, "binomial", params, source, seed);
    Ok(scan)
}

/// Multinomial draw by sequential conditional binomials.
fn multinomial<R: Rng + ?Sized>(probs: &[f64], trials: u64, rng: &mut R) -> Result<Vec<u64>> {
    let mut counts = vec![0; probs.len()];
    let mut remaining = trials;
    let mut mass_left: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let cond = if mass_left > 0.0 {
            (p / mass_left).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let k = Binomial::new(remaining, cond)
            .map_err(|e| invalid("probs", e.to_string()))?
            .sample(rng);
        counts[i] = k;
        remaining -= k;
        mass_left -= p;
    }
    Ok(counts)
}

/// Singles and coincidences of two detectors watching the two arms of a
/// twin beam.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounts {
    pub singles1: u64,
    pub singles2: u64,
    pub coincidences: u64,
    pub shots: u64,
}

impl PairCounts {
    fn merge(self, o: Self) -> Self {
        Self {
            singles1: self.singles1 + o.singles1,
            singles2: self.singles2 + o.singles2,
            coincidences: self.coincidences + o.coincidences,
            shots: self.shots + o.shots,
        }
    }
}

/// Simulates twin-beam detection: `n` pairs drawn from thermal statistics,
/// each arm clicks when at least one of its `n` photons survives.
pub fn simulate_pair_coincidences(
    eta1: f64,
    eta2: f64,
    mean_per_mode: f64,
    shots: u64,
    seed: u64,
) -> Result<PairCounts> {
    check_probability("eta1", eta1)?;
    check_probability("eta2", eta2)?;
    if !(mean_per_mode.is_finite() && mean_per_mode >= 0.0) {
        return Err(invalid("mean", format!("{mean_per_mode} must be >= 0")));
    }
    if shots == 0 {
        return Err(invalid("shots", "need at least one shot"));
    }
    let pairs = Geometric::new(1.0 / (1.0 + mean_per_mode))
        .map_err(|e| invalid("mean", e.to_string()))?;
    let batches = shots.div_ceil(BATCH_SIZE);
    let counts = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = batch_rng(seed, stream_id(0, b));
            let mut c = PairCounts::default();
            let len = BATCH_SIZE.min(shots - b * BATCH_SIZE);
            for _ in 0..len {
                let n = pairs.sample(&mut rng) as i32;
                let (a, b) = if n == 0 {
                    (false, false)
                } else {
                    let a = rng.random::<f64>() < 1.0 - (1.0 - eta1).powi(n);
                    let b = rng.random::<f64>() < 1.0 - (1.0 - eta2).powi(n);
                    (a, b)
                };
                c.singles1 += u64::from(a);
                c.singles2 += u64::from(b);
                c.coincidences += u64::from(a && b);
            }
            c.shots = len;
            c
        })
        .reduce(PairCounts::default, PairCounts::merge);
    Ok(counts)
}

/// Per-shot probabilities `(singles1, singles2, coincidence)` for the
/// twin-beam experiment, from `E[z^n] = 1 / (1 + m (1 - z))`.
pub fn expected_pair_rates(eta1: f64, eta2: f64, mean_per_mode: f64) -> (f64, f64, f64) {
    let gen = |z: f64| 1.0 / (1.0 + mean_per_mode * (1.0 - z));
    let none1 = gen(1.0 - eta1);
    let none2 = gen(1.0 - eta2);
    let neither = gen((1.0 - eta1) * (1.0 - eta2));
    (1.0 - none1, 1.0 - none2, 1.0 - none1 - none2 + neither)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::fock;

    fn grid(n: usize, eta: f64, d: f64, x: f64) -> GridDetector {
        GridDetector::new(DetectorParams::new(n, eta, d, x).unwrap()).unwrap()
    }

    #[test]
    fn grid_requires_square() {
        assert!(GridDetector::new(DetectorParams::new(12, 0.5, 0.0, 0.0).unwrap()).is_err());
        assert_eq!(grid(16, 0.5, 0.0, 0.0).side(), 4);
        assert_eq!(grid(1, 0.5, 0.0, 0.0).side(), 1);
    }

    #[test]
    fn shot_examples() {
        let mut rng = batch_rng(1, 0);
        let dark_free = grid(16, 0.7, 0.0, 0.1);
        for _ in 0..1000 {
            assert_eq!(dark_free.simulate_shot(0, &mut rng).clicks, 0);
        }
        let perfect = grid(16, 1.0, 0.0, 0.0);
        for _ in 0..1000 {
            assert_eq!(perfect.simulate_shot(1, &mut rng).clicks, 1);
        }
        let spd = grid(1, 1.0, 0.0, 0.0);
        assert_eq!(spd.simulate_shot(5, &mut rng).clicks, 1);
        let always_dark = grid(9, 0.0, 1.0, 0.0);
        assert_eq!(always_dark.simulate_shot(3, &mut rng).clicks, 9);
    }

    #[test]
    fn cause_accounting() {
        let det = grid(16, 0.8, 0.05, 0.1);
        let mut sim = det.simulator();
        let mut rng = batch_rng(7, 3);
        for n in 0..2000 {
            let shot = sim.shot(n % 9, &mut rng);
            assert!(shot.clicks <= 16);
            assert!(shot.n_dark + shot.n_detected_signal + shot.n_crosstalk >= shot.clicks);
            assert!(shot.n_detected_signal <= shot.n_incident);
        }
    }

    #[test]
    fn scratch_is_reset_between_shots() {
        let det = grid(4, 1.0, 0.0, 0.0);
        let mut sim = det.simulator();
        let mut rng = batch_rng(0, 0);
        for _ in 0..100 {
            sim.shot(10, &mut rng);
            assert!(sim.state.iter().all(|&s| s == IDLE));
            assert!(sim.touched.is_empty());
        }
    }

    #[test]
    fn histogram_vacuum_and_coin() {
        let det = grid(4, 0.9, 0.0, 0.05);
        let h = simulate_histogram(&det, &fock(0), 10_000, 5).unwrap();
        assert_eq!(h.counts[0], 10_000);

        let det = grid(1, 0.5, 0.0, 0.0);
        let h = simulate_histogram(&det, &fock(1), 200_000, 11).unwrap();
        let sigma = (0.25f64 / 200_000.0).sqrt();
        assert!((h.fraction(1) - 0.5).abs() < 5.0 * sigma);
        assert_eq!(h.shots, 200_000);
    }

    #[test]
    fn histogram_deterministic_across_pools() {
        let det = grid(16, 0.6, 0.01, 0.05);
        let src = Source::Thermal(1.0).distribution(DEFAULT_TAIL_TOL).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_histogram(&det, &src, 50_000, 42).unwrap())
        };
        assert_eq!(run(1), run(3));
        assert_ne!(run(1), simulate_histogram(&det, &src, 50_000, 43).unwrap());
    }

    #[test]
    fn scan_zero_transmission_has_no_clicks() {
        let det = grid(1, 0.3, 0.0, 0.0);
        let scan = simulate_scan(&det, &Source::Tmsv(0.5), &[0.0, 0.5, 1.0], 20_000, 3).unwrap();
        assert_eq!(scan.points[0].clicks, 0);
        assert!(scan.points[2].clicks > scan.points[1].clicks);
        assert_eq!(scan.source, ScanSource::Tmsv);
        assert!(scan.points.iter().all(|p| p.histogram.is_none()));
    }

    #[test]
    fn scan_point_reproduces_histogram() {
        let det = grid(4, 0.5, 0.01, 0.0);
        let src = Source::Smsv(0.7);
        let scan = simulate_scan(&det, &src, &[1.0], 30_000, 9).unwrap();
        let dist = src.distribution(DEFAULT_TAIL_TOL).unwrap();
        let hist = simulate_histogram(&det, &dist, 30_000, 9).unwrap();
        assert_eq!(scan.points[0].histogram.as_ref().unwrap(), &hist.counts);
    }

    #[test]
    fn binomial_scan_is_deterministic() {
        let p = DetectorParams::spd(0.2, 1e-3).unwrap();
        let t: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let a = simulate_scan_binomial(&p, &Source::Tmsv(0.2), &t, 100_000, 1).unwrap();
        let b = simulate_scan_binomial(&p, &Source::Tmsv(0.2), &t, 100_000, 1).unwrap();
        assert_eq!(a, b);
        let multi = DetectorParams::new(4, 0.5, 0.0, 0.0).unwrap();
        let m = simulate_scan_binomial(&multi, &Source::Fock(2), &[0.0, 1.0], 1000, 1).unwrap();
        assert_eq!(m.points[0].clicks, 0);
        assert_eq!(m.points[1].histogram.as_ref().unwrap().iter().sum::<u64>(), 1000);
    }

    #[test]
    fn multinomial_conserves_trials() {
        let mut rng = batch_rng(5, 5);
        let counts = multinomial(&[0.1, 0.0, 0.6, 0.3], 12_345, &mut rng).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), 12_345);
        assert_eq!(counts[1], 0);
    }

    #[test]
    fn pair_examples() {
        let c = simulate_pair_coincidences(0.5, 0.0, 0.1, 100_000, 1).unwrap();
        assert_eq!(c.coincidences, 0);
        assert_eq!(c.singles2, 0);
        let c = simulate_pair_coincidences(1.0, 1.0, 0.01, 100_000, 2).unwrap();
        assert_eq!(c.coincidences, c.singles1);
        assert_eq!(c.coincidences, c.singles2);
        assert!(c.coincidences > 0);
    }

    #[test]
    fn pair_rates_match_expectation() {
        let (eta1, eta2, m) = (0.3, 0.6, 0.2);
        let shots = 400_000;
        let c = simulate_pair_coincidences(eta1, eta2, m, shots, 17).unwrap();
        let (s1, s2, cc) = expected_pair_rates(eta1, eta2, m);
        for (count, p) in [(c.singles1, s1), (c.singles2, s2), (c.coincidences, cc)] {
            let sigma = (p * (1.0 - p) / shots as f64).sqrt();
            assert!((count as f64 / shots as f64 - p).abs() < 5.0 * sigma);
        }
    }
}
