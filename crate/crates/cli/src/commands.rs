use std::io::Write;
use std::path::{Path, PathBuf};

use pnrcal::calibration::{
    fit_quadratic, klyshko_estimate, power_sweep_report, ExactSmsvFit, FitResult,
    ScanData, ScanSource, SmsvFitComparison,
};
use pnrcal::detector::{detected_distribution, DetectorMatrices, STOCHASTIC_TOL};
use pnrcal::montecarlo::{
    expected_pair_rates, simulate_histogram, simulate_pair_coincidences, simulate_scan,
    simulate_scan_binomial, GridDetector,
};
use pnrcal::sources::DEFAULT_TAIL_TOL;

use crate::config::{RunConfig, ScanMode};
use crate::error::CliError;
use crate::io::{fmt_f64, prefixed, read_scan, sink, write_matrix, write_scan, write_table};

fn w(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(text)
        .map_err(|e| CliError::Usage(format!("write failed: {e}")))
}

fn out_path(cfg: &RunConfig, name: &str) -> Option<PathBuf> {
    cfg.out.as_deref().map(|p| prefixed(p, name))
}

pub fn matrix(cfg: &RunConfig, check: bool) -> Result<(), CliError> {
    let prefix = cfg
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("matrix writes one file per effect; give --out PREFIX".into()))?;
    let params = cfg.detector()?;
    let mats = DetectorMatrices::new(&params, cfg.n_max)?;
    let composed = mats.composed()?;
    let mut stdout = std::io::stdout().lock();
    for m in mats.iter().chain(std::iter::once(&composed)) {
        let path = prefixed(prefix, &m.effect().to_string());
        write_matrix(&mut *sink(Some(&path))?, m)?;
        let defect = m.max_column_defect();
        w(
            &mut stdout,
            format_args!(
                "{:<12} {:>4} x {:<4} max column defect {:.3e}  -> {}\n",
                m.effect().to_string(),
                m.out_dim(),
                m.in_dim(),
                defect,
                path.display()
            ),
        )?;
        if check && !m.is_column_stochastic(STOCHASTIC_TOL) {
            return Err(CliError::Check(format!(
                "{} matrix column sums deviate from 1 by {defect:.3e}",
                m.effect()
            )));
        }
    }
    if check {
        w(&mut stdout, format_args!("check passed: all columns sum to 1 within {STOCHASTIC_TOL:e}\n"))?;
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, check: bool) -> Result<(), CliError> {
    let params = cfg.detector()?;
    let incident = cfg.light()?.distribution(DEFAULT_TAIL_TOL)?;
    let clicks = detected_distribution(&incident, &params)?;
    if check && (clicks.total() - incident.total()).abs() > 1e-10 {
        return Err(CliError::Check(format!(
            "output mass {} differs from input mass {}",
            clicks.total(),
            incident.total()
        )));
    }
    let rows: Vec<Vec<String>> = clicks
        .probs()
        .iter()
        .enumerate()
        .map(|(s, &p)| vec![s.to_string(), fmt_f64(p)])
        .collect();
    write_table(&mut *sink(out_path(cfg, "predict").as_deref())?, &["s", "probability"], &rows)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let params = cfg.detector()?;
    let det = GridDetector::new(params)?;
    let incident = cfg.light()?.distribution(DEFAULT_TAIL_TOL)?;
    let hist = simulate_histogram(&det, &incident, cfg.shots, cfg.seed)?;
    let predicted = detected_distribution(&incident, &params)?;
    let shots = hist.shots as f64;
    let mut outside = 0;
    let rows: Vec<Vec<String>> = hist
        .counts
        .iter()
        .enumerate()
        .map(|(s, &count)| {
            let p = predicted.prob(s);
            let bound = 5.0 * (p * (1.0 - p) / shots).sqrt();
            let frac = count as f64 / shots;
            if (frac - p).abs() > bound {
                outside += 1;
            }
            vec![
                s.to_string(),
                count.to_string(),
                fmt_f64(frac),
                fmt_f64(p),
                fmt_f64(bound),
            ]
        })
        .collect();
    write_table(
        &mut *sink(out_path(cfg, "hist").as_deref())?,
        &["s", "count", "fraction", "predicted", "bound_5sigma"],
        &rows,
    )?;
    let diagnostics = vec![
        vec!["shots".to_string(), hist.shots.to_string()],
        vec!["seed".into(), cfg.seed.to_string()],
        vec!["n_incident".into(), hist.n_incident.to_string()],
        vec!["n_detected_signal".into(), hist.n_detected_signal.to_string()],
        vec!["n_dark".into(), hist.n_dark.to_string()],
        vec!["n_crosstalk".into(), hist.n_crosstalk.to_string()],
        vec!["total_clicks".into(), hist.total_clicks().to_string()],
        vec!["bins_outside_5sigma".into(), outside.to_string()],
    ];
    match out_path(cfg, "diagnostics") {
        Some(path) => write_table(&mut *sink(Some(&path))?, &["quantity", "value"], &diagnostics)?,
        None => {
            for d in &diagnostics {
                eprintln!("{}: {}", d[0], d[1]);
            }
        }
    }
    if outside > 0 && params.xtalk() == 0.0 {
        log::warn!("{outside} bins lie outside the 5-sigma band of the analytic prediction");
    }
    Ok(())
}

fn synthesize(cfg: &RunConfig, seed: u64) -> Result<ScanData, CliError> {
    let params = cfg.detector()?;
    let light = cfg.light()?;
    let ts = cfg.t_grid()?;
    let scan = match cfg.mode {
        ScanMode::Binomial => simulate_scan_binomial(&params, &light, &ts, cfg.trials, seed)?,
        ScanMode::MonteCarlo => {
            simulate_scan(&GridDetector::new(params)?, &light, &ts, cfg.trials, seed)?
        }
    };
    Ok(scan)
}

pub fn synth_scan(cfg: &RunConfig) -> Result<(), CliError> {
    let scan = synthesize(cfg, cfg.seed)?;
    write_scan(&mut *sink(out_path(cfg, "scan").as_deref())?, &scan)
}

enum Fit {
    Quadratic(FitResult),
    Exact(SmsvFitComparison),
}

impl Fit {
    fn eta(&self) -> (f64, f64) {
        match self {
            Fit::Quadratic(f) => (f.eta_hat, f.eta_sigma),
            Fit::Exact(c) => (c.exact.eta, c.exact.eta_sigma()),
        }
    }

    fn chi2(&self) -> f64 {
        match self {
            Fit::Quadratic(f) => f.chi2_per_dof,
            Fit::Exact(c) => c.exact.chi2_per_dof,
        }
    }

    fn predict(&self, t: f64) -> f64 {
        match self {
            Fit::Quadratic(f) => f.predict(t),
            Fit::Exact(c) => c.exact.predict(t),
        }
    }
}

fn label(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn describe_exact(out: &mut dyn Write, e: &ExactSmsvFit) -> Result<(), CliError> {
    w(
        out,
        format_args!(
            "    exact fit: eta = {} ± {} %, mean = {:.4} ± {:.4}, dark = {:.3e} ± {:.1e}, {} iterations\n",
            pct(e.eta),
            pct(e.eta_sigma()),
            e.mean,
            e.mean_sigma(),
            e.dark,
            e.dark_sigma(),
            e.iterations
        ),
    )
}

pub fn calibrate(
    cfg: &RunConfig,
    scans: &[PathBuf],
    exact_smsv: bool,
    source: Option<ScanSource>,
) -> Result<(), CliError> {
    if scans.is_empty() {
        return Err(CliError::Usage("calibrate needs at least one scan CSV".into()));
    }
    let loaded = scans
        .iter()
        .map(|p| read_scan(p).map(|s| (p, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut stdout = std::io::stdout().lock();
    w(
        &mut stdout,
        format_args!(
            "{:<24} {:<8} {:>18} {:>10} {:>6}\n",
            "scan", "light", "eta (%)", "chi2/dof", "points"
        ),
    )?;
    let mut details = Vec::new();
    let mut summary = Vec::new();
    for (path, mut scan) in loaded {
        if let Some(s) = source {
            scan.source = s;
        }
        let fit = if exact_smsv && scan.source != ScanSource::Tmsv {
            Fit::Exact(SmsvFitComparison::new(&scan)?)
        } else {
            Fit::Quadratic(fit_quadratic(&scan)?)
        };
        let (eta, sigma) = fit.eta();
        let name = label(path);
        w(
            &mut stdout,
            format_args!(
                "{:<24} {:<8} {:>18} {:>10.3} {:>6}\n",
                name,
                scan.source.to_string().to_uppercase(),
                format!("{} ± {}", pct(eta), pct(sigma)),
                fit.chi2(),
                scan.points.len()
            ),
        )?;
        if let Some(prefix) = cfg.out.as_deref() {
            let odds = scan.odds_points()?;
            let rows: Vec<Vec<String>> = odds
                .iter()
                .map(|p| {
                    vec![
                        fmt_f64(p.t),
                        fmt_f64(p.odds),
                        fmt_f64(p.variance.sqrt()),
                        fmt_f64(fit.predict(p.t)),
                    ]
                })
                .collect();
            let target = if scans.len() == 1 {
                prefixed(prefix, "odds")
            } else {
                prefixed(prefix, &format!("{name}_odds"))
            };
            write_table(&mut *sink(Some(&target))?, &["t", "odds", "odds_sigma", "fit_odds"], &rows)?;
        }
        let quad = match &fit {
            Fit::Quadratic(f) => f,
            Fit::Exact(c) => &c.quadratic,
        };
        summary.push(vec![
            name.clone(),
            scan.source.to_string(),
            fmt_f64(eta),
            fmt_f64(sigma),
            fmt_f64(quad.a0),
            fmt_f64(quad.a1),
            fmt_f64(quad.a2),
            fmt_f64(fit.chi2()),
        ]);
        details.push((name, fit));
    }
    w(&mut stdout, format_args!("\n"))?;
    for (name, fit) in &details {
        w(&mut stdout, format_args!("{name}:\n"))?;
        let quad = match fit {
            Fit::Quadratic(f) => f,
            Fit::Exact(c) => &c.quadratic,
        };
        w(
            &mut stdout,
            format_args!(
                "    quadratic: a0 = {:.6e} ± {:.1e}, a1 = {:.6e} ± {:.1e}, a2 = {:.6e} ± {:.1e}\n    quadratic: eta = {} ± {} %, dark estimate = {:.3e}\n",
                quad.a0,
                quad.sigma(0),
                quad.a1,
                quad.sigma(1),
                quad.a2,
                quad.sigma(2),
                pct(quad.eta_hat),
                pct(quad.eta_sigma),
                quad.dark_estimate()
            ),
        )?;
        if !quad.eta_in_range() {
            w(&mut stdout, format_args!("    warning: quadratic efficiency outside [0, 1]\n"))?;
        }
        if let Fit::Exact(c) = fit {
            describe_exact(&mut stdout, &c.exact)?;
            w(
                &mut stdout,
                format_args!(
                    "    quadratic bias: {:+.2} % ({:+.1} sigma){}\n",
                    100.0 * c.quadratic_bias(),
                    c.bias_significance(),
                    if c.quadratic_biased() {
                        ": small-mean expansion is biased at this brightness"
                    } else {
                        ""
                    }
                ),
            )?;
        }
    }
    if let Some(path) = out_path(cfg, "fit") {
        write_table(
            &mut *sink(Some(&path))?,
            &["scan", "source", "eta", "eta_sigma", "a0", "a1", "a2", "chi2_per_dof"],
            &summary,
        )?;
    }
    w(&mut stdout, format_args!("uncertainties are 1 sigma\n"))
}

pub fn sweep(cfg: &RunConfig, scan_paths: &[PathBuf]) -> Result<(), CliError> {
    let (labels, scans): (Vec<String>, Vec<ScanData>) = if scan_paths.is_empty() {
        if cfg.sweep_means.is_empty() {
            return Err(CliError::Usage(
                "sweep needs scan CSVs or a `sweep_means` list in the config".into(),
            ));
        }
        let mut labels = Vec::new();
        let mut scans = Vec::new();
        for (i, &mean) in cfg.sweep_means.iter().enumerate() {
            let mut c = cfg.clone();
            c.mean = mean;
            labels.push(format!("mean={mean}"));
            scans.push(synthesize(&c, cfg.seed.wrapping_add(i as u64))?);
        }
        (labels, scans)
    } else {
        let mut out = (Vec::new(), Vec::new());
        for p in scan_paths {
            out.0.push(label(p));
            out.1.push(read_scan(p)?);
        }
        out
    };
    let report = power_sweep_report(&scans)?;
    let mut stdout = std::io::stdout().lock();
    w(&mut stdout, format_args!("{:<24} {:>18}\n", "scan", "eta (%)"))?;
    let mut rows = Vec::new();
    for (name, fit) in labels.iter().zip(&report.fits) {
        match fit {
            Ok(f) => {
                w(
                    &mut stdout,
                    format_args!("{:<24} {:>18}\n", name, format!("{} ± {}", pct(f.eta_hat), pct(f.eta_sigma))),
                )?;
                rows.push(vec![
                    name.clone(),
                    fmt_f64(f.eta_hat),
                    fmt_f64(f.eta_sigma),
                    fmt_f64(f.chi2_per_dof),
                ]);
            }
            Err(e) => w(&mut stdout, format_args!("{name:<24} fit failed: {e}\n"))?,
        }
    }
    w(
        &mut stdout,
        format_args!(
            "\nmean eta {} %, standard deviation {} %, mean sigma {} %\n{}\n",
            pct(report.mean_eta),
            pct(report.std_eta),
            pct(report.mean_sigma),
            if report.consistent() {
                "consistent: scatter within twice the per-scan uncertainty"
            } else {
                "INCONSISTENT: scatter exceeds twice the per-scan uncertainty"
            }
        ),
    )?;
    if let Some(path) = out_path(cfg, "sweep") {
        write_table(&mut *sink(Some(&path))?, &["scan", "eta", "eta_sigma", "chi2_per_dof"], &rows)?;
    }
    Ok(())
}

pub fn klyshko(cfg: &RunConfig, counts: Option<[u64; 3]>) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    let [s1, s2, c] = match counts {
        Some(c) => c,
        None => {
            let eta2 = cfg.eta2.unwrap_or(cfg.eta);
            let per_mode = cfg.mean / 2.0;
            let pc = simulate_pair_coincidences(cfg.eta, eta2, per_mode, cfg.shots, cfg.seed)?;
            let (e1, e2, ec) = expected_pair_rates(cfg.eta, eta2, per_mode);
            w(
                &mut stdout,
                format_args!(
                    "simulated {} shots, mean {} per arm: singles {} / {}, coincidences {} (expected {:.1} / {:.1} / {:.1})\n",
                    pc.shots,
                    per_mode,
                    pc.singles1,
                    pc.singles2,
                    pc.coincidences,
                    e1 * pc.shots as f64,
                    e2 * pc.shots as f64,
                    ec * pc.shots as f64
                ),
            )?;
            [pc.singles1, pc.singles2, pc.coincidences]
        }
    };
    let k = klyshko_estimate(s1, s2, c)?;
    w(
        &mut stdout,
        format_args!(
            "eta1 = {} ± {} %\neta2 = {} ± {} %\n",
            pct(k.eta1),
            pct(k.sigma1),
            pct(k.eta2),
            pct(k.sigma2)
        ),
    )?;
    if let Some(path) = out_path(cfg, "klyshko") {
        write_table(
            &mut *sink(Some(&path))?,
            &["detector", "eta", "eta_sigma"],
            &[
                vec!["1".into(), fmt_f64(k.eta1), fmt_f64(k.sigma1)],
                vec!["2".into(), fmt_f64(k.eta2), fmt_f64(k.sigma2)],
            ],
        )?;
    }
    Ok(())
}

/// Reads `S1,S2,C` from the command line.
pub fn parse_counts(text: &str) -> Result<[u64; 3], CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--counts expects S1,S2,C as integers, got `{text}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| bad())?;
    }
    Ok(out)
}
