//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Every key must be known; a typo
//! is an error rather than a silently ignored setting.

use std::collections::BTreeMap;
use std::path::Path;

use pnrcal::sources::SourceKind;
use pnrcal::{DetectorParams, Source};

use crate::error::CliError;

const KEYS: &[&str] = &[
    "elements",
    "eta",
    "dark",
    "dark_hz",
    "gate_ns",
    "xtalk",
    "source",
    "mean",
    "photons",
    "n_max",
    "t_values",
    "t_min",
    "t_max",
    "t_count",
    "trials",
    "shots",
    "seed",
    "mode",
    "eta2",
    "sweep_means",
    "out",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    /// Clicks drawn from the analytic click distribution.
    Binomial,
    /// Shot-by-shot grid simulation.
    MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub elements: usize,
    pub eta: f64,
    pub dark: Option<f64>,
    pub dark_hz: Option<f64>,
    pub gate_ns: Option<f64>,
    pub xtalk: f64,
    pub source: SourceKind,
    pub mean: f64,
    pub photons: usize,
    pub n_max: usize,
    pub t_values: Option<Vec<f64>>,
    pub t_min: f64,
    pub t_max: f64,
    pub t_count: usize,
    pub trials: u64,
    pub shots: u64,
    pub seed: u64,
    pub mode: ScanMode,
    pub eta2: Option<f64>,
    pub sweep_means: Vec<f64>,
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            elements: 1,
            eta: 1.0,
            dark: None,
            dark_hz: None,
            gate_ns: None,
            xtalk: 0.0,
            source: SourceKind::Tmsv,
            mean: 1.0,
            photons: 1,
            n_max: 20,
            t_values: None,
            t_min: 0.025,
            t_max: 1.0,
            t_count: 40,
            trials: 1_000_000,
            shots: 1_000_000,
            seed: 0,
            mode: ScanMode::Binomial,
            eta2: None,
            sweep_means: Vec::new(),
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut config = Self::default();
        for (key, value) in parse_text(&text)? {
            config.set(&key, &value)?;
        }
        Ok(config)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key {
            "elements" => self.elements = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "dark" => self.dark = Some(parse_num(key, value)?),
            "dark_hz" => self.dark_hz = Some(parse_num(key, value)?),
            "gate_ns" => self.gate_ns = Some(parse_num(key, value)?),
            "xtalk" => self.xtalk = parse_num(key, value)?,
            "source" => {
                self.source = value
                    .parse()
                    .map_err(|e: pnrcal::Error| CliError::Config(e.to_string()))?
            }
            "mean" => self.mean = parse_num(key, value)?,
            "photons" => self.photons = parse_num(key, value)?,
            "n_max" => self.n_max = parse_num(key, value)?,
            "t_values" => self.t_values = Some(parse_list(key, value)?),
            "t_min" => self.t_min = parse_num(key, value)?,
            "t_max" => self.t_max = parse_num(key, value)?,
            "t_count" => self.t_count = parse_num(key, value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "shots" => self.shots = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "mode" => {
                self.mode = match value.to_ascii_lowercase().as_str() {
                    "binomial" | "analytic" => ScanMode::Binomial,
                    "montecarlo" | "mc" => ScanMode::MonteCarlo,
                    other => {
                        return Err(CliError::Config(format!(
                            "`mode`: expected binomial or montecarlo, got `{other}`"
                        )))
                    }
                }
            }
            "eta2" => self.eta2 = Some(parse_num(key, value)?),
            "sweep_means" => self.sweep_means = parse_list(key, value)?,
            "out" => self.out = Some(value.to_string()),
            _ => {
                return Err(CliError::Config(format!(
                    "unknown key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
        self.set(key.trim(), value)
    }

    /// Per-gate dark-count probability, converting a rate when one is given.
    pub fn dark_probability(&self) -> Result<f64, CliError> {
        match (self.dark, self.dark_hz) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "give either `dark` or `dark_hz`, not both".into(),
            )),
            (Some(d), None) => Ok(d),
            (None, Some(rate)) => {
                let gate = self.gate_ns.ok_or_else(|| {
                    CliError::Config("`dark_hz` needs a gate duration (`--gate-ns`)".into())
                })?;
                if !(rate >= 0.0 && gate >= 0.0) {
                    return Err(CliError::Config(
                        "dark rate and gate duration must be non-negative".into(),
                    ));
                }
                Ok(-(-rate * gate * 1e-9).exp_m1())
            }
            (None, None) => Ok(0.0),
        }
    }

    pub fn detector(&self) -> Result<DetectorParams, CliError> {
        Ok(DetectorParams::new(
            self.elements,
            self.eta,
            self.dark_probability()?,
            self.xtalk,
        )?)
    }

    pub fn light(&self) -> Result<Source, CliError> {
        if !(self.mean.is_finite() && self.mean >= 0.0) {
            return Err(CliError::Config(format!("`mean` must be >= 0, got {}", self.mean)));
        }
        Ok(match self.source {
            SourceKind::Fock => Source::Fock(self.photons),
            SourceKind::Thermal => Source::Thermal(self.mean),
            SourceKind::Smsv => Source::Smsv(self.mean),
            SourceKind::Tmsv => Source::Tmsv(self.mean),
        })
    }

    /// Attenuator settings: the explicit list, or an even grid from
    /// `t_min` to `t_max`.
    pub fn t_grid(&self) -> Result<Vec<f64>, CliError> {
        if let Some(ts) = &self.t_values {
            return Ok(ts.clone());
        }
        if self.t_count < 2 {
            return Err(CliError::Config("`t_count` must be at least 2".into()));
        }
        let step = (self.t_max - self.t_min) / (self.t_count - 1) as f64;
        Ok((0..self.t_count)
            .map(|i| {
                if i + 1 == self.t_count {
                    self.t_max
                } else {
                    self.t_min + step * i as f64
                }
            })
            .collect())
    }
}

/// Splits config text into `(key, value)` pairs with line-numbered errors.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1))
        })?;
        let key = key.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), i + 1) {
            return Err(CliError::Config(format!(
                "line {}: `{key}` already set on line {prev}",
                i + 1
            )));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}
