//! Plain-text `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected, as are keys repeated within one file. Overrides given on the
//! command line replace file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qlimit::estimators::MlConfig;
use qlimit::models::{Family, ParamVector};
use qlimit::probe::Convention;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "family",
    "side",
    "seed",
    "n_bar",
    "n_bar_range",
    "convention",
    "frames",
    "count",
    "estimator",
    "multistart",
    "max_iterations",
    "gradient_tolerance",
    "mc_samples",
    "rcond",
    "theta",
    "truth",
    "frames_file",
    "recon",
    "bins",
    "pixel",
    "out",
    "scenario",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorChoice {
    PlugIn,
    Mle,
    External,
}

impl FromStr for EstimatorChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "plugin" => Ok(Self::PlugIn),
            "mle" => Ok(Self::Mle),
            "external" => Ok(Self::External),
            _ => Err(CliError::Usage(format!("unknown estimator {s:?} (plugin, mle, external)"))),
        }
    }
}

impl EstimatorChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PlugIn => "plugin",
            Self::Mle => "mle",
            Self::External => "external",
        }
    }
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub family: Family,
    pub side: usize,
    pub seed: u64,
    pub n_bar: Vec<f64>,
    pub n_bar_range: Option<(f64, f64)>,
    pub convention: Convention,
    pub frames: usize,
    pub count: usize,
    pub estimator: EstimatorChoice,
    pub multistart: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub mc_samples: usize,
    pub rcond: f64,
    pub theta: Option<Vec<f64>>,
    pub truth: Option<PathBuf>,
    pub frames_file: Option<PathBuf>,
    pub recon: Option<PathBuf>,
    pub bins: usize,
    pub pixel: Option<(usize, usize)>,
    pub out: PathBuf,
    pub scenario: Option<String>,
}

/// Reads `key=value` lines.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(CliError::Usage(format!("{origin}:{}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: key {k:?} given twice", i + 1)));
        }
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| CliError::Usage(format!("{key}={v}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',').map(|t| parse::<f64>(key, t.trim())).collect()
}

fn parse_range(v: &str) -> Result<(f64, f64), CliError> {
    let parts: Vec<&str> = v.split([':', '–']).collect();
    let parts = if parts.len() == 2 { parts } else { v.splitn(2, '-').collect() };
    if parts.len() != 2 {
        return Err(CliError::Usage(format!("n_bar_range={v}: expected lo:hi")));
    }
    let lo = parse::<f64>("n_bar_range", parts[0].trim())?;
    let hi = parse::<f64>("n_bar_range", parts[1].trim())?;
    if !(lo > 0.0 && hi >= lo) {
        return Err(CliError::Usage(format!("n_bar_range={v}: need 0 < lo <= hi")));
    }
    Ok((lo, hi))
}

impl RunConfig {
    /// Resolves defaults. `seed` is the fallback used when no seed was given.
    pub fn from_pairs(pairs: &BTreeMap<String, String>, fallback_seed: u64) -> Result<Self, CliError> {
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let family = match get("family") {
            Some(v) => v.parse::<Family>().map_err(|e| CliError::Usage(e.to_string()))?,
            None => Family::SingleLinear,
        };
        let side = get("side").map(|v| parse::<usize>("side", v)).transpose()?.unwrap_or(64);
        if side < 2 || side % 2 != 0 {
            return Err(CliError::Usage(format!("side={side}: must be even and at least 2")));
        }
        let n_bar = get("n_bar").map(|v| parse_list("n_bar", v)).transpose()?.unwrap_or_else(|| vec![1000.0]);
        if n_bar.is_empty() || n_bar.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(CliError::Usage("n_bar values must be positive".into()));
        }
        let frames = get("frames").map(|v| parse::<usize>("frames", v)).transpose()?.unwrap_or(1000);
        if frames == 0 {
            return Err(CliError::Usage("frames must be at least 1".into()));
        }
        let count = get("count").map(|v| parse::<usize>("count", v)).transpose()?.unwrap_or(1);
        if count == 0 {
            return Err(CliError::Usage("count must be at least 1".into()));
        }
        let theta = get("theta").map(|v| parse_list("theta", v)).transpose()?;
        if let Some(t) = &theta {
            ParamVector::new(family, t.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let pixel = get("pixel")
            .map(|v| {
                let p: Vec<usize> = v.split(',').map(|t| parse::<usize>("pixel", t.trim())).collect::<Result<_, _>>()?;
                match p[..] {
                    [r, c] => Ok((r, c)),
                    _ => Err(CliError::Usage(format!("pixel={v}: expected row,col"))),
                }
            })
            .transpose()?;
        let ml = MlConfig::default();
        Ok(Self {
            family,
            side,
            seed: get("seed").map(|v| parse::<u64>("seed", v)).transpose()?.unwrap_or(fallback_seed),
            n_bar,
            n_bar_range: get("n_bar_range").map(parse_range).transpose()?,
            convention: get("convention")
                .map(|v| v.parse::<Convention>().map_err(|e| CliError::Usage(e.to_string())))
                .transpose()?
                .unwrap_or_default(),
            frames,
            count,
            estimator: get("estimator").map(str::parse).transpose()?.unwrap_or(EstimatorChoice::Mle),
            multistart: get("multistart").map(|v| parse("multistart", v)).transpose()?.unwrap_or(ml.multistart),
            max_iterations: get("max_iterations")
                .map(|v| parse("max_iterations", v))
                .transpose()?
                .unwrap_or(ml.max_iterations),
            gradient_tolerance: get("gradient_tolerance")
                .map(|v| parse("gradient_tolerance", v))
                .transpose()?
                .unwrap_or(ml.gradient_tolerance),
            mc_samples: get("mc_samples").map(|v| parse("mc_samples", v)).transpose()?.unwrap_or(100_000),
            rcond: get("rcond").map(|v| parse("rcond", v)).transpose()?.unwrap_or(qlimit::bounds::DEFAULT_RCOND),
            theta,
            truth: get("truth").map(PathBuf::from),
            frames_file: get("frames_file").map(PathBuf::from),
            recon: get("recon").map(PathBuf::from),
            bins: get("bins").map(|v| parse("bins", v)).transpose()?.unwrap_or(30),
            pixel,
            out: get("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")),
            scenario: get("scenario").map(str::to_string),
        })
    }

    /// The single `n_bar` of a non-sweep command.
    pub fn single_n_bar(&self) -> Result<f64, CliError> {
        match self.n_bar[..] {
            [n] => Ok(n),
            _ => Err(CliError::Usage("this command takes one n_bar; use reproduce for sweeps".into())),
        }
    }

    pub fn ml_config(&self, seed: u64) -> MlConfig {
        MlConfig {
            multistart: self.multistart,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            seed,
            ..MlConfig::default()
        }
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn render(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("family={}", self.family),
            format!("side={}", self.side),
            format!("seed={}", self.seed),
            format!("n_bar={}", list(&self.n_bar)),
            format!("convention={}", self.convention),
            format!("frames={}", self.frames),
            format!("count={}", self.count),
            format!("estimator={}", self.estimator.as_str()),
            format!("multistart={}", self.multistart),
            format!("max_iterations={}", self.max_iterations),
            format!("gradient_tolerance={:e}", self.gradient_tolerance),
            format!("mc_samples={}", self.mc_samples),
            format!("rcond={:e}", self.rcond),
            format!("bins={}", self.bins),
            format!("out={}", self.out.display()),
        ];
        if let Some((lo, hi)) = self.n_bar_range {
            lines.push(format!("n_bar_range={lo}:{hi}"));
        }
        if let Some(t) = &self.theta {
            lines.push(format!("theta={}", list(t)));
        }
        for (k, p) in [("truth", &self.truth), ("frames_file", &self.frames_file), ("recon", &self.recon)] {
            if let Some(p) = p {
                lines.push(format!("{k}={}", p.display()));
            }
        }
        if let Some((r, c)) = self.pixel {
            lines.push(format!("pixel={r},{c}"));
        }
        if let Some(s) = &self.scenario {
            lines.push(format!("scenario={s}"));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }
}

pub fn read_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_pairs(&text, &path.display().to_string())
}
