//! Flat `key = value` run configuration shared by every command.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::em::EmOptions;
use crate::error::{Error, Result};
use crate::forecast::{DEFAULT_BOOTSTRAP_REPS, DEFAULT_MEAN_BLOCK};
use crate::model::ModelSpec;
use crate::penalties::{PenaltyConfig, PenaltyFamily, DEFAULT_SCAD_A};
use crate::simulate::{Experiment, DEFAULT_BURN_IN};

/// Version tag written next to every output.
pub const SCHEMA_VERSION: &str = "msvar-output/1";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub n_states: usize,
    pub p: usize,
    pub q: usize,
    pub intercept: bool,
    pub exogenous: Vec<String>,
    // penalty
    pub estimator: PenaltyFamily,
    pub lambda_coef: Option<f64>,
    pub lambda_prec: Option<f64>,
    pub scad_a: f64,
    pub grid: Vec<f64>,
    pub grid_points: usize,
    pub grid_ratio: f64,
    // EM
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    // simulation and replication
    pub experiment: Experiment,
    pub d: usize,
    pub n_obs: usize,
    pub sample_sizes: Vec<usize>,
    pub burn_in: usize,
    pub replications: usize,
    pub estimators: Vec<PenaltyFamily>,
    // data and forecasting
    pub data: Option<PathBuf>,
    pub detrend: bool,
    pub standardize: bool,
    pub target: usize,
    pub forecast_start: Option<usize>,
    pub refit_every: Option<usize>,
    pub bootstrap_reps: usize,
    pub mean_block: f64,
    pub one_sided: bool,
    pub small_sample: bool,
    pub regime_threshold: f64,
    // common
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let em = EmOptions::default();
        Self {
            n_states: 2,
            p: 1,
            q: 0,
            intercept: false,
            exogenous: Vec::new(),
            estimator: PenaltyFamily::Lasso,
            lambda_coef: None,
            lambda_prec: None,
            scad_a: DEFAULT_SCAD_A,
            grid: Vec::new(),
            grid_points: 10,
            grid_ratio: 1.0,
            restarts: em.n_restarts,
            max_iter: em.max_iter,
            rel_tol: em.rel_tol,
            experiment: Experiment::One,
            d: 10,
            n_obs: 300,
            sample_sizes: vec![100, 200, 300],
            burn_in: DEFAULT_BURN_IN,
            replications: 100,
            estimators: vec![PenaltyFamily::Lasso, PenaltyFamily::ScadLla],
            data: None,
            detrend: false,
            standardize: false,
            target: 0,
            forecast_start: None,
            refit_every: Some(1),
            bootstrap_reps: DEFAULT_BOOTSTRAP_REPS,
            mean_block: DEFAULT_MEAN_BLOCK,
            one_sided: true,
            small_sample: false,
            regime_threshold: 0.5,
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse \"{v}\"")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got \"{v}\""))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_family(key: &str, v: &str) -> Result<PenaltyFamily> {
    match v.to_ascii_lowercase().as_str() {
        "lasso" => Ok(PenaltyFamily::Lasso),
        "scad" => Ok(PenaltyFamily::ScadLla),
        _ => Err(Error::Config(format!("{key}: expected lasso or scad, got \"{v}\""))),
    }
}

fn family_name(f: PenaltyFamily) -> &'static str {
    match f {
        PenaltyFamily::Lasso => "lasso",
        PenaltyFamily::ScadLla => "scad",
    }
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Parses a configuration file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Sets one key; used for file lines and command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_states" => self.n_states = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "q" => self.q = parse(key, v)?,
            "intercept" => self.intercept = parse_bool(key, v)?,
            "exogenous" => self.exogenous = parse_list(key, v)?,
            "estimator" => self.estimator = parse_family(key, v)?,
            "lambda_coef" => self.lambda_coef = optional(key, v)?,
            "lambda_prec" => self.lambda_prec = optional(key, v)?,
            "scad_a" => self.scad_a = parse(key, v)?,
            "grid" => self.grid = parse_list(key, v)?,
            "grid_points" => self.grid_points = parse(key, v)?,
            "grid_ratio" => self.grid_ratio = parse(key, v)?,
            "restarts" => self.restarts = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "rel_tol" => self.rel_tol = parse(key, v)?,
            "experiment" => self.experiment = v.parse()?,
            "d" => self.d = parse(key, v)?,
            "n_obs" => self.n_obs = parse(key, v)?,
            "sample_sizes" => self.sample_sizes = parse_list(key, v)?,
            "burn_in" => self.burn_in = parse(key, v)?,
            "replications" => self.replications = parse(key, v)?,
            "estimators" => {
                self.estimators = v.split(',').map(|s| parse_family(key, s.trim())).collect::<Result<_>>()?
            }
            "data" => self.data = optional::<String>(key, v)?.map(PathBuf::from),
            "detrend" => self.detrend = parse_bool(key, v)?,
            "standardize" => self.standardize = parse_bool(key, v)?,
            "target" => self.target = parse(key, v)?,
            "forecast_start" => self.forecast_start = optional(key, v)?,
            "refit_every" => self.refit_every = optional(key, v)?,
            "bootstrap_reps" => self.bootstrap_reps = parse(key, v)?,
            "mean_block" => self.mean_block = parse(key, v)?,
            "one_sided" => self.one_sided = parse_bool(key, v)?,
            "small_sample" => self.small_sample = parse_bool(key, v)?,
            "regime_threshold" => self.regime_threshold = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "jobs" => self.jobs = optional(key, v)?,
            _ => return Err(Error::Config(format!("unknown key \"{key}\""))),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_states", self.n_states.to_string()),
            ("p", self.p.to_string()),
            ("q", self.q.to_string()),
            ("intercept", self.intercept.to_string()),
            ("exogenous", self.exogenous.join(",")),
            ("estimator", family_name(self.estimator).to_string()),
            ("lambda_coef", show(&self.lambda_coef)),
            ("lambda_prec", show(&self.lambda_prec)),
            ("scad_a", self.scad_a.to_string()),
            ("grid", join(&self.grid)),
            ("grid_points", self.grid_points.to_string()),
            ("grid_ratio", self.grid_ratio.to_string()),
            ("restarts", self.restarts.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("rel_tol", self.rel_tol.to_string()),
            ("experiment", self.experiment.id().to_string()),
            ("d", self.d.to_string()),
            ("n_obs", self.n_obs.to_string()),
            ("sample_sizes", join(&self.sample_sizes)),
            ("burn_in", self.burn_in.to_string()),
            ("replications", self.replications.to_string()),
            ("estimators", self.estimators.iter().map(|f| family_name(*f)).collect::<Vec<_>>().join(",")),
            ("data", show(&self.data.as_ref().map(|p| p.display().to_string()))),
            ("detrend", self.detrend.to_string()),
            ("standardize", self.standardize.to_string()),
            ("target", self.target.to_string()),
            ("forecast_start", show(&self.forecast_start)),
            ("refit_every", show(&self.refit_every)),
            ("bootstrap_reps", self.bootstrap_reps.to_string()),
            ("mean_block", self.mean_block.to_string()),
            ("one_sided", self.one_sided.to_string()),
            ("small_sample", self.small_sample.to_string()),
            ("regime_threshold", self.regime_threshold.to_string()),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("jobs", show(&self.jobs)),
        ]
    }

    /// The resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let mut s = format!("# {SCHEMA_VERSION}\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Model structure for data with `d` endogenous and `d_exo` exogenous series.
    pub fn spec(&self, d: usize, d_exo: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::new(self.n_states, self.p, d)
            .with_exogenous(d_exo, if d_exo == 0 { 0 } else { self.q.max(1) })
            .with_intercept(self.intercept);
        spec.validate()?;
        Ok(spec)
    }

    pub fn em_options(&self) -> EmOptions {
        EmOptions {
            n_restarts: self.restarts,
            max_iter: self.max_iter,
            rel_tol: self.rel_tol,
            seed: self.seed,
            ..EmOptions::default()
        }
    }

    /// Lasso penalty from explicit levels, if both are set (the precision level defaults to the coefficient level).
    pub fn fixed_lasso(&self) -> Option<PenaltyConfig> {
        self.lambda_coef.map(|lc| PenaltyConfig::lasso(lc, self.lambda_prec.unwrap_or(lc)))
    }

    /// Checks value ranges and that every input path exists and the output directory is usable.
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.p == 0 {
            return Err(Error::Config("n_states and p must be positive".into()));
        }
        if self.restarts == 0 || self.max_iter == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::Config("restarts, max_iter and rel_tol must be positive".into()));
        }
        if self.grid.iter().any(|v| !(*v > 0.0)) || self.grid_points == 0 || !(self.grid_ratio > 0.0) {
            return Err(Error::Config("grid values, grid_points and grid_ratio must be positive".into()));
        }
        if self.lambda_coef.is_some_and(|v| !(v >= 0.0)) || self.lambda_prec.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::Config("penalty levels must be nonnegative".into()));
        }
        if !(self.scad_a > 2.0) {
            return Err(Error::Config("scad_a must exceed 2".into()));
        }
        if self.jobs == Some(0) || self.refit_every == Some(0) {
            return Err(Error::Config("jobs and refit_every must be positive".into()));
        }
        if !(self.mean_block >= 1.0) || self.bootstrap_reps < 199 {
            return Err(Error::Config("mean_block must be >= 1 and bootstrap_reps >= 199".into()));
        }
        if !(0.0..1.0).contains(&self.regime_threshold) {
            return Err(Error::Config("regime_threshold must lie in [0, 1)".into()));
        }
        if let Some(path) = &self.data {
            if !path.is_file() {
                return Err(Error::Config(format!("data file {} does not exist", path.display())));
            }
        }
        if self.out_dir.exists() && !self.out_dir.is_dir() {
            return Err(Error::Config(format!("{} exists and is not a directory", self.out_dir.display())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("grid", "0.5, 0.1,0.01").unwrap();
        cfg.set("estimators", "scad").unwrap();
        cfg.set("data", "in.csv").unwrap();
        cfg.set("refit_every", "none").unwrap();
        cfg.set("experiment", "3").unwrap();
        cfg.set("exogenous", "a,b").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.grid, vec![0.5, 0.1, 0.01]);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let err = RunConfig::from_text("p = 1\nlamda = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("lamda"), "{err}");
        assert!(RunConfig::from_text("p 1").is_err());
        assert!(RunConfig::from_text("p = one").is_err());
        assert!(RunConfig::from_text("estimator = ridge").is_err());
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# note\n\n  seed = 7  \n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn validation_checks_paths() {
        let mut cfg = RunConfig::default();
        cfg.data = Some(PathBuf::from("/definitely/not/here.csv"));
        assert!(cfg.validate().is_err());
        cfg.data = None;
        assert!(cfg.validate().is_ok());
        cfg.scad_a = 1.5;
        assert!(cfg.validate().is_err());
    }
}
