//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Omitted keys take their
//! defaults; `mu` and `zeta` fall back to the published preset for the
//! operator and noise level, then to 1.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::presets::{preset_for, Dataset};
use super::IoError;
use crate::guidance::{GuidanceConfig, ScorePath};
use crate::linops::OperatorDescriptor;
use crate::samplers::SamplerKind;
use crate::schedule::ScheduleParams;

/// A scalar or a tensor file holding per-element values.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    Scalar(f64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSelector {
    Analytic { mean: PriorSource, variance: PriorSource },
    External { command: Vec<String> },
}

/// Where a resolved hyperparameter came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Config,
    Preset,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub schedule: ScheduleParams,
    /// Sampling steps; `None` walks every timestep.
    pub steps: Option<usize>,
    pub sampler: SamplerKind,
    pub operator: Option<OperatorDescriptor>,
    pub mu: Option<f64>,
    pub zeta: Option<f64>,
    /// Overrides the measurement's recorded noise level.
    pub sigma_y: Option<f64>,
    pub dataset: String,
    pub seed: u64,
    pub noise_seed: Option<u64>,
    pub snapshot_stride: Option<usize>,
    pub mean_correction: bool,
    pub jacobian_term: bool,
    pub dps_rho: f64,
    pub score_path: ScorePath,
    pub denoiser: DenoiserSelector,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            schedule: ScheduleParams::default(),
            steps: None,
            sampler: SamplerKind::DdNrlg,
            operator: None,
            mu: None,
            zeta: None,
            sigma_y: None,
            dataset: Dataset::default().to_string(),
            seed: 0,
            noise_seed: None,
            snapshot_stride: None,
            mean_correction: g.mean_correction,
            jacobian_term: g.jacobian_term,
            dps_rho: 1.0,
            score_path: ScorePath::Auto,
            denoiser: DenoiserSelector::Analytic {
                mean: PriorSource::Scalar(0.5),
                variance: PriorSource::Scalar(0.05),
            },
        }
    }
}

/// Guidance settings after preset resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResolvedGuidance {
    pub config: GuidanceConfig,
    pub mu_from: Setting,
    pub zeta_from: Setting,
}

impl RunConfig {
    pub fn dataset(&self) -> Dataset {
        self.dataset.parse().expect("validated at parse time")
    }

    pub fn guidance(&self, operator: &OperatorDescriptor, sigma_y: f64) -> ResolvedGuidance {
        let preset = preset_for(operator, sigma_y, self.dataset());
        let default = GuidanceConfig::default();
        let pick = |explicit: Option<f64>, from_preset: Option<f64>, fallback: f64| match (explicit, from_preset) {
            (Some(v), _) => (v, Setting::Config),
            (None, Some(v)) => (v, Setting::Preset),
            (None, None) => (fallback, Setting::Default),
        };
        let (mu, mu_from) = pick(self.mu, preset.map(|p| p.mu), default.mu);
        let (zeta, zeta_from) = pick(self.zeta, preset.map(|p| p.zeta), default.zeta);
        ResolvedGuidance {
            config: GuidanceConfig {
                mu,
                zeta,
                sigma_y,
                mean_correction: self.mean_correction,
                jacobian_term: self.jacobian_term,
            },
            mu_from,
            zeta_from,
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    match base {
        Some(b) if Path::new(p).is_relative() => b.join(p),
        _ => PathBuf::from(p),
    }
}

fn existing(base: Option<&Path>, p: &str) -> Result<PathBuf, String> {
    let path = resolve(base, p);
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!("file {} does not exist", path.display()))
    }
}

fn prior_source(base: Option<&Path>, v: &str) -> Result<PriorSource, String> {
    match v.parse::<f64>() {
        Ok(x) => Ok(PriorSource::Scalar(x)),
        Err(_) => existing(base, v).map(PriorSource::File),
    }
}

fn in_range(key: &str, v: f64, lo: f64, hi: f64) -> Result<f64, String> {
    if v >= lo && v <= hi {
        Ok(v)
    } else {
        Err(format!("{key}={v} is outside [{lo}, {hi}]"))
    }
}

/// Parses configuration text. Relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RunConfig, IoError> {
    let mut cfg = RunConfig::default();
    let mut kind: Option<(String, usize)> = None;
    let mut prior_mean = PriorSource::Scalar(0.5);
    let mut prior_var = PriorSource::Scalar(0.05);
    let mut command: Option<(Vec<String>, usize)> = None;
    let mut seen = std::collections::HashSet::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| IoError::Config { line, message };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected key=value, got {content:?}")))?;
        let key = if key == "num_steps" { "T" } else { key };
        if !seen.insert(key.to_string()) {
            return Err(err(format!("duplicate key {key:?}")));
        }
        let r: Result<(), String> = (|| {
            match key {
                "T" => cfg.schedule.num_steps = num(value)?,
                "beta_start" => cfg.schedule.beta_start = num(value)?,
                "beta_end" => cfg.schedule.beta_end = num(value)?,
                "steps" => cfg.steps = Some(num(value)?),
                "sampler" => cfg.sampler = value.parse()?,
                "operator" => {
                    cfg.operator = Some(OperatorDescriptor::parse(value, base_dir).map_err(|e| e.to_string())?)
                }
                "mu" => cfg.mu = Some(in_range(key, num(value)?, 0.0, f64::MAX)?),
                "zeta" => cfg.zeta = Some(in_range(key, num(value)?, 0.0, 1.0)?),
                "sigma_y" => cfg.sigma_y = Some(in_range(key, num(value)?, 0.0, f64::MAX)?),
                "dataset" => cfg.dataset = value.parse::<Dataset>()?.to_string(),
                "seed" => cfg.seed = num(value)?,
                "noise_seed" => cfg.noise_seed = Some(num(value)?),
                "snapshot_stride" => {
                    let s: usize = num(value)?;
                    if s == 0 {
                        return Err("snapshot_stride must be at least 1".into());
                    }
                    cfg.snapshot_stride = Some(s);
                }
                "mean_correction" => cfg.mean_correction = boolean(value)?,
                "jacobian_term" => cfg.jacobian_term = boolean(value)?,
                "dps_rho" => cfg.dps_rho = in_range(key, num(value)?, 0.0, f64::MAX)?,
                "score_path" => {
                    cfg.score_path = match value {
                        "auto" => ScorePath::Auto,
                        "kernel" => ScorePath::Kernel,
                        "svd" => ScorePath::Svd,
                        _ => return Err(format!("unknown score_path {value:?} (auto|kernel|svd)")),
                    }
                }
                "denoiser" => match value {
                    "analytic" | "external" => kind = Some((value.to_string(), line)),
                    _ => return Err(format!("unknown denoiser {value:?} (analytic|external)")),
                },
                "prior_mean" => prior_mean = prior_source(base_dir, value)?,
                "prior_var" => {
                    prior_var = prior_source(base_dir, value)?;
                    if let PriorSource::Scalar(v) = prior_var {
                        if !(v > 0.0 && v.is_finite()) {
                            return Err(format!("prior_var must be positive, got {v}"));
                        }
                    }
                }
                "external_command" => {
                    let argv: Vec<String> = value.split_whitespace().map(str::to_string).collect();
                    let Some(prog) = argv.first() else {
                        return Err("external_command is empty".into());
                    };
                    let mut argv = argv.clone();
                    if prog.contains('/') {
                        argv[0] = existing(base_dir, prog)?.to_string_lossy().into_owned();
                    }
                    command = Some((argv, line));
                }
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        })();
        r.map_err(err)?;
    }

    cfg.denoiser = match (kind.as_ref().map(|(k, _)| k.as_str()), command) {
        (Some("external"), Some((command, _))) => DenoiserSelector::External { command },
        (Some("external"), None) => {
            return Err(IoError::Invalid("denoiser=external needs external_command".into()));
        }
        (_, Some((_, line))) if kind.is_none() || kind.as_ref().is_some_and(|(k, _)| k == "analytic") => {
            return Err(IoError::Config {
                line,
                message: "external_command given but denoiser is not external".into(),
            });
        }
        _ => DenoiserSelector::Analytic {
            mean: prior_mean,
            variance: prior_var,
        },
    };
    cfg.schedule.build().map_err(|e| IoError::Invalid(e.to_string()))?;
    if let Some(s) = cfg.steps {
        if s == 0 || s > cfg.schedule.num_steps {
            return Err(IoError::Invalid(format!("steps={s} must be in 1..={}", cfg.schedule.num_steps)));
        }
    }
    if cfg.jacobian_term && !cfg.mean_correction {
        return Err(IoError::Invalid("jacobian_term=true needs mean_correction=true".into()));
    }
    Ok(cfg)
}

/// Reads and parses a config file; paths inside resolve against its directory.
pub fn read_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let c = parse_config("", None).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.schedule.num_steps, 100);
        assert_eq!(c.schedule.beta_start, 1e-4);
        assert_eq!(c.schedule.beta_end, 0.02);
    }

    #[test]
    fn values_and_comments() {
        let c = parse_config("# SR x4\nmu=1.6\nzeta = 0.75  # trailing\n\nsampler=id_nrlg\n", None).unwrap();
        assert_eq!((c.mu, c.zeta), (Some(1.6), Some(0.75)));
        assert_eq!(c.sampler, SamplerKind::IdNrlg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("mu=1\nzeta=2\n", None).unwrap_err();
        assert!(matches!(e, IoError::Config { line: 2, .. }), "{e}");
        assert!(matches!(parse_config("\nfoo=1", None), Err(IoError::Config { line: 2, .. })));
        assert!(matches!(parse_config("mu", None), Err(IoError::Config { line: 1, .. })));
        assert!(matches!(parse_config("mu=1\nmu=2", None), Err(IoError::Config { line: 2, .. })));
        assert!(matches!(parse_config("prior_mean=missing.nrtf", None), Err(IoError::Config { line: 1, .. })));
        assert!(matches!(parse_config("steps=500", None), Err(IoError::Invalid(_))));
        assert!(matches!(parse_config("denoiser=external", None), Err(IoError::Invalid(_))));
        assert!(parse_config("mean_correction=false\njacobian_term=true", None).is_err());
    }

    #[test]
    fn preset_resolution() {
        let cs = OperatorDescriptor::parse("cs:ratio=0.05,block=32,seed=7", None).unwrap();
        let g = parse_config("", None).unwrap().guidance(&cs, 0.0);
        assert_eq!((g.config.mu, g.config.zeta), (3.5, 1.0));
        assert_eq!(g.mu_from, Setting::Preset);
        let g = parse_config("mu=2", None).unwrap().guidance(&cs, 0.0);
        assert_eq!((g.config.mu, g.mu_from, g.zeta_from), (2.0, Setting::Config, Setting::Preset));
        let mask = OperatorDescriptor::parse("mask:keep=0.3", None).unwrap();
        let g = parse_config("", None).unwrap().guidance(&mask, 0.0);
        assert_eq!(g.mu_from, Setting::Default);
    }

    #[test]
    fn external_and_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("peer"), "").unwrap();
        let c = parse_config("denoiser=external\nexternal_command=./peer --mode zero", Some(dir.path())).unwrap();
        match c.denoiser {
            DenoiserSelector::External { command } => {
                assert_eq!(command[1..], ["--mode".to_string(), "zero".to_string()]);
                assert!(command[0].ends_with("peer"));
            }
            _ => panic!(),
        }
        assert!(parse_config("denoiser=external\nexternal_command=./nope", Some(dir.path())).is_err());
        assert!(parse_config("external_command=cat", None).is_err());
    }
}
