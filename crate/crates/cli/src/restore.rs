use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nrlg::denoiser::{AnalyticDenoiser, ExternalDenoiser, GaussianPrior, NoisePredictor};
use nrlg::forward::Measurement;
use nrlg::io::{read_config, read_tensor, write_image, write_tensor, DenoiserSelector, PriorSource, RunConfig};
use nrlg::rng::mix_seed;
use nrlg::samplers::{run, RunSpec, SamplerError, Trajectory};
use nrlg::schedule::uniform_timestep_plan;
use nrlg::tensor::Tensor;
use rayon::prelude::*;
use serde_json::json;

use crate::{files_with_ext, meta_path, write_json, CliError};

/// Snapshot stride when `--snapshots` is given and the config sets none.
const DEFAULT_SNAPSHOT_STRIDE: usize = 10;

struct Job {
    measurement: PathBuf,
    out: PathBuf,
    snapshots: Option<PathBuf>,
    seed: u64,
}

pub fn restore(
    measurement: &Path,
    config: Option<&Path>,
    out: &Path,
    snapshots: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if !measurement.is_dir() {
        let job = Job {
            measurement: measurement.to_path_buf(),
            out: out.to_path_buf(),
            snapshots: snapshots.map(Path::to_path_buf),
            seed: cfg.seed,
        };
        return restore_one(&cfg, config, &job);
    }

    let inputs = files_with_ext(measurement, &["nrtf"])?;
    if inputs.is_empty() {
        return Err(CliError::Io(format!("no .nrtf measurements in {}", measurement.display())));
    }
    std::fs::create_dir_all(out)?;
    let jobs: Vec<Job> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let stem = m.file_stem().unwrap_or_default().to_os_string();
            Job {
                out: out.join(&stem),
                snapshots: snapshots.map(|s| s.join(&stem)),
                seed: mix_seed(cfg.seed, i as u64),
                measurement: m,
            }
        })
        .collect();

    let threads = std::env::var("NRLG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let results: Vec<(PathBuf, Result<(), CliError>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| (job.measurement.clone(), restore_one(&cfg, config, job)))
            .collect()
    });

    let mut worst: Option<CliError> = None;
    for (path, r) in results {
        if let Err(e) = r {
            log::error!("{}: {e}", path.display());
            if worst.as_ref().is_none_or(|w| e.code() > w.code()) {
                worst = Some(e);
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn prior_tensor(src: &PriorSource, shape: &[usize]) -> Result<Tensor, CliError> {
    match src {
        PriorSource::Scalar(v) => Ok(Tensor::full(shape.to_vec(), *v)),
        PriorSource::File(p) => {
            let t = read_tensor(p)?;
            t.reshape(shape.to_vec())
                .map_err(|e| CliError::Config(format!("prior {}: {e}", p.display())))
        }
    }
}

fn build_denoiser(cfg: &RunConfig, shape: &[usize]) -> Result<Box<dyn NoisePredictor>, CliError> {
    let schedule = cfg.schedule.build().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(match &cfg.denoiser {
        DenoiserSelector::Analytic { mean, variance } => {
            let prior = GaussianPrior::new(prior_tensor(mean, shape)?, prior_tensor(variance, shape)?)?;
            Box::new(AnalyticDenoiser::new(prior, schedule))
        }
        DenoiserSelector::External { command } => Box::new(ExternalDenoiser::spawn(command, &schedule, shape)?),
    })
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_residuals(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,t,residual")?;
    for r in &traj.residuals {
        writeln!(f, "{},{},{:.9e}", r.step, r.t, r.residual)?;
    }
    f.flush()?;
    Ok(())
}

fn restore_one(cfg: &RunConfig, config_path: Option<&Path>, job: &Job) -> Result<(), CliError> {
    let started = Instant::now();
    let m = Measurement::load(&job.measurement)?;
    let out = if job.out.extension().is_none() {
        job.out.with_extension(if m.meta.geometry.channels == 1 { "pgm" } else { "ppm" })
    } else {
        job.out.clone()
    };
    if let Some(op) = &cfg.operator {
        if *op != m.meta.operator {
            return Err(CliError::Config(format!(
                "config operator {op} does not match the measurement's {}",
                m.meta.operator
            )));
        }
    }
    let op = m.operator()?;
    let sigma_y = cfg.sigma_y.unwrap_or(m.meta.sigma_y);
    let resolved = cfg.guidance(&m.meta.operator, sigma_y);
    resolved
        .config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let schedule = cfg.schedule.build().map_err(|e| CliError::Config(e.to_string()))?;
    let steps = cfg.steps.unwrap_or(schedule.num_steps());
    let plan = uniform_timestep_plan(&schedule, steps).map_err(|e| CliError::Config(e.to_string()))?;
    let shape = m.meta.geometry.shape();
    let denoiser = build_denoiser(cfg, &shape)?;
    log::info!(
        "{}: {} with mu={} ({:?}), zeta={} ({:?}), sigma_y={sigma_y}, {} steps",
        job.measurement.display(),
        cfg.sampler,
        resolved.config.mu,
        resolved.mu_from,
        resolved.config.zeta,
        resolved.zeta_from,
        plan.len()
    );

    let stride = match (&job.snapshots, cfg.snapshot_stride) {
        (Some(_), s) => Some(s.unwrap_or(DEFAULT_SNAPSHOT_STRIDE)),
        (None, _) => None,
    };
    let mut spec = RunSpec::new(cfg.sampler, &schedule, &plan, op.as_ref(), &m.y, denoiser.as_ref());
    spec.guidance = resolved.config;
    spec.seed = job.seed;
    spec.noise_seed = cfg.noise_seed;
    spec.snapshot_stride = stride;
    spec.dps_rho = cfg.dps_rho;
    spec.score_path = cfg.score_path;

    let traj = match run(&spec) {
        Ok(t) => t,
        Err(SamplerError::NonFinite { step, t, last_good }) => {
            let dump = with_suffix(&out, ".last_good.nrtf");
            write_tensor(&dump, &last_good)?;
            return Err(CliError::Numeric(format!(
                "non-finite state at step {step} (t = {t}); last finite state written to {}",
                dump.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let [lo, hi] = m.meta.value_range;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let image = traj.clamped(lo, hi).reshape(shape.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    write_image(&out, &image)?;
    let residual_path = with_suffix(&out, ".residuals.csv");
    write_residuals(&residual_path, &traj)?;
    if let Some(dir) = &job.snapshots {
        std::fs::create_dir_all(dir)?;
        for s in &traj.snapshots {
            write_tensor(&dir.join(format!("step{:04}_t{:04}_xt.nrtf", s.step, s.t)), &s.x_t)?;
            write_tensor(&dir.join(format!("step{:04}_t{:04}_x0.nrtf", s.step, s.t)), &s.x0)?;
        }
    }

    let injected_std = if traj.injected.count > 0 {
        let n = traj.injected.count as f64;
        let mean = traj.injected.sum / n;
        Some((traj.injected.sum_sq / n - mean * mean).max(0.0).sqrt())
    } else {
        None
    };
    write_json(
        &meta_path(&out),
        &json!({
            "command": "restore",
            "version": env!("CARGO_PKG_VERSION"),
            "measurement": job.measurement.display().to_string(),
            "config_file": config_path.map(|p| p.display().to_string()),
            "config": cfg,
            "operator": m.meta.operator.to_string(),
            "sampler": cfg.sampler.as_str(),
            "sigma_y": sigma_y,
            "guidance": {
                "mu": resolved.config.mu,
                "mu_from": resolved.mu_from,
                "zeta": resolved.config.zeta,
                "zeta_from": resolved.zeta_from,
                "mean_correction": resolved.config.mean_correction,
                "jacobian_term": resolved.config.jacobian_term,
            },
            "seed": job.seed,
            "noise_seed": cfg.noise_seed,
            "timesteps": plan.timesteps(),
            "final_residual": traj.final_residual(),
            "injected_noise": { "count": traj.injected.count, "std": injected_std },
            "value_range": [lo, hi],
            "output": out.display().to_string(),
            "residuals": residual_path.display().to_string(),
            "snapshots": job.snapshots.as_ref().map(|p| p.display().to_string()),
            "snapshot_stride": stride,
            "elapsed_seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(())
}
