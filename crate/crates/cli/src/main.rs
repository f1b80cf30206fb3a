//! `nrlg`: degrade, restore, evaluate and verify.

mod restore;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use nrlg::denoiser::{run_peer, DenoiserError, PeerMode};
use nrlg::forward::Measurement;
use nrlg::io::{read_image, IoError};
use nrlg::linops::{LinopError, OperatorDescriptor};
use nrlg::metrics::{write_csv, MetricReport, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use nrlg::rng::mix_seed;
use nrlg::samplers::SamplerError;
use nrlg::verify::{run_suite, VerifyError, VerifyOptions, SUITES};
use serde_json::json;

#[derive(Parser)]
#[command(name = "nrlg", version, about = "Diffusion restoration with noise-refined likelihood guidance")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a measurement y = A x + sigma * g from an image.
    Degrade {
        /// PGM/PPM image, or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Operator, e.g. "cs:ratio=0.05,block=32,seed=7" or "blur gaussian k=5 std=10".
        #[arg(long = "op")]
        op: String,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Measurement tensor file (a directory when the input is one).
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore an image from a measurement.
    Restore {
        /// Measurement tensor file with its JSON sidecar, or a directory of them.
        #[arg(long)]
        measurement: PathBuf,
        /// Run configuration (key=value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restored image (a directory when the measurement is one).
        #[arg(long)]
        out: PathBuf,
        /// Write intermediate x_t / x0 snapshots here.
        #[arg(long)]
        snapshots: Option<PathBuf>,
    },
    /// PSNR and SSIM of restored images against references.
    Eval {
        /// Restored images, or one directory.
        #[arg(long, num_args = 1.., required = true)]
        restored: Vec<PathBuf>,
        /// Reference images in the same order, or one directory with matching names.
        #[arg(long, num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        /// CSV output; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical oracle suites.
    Verify {
        /// One of the suite names; all suites when omitted.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Serve the external denoiser protocol on stdin/stdout.
    #[command(hide = true)]
    Peer {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
}

/// Failure with its exit code: 2 config, 3 I/O, 4 numeric abort, 1 verification failure.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Numeric(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical abort: {m}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Config { .. } | IoError::Invalid(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<LinopError> for CliError {
    fn from(e: LinopError) -> Self {
        match e {
            LinopError::Io(_) => CliError::Io(e.to_string()),
            LinopError::NotConverged { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DenoiserError> for CliError {
    fn from(e: DenoiserError) -> Self {
        match e {
            DenoiserError::Prior(_) | DenoiserError::Shape(_) | DenoiserError::Schedule(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            SamplerError::Config(_) | SamplerError::Capability(_) => CliError::Config(e.to_string()),
            SamplerError::Guidance(g) => match g {
                nrlg::guidance::GuidanceError::Denoiser(d) => d.into(),
                nrlg::guidance::GuidanceError::Linop(l) => l.into(),
                other => CliError::Config(other.to_string()),
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `<path>.meta.json`, next to an output file.
pub fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    out.with_file_name(name)
}

pub fn files_with_ext(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e)))
        .collect();
    files.sort();
    Ok(files)
}

fn degrade(input: &Path, op: &str, sigma: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Config(format!("--sigma must be >= 0, got {sigma}")));
    }
    let desc = OperatorDescriptor::parse(op, None)?;
    let jobs: Vec<(PathBuf, PathBuf, u64)> = if input.is_dir() {
        std::fs::create_dir_all(out)?;
        files_with_ext(input, &["pgm", "ppm"])?
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let stem = p.file_stem().unwrap_or_default().to_os_string();
                let target = out.join(stem).with_extension("nrtf");
                (p, target, mix_seed(seed, i as u64))
            })
            .collect()
    } else {
        vec![(input.to_path_buf(), out.to_path_buf(), seed)]
    };
    for (src, target, file_seed) in jobs {
        let x = read_image(&src)?;
        let m = Measurement::simulate(&desc, &x, sigma, file_seed, Some(src.display().to_string()))?;
        m.save(&target)?;
        write_json(
            &meta_path(&target),
            &json!({
                "command": "degrade",
                "version": env!("CARGO_PKG_VERSION"),
                "input": src.display().to_string(),
                "operator": desc.to_string(),
                "sigma_y": sigma,
                "seed": file_seed,
                "base_seed": seed,
                "measurement": target.display().to_string(),
                "sidecar": Measurement::sidecar_path(&target).display().to_string(),
            }),
        )?;
        log::info!("{} -> {}", src.display(), target.display());
    }
    Ok(())
}

fn image_pairs(restored: &[PathBuf], reference: &[PathBuf]) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    if let ([r], [f]) = (restored, reference) {
        if r.is_dir() {
            if !f.is_dir() {
                return Err(CliError::Config("--restored is a directory but --reference is not".into()));
            }
            return files_with_ext(r, &["pgm", "ppm"])?
                .into_iter()
                .map(|p| {
                    let other = f.join(p.file_name().unwrap_or_default());
                    if other.is_file() {
                        Ok((p, other))
                    } else {
                        Err(CliError::Io(format!("no reference {} for {}", other.display(), p.display())))
                    }
                })
                .collect();
        }
    }
    if restored.len() != reference.len() {
        return Err(CliError::Config(format!(
            "{} restored images but {} references",
            restored.len(),
            reference.len()
        )));
    }
    Ok(restored.iter().cloned().zip(reference.iter().cloned()).collect())
}

fn eval(restored: &[PathBuf], reference: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let pairs = image_pairs(restored, reference)?;
    let mut reports = Vec::with_capacity(pairs.len());
    for (r, f) in &pairs {
        let (x, gt) = (read_image(r)?, read_image(f)?);
        let id = r.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        reports.push(MetricReport::compute(id, &x, &gt, 1.0).map_err(|e| CliError::Config(format!("{}: {e}", r.display())))?);
    }
    let mut csv = Vec::new();
    write_csv(&mut csv, &reports)?;
    match out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            write_json(
                &meta_path(path),
                &json!({
                    "command": "eval",
                    "version": env!("CARGO_PKG_VERSION"),
                    "pairs": pairs.iter().map(|(r, f)| json!([r.display().to_string(), f.display().to_string()])).collect::<Vec<_>>(),
                    "peak": 1.0,
                    "ssim": { "window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2 },
                }),
            )?;
        }
        None => print!("{}", String::from_utf8_lossy(&csv)),
    }
    Ok(())
}

fn verify(suite: Option<&str>) -> Result<(), CliError> {
    let names: Vec<&str> = match suite {
        Some(s) if SUITES.contains(&s) => vec![s],
        Some(s) => {
            return Err(CliError::Config(format!("unknown suite {s:?}; one of {}", SUITES.join(", "))));
        }
        None => SUITES.to_vec(),
    };
    let exe = std::env::current_exe()?;
    let opts = VerifyOptions {
        peer_command: Some(vec![exe.display().to_string(), "peer".into()]),
        motion_kernel: None,
    };
    let mut failed = Vec::new();
    for name in names {
        match run_suite(name, &opts) {
            Ok(report) => {
                println!("{report}");
                if !report.passed() {
                    failed.push(name);
                }
            }
            Err(VerifyError::UnknownSuite(s)) => return Err(CliError::Config(format!("unknown suite {s:?}"))),
            Err(e) => {
                println!("FAIL {name}: {e}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

fn peer(args: &[String]) -> Result<(), CliError> {
    let mode = PeerMode::from_args(args).map_err(CliError::Config)?;
    run_peer(mode, &mut std::io::stdin().lock(), &mut std::io::stdout().lock())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Degrade {
            input,
            op,
            sigma,
            seed,
            out,
        } => degrade(input, op, *sigma, *seed, out),
        Command::Restore {
            measurement,
            config,
            out,
            snapshots,
        } => restore::restore(measurement, config.as_deref(), out, snapshots.as_deref()),
        Command::Eval { restored, reference, out } => eval(restored, reference, out.as_deref()),
        Command::Verify { suite } => verify(suite.as_deref()),
        Command::Peer { args } => peer(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nrlg: {e}");
            ExitCode::from(e.code())
        }
    }
}
