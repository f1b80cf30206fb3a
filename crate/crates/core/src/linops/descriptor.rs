//! Serializable description of a degradation operator.
//!
//! A descriptor plus the image geometry rebuilds the operator exactly, so it
//! is what measurement sidecars and run metadata record.

use std::fmt;
use std::path::Path;

use super::{
    read_kernel_file, BlockCs, CircularConvolution, Identity, ImageGeometry, Kernel, LinearOperator,
    LinopError, Mask, SeparableResample,
};

pub const DEFAULT_CS_BLOCK: usize = 32;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorDescriptor {
    Identity,
    Mask {
        keep: f64,
        seed: u64,
    },
    Cs {
        ratio: f64,
        block: usize,
        seed: u64,
    },
    GaussianBlur {
        size: usize,
        std: f64,
    },
    /// The kernel is stored inline so the descriptor replays without the file.
    MotionBlur {
        kernel: Kernel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
    },
    AvgPool {
        factor: usize,
    },
    Bicubic {
        factor: usize,
    },
}

impl OperatorDescriptor {
    pub fn build(&self, geometry: ImageGeometry) -> Result<Box<dyn LinearOperator>, LinopError> {
        Ok(match self {
            Self::Identity => Box::new(Identity::new(geometry.shape())),
            Self::Mask { keep, seed } => Box::new(Mask::random(geometry, *keep, *seed)?),
            Self::Cs { ratio, block, seed } => Box::new(BlockCs::new(geometry, *ratio, *block, *seed)?),
            Self::GaussianBlur { size, std } => Box::new(CircularConvolution::gaussian(geometry, *size, *std)?),
            Self::MotionBlur { kernel, .. } => Box::new(CircularConvolution::from_kernel(geometry, kernel.clone())?),
            Self::AvgPool { factor } => Box::new(SeparableResample::avg_pool(geometry, *factor)?),
            Self::Bicubic { factor } => Box::new(SeparableResample::bicubic(geometry, *factor)?),
        })
    }

    /// Short kind name, as used in the textual form.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Mask { .. } => "mask",
            Self::Cs { .. } => "cs",
            Self::GaussianBlur { .. } => "blur",
            Self::MotionBlur { .. } => "motion",
            Self::AvgPool { .. } => "avgpool",
            Self::Bicubic { .. } => "bicubic",
        }
    }

    /// Parses the textual form used on the command line and in configs.
    ///
    /// The kind comes first, then `key=value` parameters separated by commas
    /// or whitespace; a colon may follow the kind:
    ///
    /// ```text
    /// identity
    /// mask:keep=0.5,seed=3
    /// cs:ratio=0.05,block=32,seed=7
    /// blur gaussian k=5 std=10
    /// motion:file=kernels/motion.txt
    /// avgpool:factor=4
    /// bicubic:factor=4
    /// ```
    ///
    /// Relative kernel paths resolve against `base_dir` when given.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, LinopError> {
        let text = text.trim();
        let (kind, rest) = match text.find(|c: char| c == ':' || c.is_whitespace()) {
            Some(i) => (&text[..i], &text[i + 1..]),
            None => (text, ""),
        };
        let mut params = Params::default();
        let mut words = Vec::new();
        for tok in rest.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
            match tok.split_once('=') {
                Some((k, v)) => params.0.push((k.trim().to_ascii_lowercase(), v.trim().to_string(), false)),
                None => words.push(tok.to_ascii_lowercase()),
            }
        }
        let mut kind = kind.to_ascii_lowercase();
        if kind == "blur" {
            match words.as_slice() {
                [] => {}
                [w] if w == "gaussian" => {}
                [w] if w == "motion" => kind = "motion".into(),
                _ => return Err(bad(format!("unknown blur variant {:?}", words.join(" ")))),
            }
        } else if !words.is_empty() {
            return Err(bad(format!("unexpected word {:?} in operator {text:?}", words[0])));
        }
        let desc = match kind.as_str() {
            "identity" | "denoise" | "deno" => Self::Identity,
            "mask" | "inpaint" => Self::Mask {
                keep: params.f64("keep")?.unwrap_or(0.5),
                seed: params.u64("seed")?.unwrap_or(0),
            },
            "cs" => Self::Cs {
                ratio: params.f64("ratio")?.ok_or_else(|| bad("cs needs ratio=".into()))?,
                block: params.usize("block")?.unwrap_or(DEFAULT_CS_BLOCK),
                seed: params.u64("seed")?.unwrap_or(0),
            },
            "blur" | "gaussian" | "gaussian_blur" => Self::GaussianBlur {
                size: params.usize_any(&["k", "size"])?.unwrap_or(5),
                std: params.f64_any(&["std", "sigma"])?.unwrap_or(10.0),
            },
            "motion" | "motion_blur" => {
                let file = params
                    .string("file")
                    .ok_or_else(|| bad("motion blur needs file=<kernel file>".into()))?;
                let path = match base_dir {
                    Some(dir) if Path::new(&file).is_relative() => dir.join(&file),
                    _ => file.clone().into(),
                };
                Self::MotionBlur {
                    kernel: read_kernel_file(&path)?,
                    source: Some(file),
                }
            }
            "avgpool" | "avg_pool" | "pool" => Self::AvgPool {
                factor: params.usize_any(&["factor", "s"])?.unwrap_or(4),
            },
            "bicubic" | "sr" => Self::Bicubic {
                factor: params.usize_any(&["factor", "s"])?.unwrap_or(4),
            },
            other => return Err(bad(format!("unknown operator kind {other:?}"))),
        };
        if let Some(k) = params.unused() {
            return Err(bad(format!("unknown parameter {k:?} for operator {}", desc.kind())));
        }
        Ok(desc)
    }
}

impl fmt::Display for OperatorDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => write!(f, "identity"),
            Self::Mask { keep, seed } => write!(f, "mask:keep={keep},seed={seed}"),
            Self::Cs { ratio, block, seed } => write!(f, "cs:ratio={ratio},block={block},seed={seed}"),
            Self::GaussianBlur { size, std } => write!(f, "blur:k={size},std={std}"),
            Self::MotionBlur { source: Some(s), .. } => write!(f, "motion:file={s}"),
            Self::MotionBlur { kernel, .. } => write!(f, "motion({}x{} inline)", kernel.rows, kernel.cols),
            Self::AvgPool { factor } => write!(f, "avgpool:factor={factor}"),
            Self::Bicubic { factor } => write!(f, "bicubic:factor={factor}"),
        }
    }
}

fn bad(msg: String) -> LinopError {
    LinopError::InvalidParameter(msg)
}

/// Parameters with a per-entry "consumed" flag to detect unknown keys.
#[derive(Default)]
struct Params(Vec<(String, String, bool)>);

impl Params {
    fn take(&mut self, keys: &[&str]) -> Option<(String, String)> {
        let entry = self.0.iter_mut().find(|(k, _, _)| keys.contains(&k.as_str()))?;
        entry.2 = true;
        Some((entry.0.clone(), entry.1.clone()))
    }

    fn parsed<T: std::str::FromStr>(&mut self, keys: &[&str]) -> Result<Option<T>, LinopError>
    where
        T::Err: fmt::Display,
    {
        match self.take(keys) {
            None => Ok(None),
            Some((k, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| bad(format!("parameter {k}={v:?}: {e}"))),
        }
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>, LinopError> {
        self.parsed(&[key])
    }

    fn f64_any(&mut self, keys: &[&str]) -> Result<Option<f64>, LinopError> {
        self.parsed(keys)
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>, LinopError> {
        self.parsed(&[key])
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>, LinopError> {
        self.parsed(&[key])
    }

    fn usize_any(&mut self, keys: &[&str]) -> Result<Option<usize>, LinopError> {
        self.parsed(keys)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        self.take(&[key]).map(|(_, v)| v)
    }

    fn unused(&self) -> Option<&str> {
        self.0.iter().find(|(_, _, used)| !used).map(|(k, _, _)| k.as_str())
    }
}
