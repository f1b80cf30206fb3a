//! Published `(μ, ζ)` settings per task, noise level and dataset.

use crate::linops::OperatorDescriptor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dataset {
    #[default]
    CelebaHq,
    Imagenet,
}

impl std::str::FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "celeba_hq" | "celeba" => Ok(Self::CelebaHq),
            "imagenet" => Ok(Self::Imagenet),
            _ => Err(format!("unknown dataset {s:?} (celeba_hq|imagenet)")),
        }
    }
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CelebaHq => "celeba_hq",
            Self::Imagenet => "imagenet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Task {
    SuperResolution4,
    GaussianDeblur,
    MotionDeblur,
    Denoise,
    /// Sampling ratio in percent.
    CompressedSensing(u32),
}

impl Task {
    /// The task an operator belongs to; `None` when no preset row exists.
    pub fn of(desc: &OperatorDescriptor) -> Option<Task> {
        match *desc {
            OperatorDescriptor::Identity => Some(Task::Denoise),
            OperatorDescriptor::Bicubic { factor: 4 } | OperatorDescriptor::AvgPool { factor: 4 } => {
                Some(Task::SuperResolution4)
            }
            OperatorDescriptor::GaussianBlur { .. } => Some(Task::GaussianDeblur),
            OperatorDescriptor::MotionBlur { .. } => Some(Task::MotionDeblur),
            OperatorDescriptor::Cs { ratio, .. } => {
                let pct = (ratio * 100.0).round();
                ((ratio * 100.0 - pct).abs() < 1e-9).then_some(Task::CompressedSensing(pct as u32))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub mu: f64,
    pub zeta: f64,
}

type Row = (Task, f64, Option<(f64, f64)>, Option<(f64, f64)>);

#[rustfmt::skip]
const TABLE: &[Row] = &[
    (Task::SuperResolution4, 0.0, Some((1.6, 0.75)), Some((1.7, 0.7))),
    (Task::SuperResolution4, 0.05, Some((1.25, 0.9)), Some((1.0, 1.0))),
    (Task::GaussianDeblur, 0.0, Some((0.95, 1.0)), Some((0.95, 1.0))),
    (Task::GaussianDeblur, 0.05, Some((1.0, 0.8)), Some((1.0, 1.0))),
    (Task::GaussianDeblur, 0.1, Some((1.0, 0.8)), Some((1.0, 1.0))),
    (Task::Denoise, 0.1, Some((0.7, 1.0)), Some((0.7, 1.0))),
    (Task::Denoise, 0.25, Some((1.0, 1.0)), Some((0.9, 1.0))),
    (Task::Denoise, 0.5, Some((1.2, 1.0)), None),
    (Task::MotionDeblur, 0.05, Some((1.0, 0.8)), Some((1.0, 1.0))),
    (Task::MotionDeblur, 0.1, Some((1.0, 0.8)), None),
    (Task::CompressedSensing(5), 0.0, Some((3.5, 1.0)), Some((2.25, 1.0))),
    (Task::CompressedSensing(10), 0.0, Some((3.0, 1.0)), Some((2.0, 1.0))),
    (Task::CompressedSensing(25), 0.0, Some((2.25, 1.0)), Some((1.75, 1.0))),
    (Task::CompressedSensing(5), 0.05, Some((3.5, 1.0)), Some((3.5, 1.0))),
    (Task::CompressedSensing(10), 0.05, Some((2.2, 1.0)), Some((2.75, 1.0))),
    (Task::CompressedSensing(25), 0.05, Some((1.35, 1.0)), Some((1.75, 1.0))),
];

pub fn preset_for(desc: &OperatorDescriptor, sigma_y: f64, dataset: Dataset) -> Option<Preset> {
    let task = Task::of(desc)?;
    TABLE
        .iter()
        .find(|(t, s, _, _)| *t == task && (s - sigma_y).abs() < 1e-9)
        .and_then(|&(_, _, celeba, imagenet)| match dataset {
            Dataset::CelebaHq => celeba,
            Dataset::Imagenet => imagenet,
        })
        .map(|(mu, zeta)| Preset { mu, zeta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        let cs5 = OperatorDescriptor::Cs { ratio: 0.05, block: 32, seed: 0 };
        assert_eq!(preset_for(&cs5, 0.0, Dataset::CelebaHq), Some(Preset { mu: 3.5, zeta: 1.0 }));
        assert_eq!(preset_for(&cs5, 0.0, Dataset::Imagenet), Some(Preset { mu: 2.25, zeta: 1.0 }));
        let sr = OperatorDescriptor::Bicubic { factor: 4 };
        assert_eq!(preset_for(&sr, 0.0, Dataset::CelebaHq), Some(Preset { mu: 1.6, zeta: 0.75 }));
        assert_eq!(preset_for(&OperatorDescriptor::Identity, 0.5, Dataset::Imagenet), None);
        assert_eq!(preset_for(&OperatorDescriptor::Mask { keep: 0.5, seed: 0 }, 0.0, Dataset::CelebaHq), None);
        assert_eq!(preset_for(&cs5, 0.07, Dataset::CelebaHq), None);
    }
}
