//! Progressive chunk-size schedules: coarse chunks early, finer chunks later.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub chunk_target_size: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub name: String,
    pub steps: Vec<ScheduleStep>,
}

/// Named presets accepted by [`Schedule::preset`].
pub const PRESETS: &[&str] = &["multishot", "singleshot"];

/// Longer names accepted for the presets, as used by the command-line interface contract.
const ALIASES: &[(&str, &str)] = &[
    ("paper-multishot", "multishot"),
    ("paper-singleshot", "singleshot"),
];

impl Schedule {
    /// Chunk sizes must strictly decrease and every `k` must be positive.
    pub fn new(name: impl Into<String>, steps: Vec<ScheduleStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(MocError::InvalidSchedule("no steps".into()));
        }
        if let Some(s) = steps.iter().find(|s| s.k == 0 || s.chunk_target_size == 0) {
            return Err(MocError::InvalidSchedule(format!(
                "step ({}, {}) has a zero field",
                s.chunk_target_size, s.k
            )));
        }
        if let Some(w) = steps
            .windows(2)
            .find(|w| w[1].chunk_target_size >= w[0].chunk_target_size)
        {
            return Err(MocError::InvalidSchedule(format!(
                "chunk size {} does not decrease after {}",
                w[1].chunk_target_size, w[0].chunk_target_size
            )));
        }
        Ok(Self {
            name: name.into(),
            steps,
        })
    }

    /// `multishot`: 10240 -> 5120 -> 2560 -> 1280 with k = 5.
    /// `singleshot`: a single step of chunk 256, k = 3.
    pub fn preset(name: &str) -> Result<Self> {
        let name = ALIASES
            .iter()
            .find(|(alias, _)| *alias == name)
            .map_or(name, |(_, canonical)| canonical);
        let steps = match name {
            "multishot" => [10240, 5120, 2560, 1280]
                .into_iter()
                .map(|chunk_target_size| ScheduleStep {
                    chunk_target_size,
                    k: 5,
                })
                .collect(),
            "singleshot" => vec![ScheduleStep {
                chunk_target_size: 256,
                k: 3,
            }],
            other => return Err(MocError::UnknownPreset(other.to_string())),
        };
        Self::new(name, steps)
    }

    /// Parses `SIZE:K[,SIZE:K...]`, e.g. `1024:5,512:5`.
    pub fn custom(spec: &str) -> Result<Self> {
        let steps = spec
            .split(',')
            .map(|part| {
                let (size, k) = part.trim().split_once(':').ok_or_else(|| {
                    MocError::InvalidSchedule(format!("`{part}` is not SIZE:K"))
                })?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| MocError::InvalidSchedule(format!("`{s}`: {e}")))
                };
                Ok(ScheduleStep {
                    chunk_target_size: parse(size)?,
                    k: parse(k)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new("custom", steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multishot_preset() {
        let s = Schedule::preset("multishot").unwrap();
        assert_eq!(Schedule::preset("paper-multishot").unwrap(), s);
        let got: Vec<_> = s.steps.iter().map(|s| (s.chunk_target_size, s.k)).collect();
        assert_eq!(got, vec![(10240, 5), (5120, 5), (2560, 5), (1280, 5)]);
    }

    #[test]
    fn singleshot_preset() {
        let s = Schedule::preset("paper-singleshot").unwrap();
        assert_eq!(s.name, "singleshot");
        assert_eq!(
            s.steps,
            vec![ScheduleStep {
                chunk_target_size: 256,
                k: 3
            }]
        );
    }

    #[test]
    fn unknown_preset() {
        assert_eq!(
            Schedule::preset("nope"),
            Err(MocError::UnknownPreset("nope".into()))
        );
    }

    #[test]
    fn custom_must_decrease() {
        assert!(Schedule::custom("512:5,256:3").is_ok());
        assert!(matches!(
            Schedule::custom("256:5,256:5"),
            Err(MocError::InvalidSchedule(_))
        ));
        assert!(Schedule::custom("256:5,512:5").is_err());
        assert!(Schedule::custom("256").is_err());
        assert!(Schedule::custom("256:0").is_err());
    }
}
