//! Scene descriptors: JSON files and built-in presets.

use std::path::Path;

use anyhow::{bail, Context, Result};
use moc_core::{SceneSpec, ShotLayout};

pub const BUILTIN: &[&str] = &["desk", "adversarial", "recall"];

/// Default verification scene: 8 shots of 4 frames x 64 tokens.
pub fn desk(seed: u64) -> SceneSpec {
    SceneSpec::desk(8, seed)
}

/// Four single-frame shots whose centroids come in identical pairs (0, 1) and
/// (2, 3). Without a causal mask and with `k = 1`, each chunk of a pair is the
/// other's best match, so routing closes two isolated loops.
pub fn adversarial(seed: u64) -> SceneSpec {
    SceneSpec {
        shots: vec![
            ShotLayout {
                n_frames: 1,
                tokens_per_frame: 16,
                caption_tokens: 0,
            };
            4
        ],
        global_caption_tokens: 0,
        recall_pairs: vec![(0, 1), (2, 3)],
        frame_drift: 0.05,
        token_noise: 0.05,
        seed,
        ..SceneSpec::desk(4, seed)
    }
}

/// Desk scene where shot 5 reuses the centroid of shot 0.
pub fn recall(seed: u64) -> SceneSpec {
    SceneSpec {
        recall_pairs: vec![(0, 5)],
        ..SceneSpec::desk(8, seed)
    }
}

pub fn builtin(name: &str, seed: u64) -> Result<SceneSpec> {
    Ok(match name {
        "desk" => desk(seed),
        "adversarial" => adversarial(seed),
        "recall" => recall(seed),
        other => bail!("unknown scene `{other}`; expected one of {}", BUILTIN.join(", ")),
    })
}

pub fn load(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: SceneSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    spec.validate()?;
    Ok(spec)
}
