//! Per-epoch run checkpoints.
//!
//! ```text
//! <out>/checkpoints/epoch_003/
//!     state.json
//!     student.{bin,json}
//!     teacher.{bin,json}      (once a teacher exists)
//!     adam_m.{bin,json}
//!     adam_v.{bin,json}
//!     pseudo_labels.jsonl
//! ```
//!
//! A checkpoint directory is assembled under a temporary name and renamed
//! into place, so a crash never leaves a half-written `epoch_NNN`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::encoder::{load_params, save_params, ModelParams};
use crate::error::{Error, Result};
use crate::pseudolabel::PseudoLabelStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub epochs_completed: usize,
    /// Student optimizer steps taken.
    pub step: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub state: RunState,
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
    pub optimizer: OptimizerState,
    pub labels: PseudoLabelStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    #[serde(flatten)]
    run: RunState,
    optimizer_step: u64,
    has_teacher: bool,
}

fn epoch_dir(out_dir: &Path, epochs_completed: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epochs_completed:03}"))
}

/// Writes `ck` and returns its directory.
pub fn save_checkpoint(out_dir: &Path, ck: &RunCheckpoint) -> Result<PathBuf> {
    let dest = epoch_dir(out_dir, ck.state.epochs_completed);
    let tmp = dest.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    save_params(&ck.student, &tmp.join("student"))?;
    if let Some(t) = &ck.teacher {
        save_params(t, &tmp.join("teacher"))?;
    }
    save_params(&ck.optimizer.first, &tmp.join("adam_m"))?;
    save_params(&ck.optimizer.second, &tmp.join("adam_v"))?;
    ck.labels.save_jsonl(&tmp.join("pseudo_labels.jsonl"))?;
    let state = StateFile {
        run: ck.state,
        optimizer_step: ck.optimizer.step,
        has_teacher: ck.teacher.is_some(),
    };
    let path = tmp.join("state.json");
    fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))?;
    if dest.exists() {
        fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(dest)
}

pub fn load_checkpoint(dir: &Path) -> Result<RunCheckpoint> {
    let path = dir.join("state.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let state: StateFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let teacher = if state.has_teacher {
        Some(load_params(&dir.join("teacher"))?)
    } else {
        None
    };
    Ok(RunCheckpoint {
        state: state.run,
        student: load_params(&dir.join("student"))?,
        teacher,
        optimizer: OptimizerState {
            step: state.optimizer_step,
            first: load_params(&dir.join("adam_m"))?,
            second: load_params(&dir.join("adam_v"))?,
        },
        labels: PseudoLabelStore::load_jsonl(&dir.join("pseudo_labels.jsonl"))?,
    })
}

/// The complete checkpoint with the most epochs under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let root = out_dir.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("epoch_")).and_then(|s| s.parse().ok()) else {
            continue;
        };
        if entry.path().join("state.json").exists() && best.as_ref().is_none_or(|(b, _)| n > *b) {
            best = Some((n, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
