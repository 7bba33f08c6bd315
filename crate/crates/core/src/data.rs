//! Demonstration data model and its on-disk layout.
//!
//! A demo directory holds `manifest.json` plus one little-endian `f32` blob per
//! (trajectory, modality), one for actions, and an optional `i32` label blob:
//!
//! ```text
//! manifest.json
//! <traj_id>.<modality>.f32
//! <traj_id>.actions.f32
//! <traj_id>.labels.i32
//! ```
//!
//! Ground-truth stage labels are carried for evaluation only. Nothing in the
//! segmentation or training path reads them; those stages consume
//! [`Trajectory::observations`] and [`Trajectory::actions`] exclusively.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Observation,
    Proprioception,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
    pub kind: ModalityKind,
}

/// One demonstration. Arrays are row-major `len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub task_id: String,
    /// Initial-configuration variant of the task, 1-based. Zero when unused.
    pub variant: u32,
    pub len: usize,
    /// One `len × dim` array per modality, in [`DemoSet::modalities`] order.
    pub observations: Vec<Vec<f32>>,
    pub actions: Vec<f32>,
    pub gt_stage_labels: Option<Vec<i32>>,
}

impl Trajectory {
    pub fn observation(&self, modality: usize, t: usize, dim: usize) -> &[f32] {
        &self.observations[modality][t * dim..(t + 1) * dim]
    }

    pub fn action(&self, t: usize, action_dim: usize) -> &[f32] {
        &self.actions[t * action_dim..(t + 1) * action_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSet {
    pub modalities: Vec<Modality>,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub tasks: Vec<String>,
}

impl DemoSet {
    /// Total width of the concatenated observation vector.
    pub fn state_dim(&self) -> usize {
        self.modalities.iter().map(|m| m.dim).sum()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.dim).collect()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len).sum()
    }

    pub fn trajectory(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Per-state feature matrix: every modality concatenated, `len × state_dim`.
    pub fn state_features(&self, traj: &Trajectory) -> Array2<f64> {
        let dims = self.modality_dims();
        let width: usize = dims.iter().sum();
        let mut out = Array2::zeros((traj.len, width));
        for t in 0..traj.len {
            let mut col = 0;
            for (m, &dim) in dims.iter().enumerate() {
                for (j, &v) in traj.observation(m, t, dim).iter().enumerate() {
                    out[[t, col + j]] = f64::from(v);
                }
                col += dim;
            }
        }
        out
    }

    pub fn actions(&self, traj: &Trajectory) -> Array2<f64> {
        Array2::from_shape_fn((traj.len, self.action_dim), |(t, j)| {
            f64::from(traj.actions[t * self.action_dim + j])
        })
    }

    /// Trajectories matching `keep`, with the task list narrowed to the tasks
    /// that still have demonstrations.
    pub fn filter(&self, mut keep: impl FnMut(&Trajectory) -> bool) -> DemoSet {
        let trajectories: Vec<Trajectory> =
            self.trajectories.iter().filter(|t| keep(t)).cloned().collect();
        let present: HashSet<&str> = trajectories.iter().map(|t| t.task_id.as_str()).collect();
        let tasks = self
            .tasks
            .iter()
            .filter(|t| present.contains(t.as_str()))
            .cloned()
            .collect();
        DemoSet {
            modalities: self.modalities.clone(),
            action_dim: self.action_dim,
            trajectories,
            tasks,
        }
    }

    /// Keep only the named modalities (in the given order).
    pub fn select_modalities(&self, names: &[String]) -> Result<DemoSet> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.modality_index(n).ok_or_else(|| Error::Unknown {
                    kind: "modality",
                    name: n.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory {
                observations: idx.iter().map(|&i| t.observations[i].clone()).collect(),
                ..t.clone()
            })
            .collect();
        Ok(DemoSet {
            modalities: idx.iter().map(|&i| self.modalities[i].clone()).collect(),
            action_dim: self.action_dim,
            trajectories,
            tasks: self.tasks.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.severity == Severity::Error)
    }

    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    fn error(&mut self, message: String) {
        self.findings.push(Finding {
            severity: Severity::Error,
            message,
        });
    }

    fn warn(&mut self, message: String) {
        self.findings.push(Finding {
            severity: Severity::Warning,
            message,
        });
    }
}

pub fn validate_demoset(set: &DemoSet) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut names = HashSet::new();
    for m in &set.modalities {
        if !names.insert(m.name.as_str()) {
            report.error(format!("duplicate modality name `{}`", m.name));
        }
        if m.dim == 0 {
            report.error(format!("modality `{}` has zero dim", m.name));
        }
    }
    if set.action_dim == 0 {
        report.error("action_dim is zero".into());
    }
    if set.trajectories.is_empty() {
        report.error("no trajectories".into());
    }

    let mut ids = HashSet::new();
    for traj in &set.trajectories {
        if !ids.insert(traj.id.as_str()) {
            report.error(format!("duplicate trajectory id `{}`", traj.id));
        }
        if traj.len == 0 {
            report.error(format!("trajectory `{}` has zero length", traj.id));
        }
        if !set.tasks.contains(&traj.task_id) {
            report.error(format!(
                "trajectory `{}` references undeclared task `{}`",
                traj.id, traj.task_id
            ));
        }
        if traj.observations.len() != set.modalities.len() {
            report.error(format!(
                "trajectory `{}` has {} modality arrays, expected {}",
                traj.id,
                traj.observations.len(),
                set.modalities.len()
            ));
        } else {
            for (m, values) in set.modalities.iter().zip(&traj.observations) {
                if values.len() != traj.len * m.dim {
                    report.error(format!(
                        "trajectory `{}` modality `{}` has {} values, expected {}",
                        traj.id,
                        m.name,
                        values.len(),
                        traj.len * m.dim
                    ));
                } else if let Some(p) = values.iter().position(|v| !v.is_finite()) {
                    report.error(format!(
                        "non-finite observation `{}` at ({}, {})",
                        m.name,
                        traj.id,
                        p / m.dim
                    ));
                }
            }
        }
        if traj.actions.len() != traj.len * set.action_dim {
            report.error(format!(
                "trajectory `{}` has {} action values, expected {}",
                traj.id,
                traj.actions.len(),
                traj.len * set.action_dim
            ));
        } else if let Some(p) = traj.actions.iter().position(|v| !v.is_finite()) {
            report.error(format!(
                "non-finite action at ({}, {})",
                traj.id,
                p / set.action_dim.max(1)
            ));
        }
        match &traj.gt_stage_labels {
            None => report.warn(format!("trajectory `{}` has no gt stage labels", traj.id)),
            Some(labels) => {
                if labels.len() != traj.len {
                    report.error(format!(
                        "trajectory `{}` has {} labels, expected {}",
                        traj.id,
                        labels.len(),
                        traj.len
                    ));
                }
                if let Some(t) = labels.iter().position(|&l| l < 0) {
                    report.error(format!("negative stage label at ({}, {t})", traj.id));
                }
            }
        }
    }

    for task in &set.tasks {
        if !set.trajectories.iter().any(|t| &t.task_id == task) {
            report.error(format!("empty task `{task}`"));
        }
    }
    report
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    modalities: Vec<Modality>,
    action_dim: usize,
    tasks: Vec<String>,
    trajectories: Vec<TrajectoryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryEntry {
    id: String,
    task_id: String,
    #[serde(default)]
    variant: u32,
    length: usize,
    /// Modality name → blob filename.
    blobs: BTreeMap<String, String>,
    actions: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<String>,
}

pub fn save_demoset(set: &DemoSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut entries = Vec::with_capacity(set.trajectories.len());
    for traj in &set.trajectories {
        let mut blobs = BTreeMap::new();
        for (m, values) in set.modalities.iter().zip(&traj.observations) {
            let file = format!("{}.{}.f32", traj.id, m.name);
            write_f32_blob(dir.join(&file), values)?;
            blobs.insert(m.name.clone(), file);
        }
        let actions = format!("{}.actions.f32", traj.id);
        write_f32_blob(dir.join(&actions), &traj.actions)?;
        let labels = match &traj.gt_stage_labels {
            Some(l) => {
                let file = format!("{}.labels.i32", traj.id);
                write_i32_blob(dir.join(&file), l)?;
                Some(file)
            }
            None => None,
        };
        entries.push(TrajectoryEntry {
            id: traj.id.clone(),
            task_id: traj.task_id.clone(),
            variant: traj.variant,
            length: traj.len,
            blobs,
            actions,
            labels,
        });
    }

    let manifest = Manifest {
        modalities: set.modalities.clone(),
        action_dim: set.action_dim,
        tasks: set.tasks.clone(),
        trajectories: entries,
    };
    write_json(dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_demoset(dir: impl AsRef<Path>) -> Result<DemoSet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Format(format!(
            "missing {}",
            manifest_path.display()
        )));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.trajectories.is_empty() {
        return Err(Error::Format("manifest lists no trajectories".into()));
    }

    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in manifest.trajectories {
        let mut observations = Vec::with_capacity(manifest.modalities.len());
        for m in &manifest.modalities {
            let file = entry.blobs.get(&m.name).ok_or_else(|| {
                Error::Format(format!(
                    "trajectory `{}` has no blob for modality `{}`",
                    entry.id, m.name
                ))
            })?;
            observations.push(read_f32_blob_exact(dir.join(file), entry.length * m.dim)?);
        }
        let actions =
            read_f32_blob_exact(dir.join(&entry.actions), entry.length * manifest.action_dim)?;
        let gt_stage_labels = match &entry.labels {
            Some(file) => Some(read_i32_blob_exact(dir.join(file), entry.length)?),
            None => None,
        };
        trajectories.push(Trajectory {
            id: entry.id,
            task_id: entry.task_id,
            variant: entry.variant,
            len: entry.length,
            observations,
            actions,
            gt_stage_labels,
        });
    }

    Ok(DemoSet {
        modalities: manifest.modalities,
        action_dim: manifest.action_dim,
        trajectories,
        tasks: manifest.tasks,
    })
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_f32_blob(path: impl AsRef<Path>, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

pub fn read_f32_blob(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptData {
            file: path.display().to_string(),
            detail: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_f32_blob_exact(path: impl AsRef<Path>, expected: usize) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let values = read_f32_blob(path)?;
    check_len(path, values.len(), expected)?;
    Ok(values)
}

fn write_i32_blob(path: impl AsRef<Path>, values: &[i32]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}

fn read_i32_blob_exact(path: impl AsRef<Path>, expected: usize) -> Result<Vec<i32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_len(path, bytes.len() / 4, expected)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptData {
            file: path.display().to_string(),
            detail: "trailing bytes".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_len(path: &Path, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::CorruptData {
            file: path.display().to_string(),
            detail: format!("{actual} values, manifest implies {expected}"),
        });
    }
    Ok(())
}

/// `f64` parameters persisted as `f32`. Loading rounds, so round-tripped
/// models are what later pipeline stages consume.
pub fn params_to_f32(params: &[f64]) -> Vec<f32> {
    params.iter().map(|&p| p as f32).collect()
}

pub fn params_from_f32(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v)).collect()
}

/// View a row-major buffer as a matrix.
pub fn as_matrix(values: &[f64], cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((values.len() / cols, cols), values).expect("row-major buffer")
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn small_set() -> DemoSet {
        let modalities = vec![
            Modality {
                name: "view_a".into(),
                dim: 2,
                kind: ModalityKind::Observation,
            },
            Modality {
                name: "view_b".into(),
                dim: 3,
                kind: ModalityKind::Observation,
            },
            Modality {
                name: "proprio".into(),
                dim: 1,
                kind: ModalityKind::Proprioception,
            },
        ];
        let traj = |id: &str, len: usize, labels: bool| Trajectory {
            id: id.into(),
            task_id: "kitchen".into(),
            variant: 1,
            len,
            observations: modalities
                .iter()
                .enumerate()
                .map(|(m, md)| {
                    (0..len * md.dim)
                        .map(|i| (i as f32) * 0.25 - m as f32)
                        .collect()
                })
                .collect(),
            actions: (0..len * 3).map(|i| (i as f32).sin()).collect(),
            gt_stage_labels: labels.then(|| (0..len as i32).map(|t| t / 3).collect()),
        };
        DemoSet {
            action_dim: 3,
            trajectories: vec![traj("d0", 7, true), traj("d1", 4, false)],
            tasks: vec!["kitchen".into()],
            modalities,
        }
    }
}
