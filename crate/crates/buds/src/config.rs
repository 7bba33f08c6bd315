//! Pipeline configuration.
//!
//! A config file is one JSON document. Its `preset` field selects a complete
//! default configuration; every other field present in the file is merged
//! over it (objects recursively, everything else replaced).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use buds_core::cluster::ClusterConfig;
use buds_core::env::{modalities, TaskId};
use buds_core::hbc::HbcConfig;
use buds_core::repr::ReprConfig;
use buds_core::seg::SegConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{BudsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    SingleTask,
    KSweep,
    Multitask,
    ModalityAblation,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::SingleTask, Preset::KSweep, Preset::Multitask, Preset::ModalityAblation];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SingleTask => "single-task",
            Preset::KSweep => "k-sweep",
            Preset::Multitask => "multitask",
            Preset::ModalityAblation => "modality-ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub demo_dir: PathBuf,
    pub artifact_dir: PathBuf,
}

/// `count` scripted demos for each listed variant of `task`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoGroup {
    pub task: String,
    pub variants: Vec<u32>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub noise_scale: f64,
    pub groups: Vec<DemoGroup>,
}

/// Demos (or rollouts) of one task restricted to some variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub task: String,
    pub variants: Vec<u32>,
}

impl Selection {
    pub fn matches(&self, task: &str, variant: u32) -> bool {
        self.task == task && self.variants.contains(&variant)
    }

    pub fn label(&self) -> String {
        let v: Vec<String> = self.variants.iter().map(u32::to_string).collect();
        format!("{}/v{}", self.task, v.join("-"))
    }
}

/// One experimental condition. Every arm runs its own representation,
/// segmentation, clustering and policies under `<artifact_dir>/seed-<s>/<name>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    /// Number of clusters; falls back to `cluster.max_clusters`.
    #[serde(default)]
    pub k: Option<usize>,
    /// Modalities used for representation learning; all when absent.
    #[serde(default)]
    pub modalities: Option<Vec<String>>,
    /// Demos that are segmented and clustered.
    pub demos: Vec<Selection>,
    /// Variants whose segments train skills; all of `demos` when absent.
    #[serde(default)]
    pub skill_variants: Option<Vec<u32>>,
    /// One meta controller per entry, trained on the selected demos.
    #[serde(default)]
    pub metas: Vec<Selection>,
    /// Rollout evaluations; trial `i` uses `variants[i % len]`.
    #[serde(default)]
    pub evals: Vec<Selection>,
}

impl Arm {
    pub fn selects(&self, task: &str, variant: u32) -> bool {
        self.demos.iter().any(|s| s.matches(task, variant))
    }

    pub fn trains_policies(&self) -> bool {
        !self.metas.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    /// Replicate seeds; each runs the whole pipeline.
    pub seeds: Vec<u64>,
    pub max_steps: usize,
    pub boundary_tol: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub paths: Paths,
    pub demos: DemoConfig,
    pub repr: ReprConfig,
    pub seg: SegConfig,
    pub cluster: ClusterConfig,
    pub hbc: HbcConfig,
    pub eval: EvalConfig,
    pub arms: Vec<Arm>,
}

fn sel(task: TaskId, variants: &[u32]) -> Selection {
    Selection {
        task: task.name().into(),
        variants: variants.to_vec(),
    }
}

fn policy_arm(name: &str, k: usize, task: TaskId) -> Arm {
    Arm {
        name: name.into(),
        k: Some(k),
        modalities: None,
        demos: vec![sel(task, &[1])],
        skill_variants: None,
        metas: vec![sel(task, &[1])],
        evals: vec![sel(task, &[1])],
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let kitchen = |count| DemoGroup {
            task: TaskId::Kitchen.name().into(),
            variants: vec![1],
            count,
        };
        let mut cfg = PipelineConfig {
            preset,
            paths: Paths {
                demo_dir: "demos".into(),
                artifact_dir: "artifacts".into(),
            },
            demos: DemoConfig {
                noise_scale: 0.01,
                groups: vec![kitchen(60)],
            },
            repr: ReprConfig {
                kl_weight: 0.0,
                ..ReprConfig::default()
            },
            seg: SegConfig {
                leaf_window: 10,
                min_segment_len: 25,
                min_frontier_count: 8,
            },
            cluster: ClusterConfig {
                max_clusters: 6,
                min_avg_skill_len: 20,
                ..ClusterConfig::default()
            },
            hbc: HbcConfig::default(),
            eval: EvalConfig {
                trials: 100,
                seeds: vec![0],
                max_steps: 500,
                boundary_tol: 5,
            },
            arms: vec![policy_arm("main", 6, TaskId::Kitchen)],
        };
        match preset {
            Preset::SingleTask => {}
            Preset::KSweep => {
                cfg.eval.seeds = (0..5).collect();
                cfg.arms = [1, 3, 6, 9]
                    .iter()
                    .map(|&k| policy_arm(&format!("k{k}"), k, TaskId::Kitchen))
                    .collect();
            }
            Preset::Multitask => {
                let all = [1, 2, 3];
                cfg.eval.seeds = (0..5).collect();
                cfg.demos.groups = TaskId::ALL
                    .iter()
                    .map(|t| DemoGroup {
                        task: t.name().into(),
                        variants: all.to_vec(),
                        count: 10,
                    })
                    .collect();
                let every = |variants: &[u32]| -> Vec<Selection> {
                    TaskId::ALL.iter().map(|&t| sel(t, variants)).collect()
                };
                cfg.arms = TaskId::ALL
                    .iter()
                    .map(|&t| Arm {
                        name: format!("single-{}", t.name()),
                        k: Some(6),
                        modalities: None,
                        demos: vec![sel(t, &all)],
                        skill_variants: None,
                        metas: vec![sel(t, &all)],
                        evals: vec![sel(t, &all)],
                    })
                    .collect();
                let mut multi_evals = every(&all);
                multi_evals.extend(every(&[3]));
                cfg.arms.push(Arm {
                    name: "multi".into(),
                    k: Some(8),
                    modalities: None,
                    demos: every(&all),
                    skill_variants: None,
                    metas: every(&all),
                    evals: multi_evals,
                });
                cfg.arms.push(Arm {
                    name: "test".into(),
                    k: Some(8),
                    modalities: None,
                    demos: every(&all),
                    skill_variants: Some(vec![1, 2]),
                    metas: every(&[3]),
                    evals: every(&[3]),
                });
            }
            Preset::ModalityAblation => {
                cfg.eval.seeds = (0..5).collect();
                cfg.demos.groups = vec![kitchen(40)];
                let views: [(&str, Option<&[&str]>); 4] = [
                    ("fused", None),
                    ("view_a", Some(&["view_a"])),
                    ("view_b", Some(&["view_b"])),
                    ("proprio", Some(&["proprio"])),
                ];
                cfg.arms = views
                    .iter()
                    .map(|(name, mods)| Arm {
                        name: (*name).into(),
                        k: None,
                        modalities: mods.map(|m| m.iter().map(|s| (*s).to_owned()).collect()),
                        demos: vec![sel(TaskId::Kitchen, &[1])],
                        skill_variants: None,
                        metas: Vec::new(),
                        evals: Vec::new(),
                    })
                    .collect();
            }
        }
        cfg
    }

    /// Reads a config file, expands its preset and resolves relative paths
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BudsError::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.demo_dir, &mut cfg.paths.artifact_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses and validates a config document. Paths stay as written.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| BudsError::config("<document>", e.to_string()))?;
        let Value::Object(fields) = &user else {
            return Err(BudsError::config("<document>", "expected a JSON object"));
        };
        let preset: Preset = match fields.get("preset") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| BudsError::config("preset", e.to_string()))?,
            None => return Err(BudsError::config("preset", "missing field")),
        };
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("preset serializes");
        merge(&mut merged, user);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
            let field = e.path().to_string();
            BudsError::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let module = |name: &str, r: std::result::Result<(), String>| {
            r.map_err(|msg| {
                let field = msg.split_whitespace().next().unwrap_or("");
                BudsError::config(format!("{name}.{field}"), msg.clone())
            })
        };
        module("repr", self.repr.validate())?;
        module("seg", self.seg.validate())?;
        module("cluster", self.cluster.validate())?;
        module("hbc", self.hbc.validate())?;

        if !(self.demos.noise_scale >= 0.0 && self.demos.noise_scale.is_finite()) {
            return Err(BudsError::config("demos.noise_scale", "must be a finite value >= 0"));
        }
        if self.demos.groups.is_empty() {
            return Err(BudsError::config("demos.groups", "at least one group is required"));
        }
        for (i, g) in self.demos.groups.iter().enumerate() {
            check_task(&g.task, &format!("demos.groups[{i}].task"))?;
            check_variants(&g.variants, &format!("demos.groups[{i}].variants"))?;
            if g.count == 0 || g.count > 1000 {
                return Err(BudsError::config(format!("demos.groups[{i}].count"), "must be in 1..=1000"));
            }
        }
        if self.eval.trials == 0 || self.eval.trials > 1000 {
            return Err(BudsError::config("eval.trials", "must be in 1..=1000"));
        }
        if self.eval.seeds.is_empty() {
            return Err(BudsError::config("eval.seeds", "at least one seed is required"));
        }
        if self.eval.max_steps == 0 {
            return Err(BudsError::config("eval.max_steps", "must be >= 1"));
        }
        if self.arms.is_empty() {
            return Err(BudsError::config("arms", "at least one arm is required"));
        }

        let known: Vec<String> = modalities().into_iter().map(|m| m.name).collect();
        let mut names = HashSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            let at = |f: &str| format!("arms[{i}].{f}");
            let safe = arm
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if arm.name.is_empty() || !safe {
                return Err(BudsError::config(at("name"), "use letters, digits, '-' or '_'"));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(BudsError::config(at("name"), format!("duplicate arm `{}`", arm.name)));
            }
            if arm.k == Some(0) {
                return Err(BudsError::config(at("k"), "must be >= 1"));
            }
            if let Some(mods) = &arm.modalities {
                if mods.is_empty() {
                    return Err(BudsError::config(at("modalities"), "must not be empty"));
                }
                if let Some(m) = mods.iter().find(|m| !known.contains(m)) {
                    return Err(BudsError::config(at("modalities"), format!("unknown modality `{m}`")));
                }
            }
            if arm.demos.is_empty() {
                return Err(BudsError::config(at("demos"), "at least one selection is required"));
            }
            for (j, s) in arm.demos.iter().enumerate() {
                check_selection(s, &at(&format!("demos[{j}]")))?;
                for &v in &s.variants {
                    let generated = self
                        .demos
                        .groups
                        .iter()
                        .any(|g| g.task == s.task && g.variants.contains(&v));
                    if !generated {
                        return Err(BudsError::config(
                            at(&format!("demos[{j}]")),
                            format!("no demos are generated for {} variant {v}", s.task),
                        ));
                    }
                }
            }
            if let Some(v) = &arm.skill_variants {
                check_variants(v, &at("skill_variants"))?;
            }
            let mut meta_tasks = HashSet::new();
            for (j, s) in arm.metas.iter().enumerate() {
                check_selection(s, &at(&format!("metas[{j}]")))?;
                if !meta_tasks.insert(s.task.as_str()) {
                    return Err(BudsError::config(at(&format!("metas[{j}]")), "one meta controller per task"));
                }
                if let Some(&v) = s.variants.iter().find(|&&v| !arm.selects(&s.task, v)) {
                    return Err(BudsError::config(
                        at(&format!("metas[{j}]")),
                        format!("{} variant {v} is not among the arm's demos", s.task),
                    ));
                }
            }
            for (j, s) in arm.evals.iter().enumerate() {
                check_selection(s, &at(&format!("evals[{j}]")))?;
                if !meta_tasks.contains(s.task.as_str()) {
                    return Err(BudsError::config(
                        at(&format!("evals[{j}]")),
                        format!("no meta controller for task `{}`", s.task),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Cluster count of `arm`.
    pub fn clusters(&self, arm: &Arm) -> usize {
        arm.k.unwrap_or(self.cluster.max_clusters)
    }
}

fn check_task(task: &str, field: &str) -> Result<()> {
    TaskId::parse(task)
        .map(|_| ())
        .map_err(|e| BudsError::config(field, e.to_string()))
}

fn check_variants(variants: &[u32], field: &str) -> Result<()> {
    if variants.is_empty() {
        return Err(BudsError::config(field, "at least one variant is required"));
    }
    match variants.iter().find(|v| !(1..=3).contains(*v)) {
        Some(v) => Err(BudsError::config(field, format!("variant {v} is not in 1..=3"))),
        None => Ok(()),
    }
}

fn check_selection(s: &Selection, field: &str) -> Result<()> {
    check_task(&s.task, &format!("{field}.task"))?;
    check_variants(&s.variants, &format!("{field}.variants"))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
