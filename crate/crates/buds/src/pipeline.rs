//! Stage execution.
//!
//! Layout on disk, per replicate seed `s`:
//!
//! ```text
//! <demo_dir>/seed-<s>/manifest.json ...
//! <artifact_dir>/seed-<s>/<arm>/repr.json, repr.params.f32
//!                              segments.json
//!                              skills.json
//!                              skill_<k>.json, skill_<k>.params.f32, skill_training.json
//!                              meta_<task>.json, meta_<task>.params.f32
//!                              rollouts.json
//! <artifact_dir>/metrics.json, metrics.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use buds_core::cluster::{
    build_skill_datasets, merge_short_clusters, segment_descriptor, spectral_cluster, SkillPartition,
};
use buds_core::data::{load_demoset, read_json, save_demoset, write_atomic, write_json, DemoSet, MANIFEST_FILE};
use buds_core::env::{generate_demoset, rollout, ObservationModel, TaskId, TaskSpec};
use buds_core::hbc::{meta_header, skill_header, train_meta, train_skill, HierarchicalController, MetaController, SkillPolicy};
use buds_core::metrics::{boundary_f1, label_boundaries, nmi, success_rate, MetricReport};
use buds_core::repr::{train_repr, ReprConfig, ReprModel, REPR_HEADER};
use buds_core::seg::{build_hierarchy, extract_segments, TemporalSegment};
use buds_core::Error;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Arm, PipelineConfig, Selection};
use crate::error::{BudsError, Result};

pub const SEGMENTS_FILE: &str = "segments.json";
pub const SKILLS_FILE: &str = "skills.json";
pub const SKILL_TRAINING_FILE: &str = "skill_training.json";
pub const ROLLOUTS_FILE: &str = "rollouts.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenDemos,
    Repr,
    Segment,
    Cluster,
    TrainSkills,
    TrainMeta,
    Rollout,
    Eval,
    All,
}

impl Stage {
    pub const SEQUENCE: [Stage; 8] = [
        Stage::GenDemos,
        Stage::Repr,
        Stage::Segment,
        Stage::Cluster,
        Stage::TrainSkills,
        Stage::TrainMeta,
        Stage::Rollout,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenDemos => "gen-demos",
            Stage::Repr => "repr",
            Stage::Segment => "segment",
            Stage::Cluster => "cluster",
            Stage::TrainSkills => "train-skills",
            Stage::TrainMeta => "train-meta",
            Stage::Rollout => "rollout",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTraining {
    pub skill: usize,
    pub samples: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub variant: u32,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub skill_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRollouts {
    pub task: String,
    pub variants: Vec<u32>,
    pub episodes: Vec<Episode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricReport>,
}

impl MetricsFile {
    pub fn get(&self, name: &str) -> Option<&MetricReport> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// Runs one stage (or every stage, in order) for every replicate seed.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    if stage == Stage::All {
        for s in Stage::SEQUENCE {
            run_stage(s, cfg)?;
        }
        return Ok(());
    }
    if stage == Stage::Eval {
        return eval(cfg);
    }
    for &seed in &cfg.eval.seeds {
        if stage == Stage::GenDemos {
            gen_demos(cfg, seed)?;
            continue;
        }
        let demos = load_demos(cfg, seed)?;
        for arm in &cfg.arms {
            let ctx = ArmContext::new(cfg, arm, seed, &demos)?;
            match stage {
                Stage::Repr => ctx.repr()?,
                Stage::Segment => ctx.segment()?,
                Stage::Cluster => ctx.cluster()?,
                Stage::TrainSkills => ctx.train_skills()?,
                Stage::TrainMeta => ctx.train_meta()?,
                Stage::Rollout => ctx.rollout()?,
                Stage::GenDemos | Stage::Eval | Stage::All => unreachable!(),
            }
        }
    }
    Ok(())
}

pub fn demo_dir(cfg: &PipelineConfig, seed: u64) -> PathBuf {
    cfg.paths.demo_dir.join(format!("seed-{seed}"))
}

pub fn arm_dir(cfg: &PipelineConfig, seed: u64, arm: &str) -> PathBuf {
    cfg.paths.artifact_dir.join(format!("seed-{seed}")).join(arm)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BudsError + '_ {
    move |e| BudsError::Runtime(Error::io(path, e))
}

fn require(dir: &Path, file: &str, stage: Stage) -> Result<()> {
    if dir.join(file).is_file() {
        Ok(())
    } else {
        Err(BudsError::StageDependency {
            artifact: file.to_owned(),
            stage: stage.name(),
        })
    }
}

fn gen_demos(cfg: &PipelineConfig, seed: u64) -> Result<()> {
    let mut specs = Vec::new();
    for (g, group) in cfg.demos.groups.iter().enumerate() {
        let task = TaskId::parse(&group.task)?;
        for &v in &group.variants {
            let base = seed * 1_000_000 + g as u64 * 10_000 + u64::from(v) * 1_000;
            specs.push((TaskSpec::new(task, v)?, (0..group.count as u64).map(|i| base + i).collect()));
        }
    }
    let set = generate_demoset(&specs, cfg.demos.noise_scale)?;
    eprintln!("gen-demos seed {seed}: {} demos, {} steps", set.trajectories.len(), set.total_steps());

    // Build the whole directory aside, then swap it in.
    let dir = demo_dir(cfg, seed);
    let mut tmp = dir.clone().into_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    save_demoset(&set, &tmp)?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io(&dir))?;
    }
    fs::rename(&tmp, &dir).map_err(io(&dir))?;
    Ok(())
}

fn load_demos(cfg: &PipelineConfig, seed: u64) -> Result<DemoSet> {
    let dir = demo_dir(cfg, seed);
    require(&dir, MANIFEST_FILE, Stage::GenDemos)?;
    Ok(load_demoset(&dir)?)
}

struct ArmContext<'a> {
    cfg: &'a PipelineConfig,
    arm: &'a Arm,
    seed: u64,
    dir: PathBuf,
    /// The arm's demos with every modality.
    demos: DemoSet,
}

impl<'a> ArmContext<'a> {
    fn new(cfg: &'a PipelineConfig, arm: &'a Arm, seed: u64, all: &DemoSet) -> Result<Self> {
        let demos = all.filter(|t| arm.selects(&t.task_id, t.variant));
        if demos.trajectories.is_empty() {
            return Err(Error::EmptyDataset(format!("arm `{}`", arm.name)).into());
        }
        let dir = arm_dir(cfg, seed, &arm.name);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(ArmContext {
            cfg,
            arm,
            seed,
            dir,
            demos,
        })
    }

    fn log(&self, stage: Stage, msg: impl std::fmt::Display) {
        eprintln!("{} seed {} arm {}: {msg}", stage.name(), self.seed, self.arm.name);
    }

    /// The arm's demos restricted to its representation modalities.
    fn repr_demos(&self) -> Result<DemoSet> {
        match &self.arm.modalities {
            Some(m) => Ok(self.demos.select_modalities(m)?),
            None => Ok(self.demos.clone()),
        }
    }

    fn repr(&self) -> Result<()> {
        let set = self.repr_demos()?;
        let cfg = ReprConfig {
            seed: self.seed,
            ..self.cfg.repr.clone()
        };
        let (model, report) = train_repr(&set, &cfg)?;
        model.save(&self.dir, &cfg)?;
        self.log(Stage::Repr, format!("loss {:.4} -> {:.4}", report.initial(), report.last()));
        Ok(())
    }

    fn latents(&self) -> Result<(DemoSet, BTreeMap<String, Array2<f64>>)> {
        require(&self.dir, REPR_HEADER, Stage::Repr)?;
        let (model, _) = ReprModel::load(&self.dir)?;
        let set = self.repr_demos()?;
        let mut out = BTreeMap::new();
        for t in &set.trajectories {
            out.insert(t.id.clone(), model.encode_trajectory(&set, t)?);
        }
        Ok((set, out))
    }

    fn segment(&self) -> Result<()> {
        let (set, latents) = self.latents()?;
        let mut segments = Vec::new();
        for t in &set.trajectories {
            let tree = build_hierarchy(&t.id, latents[&t.id].view(), &self.cfg.seg)?;
            segments.extend(extract_segments(&tree, &self.cfg.seg));
        }
        self.log(Stage::Segment, format!("{} segments", segments.len()));
        write_json(self.dir.join(SEGMENTS_FILE), &segments)?;
        Ok(())
    }

    fn segments(&self) -> Result<Vec<TemporalSegment>> {
        require(&self.dir, SEGMENTS_FILE, Stage::Segment)?;
        Ok(read_json(self.dir.join(SEGMENTS_FILE))?)
    }

    fn cluster(&self) -> Result<()> {
        let segments = self.segments()?;
        let (_, latents) = self.latents()?;
        let rows: Vec<Vec<f64>> = segments
            .iter()
            .map(|s| segment_descriptor(s, latents[&s.traj_id].view(), self.cfg.cluster.mid_keyframes))
            .collect();
        let width = rows.first().map_or(0, Vec::len);
        let x = Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j]);
        let cluster_cfg = buds_core::cluster::ClusterConfig {
            seed: self.seed,
            ..self.cfg.cluster.clone()
        };
        let labels = spectral_cluster(x.view(), self.cfg.clusters(self.arm), &cluster_cfg)?;
        let partition = merge_short_clusters(
            &SkillPartition::new(&segments, &labels),
            self.cfg.cluster.min_avg_skill_len,
        );
        self.log(Stage::Cluster, format!("{} skills", partition.k));
        write_json(self.dir.join(SKILLS_FILE), &partition)?;
        Ok(())
    }

    fn partition(&self) -> Result<SkillPartition> {
        require(&self.dir, SKILLS_FILE, Stage::Cluster)?;
        Ok(read_json(self.dir.join(SKILLS_FILE))?)
    }

    fn train_skills(&self) -> Result<()> {
        if !self.arm.trains_policies() {
            return Ok(());
        }
        let partition = self.partition()?;
        let mut training = partition.clone();
        if let Some(variants) = &self.arm.skill_variants {
            training.assignments.retain(|a| {
                self.demos
                    .trajectory(&a.traj_id)
                    .is_some_and(|t| variants.contains(&t.variant))
            });
        }
        let hbc = buds_core::hbc::HbcConfig {
            seed: self.seed,
            ..self.cfg.hbc.clone()
        };
        let datasets = build_skill_datasets(&self.demos, &training, hbc.horizon)?;
        let mut summary = Vec::new();
        for data in &datasets {
            // A skill with no training segments keeps its initialization.
            let (policy, losses) = if data.is_empty() {
                let p = SkillPolicy::init(data.skill, self.demos.state_dim(), self.demos.action_dim, &hbc);
                (p, None)
            } else {
                let (p, r) = train_skill(data, &hbc)?;
                (p, Some((r.initial(), r.last())))
            };
            policy.save(&self.dir)?;
            summary.push(SkillTraining {
                skill: data.skill,
                samples: data.len(),
                initial_loss: losses.map(|l| l.0),
                final_loss: losses.map(|l| l.1),
            });
        }
        self.log(
            Stage::TrainSkills,
            format!("{} skills, samples {:?}", summary.len(), summary.iter().map(|s| s.samples).collect::<Vec<_>>()),
        );
        write_json(self.dir.join(SKILL_TRAINING_FILE), &summary)?;
        Ok(())
    }

    fn skills(&self, k: usize) -> Result<Vec<SkillPolicy>> {
        (0..k)
            .map(|i| {
                require(&self.dir, &skill_header(i), Stage::TrainSkills)?;
                Ok(SkillPolicy::load(&self.dir, i)?)
            })
            .collect()
    }

    fn train_meta(&self) -> Result<()> {
        if !self.arm.trains_policies() {
            return Ok(());
        }
        let partition = self.partition()?;
        let skills = self.skills(partition.k)?;
        let hbc = buds_core::hbc::HbcConfig {
            seed: self.seed,
            ..self.cfg.hbc.clone()
        };
        for sel in &self.arm.metas {
            let set = self.demos.filter(|t| sel.matches(&t.task_id, t.variant));
            let (meta, report) = train_meta(&set, &sel.task, &partition, &skills, &hbc)?;
            meta.save(&self.dir)?;
            self.log(
                Stage::TrainMeta,
                format!("{}: loss {:.4} -> {:.4}", sel.label(), report.initial(), report.last()),
            );
        }
        Ok(())
    }

    fn rollout(&self) -> Result<()> {
        if self.arm.evals.is_empty() {
            return Ok(());
        }
        let partition = self.partition()?;
        let skills = self.skills(partition.k)?;
        let obs = ObservationModel::default();
        let mut out = Vec::new();
        for (e, sel) in self.arm.evals.iter().enumerate() {
            require(&self.dir, &meta_header(&sel.task), Stage::TrainMeta)?;
            let meta = MetaController::load(&self.dir, &sel.task)?;
            // Validates dims once; episodes below cannot fail.
            HierarchicalController::new(&meta, &skills, 0)?;
            let task = TaskId::parse(&sel.task)?;
            let base = 500_000_000 + self.seed * 100_000 + e as u64 * 1_000;
            let episodes: Vec<Episode> = (0..self.cfg.eval.trials)
                .into_par_iter()
                .map(|i| {
                    let variant = sel.variants[i % sel.variants.len()];
                    let spec = TaskSpec::new(task, variant).expect("validated variant");
                    let seed = base + i as u64;
                    let mut c = HierarchicalController::new(&meta, &skills, seed).expect("validated dims");
                    let r = rollout(&mut c, &spec, seed, self.cfg.eval.max_steps, &obs);
                    Episode {
                        variant,
                        seed,
                        success: r.success,
                        steps: r.steps,
                        skill_switches: r.skill_trace.windows(2).filter(|w| w[0] != w[1]).count(),
                    }
                })
                .collect();
            let wins = episodes.iter().filter(|x| x.success).count();
            self.log(Stage::Rollout, format!("{}: {wins}/{}", sel.label(), episodes.len()));
            out.push(EvalRollouts {
                task: sel.task.clone(),
                variants: sel.variants.clone(),
                episodes,
            });
        }
        write_json(self.dir.join(ROLLOUTS_FILE), &out)?;
        Ok(())
    }
}

/// Frame NMI against the stage labels and mean per-demo boundary F1.
fn segmentation_scores(demos: &DemoSet, segments: &[TemporalSegment], partition: &SkillPartition, tol: usize) -> Result<(f64, f64)> {
    let mut by_traj: BTreeMap<&str, Vec<&TemporalSegment>> = BTreeMap::new();
    for s in segments {
        by_traj.entry(s.traj_id.as_str()).or_default().push(s);
    }
    let (mut painted, mut truth, mut f1) = (Vec::new(), Vec::new(), 0.0);
    for t in &demos.trajectories {
        let gt = t
            .gt_stage_labels
            .as_ref()
            .ok_or_else(|| Error::Format(format!("demo `{}` has no stage labels", t.id)))?;
        painted.extend(partition.paint_frames(&t.id, t.len));
        truth.extend(gt.iter().copied());
        let mut segs = by_traj.remove(t.id.as_str()).unwrap_or_default();
        segs.sort_by_key(|s| s.start);
        let predicted: Vec<usize> = segs.iter().skip(1).map(|s| s.start).collect();
        f1 += boundary_f1(&predicted, &label_boundaries(gt), tol).f1;
    }
    Ok((nmi(&painted, &truth)?, f1 / demos.trajectories.len() as f64))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn eval(cfg: &PipelineConfig) -> Result<()> {
    let mut metrics = Vec::new();
    for arm in &cfg.arms {
        let (mut nmis, mut f1s, mut ks, mut support) = (Vec::new(), Vec::new(), Vec::new(), 0);
        let mut rollouts: Vec<Vec<EvalRollouts>> = Vec::new();
        for &seed in &cfg.eval.seeds {
            let demos = load_demos(cfg, seed)?;
            let demos = demos.filter(|t| arm.selects(&t.task_id, t.variant));
            let dir = arm_dir(cfg, seed, &arm.name);
            require(&dir, SEGMENTS_FILE, Stage::Segment)?;
            require(&dir, SKILLS_FILE, Stage::Cluster)?;
            let segments: Vec<TemporalSegment> = read_json(dir.join(SEGMENTS_FILE))?;
            let partition: SkillPartition = read_json(dir.join(SKILLS_FILE))?;
            let (n, f) = segmentation_scores(&demos, &segments, &partition, cfg.eval.boundary_tol)?;
            nmis.push(n);
            f1s.push(f);
            ks.push(partition.k as f64);
            support += demos.trajectories.len();
            if !arm.evals.is_empty() {
                require(&dir, ROLLOUTS_FILE, Stage::Rollout)?;
                rollouts.push(read_json(dir.join(ROLLOUTS_FILE))?);
            }
        }
        for (metric, values) in [("nmi", nmis), ("boundary_f1", f1s), ("skills", ks)] {
            metrics.push(MetricReport {
                name: format!("{}/{metric}", arm.name),
                value: mean(&values),
                half_width: None,
                support,
                per_seed: values,
            });
        }
        for (e, sel) in arm.evals.iter().enumerate() {
            metrics.push(success_metric(&arm.name, sel, rollouts.iter().map(|r| &r[e]))?);
        }
    }
    let file = MetricsFile {
        preset: cfg.preset.name().into(),
        seeds: cfg.eval.seeds.clone(),
        metrics,
    };
    fs::create_dir_all(&cfg.paths.artifact_dir).map_err(io(&cfg.paths.artifact_dir))?;
    write_json(cfg.paths.artifact_dir.join(METRICS_FILE), &file)?;
    write_atomic(cfg.paths.artifact_dir.join(METRICS_CSV), &metrics_csv(&file)?)?;
    for m in &file.metrics {
        match m.half_width {
            Some(h) => eprintln!("{:<40} {:.4} ± {:.4}", m.name, m.value, h),
            None => eprintln!("{:<40} {:.4}", m.name, m.value),
        }
    }
    Ok(())
}

pub fn success_name(arm: &str, sel: &Selection) -> String {
    format!("{arm}/success/{}", sel.label())
}

fn success_metric<'a>(arm: &str, sel: &Selection, per_seed: impl Iterator<Item = &'a EvalRollouts>) -> Result<MetricReport> {
    let mut pooled = Vec::new();
    let mut rates = Vec::new();
    for r in per_seed {
        let results: Vec<buds_core::env::RolloutResult> = r
            .episodes
            .iter()
            .map(|e| buds_core::env::RolloutResult {
                success: e.success,
                steps: e.steps,
                skill_trace: Vec::new(),
            })
            .collect();
        rates.push(success_rate("seed", &results)?.value);
        pooled.extend(results);
    }
    let mut report = success_rate(&success_name(arm, sel), &pooled)?;
    report.value = mean(&rates);
    report.per_seed = rates;
    Ok(report)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    name: &'a str,
    arm: &'a str,
    metric: &'a str,
    target: &'a str,
    value: f64,
    half_width: Option<f64>,
    support: usize,
    per_seed: String,
}

fn metrics_csv(file: &MetricsFile) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in &file.metrics {
        let mut parts = m.name.splitn(3, '/');
        let arm = parts.next().unwrap_or("");
        let metric = parts.next().unwrap_or("");
        let target = parts.next().unwrap_or("");
        let per_seed: Vec<String> = m.per_seed.iter().map(|v| v.to_string()).collect();
        w.serialize(CsvRow {
            name: &m.name,
            arm,
            metric,
            target,
            value: m.value,
            half_width: m.half_width,
            support: m.support,
            per_seed: per_seed.join(";"),
        })
        .map_err(|e| Error::Format(format!("writing csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("writing csv: {e}")).into())
}

/// Reads `metrics.json` from the artifact directory.
pub fn read_metrics(cfg: &PipelineConfig) -> Result<MetricsFile> {
    require(&cfg.paths.artifact_dir, METRICS_FILE, Stage::Eval)?;
    Ok(read_json(cfg.paths.artifact_dir.join(METRICS_FILE))?)
}
