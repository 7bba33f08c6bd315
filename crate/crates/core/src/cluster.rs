//! Grouping temporal segments into skills.
//!
//! Each segment is described by the latents at its first state, a few evenly
//! spaced middle states and its last state. Descriptors are clustered with
//! normalized spectral clustering on an RBF affinity; clusters whose segments
//! are too short on average are then folded into the temporally adjacent
//! cluster they most often border.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DemoSet;
use crate::error::{Error, Result};
use crate::seg::TemporalSegment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// γ = 1 / (2 · median²) over pairwise descriptor distances.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub max_clusters: usize,
    pub mid_keyframes: usize,
    pub rbf_gamma: GammaMode,
    pub min_avg_skill_len: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            max_clusters: 6,
            mid_keyframes: 1,
            rbf_gamma: GammaMode::MedianHeuristic,
            min_avg_skill_len: 20,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.max_clusters == 0 {
            return Err("max_clusters must be >= 1".into());
        }
        if self.mid_keyframes == 0 {
            return Err("mid_keyframes must be >= 1".into());
        }
        if self.kmeans_restarts == 0 {
            return Err("kmeans_restarts must be >= 1".into());
        }
        if let GammaMode::Fixed(g) = self.rbf_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err("rbf_gamma must be a positive finite value".into());
            }
        }
        Ok(())
    }
}

/// State indices sampled for a segment descriptor: first, `n_mid` evenly
/// spaced interior points (rounded half up), last.
pub fn keyframe_indices(seg: &TemporalSegment, n_mid: usize) -> Vec<usize> {
    let span = seg.len() - 1;
    let parts = n_mid + 1;
    let mut idx = Vec::with_capacity(n_mid + 2);
    idx.push(seg.start);
    // floor(j·span/parts + 1/2) in exact integer arithmetic
    idx.extend((1..=n_mid).map(|j| seg.start + (2 * j * span + parts) / (2 * parts)));
    idx.push(seg.end - 1);
    idx
}

pub fn segment_descriptor(seg: &TemporalSegment, latents: ArrayView2<f64>, n_mid: usize) -> Vec<f64> {
    assert!(!seg.is_empty(), "segment must cover at least one state");
    keyframe_indices(seg, n_mid)
        .into_iter()
        .flat_map(|t| latents.row(t).to_vec())
        .collect()
}

fn pairwise_sq_dists(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Bandwidth from the median pairwise distance; 1 when every point coincides.
pub fn median_gamma(x: ArrayView2<f64>) -> f64 {
    let d = pairwise_sq_dists(x);
    let n = x.nrows();
    let mut dists: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]].sqrt())
        .collect();
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median > 0.0 {
        1.0 / (2.0 * median * median)
    } else {
        1.0
    }
}

/// `A_ij = exp(−γ‖x_i − x_j‖²)`.
pub fn rbf_affinity(x: ArrayView2<f64>, gamma: f64) -> Array2<f64> {
    pairwise_sq_dists(x).mapv(|d| (-gamma * d).exp())
}

/// `L = I − D^{-1/2} A D^{-1/2}`. Fails if some point has no affinity to any
/// other point.
pub fn normalized_laplacian(affinity: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = affinity.nrows();
    for i in 0..n {
        let off_diag: f64 = (0..n).filter(|&j| j != i).map(|j| affinity[[i, j]]).sum();
        if n > 1 && !(off_diag > 0.0) {
            return Err(Error::DegenerateAffinity { row: i });
        }
    }
    let inv_sqrt: Vec<f64> = affinity
        .sum_axis(Axis(1))
        .iter()
        .map(|d| 1.0 / d.sqrt())
        .collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - inv_sqrt[i] * affinity[[i, j]] * inv_sqrt[j]
    }))
}

/// Eigenpairs of a symmetric matrix, ascending by eigenvalue.
pub fn sorted_eigen(m: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = m.nrows();
    let mat = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]]));
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from distance-weighted (k-means++) seeds; best of
/// `restarts` by inertia. Labels are renumbered by first appearance.
pub fn kmeans(x: ArrayView2<f64>, k: usize, restarts: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = x.nrows();
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(x, k, rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.unwrap();
    best.labels = canonical_labels(&best.labels);
    best
}

fn kmeans_once(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = x.nrows();
    let mut centers = Array2::<f64>::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.gen_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sq(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            closest[i] = closest[i].min(sq(x.row(i), centers.row(c)));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq(x.row(i), centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(labels[i]).scaled_add(1.0, &x.row(i));
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq(x.row(a), centers.row(labels[a]))
                            .total_cmp(&sq(x.row(b), centers.row(labels[b])))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centers.row_mut(c).assign(&x.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| sq(x.row(i), centers.row(labels[i]))).sum();
    KMeansResult { labels, inertia }
}

/// Renumber labels in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Normalized spectral clustering of the rows of `descriptors` into at most
/// `k` groups.
pub fn spectral_cluster(descriptors: ArrayView2<f64>, k: usize, cfg: &ClusterConfig) -> Result<Vec<usize>> {
    let n = descriptors.nrows();
    if n < k || n == 0 {
        return Err(Error::TooFewSegments {
            segments: n,
            clusters: k,
        });
    }
    let gamma = match cfg.rbf_gamma {
        GammaMode::MedianHeuristic => median_gamma(descriptors),
        GammaMode::Fixed(g) => g,
    };
    let affinity = rbf_affinity(descriptors, gamma);
    let laplacian = normalized_laplacian(affinity.view())?;
    let (_, vectors) = sorted_eigen(laplacian.view());
    let mut embed = vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut row in embed.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(kmeans(embed.view(), k, cfg.kmeans_restarts, &mut rng).labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillAssignment {
    pub traj_id: String,
    pub start: usize,
    pub end: usize,
    pub skill: usize,
}

impl SkillAssignment {
    pub fn segment(&self) -> TemporalSegment {
        TemporalSegment {
            traj_id: self.traj_id.clone(),
            start: self.start,
            end: self.end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Skill label of every extracted segment; serialized as `skills.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPartition {
    #[serde(rename = "K")]
    pub k: usize,
    pub assignments: Vec<SkillAssignment>,
}

impl SkillPartition {
    pub fn new(segments: &[TemporalSegment], labels: &[usize]) -> Self {
        assert_eq!(segments.len(), labels.len());
        let k = labels.iter().max().map_or(0, |m| m + 1);
        SkillPartition {
            k,
            assignments: segments
                .iter()
                .zip(labels)
                .map(|(s, &skill)| SkillAssignment {
                    traj_id: s.traj_id.clone(),
                    start: s.start,
                    end: s.end,
                    skill,
                })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.assignments.iter().map(|a| a.skill).collect()
    }

    /// Segment groups as sorted sets, independent of the label numbering.
    pub fn groups(&self) -> Vec<Vec<TemporalSegment>> {
        let mut by_skill: BTreeMap<usize, Vec<TemporalSegment>> = BTreeMap::new();
        for a in &self.assignments {
            by_skill.entry(a.skill).or_default().push(a.segment());
        }
        let mut groups: Vec<Vec<TemporalSegment>> = by_skill
            .into_values()
            .map(|mut g| {
                g.sort();
                g
            })
            .collect();
        groups.sort();
        groups
    }

    /// Assignments of one trajectory, in temporal order.
    pub fn trajectory(&self, traj_id: &str) -> Vec<&SkillAssignment> {
        let mut out: Vec<_> = self.assignments.iter().filter(|a| a.traj_id == traj_id).collect();
        out.sort_by_key(|a| a.start);
        out
    }

    /// Per-frame skill labels for a trajectory of length `len`.
    pub fn paint_frames(&self, traj_id: &str, len: usize) -> Vec<usize> {
        let mut frames = vec![usize::MAX; len];
        for a in self.trajectory(traj_id) {
            for f in &mut frames[a.start..a.end.min(len)] {
                *f = a.skill;
            }
        }
        frames
    }

    pub fn average_lengths(&self) -> Vec<f64> {
        let mut total = vec![0usize; self.k];
        let mut count = vec![0usize; self.k];
        for a in &self.assignments {
            total[a.skill] += a.len();
            count[a.skill] += 1;
        }
        total
            .iter()
            .zip(&count)
            .map(|(&t, &c)| if c == 0 { 0.0 } else { t as f64 / c as f64 })
            .collect()
    }
}

/// How often each pair of clusters borders each other in time.
fn adjacency_counts(partition: &SkillPartition) -> Vec<Vec<usize>> {
    let mut adj = vec![vec![0usize; partition.k]; partition.k];
    let mut by_traj: BTreeMap<&str, Vec<&SkillAssignment>> = BTreeMap::new();
    for a in &partition.assignments {
        by_traj.entry(a.traj_id.as_str()).or_default().push(a);
    }
    for segs in by_traj.values_mut() {
        segs.sort_by_key(|a| a.start);
        for w in segs.windows(2) {
            let (a, b) = (w[0].skill, w[1].skill);
            if a != b {
                adj[a][b] += 1;
                adj[b][a] += 1;
            }
        }
    }
    adj
}

/// Dissolves clusters whose average segment length is below `min_avg_len`
/// into the cluster they most often precede or follow. The shortest
/// eligible cluster goes first; ties on adjacency prefer the larger target
/// cluster, then the lower id. Clusters with no temporal neighbour stay.
pub fn merge_short_clusters(partition: &SkillPartition, min_avg_len: usize) -> SkillPartition {
    let mut current = partition.clone();
    loop {
        let avg = current.average_lengths();
        let mut sizes = vec![0usize; current.k];
        for a in &current.assignments {
            sizes[a.skill] += 1;
        }
        let mut short: Vec<usize> = (0..current.k)
            .filter(|&c| sizes[c] > 0 && avg[c] < min_avg_len as f64)
            .collect();
        short.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));

        let adj = adjacency_counts(&current);
        let merge = short.into_iter().find_map(|c| {
            (0..current.k)
                .filter(|&x| x != c && adj[c][x] > 0)
                .max_by(|&a, &b| {
                    adj[c][a]
                        .cmp(&adj[c][b])
                        .then(sizes[a].cmp(&sizes[b]))
                        .then(b.cmp(&a))
                })
                .map(|target| (c, target))
        });
        let Some((from, into)) = merge else { break };
        for a in &mut current.assignments {
            if a.skill == from {
                a.skill = into;
            }
        }
        current = reindex(current);
    }
    current
}

/// Dense ids, preserving the relative order of the surviving ones.
fn reindex(mut partition: SkillPartition) -> SkillPartition {
    let mut used: Vec<usize> = partition.assignments.iter().map(|a| a.skill).collect();
    used.sort_unstable();
    used.dedup();
    let map: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    for a in &mut partition.assignments {
        a.skill = map[&a.skill];
    }
    partition.k = used.len();
    partition
}

/// Goal-conditioned imitation tuples `(s_t, a_t, s_{g_t})` of one skill.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillDataset {
    pub skill: usize,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub goals: Array2<f64>,
    /// `(trajectory id, t, g_t)` per row.
    pub index: Vec<(String, usize, usize)>,
}

impl SkillDataset {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Subgoal index: `horizon` steps ahead, clamped to the last state of the
/// segment.
pub fn subgoal_index(t: usize, horizon: usize, segment_end: usize) -> usize {
    (t + horizon).min(segment_end - 1)
}

pub fn build_skill_datasets(set: &DemoSet, partition: &SkillPartition, horizon: usize) -> Result<Vec<SkillDataset>> {
    let state_dim = set.state_dim();
    let mut rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<(String, usize, usize)>)> =
        vec![Default::default(); partition.k];
    let mut features = BTreeMap::new();
    for a in &partition.assignments {
        let traj = set.trajectory(&a.traj_id).ok_or_else(|| Error::Unknown {
            kind: "trajectory",
            name: a.traj_id.clone(),
        })?;
        if a.end > traj.len || a.start >= a.end {
            return Err(Error::shape(
                format!("segment within [0, {})", traj.len),
                format!("[{}, {})", a.start, a.end),
            ));
        }
        let (states, actions) = features
            .entry(a.traj_id.clone())
            .or_insert_with(|| (set.state_features(traj), set.actions(traj)));
        let (s, act, g, idx) = &mut rows[a.skill];
        for t in a.start..a.end {
            let goal = subgoal_index(t, horizon, a.end);
            s.extend(states.row(t).iter());
            act.extend(actions.row(t).iter());
            g.extend(states.row(goal).iter());
            idx.push((a.traj_id.clone(), t, goal));
        }
    }
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(skill, (s, act, g, index))| {
            let n = index.len();
            SkillDataset {
                skill,
                states: Array2::from_shape_vec((n, state_dim), s).expect("state rows"),
                actions: Array2::from_shape_vec((n, set.action_dim), act).expect("action rows"),
                goals: Array2::from_shape_vec((n, state_dim), g).expect("goal rows"),
                index,
            }
        })
        .collect())
}
