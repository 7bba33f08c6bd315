//! Adjacent-merge hierarchies over latent sequences and segment extraction.
//!
//! A demonstration is cut into fixed-width leaf windows. The two adjacent
//! segments whose mean latents are closest (ℓ2) are merged, repeatedly, until
//! a single segment covers the demonstration. Temporal segments are read off
//! the resulting binary tree by a breadth-first refinement from the root.

use std::collections::VecDeque;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Leaf window width W.
    pub leaf_window: usize,
    /// A node is split only if both children are at least this long.
    pub min_segment_len: usize,
    /// Refinement stops once the frontier holds this many segments.
    pub min_frontier_count: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            leaf_window: 10,
            min_segment_len: 30,
            min_frontier_count: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.leaf_window == 0 {
            return Err("leaf_window must be >= 1".into());
        }
        if self.min_segment_len < self.leaf_window {
            return Err("min_segment_len must be >= leaf_window".into());
        }
        if self.min_frontier_count == 0 {
            return Err("min_frontier_count must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemporalSegment {
    pub traj_id: String,
    pub start: usize,
    pub end: usize,
}

impl TemporalSegment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub start: usize,
    pub end: usize,
    pub children: Option<(usize, usize)>,
    /// Mean latent over `[start, end)`.
    pub feature: Vec<f64>,
}

impl TreeNode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Binary merge hierarchy of one demonstration. Leaves come first in
/// `nodes`, in temporal order; each merge appends one internal node.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTree {
    pub traj_id: String,
    pub nodes: Vec<TreeNode>,
    pub root: usize,
    pub num_leaves: usize,
}

impl MergeTree {
    pub fn len(&self) -> usize {
        self.nodes[self.root].end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaves(&self) -> &[TreeNode] {
        &self.nodes[..self.num_leaves]
    }

    /// Internal nodes in merge order.
    pub fn merges(&self) -> &[TreeNode] {
        &self.nodes[self.num_leaves..]
    }
}

/// Leaf windows of width `window` tiling `[0, len)`. A trailing remainder
/// shorter than the window is folded into the last leaf.
pub fn init_leaves(traj_id: &str, len: usize, window: usize) -> Vec<TemporalSegment> {
    assert!(window >= 1, "leaf window must be positive");
    if len == 0 {
        return Vec::new();
    }
    let count = (len / window).max(1);
    (0..count)
        .map(|i| TemporalSegment {
            traj_id: traj_id.to_owned(),
            start: i * window,
            end: if i + 1 == count { len } else { (i + 1) * window },
        })
        .collect()
}

fn mean_rows(latents: ArrayView2<f64>, start: usize, end: usize) -> Vec<f64> {
    let n = (end - start) as f64;
    (0..latents.ncols())
        .map(|j| (start..end).map(|t| latents[[t, j]]).sum::<f64>() / n)
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy adjacent merging on mean-latent ℓ2 distance. Ties go to the
/// leftmost pair.
pub fn build_hierarchy(traj_id: &str, latents: ArrayView2<f64>, cfg: &SegConfig) -> Result<MergeTree> {
    if latents.nrows() == 0 {
        return Err(Error::EmptyInput("latent sequence has no states"));
    }
    let leaves = init_leaves(traj_id, latents.nrows(), cfg.leaf_window);
    let mut nodes: Vec<TreeNode> = leaves
        .iter()
        .map(|s| TreeNode {
            start: s.start,
            end: s.end,
            children: None,
            feature: mean_rows(latents, s.start, s.end),
        })
        .collect();
    let num_leaves = nodes.len();
    let mut active: Vec<usize> = (0..num_leaves).collect();

    while active.len() > 1 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..active.len() - 1 {
            let d = sq_dist(&nodes[active[i]].feature, &nodes[active[i + 1]].feature);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let (l, r) = (active[best], active[best + 1]);
        let (ln, rn) = (nodes[l].len() as f64, nodes[r].len() as f64);
        let feature = nodes[l]
            .feature
            .iter()
            .zip(&nodes[r].feature)
            .map(|(a, b)| (a * ln + b * rn) / (ln + rn))
            .collect();
        nodes.push(TreeNode {
            start: nodes[l].start,
            end: nodes[r].end,
            children: Some((l, r)),
            feature,
        });
        active[best] = nodes.len() - 1;
        active.remove(best + 1);
    }

    Ok(MergeTree {
        traj_id: traj_id.to_owned(),
        root: active[0],
        nodes,
        num_leaves,
    })
}

/// Breadth-first refinement from the root. A node is replaced by its two
/// children only when both are at least `min_segment_len` long; refinement
/// stops once the frontier holds `min_frontier_count` segments or nothing
/// more can be split. Returns the frontier in temporal order.
pub fn extract_segments(tree: &MergeTree, cfg: &SegConfig) -> Vec<TemporalSegment> {
    let mut frontier = vec![tree.root];
    let mut queue = VecDeque::from([tree.root]);
    while frontier.len() < cfg.min_frontier_count {
        let Some(id) = queue.pop_front() else { break };
        let Some((l, r)) = tree.nodes[id].children else { continue };
        if tree.nodes[l].len() < cfg.min_segment_len || tree.nodes[r].len() < cfg.min_segment_len {
            continue;
        }
        let pos = frontier.iter().position(|&f| f == id).expect("queued nodes are on the frontier");
        frontier.splice(pos..=pos, [l, r]);
        queue.push_back(l);
        queue.push_back(r);
    }
    let mut segments: Vec<TemporalSegment> = frontier
        .into_iter()
        .map(|id| TemporalSegment {
            traj_id: tree.traj_id.clone(),
            start: tree.nodes[id].start,
            end: tree.nodes[id].end,
        })
        .collect();
    segments.sort_by_key(|s| s.start);
    segments
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn windows(features: &[[f64; 2]], width: usize) -> Array2<f64> {
        Array2::from_shape_fn((features.len() * width, 2), |(t, j)| features[t / width][j])
    }

    #[test]
    fn leaves_tile_with_remainder_fold() {
        let l = init_leaves("d", 100, 10);
        assert_eq!(l.len(), 10);
        assert!(l.iter().all(|s| s.len() == 10));

        let l = init_leaves("d", 95, 10);
        assert_eq!(l.len(), 9);
        assert_eq!((l[8].start, l[8].end), (80, 95));

        let l = init_leaves("d", 7, 10);
        assert_eq!(l.len(), 1);
        assert_eq!((l[0].start, l[0].end), (0, 7));
    }

    #[test]
    fn merges_nearest_adjacent_pairs_first() {
        let feats = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
        let latents = windows(&feats, 10);
        let tree = build_hierarchy("d", latents.view(), &SegConfig::default()).unwrap();

        // Brute force: every adjacent distance, smallest pair merged first.
        let d: Vec<f64> = feats.windows(2).map(|w| sq_dist(&w[0], &w[1])).collect();
        assert!(d[0] < d[1] && d[2] < d[1]);

        let merges = tree.merges();
        assert_eq!(merges.len(), 3);
        let mut first_two: Vec<_> = merges[..2].iter().map(|n| n.children.unwrap()).collect();
        first_two.sort();
        assert_eq!(first_two, vec![(0, 1), (2, 3)]);
        assert_eq!(tree.root, 6);
        assert_eq!(tree.nodes[6].children, Some((4, 5)));
    }

    #[test]
    fn constant_sequence_chains_left() {
        let latents = Array2::<f64>::ones((50, 3));
        let tree = build_hierarchy("d", latents.view(), &SegConfig::default()).unwrap();
        // Every merge takes the leftmost pair: ((((0,1),2),3),4).
        let expected = [(0, 1), (5, 2), (6, 3), (7, 4)];
        let got: Vec<_> = tree.merges().iter().map(|n| n.children.unwrap()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn single_leaf_tree() {
        let latents = Array2::<f64>::zeros((7, 2));
        let tree = build_hierarchy("d", latents.view(), &SegConfig::default()).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(tree.merges().is_empty());
        assert_eq!(tree.root, 0);
    }

    #[test]
    fn empty_latents_rejected() {
        let latents = Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            build_hierarchy("d", latents.view(), &SegConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    fn two_halves() -> MergeTree {
        // Leaves 0,1 alike and 2,3 alike: root children span 20 / 20.
        let latents = windows(&[[0.0, 0.0], [0.2, 0.0], [4.0, 0.0], [4.2, 0.0]], 10);
        build_hierarchy("d", latents.view(), &SegConfig::default()).unwrap()
    }

    #[test]
    fn bfs_splits_root_into_halves() {
        let tree = two_halves();
        let cfg = SegConfig {
            leaf_window: 10,
            min_segment_len: 10,
            min_frontier_count: 2,
        };
        let segs = extract_segments(&tree, &cfg);
        let spans: Vec<_> = segs.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 20), (20, 40)]);
    }

    #[test]
    fn bfs_frontier_of_one_is_root() {
        let tree = two_halves();
        let cfg = SegConfig {
            leaf_window: 10,
            min_segment_len: 10,
            min_frontier_count: 1,
        };
        let spans: Vec<_> = extract_segments(&tree, &cfg).iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 40)]);
    }

    #[test]
    fn bfs_with_long_minimum_keeps_root() {
        let tree = two_halves();
        let cfg = SegConfig {
            leaf_window: 10,
            min_segment_len: 21,
            min_frontier_count: 3,
        };
        let spans: Vec<_> = extract_segments(&tree, &cfg).iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 40)]);
    }

    #[test]
    fn bfs_skips_unsplittable_branch() {
        // The outlier leaf is merged last, so the root splits 30 / 10.
        let latents = windows(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.0], [9.0, 0.0]], 10);
        let tree = build_hierarchy("d", latents.view(), &SegConfig::default()).unwrap();
        let cfg = SegConfig {
            leaf_window: 10,
            min_segment_len: 10,
            min_frontier_count: 4,
        };
        let spans: Vec<_> = extract_segments(&tree, &cfg).iter().map(|s| (s.start, s.end)).collect();
        // The right child is a leaf; the left one splits down to leaves.
        assert_eq!(spans, vec![(0, 10), (10, 20), (20, 30), (30, 40)]);
    }
}
