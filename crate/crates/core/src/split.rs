//! Per-class train/validation split over superpixel nodes.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Labeled,
    Unlabeled,
}

/// One flag per node; every node is assigned exactly one role.
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub roles: Vec<NodeRole>,
}

impl SplitAssignment {
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.indices_of(NodeRole::Labeled)
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        self.indices_of(NodeRole::Unlabeled)
    }

    fn indices_of(&self, role: NodeRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }

    /// Append `n` labeled entries (for synthetic nodes joining the
    /// training set).
    pub fn extend_labeled(&mut self, n: usize) {
        self.roles.extend(std::iter::repeat(NodeRole::Labeled).take(n));
    }
}

/// Labeled count for one class: round-half-up(ratio * n), at least 1,
/// at most n.
pub fn labeled_count(class_size: usize, ratio: f64) -> usize {
    let raw = (ratio * class_size as f64 + 0.5).floor() as usize;
    raw.max(1).min(class_size)
}

/// Assign each node to the labeled or unlabeled pool, per class, uniformly
/// under the seed. Classes absent from `node_labels` are skipped with a
/// warning.
pub fn split_superpixels(node_labels: &[u16], ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::contract(
            "split_superpixels",
            format!("ratio must be in (0,1), got {ratio}"),
        ));
    }
    if node_labels.is_empty() {
        return Err(Error::contract("split_superpixels", "no nodes to split"));
    }
    let max_class = *node_labels.iter().max().unwrap();
    let mut roles = vec![NodeRole::Unlabeled; node_labels.len()];
    for class in 1..=max_class {
        let mut members: Vec<usize> = node_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            log::warn!("split: class {class} has no superpixels, skipping");
            continue;
        }
        let take = labeled_count(members.len(), ratio);
        let mut class_rng = rng::stream(seed, &format!("split-class-{class}"));
        members.shuffle(&mut class_rng);
        for &node in members.iter().take(take) {
            roles[node] = NodeRole::Labeled;
        }
    }
    Ok(SplitAssignment { roles })
}
