//! Superpixel graph: node features, majority-vote labels, adjacency, and the
//! symmetric renormalization used by every graph convolution.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hsi::HsiCube;
use crate::matrix::Matrix;
use crate::slic::Segmentation;

/// Node-level view of a segmented cube.
///
/// Feature rows are `(t || s)`: the per-band mean spectrum of the member
/// pixels followed by the sum of its squares. Background superpixels
/// (majority label 0) are dropped; `members` is empty for nodes appended by
/// augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelGraph {
    pub features: Matrix,
    pub adjacency: Matrix,
    pub labels: Vec<u16>,
    pub members: Vec<Vec<usize>>,
}

impl SuperpixelGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Spectral dimension d (feature width minus the s column).
    pub fn spectral_dim(&self) -> usize {
        self.features.cols() - 1
    }

    pub fn num_classes(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Node count per class id (index 0 unused).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; usize::from(self.num_classes()) + 1];
        for &l in &self.labels {
            counts[usize::from(l)] += 1;
        }
        counts
    }
}

/// Majority label over member pixels; ties break toward the smaller class
/// id, and background (0) participates like any other label.
fn majority_label(labels: &[u16], members: &[usize]) -> u16 {
    let mut counts: Vec<(u16, usize)> = Vec::new();
    for &p in members {
        let l = labels[p];
        match counts.iter_mut().find(|(cl, _)| *cl == l) {
            Some((_, n)) => *n += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .unwrap_or(0)
}

/// Build the node graph for a segmentation: mean-spectrum features, majority
/// labels, background filtering, and 4-neighborhood adjacency.
pub fn build_graph(seg: &Segmentation, cube: &HsiCube) -> Result<SuperpixelGraph> {
    if seg.count == 0 || seg.assignments.is_empty() {
        return Err(Error::contract("build_graph", "empty segmentation"));
    }
    if seg.height != cube.height || seg.width != cube.width {
        return Err(Error::Dimension {
            op: "build_graph",
            lhs: format!("{}x{}", seg.height, seg.width),
            rhs: format!("{}x{}", cube.height, cube.width),
        });
    }

    let all_members = seg.members();
    let bands = cube.bands;

    // Keep non-background superpixels, remapped to dense node ids.
    let mut node_of_segment = vec![usize::MAX; seg.count];
    let mut labels = Vec::new();
    let mut members = Vec::new();
    for (sid, m) in all_members.iter().enumerate() {
        let label = majority_label(&cube.labels, m);
        if label == 0 {
            continue;
        }
        node_of_segment[sid] = labels.len();
        labels.push(label);
        members.push(m.clone());
    }
    if labels.is_empty() {
        return Err(Error::contract("build_graph", "all superpixels are background"));
    }

    let n = labels.len();
    let mut features = Matrix::zeros(n, bands + 1);
    for (node, m) in members.iter().enumerate() {
        let inv = 1.0 / m.len() as f64;
        let mut s = 0.0;
        for b in 0..bands {
            let mean: f64 = m.iter().map(|&p| f64::from(cube.spectrum(p)[b])).sum::<f64>() * inv;
            features.set(node, b, mean);
            s += mean * mean;
        }
        features.set(node, bands, s);
    }

    // A[i][j] = 1 iff some pixel of i is 4-adjacent to some pixel of j.
    let mut adjacency = Matrix::zeros(n, n);
    let (h, w) = (seg.height, seg.width);
    for p in 0..h * w {
        let (y, x) = (p / w, p % w);
        let a = seg.assignments[p];
        let mut link = |q: usize| {
            let b = seg.assignments[q];
            if a != b {
                let (na, nb) = (node_of_segment[a], node_of_segment[b]);
                if na != usize::MAX && nb != usize::MAX {
                    adjacency.set(na, nb, 1.0);
                    adjacency.set(nb, na, 1.0);
                }
            }
        };
        if x + 1 < w {
            link(p + 1);
        }
        if y + 1 < h {
            link(p + w);
        }
    }

    Ok(SuperpixelGraph {
        features,
        adjacency,
        labels,
        members,
    })
}

/// Symmetric renormalization: with self-loops added, scale by the inverse
/// square-root degree on both sides.
pub fn renormalize(adjacency: &Matrix) -> Result<Matrix> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::Dimension {
            op: "renormalize",
            lhs: format!("{}x{}", adjacency.rows(), adjacency.cols()),
            rhs: "square".into(),
        });
    }
    for i in 0..n {
        if adjacency.get(i, i) != 0.0 {
            return Err(Error::contract("renormalize", format!("nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = adjacency.get(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(Error::contract("renormalize", format!("non-binary entry {v} at ({i},{j})")));
            }
            if v != adjacency.get(j, i) {
                return Err(Error::contract("renormalize", format!("asymmetry at ({i},{j})")));
            }
        }
    }

    let mut degrees = vec![1.0f64; n]; // self-loop contributes 1
    for i in 0..n {
        for j in 0..n {
            degrees[i] += adjacency.get(i, j);
        }
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a_hat = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if a_hat != 0.0 {
                out.set(i, j, inv_sqrt[i] * a_hat * inv_sqrt[j]);
            }
        }
    }
    Ok(out)
}

/// Inspection dump: one node per line `id label t1..td s`, then one edge per
/// line `i j` (each undirected edge once, i < j).
pub fn export_text(graph: &SuperpixelGraph) -> String {
    let mut out = String::new();
    let n = graph.num_nodes();
    for i in 0..n {
        write!(out, "{} {}", i, graph.labels[i]).unwrap();
        for v in graph.features.row(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if graph.adjacency.get(i, j) != 0.0 {
                writeln!(out, "{i} {j}").unwrap();
            }
        }
    }
    out
}
