//! The node-classification network: a deterministic feature-extraction block
//! (two dense layers with ReLU), dropout, then two graph-convolution layers
//! with Gaussian-distributed weights. Each graph layer mixes node features
//! through the cached renormalized adjacency before adding its sampled bias.
//!
//! Output rows are log-probabilities over classes.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::bayes::BayesianLinear;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::tape::{NodeId, Tape};

/// Plain dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Matrix,
}

impl DenseLayer {
    fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        DenseLayer {
            w: rng::random_matrix(rng, inputs, outputs, bound),
            b: Matrix::zeros(1, outputs),
        }
    }
}

/// Layer widths: input = feature width (d+1), output = class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct BlgcnModel {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub dropout: f64,
    pub bgc1: BayesianLinear,
    pub bgc2: BayesianLinear,
    /// Cached renormalized adjacency (identity for the no-graph ablation).
    pub a_hat: Matrix,
}

/// All random draws for one forward pass. Train mode carries an inverted
/// dropout mask (already scaled by 1/(1-p)); eval mode only weight noise.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub dropout_mask: Option<Matrix>,
    pub eps1_w: Matrix,
    pub eps1_b: Matrix,
    pub eps2_w: Matrix,
    pub eps2_b: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape nodes of one recorded training step.
pub struct TrainGraph {
    pub log_probs: NodeId,
    pub log_q: NodeId,
    pub log_p: NodeId,
    /// Parameter leaves in [`BlgcnModel::param_order`] order.
    pub params: Vec<NodeId>,
}

/// Monte-Carlo prediction: averaged probabilities plus the accuracy of each
/// individual run when an evaluation set is supplied.
#[derive(Debug, Clone)]
pub struct McPrediction {
    pub mean_probs: Matrix,
    pub per_run_accuracy: Vec<f64>,
}

impl McPrediction {
    /// Per-node argmax class (1-based).
    pub fn predicted_labels(&self) -> Vec<u16> {
        argmax_labels(&self.mean_probs)
    }
}

pub fn argmax_labels(probs: &Matrix) -> Vec<u16> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            (best + 1) as u16
        })
        .collect()
}

impl BlgcnModel {
    pub fn new(dims: ModelDims, dropout: f64, a_hat: Matrix, seed: u64) -> Result<Self> {
        if a_hat.rows() != a_hat.cols() {
            return Err(Error::contract("BlgcnModel::new", "adjacency must be square"));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::contract(
                "BlgcnModel::new",
                format!("dropout must be in [0,1), got {dropout}"),
            ));
        }
        Ok(BlgcnModel {
            fc1: DenseLayer::new(dims.input, dims.hidden1, &mut rng::stream(seed, "fc1")),
            fc2: DenseLayer::new(dims.hidden1, dims.hidden1, &mut rng::stream(seed, "fc2")),
            dropout,
            bgc1: BayesianLinear::new(dims.hidden1, dims.hidden2, &mut rng::stream(seed, "bgc1")),
            bgc2: BayesianLinear::new(dims.hidden2, dims.classes, &mut rng::stream(seed, "bgc2")),
            a_hat,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.fc1.w.rows(),
            hidden1: self.fc1.w.cols(),
            hidden2: self.bgc1.outputs(),
            classes: self.bgc2.outputs(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bgc2.outputs()
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.fc1.w.rows() {
            return Err(Error::Dimension {
                op: "forward",
                lhs: format!("{}x{}", features.rows(), features.cols()),
                rhs: format!("{}x{}", self.fc1.w.rows(), self.fc1.w.cols()),
            });
        }
        if features.rows() != self.a_hat.rows() {
            return Err(Error::contract(
                "forward",
                format!(
                    "{} feature rows vs {}x{} cached adjacency",
                    features.rows(),
                    self.a_hat.rows(),
                    self.a_hat.cols()
                ),
            ));
        }
        Ok(())
    }

    /// Draw all noise for one pass. Train mode includes the inverted
    /// dropout mask.
    pub fn draw_noise(&self, n_nodes: usize, mode: Mode, rng: &mut impl Rng) -> StepNoise {
        let dropout_mask = if mode == Mode::Train && self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let mut mask = Matrix::zeros(n_nodes, self.fc2.w.cols());
            for v in mask.data_mut() {
                *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
            Some(mask)
        } else {
            None
        };
        StepNoise {
            dropout_mask,
            eps1_w: rng::normal_matrix(rng, self.bgc1.inputs(), self.bgc1.outputs(), 1.0),
            eps1_b: rng::normal_matrix(rng, 1, self.bgc1.outputs(), 1.0),
            eps2_w: rng::normal_matrix(rng, self.bgc2.inputs(), self.bgc2.outputs(), 1.0),
            eps2_b: rng::normal_matrix(rng, 1, self.bgc2.outputs(), 1.0),
        }
    }

    /// One stochastic forward pass: n x C log-probabilities.
    pub fn forward(&self, features: &Matrix, rng: &mut impl Rng, mode: Mode) -> Result<Matrix> {
        let noise = self.draw_noise(features.rows(), mode, rng);
        self.forward_with_noise(features, &noise)
    }

    /// Forward pass with fixed noise (shared by eval and by the recorded
    /// training graph, which reproduces it bit for bit).
    pub fn forward_with_noise(&self, features: &Matrix, noise: &StepNoise) -> Result<Matrix> {
        self.check_features(features)?;
        let n = features.rows();
        let mut h = features
            .matmul(&self.fc1.w)?
            .add(&self.fc1.b.broadcast_rows(n)?)?
            .relu();
        h = h
            .matmul(&self.fc2.w)?
            .add(&self.fc2.b.broadcast_rows(n)?)?
            .relu();
        if let Some(mask) = &noise.dropout_mask {
            h = h.hadamard(mask)?;
        }
        let s1 = self.bgc1.sample_with_eps(noise.eps1_w.clone(), noise.eps1_b.clone());
        let s2 = self.bgc2.sample_with_eps(noise.eps2_w.clone(), noise.eps2_b.clone());
        let z1 = self
            .a_hat
            .matmul(&h.matmul(&s1.w)?)?
            .add(&s1.b.broadcast_rows(n)?)?
            .relu();
        let z2 = self
            .a_hat
            .matmul(&z1.matmul(&s2.w)?)?
            .add(&s2.b.broadcast_rows(n)?)?;
        Ok(z2.log_softmax_rows())
    }

    /// Record one training pass on a tape, returning the output node, the
    /// density sums, and every parameter leaf.
    pub fn build_train_graph(&self, tape: &Tape, features: &Matrix, noise: &StepNoise) -> Result<TrainGraph> {
        self.check_features(features)?;
        let n = features.rows();
        let x = tape.constant(features.clone());
        let a = tape.constant(self.a_hat.clone());

        let fc1_w = tape.leaf(self.fc1.w.clone());
        let fc1_b = tape.leaf(self.fc1.b.clone());
        let fc2_w = tape.leaf(self.fc2.w.clone());
        let fc2_b = tape.leaf(self.fc2.b.clone());

        let mut h = tape.relu(tape.add(tape.matmul(x, fc1_w)?, tape.broadcast_rows(fc1_b, n)?)?)?;
        h = tape.relu(tape.add(tape.matmul(h, fc2_w)?, tape.broadcast_rows(fc2_b, n)?)?)?;
        if let Some(mask) = &noise.dropout_mask {
            h = tape.hadamard(h, tape.constant(mask.clone()))?;
        }

        let l1 = self.bgc1.build_graph(tape, noise.eps1_w.clone(), noise.eps1_b.clone())?;
        let z1 = tape.relu(tape.add(
            tape.matmul(a, tape.matmul(h, l1.w)?)?,
            tape.broadcast_rows(l1.b, n)?,
        )?)?;
        let l2 = self.bgc2.build_graph(tape, noise.eps2_w.clone(), noise.eps2_b.clone())?;
        let z2 = tape.add(
            tape.matmul(a, tape.matmul(z1, l2.w)?)?,
            tape.broadcast_rows(l2.b, n)?,
        )?;
        let log_probs = tape.log_softmax_rows(z2)?;

        Ok(TrainGraph {
            log_probs,
            log_q: tape.add(l1.log_q, l2.log_q)?,
            log_p: tape.add(l1.log_p, l2.log_p)?,
            params: vec![
                fc1_w, fc1_b, fc2_w, fc2_b, l1.mu_w, l1.rho_w, l1.mu_b, l1.rho_b, l2.mu_w,
                l2.rho_w, l2.mu_b, l2.rho_b,
            ],
        })
    }

    /// Mutable references to all parameter tensors, in the same order as
    /// [`TrainGraph::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.bgc1.mu_w,
            &mut self.bgc1.rho_w,
            &mut self.bgc1.mu_b,
            &mut self.bgc1.rho_b,
            &mut self.bgc2.mu_w,
            &mut self.bgc2.rho_w,
            &mut self.bgc2.mu_b,
            &mut self.bgc2.rho_b,
        ]
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.fc1.w,
            &self.fc1.b,
            &self.fc2.w,
            &self.fc2.b,
            &self.bgc1.mu_w,
            &self.bgc1.rho_w,
            &self.bgc1.mu_b,
            &self.bgc1.rho_b,
            &self.bgc2.mu_w,
            &self.bgc2.rho_w,
            &self.bgc2.mu_b,
            &self.bgc2.rho_b,
        ]
    }

    /// Weight decay applies to deterministic tensors and the mu parameters,
    /// never to rho (decaying rho would silently shrink sigma toward ln 2).
    pub fn decay_flags() -> [bool; 12] {
        [
            true, true, true, true, // fc1, fc2
            true, false, true, false, // bgc1: mu_w, rho_w, mu_b, rho_b
            true, false, true, false, // bgc2
        ]
    }

    /// Average exp(forward) over `s` independent weight samples; run i draws
    /// from a stream derived from (root_seed, i), so results are identical
    /// however the runs are scheduled. When an eval set is given, each run's
    /// argmax accuracy on it is recorded.
    pub fn predict_mc(
        &self,
        features: &Matrix,
        s: usize,
        root_seed: u64,
        eval_set: Option<(&[usize], &[u16])>,
    ) -> Result<McPrediction> {
        if s < 1 {
            return Err(Error::contract("predict_mc", "need at least one sample"));
        }
        let mut mean = Matrix::zeros(features.rows(), self.num_classes());
        let mut per_run_accuracy = Vec::with_capacity(s);
        for run in 0..s {
            let mut run_rng = rng::indexed_stream(root_seed, "mc-run", run as u64);
            let log_probs = self.forward(features, &mut run_rng, Mode::Eval)?;
            let probs = log_probs.map(f64::exp);
            if let Some((idx, labels)) = eval_set {
                let pred = argmax_labels(&probs);
                per_run_accuracy.push(accuracy_on(&pred, labels, idx));
            }
            mean = mean.add(&probs)?;
        }
        Ok(McPrediction {
            mean_probs: mean.scale(1.0 / s as f64),
            per_run_accuracy,
        })
    }
}

/// Fraction of `idx` nodes whose prediction matches the ground truth.
pub fn accuracy_on(pred: &[u16], truth: &[u16], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let hits = idx.iter().filter(|&&i| pred[i] == truth[i]).count();
    hits as f64 / idx.len() as f64
}

/// Negative log-likelihood summed (not averaged) over the index set.
pub fn nll(log_probs: &Matrix, labels: &[u16], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        if i >= log_probs.rows() || i >= labels.len() {
            return Err(Error::contract("nll", format!("node index {i} out of range")));
        }
        let class = labels[i];
        if class == 0 || usize::from(class) > log_probs.cols() {
            return Err(Error::contract("nll", format!("label {class} out of range at node {i}")));
        }
        total -= log_probs.get(i, usize::from(class) - 1);
    }
    Ok(total)
}

/// In-graph nll: mask out the true-label entries, sum, negate.
pub fn nll_graph(tape: &Tape, log_probs: NodeId, labels: &[u16], idx: &[usize]) -> Result<NodeId> {
    let (rows, cols) = tape.shape(log_probs);
    let mut mask = Matrix::zeros(rows, cols);
    for &i in idx {
        if i >= rows || i >= labels.len() {
            return Err(Error::contract("nll", format!("node index {i} out of range")));
        }
        let class = labels[i];
        if class == 0 || usize::from(class) > cols {
            return Err(Error::contract("nll", format!("label {class} out of range at node {i}")));
        }
        mask.set(i, usize::from(class) - 1, 1.0);
    }
    let picked = tape.hadamard(log_probs, tape.constant(mask))?;
    tape.scale(tape.sum(picked)?, -1.0)
}

// --- checkpoint serialization -----------------------------------------------
//
// magic "BLGC" | u32 version | u32 input, hidden1, hidden2, classes |
// f64 dropout, prior_mean, prior_std | parameter tensors as f64 LE in
// param order. Bit-exact round-trip.

const CHECKPOINT_MAGIC: &[u8; 4] = b"BLGC";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_model(model: &BlgcnModel, path: &Path) -> Result<()> {
    let dims = model.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [dims.input, dims.hidden1, dims.hidden2, dims.classes] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [model.dropout, model.bgc1.prior_mean, model.bgc1.prior_std] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for tensor in model.params() {
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(path: &Path, a_hat: Matrix) -> Result<BlgcnModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        msg,
    };
    if buf.len() < 8 || &buf[0..4] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad magic, expected \"BLGC\"".into()));
    }
    let mut pos = 4usize;
    let mut read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > buf.len() {
            return Err(fail(*pos, "truncated header".into()));
        }
        let v = u32::from_le_bytes(buf[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = read_u32(&mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let input = read_u32(&mut pos)? as usize;
    let hidden1 = read_u32(&mut pos)? as usize;
    let hidden2 = read_u32(&mut pos)? as usize;
    let classes = read_u32(&mut pos)? as usize;

    let mut read_f64 = |pos: &mut usize| -> Result<f64> {
        if *pos + 8 > buf.len() {
            return Err(fail(*pos, "truncated payload".into()));
        }
        let v = f64::from_le_bytes(buf[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        Ok(v)
    };
    let dropout = read_f64(&mut pos)?;
    let prior_mean = read_f64(&mut pos)?;
    let prior_std = read_f64(&mut pos)?;

    let dims = ModelDims {
        input,
        hidden1,
        hidden2,
        classes,
    };
    let mut model = BlgcnModel::new(dims, dropout, a_hat, 0)?;
    model.bgc1.prior_mean = prior_mean;
    model.bgc1.prior_std = prior_std;
    model.bgc2.prior_mean = prior_mean;
    model.bgc2.prior_std = prior_std;
    for tensor in model.params_mut() {
        for v in tensor.data_mut() {
            *v = read_f64(&mut pos)?;
        }
    }
    if pos != buf.len() {
        return Err(fail(pos, "trailing bytes after parameters".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::renormalize;
    use crate::optim::AdamState;

    fn toy_model(n: usize, input: usize, classes: usize, seed: u64) -> BlgcnModel {
        let dims = ModelDims {
            input,
            hidden1: 8,
            hidden2: 6,
            classes,
        };
        BlgcnModel::new(dims, 0.2, Matrix::identity(n), seed).unwrap()
    }

    fn ring_a_hat(n: usize) -> Matrix {
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            let j = (i + 1) % n;
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        renormalize(&a).unwrap()
    }

    #[test]
    fn output_shape_and_row_normalization() {
        let model = toy_model(5, 4, 16, 1);
        let mut rng = crate::rng::stream(2, "fw");
        let f = crate::rng::random_matrix(&mut rng, 5, 4, 1.0);
        let out = model.forward(&f, &mut rng, Mode::Eval).unwrap();
        assert_eq!((out.rows(), out.cols()), (5, 16));
        for r in 0..5 {
            let total: f64 = out.row(r).iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn edgeless_graph_outputs_are_node_local() {
        // with identity adjacency, permuting input rows permutes outputs
        let model = toy_model(4, 3, 3, 3);
        let mut rng = crate::rng::stream(5, "perm");
        let f = crate::rng::random_matrix(&mut rng, 4, 3, 1.0);
        let noise = model.draw_noise(4, Mode::Eval, &mut rng);
        let out = model.forward_with_noise(&f, &noise).unwrap();

        let perm = [2usize, 0, 3, 1];
        let mut fp = Matrix::zeros(4, 3);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..3 {
                fp.set(to, c, f.get(from, c));
            }
        }
        let out_p = model.forward_with_noise(&fp, &noise).unwrap();
        for (to, &from) in perm.iter().enumerate() {
            assert_eq!(out_p.row(to), out.row(from));
        }
    }

    #[test]
    fn forward_commutes_with_graph_isomorphism() {
        // P * forward(F, A) = forward(P F, P A P^T) with identical samples
        let n = 6;
        let mut rng = crate::rng::stream(7, "iso");
        let mut a = Matrix::zeros(n, n);
        for (i, j) in [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)] {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        let f = crate::rng::random_matrix(&mut rng, n, 4, 1.0);
        let dims = ModelDims {
            input: 4,
            hidden1: 8,
            hidden2: 6,
            classes: 3,
        };
        let model = BlgcnModel::new(dims, 0.0, renormalize(&a).unwrap(), 11).unwrap();
        let noise = model.draw_noise(n, Mode::Eval, &mut rng);
        let out = model.forward_with_noise(&f, &noise).unwrap();

        let perm = [3usize, 5, 0, 2, 4, 1]; // node i of the permuted graph is old perm[i]
        let mut fp = Matrix::zeros(n, 4);
        let mut ap = Matrix::zeros(n, n);
        for i in 0..n {
            for c in 0..4 {
                fp.set(i, c, f.get(perm[i], c));
            }
            for j in 0..n {
                ap.set(i, j, a.get(perm[i], perm[j]));
            }
        }
        let mut permuted_model = model.clone();
        permuted_model.a_hat = renormalize(&ap).unwrap();
        let out_p = permuted_model.forward_with_noise(&fp, &noise).unwrap();
        for i in 0..n {
            for c in 0..3 {
                assert!(
                    (out_p.get(i, c) - out.get(perm[i], c)).abs() < 1e-12,
                    "node {i} class {c}"
                );
            }
        }
    }

    #[test]
    fn eval_mode_has_no_dropout_and_train_matches_eval_at_p0() {
        let mut model = toy_model(3, 4, 2, 13);
        model.dropout = 0.0;
        let mut rng = crate::rng::stream(17, "drop");
        let f = crate::rng::random_matrix(&mut rng, 3, 4, 1.0);
        let noise_a = model.draw_noise(3, Mode::Train, &mut crate::rng::stream(1, "n"));
        let noise_b = model.draw_noise(3, Mode::Eval, &mut crate::rng::stream(1, "n"));
        assert!(noise_a.dropout_mask.is_none());
        let a = model.forward_with_noise(&f, &noise_a).unwrap();
        let b = model.forward_with_noise(&f, &noise_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_graph_reproduces_plain_forward() {
        let model = toy_model(4, 3, 3, 19);
        let mut rng = crate::rng::stream(23, "parity");
        let f = crate::rng::random_matrix(&mut rng, 4, 3, 1.0);
        let noise = model.draw_noise(4, Mode::Train, &mut rng);
        let plain = model.forward_with_noise(&f, &noise).unwrap();
        let tape = Tape::new();
        let g = model.build_train_graph(&tape, &f, &noise).unwrap();
        assert_eq!(tape.value(g.log_probs), plain);
    }

    #[test]
    fn nll_examples() {
        // perfect prediction: log-prob 0 at the true class
        let mut lp = Matrix::zeros(1, 3).map(|_| -30.0);
        lp.set(0, 1, 0.0);
        assert_eq!(nll(&lp, &[2], &[0]).unwrap(), 0.0);

        // uniform over 4 classes
        let lp = Matrix::zeros(2, 4).map(|_| -(4.0f64.ln()));
        let one = nll(&lp, &[1, 3], &[0]).unwrap();
        assert!((one - 4.0f64.ln()).abs() < 1e-12);
        // additivity over two nodes
        let two = nll(&lp, &[1, 3], &[0, 1]).unwrap();
        assert!((two - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_indices() {
        let lp = Matrix::zeros(2, 3);
        assert!(nll(&lp, &[1, 1], &[5]).is_err());
        assert!(nll(&lp, &[0, 1], &[0]).is_err()); // background label
    }

    #[test]
    fn nll_graph_matches_plain() {
        let mut rng = crate::rng::stream(29, "nllg");
        let logits = crate::rng::random_matrix(&mut rng, 5, 4, 2.0);
        let lp = logits.log_softmax_rows();
        let labels = vec![1u16, 2, 3, 4, 1];
        let idx = vec![0usize, 2, 4];
        let want = nll(&lp, &labels, &idx).unwrap();
        let tape = Tape::new();
        let node = tape.constant(lp);
        let got = nll_graph(&tape, node, &labels, &idx).unwrap();
        assert!((tape.value(got).item() - want).abs() < 1e-12);
    }

    #[test]
    fn predict_mc_with_collapsed_posterior_has_zero_variance() {
        let mut model = toy_model(4, 3, 3, 31);
        for rho in [&mut model.bgc1.rho_w, &mut model.bgc1.rho_b, &mut model.bgc2.rho_w, &mut model.bgc2.rho_b] {
            for v in rho.data_mut() {
                *v = -40.0;
            }
        }
        let mut rng = crate::rng::stream(37, "mc");
        let f = crate::rng::random_matrix(&mut rng, 4, 3, 1.0);
        let labels = vec![1u16, 2, 3, 1];
        let idx = vec![0usize, 1, 2, 3];
        let mc = model.predict_mc(&f, 8, 99, Some((&idx, &labels))).unwrap();
        let first = mc.per_run_accuracy[0];
        assert!(mc.per_run_accuracy.iter().all(|&a| a == first));
        for r in 0..4 {
            let total: f64 = mc.mean_probs.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_mc_single_sample_equals_one_forward() {
        let model = toy_model(3, 3, 2, 41);
        let mut rng = crate::rng::stream(43, "mc1");
        let f = crate::rng::random_matrix(&mut rng, 3, 3, 1.0);
        let mc = model.predict_mc(&f, 1, 7, None).unwrap();
        let mut run_rng = crate::rng::indexed_stream(7, "mc-run", 0);
        let lp = model.forward(&f, &mut run_rng, Mode::Eval).unwrap();
        assert_eq!(mc.mean_probs, lp.map(f64::exp));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let n = 6;
        let mut rng = crate::rng::stream(47, "e2e-fd");
        let f = crate::rng::random_matrix(&mut rng, n, 5, 1.0);
        let labels = vec![1u16, 2, 3, 1, 2, 3];
        let idx = vec![0usize, 1, 2, 3, 4, 5];
        let dims = ModelDims {
            input: 5,
            hidden1: 8,
            hidden2: 6,
            classes: 3,
        };
        let model = BlgcnModel::new(dims, 0.2, ring_a_hat(n), 53).unwrap();
        let noise = model.draw_noise(n, Mode::Train, &mut rng);

        let build = |m: &BlgcnModel| -> (Tape, Vec<NodeId>, NodeId) {
            let tape = Tape::new();
            let g = m.build_train_graph(&tape, &f, &noise).unwrap();
            let nll_node = nll_graph(&tape, g.log_probs, &labels, &idx).unwrap();
            let loss = crate::bayes::bayes_loss_graph(&tape, g.log_q, g.log_p, nll_node, 1.0).unwrap();
            (tape, g.params, loss)
        };

        let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let (tape, ids, loss) = build(&model);
        let grads = tape.backward(loss).unwrap();
        let worst = crate::testutil::max_fd_error(&params, &ids, &grads, |p| {
            let mut m = model.clone();
            for (slot, value) in m.params_mut().into_iter().zip(p) {
                *slot = value.clone();
            }
            let (tape, _, loss) = build(&m);
            tape.value(loss).item()
        });
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn reduces_to_plain_mlp_and_fits_separable_toy_set() {
        // kl_scale = 0, sigma ~ 0, identity adjacency: a plain MLP that must
        // reach 100% training accuracy on linearly separable data.
        let n = 12;
        let mut f = Matrix::zeros(n, 3);
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 3;
            labels.push((class + 1) as u16);
            f.set(i, class, 1.0);
            f.set(i, (class + 1) % 3, 0.1);
        }
        let idx: Vec<usize> = (0..n).collect();
        let dims = ModelDims {
            input: 3,
            hidden1: 8,
            hidden2: 6,
            classes: 3,
        };
        let mut model = BlgcnModel::new(dims, 0.0, Matrix::identity(n), 61).unwrap();
        for rho in [&mut model.bgc1.rho_w, &mut model.bgc1.rho_b, &mut model.bgc2.rho_w, &mut model.bgc2.rho_b] {
            for v in rho.data_mut() {
                *v = -40.0;
            }
        }

        let mut adam: Vec<AdamState> = model
            .params()
            .iter()
            .map(|p| AdamState::new(p.rows(), p.cols()))
            .collect();
        let mut rng = crate::rng::stream(67, "mlp");
        let mut solved = false;
        for _step in 0..500 {
            let noise = model.draw_noise(n, Mode::Train, &mut rng);
            let tape = Tape::new();
            let g = model.build_train_graph(&tape, &f, &noise).unwrap();
            let loss = nll_graph(&tape, g.log_probs, &labels, &idx).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (i, (param, id)) in model.params_mut().into_iter().zip(&g.params).enumerate() {
                let grad = grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(param.rows(), param.cols()));
                adam[i].step(param, &grad, 1e-2, 0.0).unwrap();
            }
            let pred = argmax_labels(&tape.value(g.log_probs));
            if accuracy_on(&pred, &labels, &idx) == 1.0 {
                solved = true;
                break;
            }
        }
        assert!(solved, "MLP reduction failed to fit separable data in 500 steps");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = toy_model(3, 4, 5, 71);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, model.a_hat.clone()).unwrap();
        assert_eq!(model.fc1, loaded.fc1);
        assert_eq!(model.fc2, loaded.fc2);
        assert_eq!(model.bgc1, loaded.bgc1);
        assert_eq!(model.bgc2, loaded.bgc2);
        assert_eq!(model.dropout, loaded.dropout);
        // byte-identical re-save
        let path2 = dir.path().join("model2.ckpt");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
