//! Minority-class rebalancing with an adversarially trained feature
//! generator.
//!
//! A class is a minority when its node count falls strictly below
//! `alpha_min` times the largest class. Its labeled feature rows are tiled to
//! a square matrix, masked to the diagonal, and perturbed by the generator's
//! weight matrix (initialized to mean 1 with tiny variance, so generation
//! starts as an identity-like perturbation of feature chimeras). The
//! discriminator learns to tell real rows from generated ones; both nets
//! take alternating plain gradient-descent steps on binary cross-entropy
//! losses. Generated rows then join the graph with adjacency copied from
//! randomly matched real nodes of the same class.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SuperpixelGraph;
use crate::matrix::{softplus, Matrix};
use crate::rng;
use crate::tape::{NodeId, Tape};

/// How the minority rows are tiled when building the square feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TilingOrder {
    /// Row k of the tiled matrix is input row k mod b.
    Cyclic,
    /// Rows repeat in contiguous blocks: row k is input row floor(k*b/d).
    Block,
}

#[derive(Debug, Clone)]
pub struct GanConfig {
    pub generator_init_std: f64,
    pub discriminator_init_std: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minority threshold: class count < alpha_min * largest class count.
    pub alpha_min: f64,
    /// Fill target: augment until count >= ceil(alpha_fill * largest).
    pub alpha_fill: f64,
    pub tiling: TilingOrder,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            generator_init_std: 1e-5,
            discriminator_init_std: 0.01,
            learning_rate: 1e-7,
            epochs: 2000,
            alpha_min: 0.02,
            alpha_fill: 0.05,
            tiling: TilingOrder::Cyclic,
            seed: 0,
        }
    }
}

impl GanConfig {
    fn validate(&self) -> Result<()> {
        if self.generator_init_std <= 0.0 || self.discriminator_init_std <= 0.0 {
            return Err(Error::config("GAN init stds must be positive"));
        }
        if !(0.0 < self.alpha_min && self.alpha_min <= self.alpha_fill && self.alpha_fill < 1.0) {
            return Err(Error::config(format!(
                "need 0 < alpha_min <= alpha_fill < 1, got {} and {}",
                self.alpha_min, self.alpha_fill
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("GAN learning rate must be positive"));
        }
        Ok(())
    }
}

/// Single linear map: generated = weights * (tiled features masked to the
/// diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub weights: Matrix,
}

impl Generator {
    /// mean(weights) = 1 by construction: 1 plus noise centered to zero mean.
    pub fn init(d: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut noise = rng::normal_matrix(rng, d, d, std);
        let mean = noise.sum() / (d * d) as f64;
        for v in noise.data_mut() {
            *v = 1.0 + (*v - mean);
        }
        Generator { weights: noise }
    }

    /// The no-perturbation generator (every weight 1).
    pub fn neutral(d: usize) -> Self {
        Generator {
            weights: Matrix::ones(d, d),
        }
    }
}

/// Two dense layers to one logit; sigmoid lives inside the BCE-on-logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

const DISC_HIDDEN: usize = 32;

impl Discriminator {
    pub fn init(d: usize, std: f64, rng: &mut impl Rng) -> Self {
        Discriminator {
            w1: rng::normal_matrix(rng, d, DISC_HIDDEN, std),
            b1: Matrix::zeros(1, DISC_HIDDEN),
            w2: rng::normal_matrix(rng, DISC_HIDDEN, 1, std),
            b2: Matrix::zeros(1, 1),
        }
    }

    /// Raw logits for a batch of rows.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let n = x.rows();
        let h = x.matmul(&self.w1)?.add(&self.b1.broadcast_rows(n)?)?.relu();
        h.matmul(&self.w2)?.add(&self.b2.broadcast_rows(n)?)
    }

    /// Probability that each row is real.
    pub fn prob_real(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.logits(x)?.map(crate::matrix::sigmoid))
    }

    fn build(&self, tape: &Tape, x: NodeId, trainable: bool) -> Result<(NodeId, Option<[NodeId; 4]>)> {
        let n = tape.shape(x).0;
        let insert = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let w1 = insert(&self.w1);
        let b1 = insert(&self.b1);
        let w2 = insert(&self.w2);
        let b2 = insert(&self.b2);
        let h = tape.relu(tape.add(tape.matmul(x, w1)?, tape.broadcast_rows(b1, n)?)?)?;
        let logits = tape.add(tape.matmul(h, w2)?, tape.broadcast_rows(b2, n)?)?;
        Ok((logits, trainable.then_some([w1, b1, w2, b2])))
    }
}

/// Mean binary cross-entropy on logits: softplus(-logit) against the
/// all-ones target, softplus(+logit) against all-zeros.
pub fn bce_with_logits(logits: &Matrix, target_real: bool) -> f64 {
    let sign = if target_real { -1.0 } else { 1.0 };
    logits.data().iter().map(|&l| softplus(sign * l)).sum::<f64>() / logits.data().len() as f64
}

fn bce_graph(tape: &Tape, logits: NodeId, target_real: bool) -> Result<NodeId> {
    let (rows, cols) = tape.shape(logits);
    let signed = if target_real { tape.scale(logits, -1.0)? } else { logits };
    let sp = tape.softplus(signed)?;
    tape.scale(tape.sum(sp)?, 1.0 / (rows * cols) as f64)
}

/// Class ids whose node count is strictly below `alpha_min` times the
/// largest class count.
pub fn minority_from_counts(class_counts: &[usize], alpha_min: f64) -> Vec<u16> {
    let max = class_counts.iter().copied().max().unwrap_or(0);
    let threshold = alpha_min * max as f64;
    class_counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &n)| n > 0 && (n as f64) < threshold)
        .map(|(c, _)| c as u16)
        .collect()
}

/// Minority classes of a graph under the configured threshold.
pub fn detect_minority(graph: &SuperpixelGraph, alpha_min: f64) -> Vec<u16> {
    minority_from_counts(&graph.class_counts(), alpha_min)
}

/// Nodes to append so a class of `count` reaches ceil(alpha_fill * largest).
pub fn fill_deficit(count: usize, max_count: usize, alpha_fill: f64) -> usize {
    let target = (alpha_fill * max_count as f64).ceil() as usize;
    target.saturating_sub(count)
}

/// Tile the b x d minority rows to d rows and mask to the diagonal: entry
/// (k, k) is row (k mod b) -- or the block-order row -- at feature k.
pub fn enhance(f_i: &Matrix, tiling: TilingOrder) -> Result<Matrix> {
    let b = f_i.rows();
    let d = f_i.cols();
    if b == 0 || d == 0 {
        return Err(Error::contract("enhance", "empty minority feature matrix"));
    }
    let mut out = Matrix::zeros(d, d);
    for k in 0..d {
        let source = match tiling {
            TilingOrder::Cyclic => k % b,
            TilingOrder::Block => (k * b) / d,
        };
        out.set(k, k, f_i.get(source, k));
    }
    Ok(out)
}

/// One gradient-descent step on the discriminator against fixed real and
/// generated rows. Returns the loss at the pre-step parameters.
pub fn discriminator_step(
    discriminator: &mut Discriminator,
    real: &Matrix,
    fake: &Matrix,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let real_in = tape.constant(real.clone());
    let fake_in = tape.constant(fake.clone());
    let (real_logits, params) = discriminator.build(&tape, real_in, true)?;
    let params = params.expect("trainable");
    // the fake branch reuses the same parameter leaves
    let fake_logits = {
        let n = tape.shape(fake_in).0;
        let h = tape.relu(tape.add(
            tape.matmul(fake_in, params[0])?,
            tape.broadcast_rows(params[1], n)?,
        )?)?;
        tape.add(tape.matmul(h, params[2])?, tape.broadcast_rows(params[3], n)?)?
    };
    let loss = tape.add(
        bce_graph(&tape, real_logits, true)?,
        bce_graph(&tape, fake_logits, false)?,
    )?;
    let grads = tape.backward(loss)?;
    for (slot, id) in [
        &mut discriminator.w1,
        &mut discriminator.b1,
        &mut discriminator.w2,
        &mut discriminator.b2,
    ]
    .into_iter()
    .zip(params)
    {
        if let Some(g) = grads.get(id) {
            *slot = slot.sub(&g.scale(lr))?;
        }
    }
    Ok(tape.value(loss).item())
}

/// One gradient-descent step on the generator with the discriminator frozen.
/// Returns the loss at the pre-step weights.
pub fn generator_step(
    generator: &mut Generator,
    discriminator: &Discriminator,
    masked: &Matrix,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let w_g = tape.leaf(generator.weights.clone());
    let masked_in = tape.constant(masked.clone());
    let fake = tape.matmul(w_g, masked_in)?;
    let (fake_logits, _) = discriminator.build(&tape, fake, false)?;
    let loss = bce_graph(&tape, fake_logits, true)?;
    let grads = tape.backward(loss)?;
    if let Some(g) = grads.get(w_g) {
        generator.weights = generator.weights.sub(&g.scale(lr))?;
    }
    Ok(tape.value(loss).item())
}

/// Alternating adversarial training; returns the trained nets and the
/// per-epoch (d_loss, g_loss) history.
pub fn gan_train(f_i: &Matrix, config: &GanConfig) -> Result<(Generator, Discriminator, Vec<(f64, f64)>)> {
    config.validate()?;
    if f_i.rows() == 0 || f_i.cols() == 0 {
        return Err(Error::contract("gan_train", "empty minority feature matrix"));
    }
    let d = f_i.cols();
    let mut init_rng = rng::stream(config.seed, "gan-init");
    let mut generator = Generator::init(d, config.generator_init_std, &mut init_rng);
    let mut discriminator = Discriminator::init(d, config.discriminator_init_std, &mut init_rng);
    let masked = enhance(f_i, config.tiling)?;

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let fake = generator.weights.matmul(&masked)?;
        let d_loss = discriminator_step(&mut discriminator, f_i, &fake, config.learning_rate)?;
        let g_loss = generator_step(&mut generator, &discriminator, &masked, config.learning_rate)?;
        if !d_loss.is_finite() || !g_loss.is_finite() {
            return Err(Error::Numeric {
                op: "gan_train",
                msg: format!("non-finite loss at epoch {epoch}: d={d_loss} g={g_loss}"),
            });
        }
        history.push((d_loss, g_loss));
    }
    Ok((generator, discriminator, history))
}

/// Emit `k` generated feature rows: the rows of W_G * (tiled diagonal),
/// consumed cyclically from row 0.
pub fn generate(generator: &Generator, f_i: &Matrix, k: usize, tiling: TilingOrder) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::contract("generate", "k must be >= 1"));
    }
    let masked = enhance(f_i, tiling)?;
    let all = generator.weights.matmul(&masked)?;
    let d = all.rows();
    let mut out = Matrix::zeros(k, all.cols());
    for j in 0..k {
        let src = all.row(j % d);
        for (c, &v) in src.iter().enumerate() {
            out.set(j, c, v);
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric {
            op: "generate",
            msg: "generated rows contain non-finite values".into(),
        });
    }
    Ok(out)
}

/// Append generated nodes of `class` to the graph. Each new node's feature
/// row is the generated t-part with s recomputed as the sum of squares; its
/// adjacency row and column are copied from a uniformly chosen template node
/// (labels and edges among original nodes stay untouched).
pub fn expand_graph(
    graph: &mut SuperpixelGraph,
    class: u16,
    new_t_rows: &Matrix,
    template_nodes: &[usize],
    seed: u64,
) -> Result<()> {
    let n = graph.num_nodes();
    let d = graph.spectral_dim();
    if new_t_rows.cols() != d {
        return Err(Error::Dimension {
            op: "expand_graph",
            lhs: format!("{}x{}", new_t_rows.rows(), new_t_rows.cols()),
            rhs: format!("nx{d}"),
        });
    }
    if template_nodes.is_empty() {
        return Err(Error::contract(
            "expand_graph",
            format!("class {class} has no nodes to match against"),
        ));
    }
    if let Some(&bad) = template_nodes.iter().find(|&&t| t >= n || graph.labels[t] != class) {
        return Err(Error::contract(
            "expand_graph",
            format!("template node {bad} is not an existing node of class {class}"),
        ));
    }

    let k = new_t_rows.rows();
    let total = n + k;
    let mut rng = rng::stream(seed, &format!("expand-class-{class}"));

    let mut features = Matrix::zeros(total, d + 1);
    for i in 0..n {
        for (c, &v) in graph.features.row(i).iter().enumerate() {
            features.set(i, c, v);
        }
    }
    let mut adjacency = Matrix::zeros(total, total);
    for i in 0..n {
        for j in 0..n {
            adjacency.set(i, j, graph.adjacency.get(i, j));
        }
    }

    for j in 0..k {
        let node = n + j;
        let mut s = 0.0;
        for c in 0..d {
            let v = new_t_rows.get(j, c);
            features.set(node, c, v);
            s += v * v;
        }
        features.set(node, d, s);

        let template = template_nodes[rng.gen_range(0..template_nodes.len())];
        for v in 0..n {
            let e = graph.adjacency.get(template, v);
            adjacency.set(node, v, e);
            adjacency.set(v, node, e);
        }
        graph.labels.push(class);
        graph.members.push(Vec::new());
    }

    graph.features = features;
    graph.adjacency = adjacency;
    Ok(())
}
