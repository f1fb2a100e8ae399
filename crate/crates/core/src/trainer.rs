//! Training loop with pseudo-labeling and two-threshold dynamic control.
//!
//! Every epoch takes one full-graph Adam step on the variational loss over
//! labeled (plus pseudo-labeled) nodes, then measures single-sample
//! validation accuracy on the unlabeled nodes. Once that cheap gate reaches
//! T1, the weights are frozen and the forward pass repeats `s_eval` times;
//! training stops as soon as the upper confidence bound of those per-run
//! accuracies reaches T2. Otherwise the loop runs to the epoch budget.

use std::fmt::Write as _;

use crate::bayes::bayes_loss_graph;
use crate::error::{Error, Result};
use crate::graph::SuperpixelGraph;
use crate::matrix::Matrix;
use crate::model::{accuracy_on, argmax_labels, nll_graph, BlgcnModel, McPrediction, Mode};
use crate::optim::{AdamState, LrSchedule};
use crate::rng;
use crate::split::SplitAssignment;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub max_epochs: u64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Pseudo-labels are assigned to unlabeled nodes whose mean predicted
    /// probability reaches this threshold...
    pub pseudo_threshold: f64,
    /// ...refreshed every `pseudo_every` epochs from `pseudo_start` on,
    /// using a `pseudo_samples`-run mean forward.
    pub pseudo_start: u64,
    pub pseudo_every: u64,
    pub pseudo_samples: usize,
    /// Forward passes per confidence evaluation.
    pub s_eval: usize,
    pub z: f64,
    pub confidence: f64,
    /// Cheap-gate threshold on validation accuracy.
    pub t1: f64,
    /// Stop threshold on the CI upper bound.
    pub t2: f64,
    pub kl_scale: f64,
    /// Feed the gates overall validation accuracy (None) or one class's.
    pub gate_class: Option<u16>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 4000,
            weight_decay: 5e-4,
            schedule: LrSchedule::new(1e-3, 0.9, vec![1500, 2500, 3500]),
            pseudo_threshold: 0.9,
            pseudo_start: 500,
            pseudo_every: 100,
            pseudo_samples: 5,
            s_eval: 30,
            z: 1.96,
            confidence: 0.95,
            t1: 0.90,
            t2: 0.95,
            kl_scale: 1.0,
            gate_class: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.t1 > self.t2 {
            return Err(Error::config(format!("need t1 <= t2, got {} > {}", self.t1, self.t2)));
        }
        if self.z <= 0.0 {
            return Err(Error::config("z must be positive"));
        }
        if self.s_eval < 2 {
            return Err(Error::config("s_eval must be >= 2 for a confidence interval"));
        }
        if self.pseudo_samples < 1 || self.pseudo_every == 0 {
            return Err(Error::config("pseudo-label settings must be positive"));
        }
        Ok(())
    }
}

/// Z-interval over a sample of per-run accuracies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub z: f64,
    pub confidence: f64,
}

/// mean +- z * SE with SE = sample std (n-1 denominator) / sqrt(n).
pub fn confidence_interval(samples: &[f64], z: f64, confidence: f64) -> Result<ConfidenceInterval> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::contract(
            "confidence_interval",
            format!("need at least 2 samples, got {n}"),
        ));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n as f64 - 1.0);
    let se = var.sqrt() / (n as f64).sqrt();
    Ok(ConfidenceInterval {
        mean,
        se,
        lower: mean - z.abs() * se,
        upper: mean + z.abs() * se,
        z,
        confidence,
    })
}

/// Pseudo-label assignments: unlabeled node j gets argmax class c iff
/// max probability >= threshold. Recomputed from scratch at each refresh.
pub fn pseudo_label(mean_probs: &Matrix, unlabeled: &[usize], threshold: f64) -> Result<Vec<(usize, u16)>> {
    if !(0.5 < threshold && threshold <= 1.0) {
        return Err(Error::contract(
            "pseudo_label",
            format!("threshold must be in (0.5, 1], got {threshold}"),
        ));
    }
    let mut out = Vec::new();
    for &j in unlabeled {
        let row = mean_probs.row(j);
        let (mut best_c, mut best_p) = (0usize, row[0]);
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > best_p {
                best_c = c;
                best_p = p;
            }
        }
        if best_p >= threshold {
            out.push((j, (best_c + 1) as u16));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// CI upper bound reached T2 after the T1 gate opened.
    Dynamic,
    /// Epoch budget exhausted.
    Budget,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_acc: f64,
    pub ci: Option<ConfidenceInterval>,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub epochs_run: u64,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// One line per epoch: `epoch,lr,loss,val_acc[,ci_a,ci_mu,ci_b]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            write!(out, "{},{},{},{}", r.epoch, r.lr, r.loss, r.val_acc).unwrap();
            if let Some(ci) = &r.ci {
                write!(out, ",{},{},{}", ci.lower, ci.mean, ci.upper).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Monte-Carlo evaluation of a trained model on the unlabeled nodes.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Argmax of the mean probabilities, for every node.
    pub predictions: Vec<u16>,
    pub per_run_accuracy: Vec<f64>,
    pub ci: ConfidenceInterval,
    pub mean_probs: Matrix,
}

/// The accuracy set feeding the T1/T2 gates: all unlabeled nodes, or only
/// those of the configured class.
fn gate_set(graph: &SuperpixelGraph, unlabeled: &[usize], gate_class: Option<u16>) -> Vec<usize> {
    match gate_class {
        None => unlabeled.to_vec(),
        Some(c) => unlabeled.iter().copied().filter(|&j| graph.labels[j] == c).collect(),
    }
}

/// Run the optimization loop with dynamic control. On a non-finite loss the
/// model is rolled back to the last parameters that evaluated finite and an
/// error is returned.
pub fn train(
    model: &mut BlgcnModel,
    graph: &SuperpixelGraph,
    split: &SplitAssignment,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let n = graph.num_nodes();
    if split.roles.len() != n {
        return Err(Error::contract(
            "train",
            format!("{} split flags for {n} nodes", split.roles.len()),
        ));
    }
    let labeled = split.labeled_indices();
    let unlabeled = split.unlabeled_indices();
    if labeled.is_empty() {
        return Err(Error::contract("train", "no labeled nodes"));
    }
    let gate_nodes = gate_set(graph, &unlabeled, config.gate_class);

    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::new(p.rows(), p.cols()))
        .collect();
    let decay_flags = BlgcnModel::decay_flags();

    let mut train_rng = rng::stream(config.seed, "train-noise");
    let mut pseudo: Vec<(usize, u16)> = Vec::new();
    let mut last_good: Option<Vec<Matrix>> = None;

    let mut history = TrainHistory {
        epochs: Vec::new(),
        epochs_run: 0,
        stop_reason: StopReason::Budget,
    };

    for epoch in 0..config.max_epochs {
        // Refresh pseudo-labels on the configured cadence (never sticky).
        if epoch >= config.pseudo_start && epoch % config.pseudo_every == 0 && !unlabeled.is_empty() {
            let mc = model.predict_mc(
                &graph.features,
                config.pseudo_samples,
                rng::derive_seed(config.seed, &format!("pseudo-{epoch}")),
                None,
            )?;
            pseudo = pseudo_label(&mc.mean_probs, &unlabeled, config.pseudo_threshold)?;
        }

        // Training targets: ground truth on labeled nodes, current pseudo
        // labels on their unlabeled recipients.
        let mut targets = graph.labels.clone();
        let mut train_idx = labeled.clone();
        for &(j, c) in &pseudo {
            debug_assert!(split.roles[j] == crate::split::NodeRole::Unlabeled);
            targets[j] = c;
            train_idx.push(j);
        }

        let lr = config.schedule.lr_at(epoch);
        let noise = model.draw_noise(n, Mode::Train, &mut train_rng);
        let tape = Tape::new();
        let g = model.build_train_graph(&tape, &graph.features, &noise)?;
        let nll_node = nll_graph(&tape, g.log_probs, &targets, &train_idx)?;
        let loss_node = bayes_loss_graph(&tape, g.log_q, g.log_p, nll_node, config.kl_scale)?;
        let loss = tape.value(loss_node).item();

        if !loss.is_finite() {
            if let Some(params) = last_good {
                for (slot, value) in model.params_mut().into_iter().zip(params) {
                    *slot = value;
                }
            }
            return Err(Error::Numeric {
                op: "train",
                msg: format!("non-finite loss {loss} at epoch {epoch}; model rolled back"),
            });
        }
        last_good = Some(model.params().into_iter().cloned().collect());

        let grads = tape.backward(loss_node)?;
        for (i, (param, id)) in model.params_mut().into_iter().zip(&g.params).enumerate() {
            let grad = grads
                .get(*id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(param.rows(), param.cols()));
            let wd = if decay_flags[i] { config.weight_decay } else { 0.0 };
            adam[i].step(param, &grad, lr, wd)?;
        }

        // Cheap gate: single-sample validation accuracy.
        let mut val_rng = rng::indexed_stream(config.seed, "val-noise", epoch);
        let val_probs = model.forward(&graph.features, &mut val_rng, Mode::Eval)?;
        let val_pred = argmax_labels(&val_probs);
        let val_acc = accuracy_on(&val_pred, &graph.labels, &gate_nodes);

        let mut record = EpochRecord {
            epoch,
            lr,
            loss,
            val_acc,
            ci: None,
        };

        let mut stop = false;
        if val_acc >= config.t1 {
            // Freeze and measure: s_eval forward passes, then the interval.
            let mc = model.predict_mc(
                &graph.features,
                config.s_eval,
                rng::derive_seed(config.seed, &format!("ci-{epoch}")),
                Some((&gate_nodes, &graph.labels)),
            )?;
            let ci = confidence_interval(&mc.per_run_accuracy, config.z, config.confidence)?;
            stop = ci.upper >= config.t2;
            record.ci = Some(ci);
        }

        history.epochs.push(record);
        history.epochs_run = epoch + 1;
        if stop {
            history.stop_reason = StopReason::Dynamic;
            log::info!(
                "dynamic stop at epoch {epoch}: val_acc {val_acc:.4}, ci upper {:.4}",
                history.epochs.last().unwrap().ci.unwrap().upper
            );
            return Ok(history);
        }
    }
    Ok(history)
}

/// Frozen-model Monte-Carlo evaluation on the unlabeled superpixels.
pub fn evaluate(
    model: &BlgcnModel,
    graph: &SuperpixelGraph,
    split: &SplitAssignment,
    s: usize,
    z: f64,
    confidence: f64,
    seed: u64,
) -> Result<Evaluation> {
    let unlabeled = split.unlabeled_indices();
    let mc: McPrediction = model.predict_mc(
        &graph.features,
        s,
        rng::derive_seed(seed, "evaluate"),
        Some((&unlabeled, &graph.labels)),
    )?;
    let ci = confidence_interval(&mc.per_run_accuracy, z, confidence)?;
    Ok(Evaluation {
        predictions: mc.predicted_labels(),
        per_run_accuracy: mc.per_run_accuracy,
        ci,
        mean_probs: mc.mean_probs,
    })
}
