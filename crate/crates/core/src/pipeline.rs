//! End-to-end runs: preprocess, rebalance, train, evaluate, report, and the
//! artifact files each run leaves behind.
//!
//! Every trial is fully determined by (config, trial seed): stage seeds are
//! derived per stage name, so reruns with the same manifest reproduce every
//! output byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{AugmentMode, RunConfig};
use crate::error::{Error, Result};
use crate::gan;
use crate::graph::{self, SuperpixelGraph};
use crate::hsi::{self, HsiCube};
use crate::matrix::Matrix;
use crate::metrics::{self, ClassificationReport, TrialSummary};
use crate::model::{save_model, BlgcnModel, ModelDims};
use crate::rng;
use crate::slic;
use crate::split::{self, NodeRole, SplitAssignment};
use crate::synth::{synth_dataset, SynthSpec};
use crate::trainer::{self, Evaluation, TrainHistory};

/// Everything one trial produces.
pub struct PipelineArtifacts {
    pub graph: SuperpixelGraph,
    pub split: SplitAssignment,
    /// Node count before augmentation appended synthetic nodes.
    pub original_nodes: usize,
    pub augmented_classes: Vec<u16>,
    pub model: BlgcnModel,
    pub history: TrainHistory,
    pub evaluation: Evaluation,
    pub report: ClassificationReport,
}

/// Build the synthetic scene described by the config.
pub fn synth_from_config(cfg: &RunConfig, seed: u64) -> Result<HsiCube> {
    let spec = SynthSpec {
        classes: cfg.synth_classes,
        grid_rows: cfg.synth_grid,
        grid_cols: cfg.synth_grid,
        blob_h: cfg.synth_blob,
        blob_w: cfg.synth_blob,
        bands: cfg.synth_bands,
        noise_std: cfg.synth_noise,
        background_border: cfg.synth_border,
        blob_gutter: cfg.synth_gutter,
        separation: cfg.synth_separation,
        blob_classes: cfg.synth_blocks.clone(),
        seed,
    };
    synth_dataset(&spec)
}

/// Load the configured cube and label files.
pub fn load_dataset(cfg: &RunConfig) -> Result<HsiCube> {
    let cube_path = cfg
        .cube
        .as_ref()
        .ok_or_else(|| Error::config("missing cube path (key: cube)"))?;
    let label_path = cfg
        .labels
        .as_ref()
        .ok_or_else(|| Error::config("missing label path (key: labels)"))?;
    hsi::load_dataset(cube_path, label_path)
}

/// Normalize, segment, build the node graph, and split it.
pub fn preprocess(cube: &HsiCube, cfg: &RunConfig, seed: u64) -> Result<(SuperpixelGraph, SplitAssignment)> {
    let normalized = cube.normalize();
    let seg = slic::slic_segment(
        &normalized,
        cfg.superpixels,
        cfg.compactness,
        cfg.slic_iters,
        rng::derive_seed(seed, "slic"),
    )?;
    let graph = graph::build_graph(&seg, &normalized)?;
    let split = split::split_superpixels(&graph.labels, cfg.ratio, rng::derive_seed(seed, "split"))?;
    Ok((graph, split))
}

/// Rebalance every minority class: train its generator on the labeled rows,
/// synthesize the deficit, and append the nodes as labeled training data.
/// Returns the classes that were augmented.
pub fn augment(
    graph: &mut SuperpixelGraph,
    split: &mut SplitAssignment,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<u16>> {
    let minorities = gan::detect_minority(graph, cfg.alpha_min);
    if minorities.is_empty() {
        log::info!("augmentation skipped: no minority classes");
        return Ok(minorities);
    }
    let counts = graph.class_counts();
    let max_count = counts.iter().copied().max().unwrap_or(0);
    let d = graph.spectral_dim();
    for &class in &minorities {
        let deficit = gan::fill_deficit(counts[usize::from(class)], max_count, cfg.alpha_fill);
        if deficit == 0 {
            log::info!("class {class}: already at fill target");
            continue;
        }
        // Only labeled nodes feed generation; selecting unlabeled nodes by
        // their class would leak evaluation labels.
        let templates: Vec<usize> = (0..graph.num_nodes())
            .filter(|&i| graph.labels[i] == class && split.roles[i] == NodeRole::Labeled)
            .collect();
        if templates.is_empty() {
            return Err(Error::contract(
                "augment",
                format!("minority class {class} has no labeled nodes"),
            ));
        }
        let mut rows = Matrix::zeros(templates.len(), d);
        for (r, &node) in templates.iter().enumerate() {
            for c in 0..d {
                rows.set(r, c, graph.features.get(node, c));
            }
        }
        let gan_cfg = cfg.gan_config(rng::derive_seed(seed, &format!("gan-{class}")));
        let (generator, _discriminator, _history) = gan::gan_train(&rows, &gan_cfg)?;
        let generated = gan::generate(&generator, &rows, deficit, cfg.gan_tiling)?;
        gan::expand_graph(
            graph,
            class,
            &generated,
            &templates,
            rng::derive_seed(seed, &format!("expand-{class}")),
        )?;
        split.extend_labeled(deficit);
        log::info!("class {class}: appended {deficit} generated nodes");
    }
    Ok(minorities)
}

/// One full trial on an already-loaded cube.
pub fn run_pipeline_on(cube: &HsiCube, cfg: &RunConfig, seed: u64) -> Result<PipelineArtifacts> {
    let (mut graph, mut split) = preprocess(cube, cfg, seed)?;
    let original_nodes = graph.num_nodes();
    let augmented_classes = match cfg.augment {
        AugmentMode::Auto => augment(&mut graph, &mut split, cfg, seed)?,
        AugmentMode::Off => Vec::new(),
    };

    let a_hat = if cfg.graph_conv {
        graph::renormalize(&graph.adjacency)?
    } else {
        Matrix::identity(graph.num_nodes())
    };
    let dims = ModelDims {
        input: graph.features.cols(),
        hidden1: cfg.hidden1,
        hidden2: cfg.hidden2,
        classes: usize::from(graph.num_classes()),
    };
    let mut model = BlgcnModel::new(dims, cfg.dropout, a_hat, rng::derive_seed(seed, "model-init"))?;
    for layer in [&mut model.bgc1, &mut model.bgc2] {
        layer.prior_std = cfg.prior_std;
        for rho in [&mut layer.rho_w, &mut layer.rho_b] {
            for v in rho.data_mut() {
                *v = cfg.rho_init;
            }
        }
    }

    let train_cfg = cfg.train_config(rng::derive_seed(seed, "train"), split.labeled_indices().len());
    let history = trainer::train(&mut model, &graph, &split, &train_cfg)?;
    let evaluation = trainer::evaluate(
        &model,
        &graph,
        &split,
        cfg.s_eval,
        cfg.z,
        cfg.confidence,
        rng::derive_seed(seed, "final-eval"),
    )?;

    // Metrics over the unlabeled (original) superpixels only; synthetic
    // nodes are always labeled, so they never enter.
    let unlabeled = split.unlabeled_indices();
    let pred: Vec<u16> = unlabeled.iter().map(|&j| evaluation.predictions[j]).collect();
    let truth: Vec<u16> = unlabeled.iter().map(|&j| graph.labels[j]).collect();
    let report = if cfg.pixel_weighted {
        let weights: Vec<f64> = unlabeled.iter().map(|&j| graph.members[j].len() as f64).collect();
        metrics::compute_metrics_weighted(&pred, &truth, &weights)?
    } else {
        metrics::compute_metrics(&pred, &truth)?
    };

    Ok(PipelineArtifacts {
        graph,
        split,
        original_nodes,
        augmented_classes,
        model,
        history,
        evaluation,
        report,
    })
}

/// Trial t runs with seed `cfg.seed + t`.
pub fn run_trials_on(cube: &HsiCube, cfg: &RunConfig) -> Result<(Vec<PipelineArtifacts>, TrialSummary)> {
    if cfg.trials < 1 {
        return Err(Error::config("trials must be >= 1"));
    }
    let mut artifacts = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let seed = cfg.seed + t as u64;
        log::info!("trial {t} (seed {seed})");
        artifacts.push(run_pipeline_on(cube, cfg, seed)?);
    }
    let reports: Vec<ClassificationReport> = artifacts.iter().map(|a| a.report.clone()).collect();
    let summary = metrics::aggregate_trials(&reports)?;
    Ok((artifacts, summary))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// The reproduction manifest: resolved config, seeds, and input checksums.
pub fn manifest(cfg: &RunConfig) -> Result<String> {
    let mut out = String::new();
    out.push_str("# run manifest\n");
    out.push_str(&cfg.snapshot());
    if let Some(cube) = &cfg.cube {
        writeln!(out, "sha256.cube = {}", sha256_file(cube)?).unwrap();
    }
    if let Some(labels) = &cfg.labels {
        writeln!(out, "sha256.labels = {}", sha256_file(labels)?).unwrap();
    }
    for t in 0..cfg.trials {
        writeln!(out, "trial.{t}.seed = {}", cfg.seed + t as u64).unwrap();
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the fixed-name artifact files of a finished run into `cfg.out`:
/// graph.txt, split.txt, model.ckpt, history.csv, report.txt, map.ppm, and
/// manifest.txt.
pub fn write_artifacts(
    cfg: &RunConfig,
    cube: &HsiCube,
    artifacts: &PipelineArtifacts,
    summary: &TrialSummary,
) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(cfg.out.display().to_string(), e))?;
    write_text(&cfg.out.join("graph.txt"), &graph::export_text(&artifacts.graph))?;

    let mut split_text = String::new();
    for (i, role) in artifacts.split.roles.iter().enumerate() {
        let tag = match role {
            NodeRole::Labeled => "labeled",
            NodeRole::Unlabeled => "unlabeled",
        };
        writeln!(split_text, "{i} {tag}").unwrap();
    }
    write_text(&cfg.out.join("split.txt"), &split_text)?;

    save_model(&artifacts.model, &cfg.out.join("model.ckpt"))?;
    write_text(&cfg.out.join("history.csv"), &artifacts.history.to_csv())?;

    let mut report_text = metrics::format_report(summary);
    let ci = &artifacts.evaluation.ci;
    writeln!(
        report_text,
        "CI      [{:.5}, {:.5}] (mean {:.5}, z = {})",
        ci.lower, ci.mean, ci.upper, ci.z
    )
    .unwrap();
    write_text(&cfg.out.join("report.txt"), &report_text)?;

    metrics::emit_map(
        cube.height,
        cube.width,
        &artifacts.graph.members,
        &artifacts.evaluation.predictions,
        &metrics::default_palette(usize::from(artifacts.graph.num_classes())),
        &cfg.out.join("map.ppm"),
    )?;

    write_text(&cfg.out.join("manifest.txt"), &manifest(cfg)?)?;
    Ok(())
}
