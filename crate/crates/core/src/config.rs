//! Flat key=value run configuration shared by every pipeline stage.
//!
//! One text file, `key = value` per line, `#` comments; command-line
//! overrides are applied as extra key=value pairs on top. Unknown keys are
//! rejected.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::gan::{GanConfig, TilingOrder};
use crate::optim::LrSchedule;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Run the rebalancing stage whenever minority classes exist.
    Auto,
    Off,
}

/// KL term weight: a fixed factor or 1 / (training-set size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlScale {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub trials: usize,

    // segmentation and split
    pub superpixels: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub ratio: f64,

    // minority rebalancing
    pub augment: AugmentMode,
    pub gan_epochs: usize,
    pub gan_lr: f64,
    pub gan_gen_std: f64,
    pub gan_disc_std: f64,
    pub alpha_min: f64,
    pub alpha_fill: f64,
    pub gan_tiling: TilingOrder,

    // network
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout: f64,
    pub prior_std: f64,
    pub rho_init: f64,
    pub graph_conv: bool,

    // training
    pub epochs: u64,
    pub lr: f64,
    pub gamma: f64,
    pub milestones: Vec<u64>,
    pub weight_decay: f64,
    pub pseudo_threshold: f64,
    pub pseudo_start: u64,
    pub pseudo_every: u64,
    pub pseudo_samples: usize,
    pub s_eval: usize,
    pub z: f64,
    pub confidence: f64,
    pub t1: f64,
    pub t2: f64,
    pub kl_scale: KlScale,
    pub gate_class: Option<u16>,

    // reporting
    pub pixel_weighted: bool,

    // synthetic-scene generation (the synth subcommand)
    pub synth_classes: u16,
    pub synth_grid: usize,
    pub synth_blob: usize,
    pub synth_bands: usize,
    pub synth_noise: f64,
    pub synth_border: usize,
    pub synth_gutter: usize,
    pub synth_separation: f64,
    pub synth_blocks: Option<Vec<u16>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cube: None,
            labels: None,
            out: PathBuf::from("out"),
            seed: 0,
            trials: 1,
            superpixels: 2000,
            compactness: 0.08,
            slic_iters: 10,
            ratio: 0.1,
            augment: AugmentMode::Auto,
            gan_epochs: 2000,
            gan_lr: 1e-7,
            gan_gen_std: 1e-5,
            gan_disc_std: 0.01,
            alpha_min: 0.02,
            alpha_fill: 0.05,
            gan_tiling: TilingOrder::Cyclic,
            hidden1: 128,
            hidden2: 64,
            dropout: 0.2,
            prior_std: 1.0,
            rho_init: -5.0,
            graph_conv: true,
            epochs: 4000,
            lr: 1e-3,
            gamma: 0.9,
            milestones: vec![1500, 2500, 3500],
            weight_decay: 5e-4,
            pseudo_threshold: 0.9,
            pseudo_start: 500,
            pseudo_every: 100,
            pseudo_samples: 5,
            s_eval: 30,
            z: 1.96,
            confidence: 0.95,
            t1: 0.90,
            t2: 0.95,
            kl_scale: KlScale::Fixed(1.0),
            gate_class: None,
            pixel_weighted: false,
            synth_classes: 4,
            synth_grid: 4,
            synth_blob: 12,
            synth_bands: 12,
            synth_noise: 0.05,
            synth_border: 0,
            synth_gutter: 2,
            synth_separation: 1.0,
            synth_blocks: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key}")))
}

impl RunConfig {
    /// Apply one key=value setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "cube" => self.cube = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "superpixels" => self.superpixels = parse(key, value)?,
            "compactness" => self.compactness = parse(key, value)?,
            "slic_iters" => self.slic_iters = parse(key, value)?,
            "ratio" => self.ratio = parse(key, value)?,
            "augment" => {
                self.augment = match value {
                    "auto" => AugmentMode::Auto,
                    "off" => AugmentMode::Off,
                    _ => return Err(Error::config(format!("augment must be auto|off, got {value:?}"))),
                }
            }
            "gan_epochs" => self.gan_epochs = parse(key, value)?,
            "gan_lr" => self.gan_lr = parse(key, value)?,
            "gan_gen_std" => self.gan_gen_std = parse(key, value)?,
            "gan_disc_std" => self.gan_disc_std = parse(key, value)?,
            "alpha_min" => self.alpha_min = parse(key, value)?,
            "alpha_fill" => self.alpha_fill = parse(key, value)?,
            "gan_tiling" => {
                self.gan_tiling = match value {
                    "cyclic" => TilingOrder::Cyclic,
                    "block" => TilingOrder::Block,
                    _ => return Err(Error::config(format!("gan_tiling must be cyclic|block, got {value:?}"))),
                }
            }
            "hidden1" => self.hidden1 = parse(key, value)?,
            "hidden2" => self.hidden2 = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "prior_std" => self.prior_std = parse(key, value)?,
            "rho_init" => self.rho_init = parse(key, value)?,
            "graph_conv" => {
                self.graph_conv = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(Error::config(format!("graph_conv must be on|off, got {value:?}"))),
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse("milestones", s.trim()))
                    .collect::<Result<_>>()?
            }
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "pseudo_threshold" => self.pseudo_threshold = parse(key, value)?,
            "pseudo_start" => self.pseudo_start = parse(key, value)?,
            "pseudo_every" => self.pseudo_every = parse(key, value)?,
            "pseudo_samples" => self.pseudo_samples = parse(key, value)?,
            "s_eval" => self.s_eval = parse(key, value)?,
            "z" => self.z = parse(key, value)?,
            "confidence" => self.confidence = parse(key, value)?,
            "t1" => self.t1 = parse(key, value)?,
            "t2" => self.t2 = parse(key, value)?,
            "kl_scale" => {
                self.kl_scale = if value == "auto" {
                    KlScale::Auto
                } else {
                    KlScale::Fixed(parse(key, value)?)
                }
            }
            "gate_class" => {
                self.gate_class = if value == "overall" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "pixel_weighted" => self.pixel_weighted = parse(key, value)?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "synth_grid" => self.synth_grid = parse(key, value)?,
            "synth_blob" => self.synth_blob = parse(key, value)?,
            "synth_bands" => self.synth_bands = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "synth_border" => self.synth_border = parse(key, value)?,
            "synth_gutter" => self.synth_gutter = parse(key, value)?,
            "synth_separation" => self.synth_separation = parse(key, value)?,
            "synth_blocks" => {
                self.synth_blocks = Some(
                    value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse("synth_blocks", s.trim()))
                        .collect::<Result<_>>()?,
                )
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a whole config file body on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn gan_config(&self, seed: u64) -> GanConfig {
        GanConfig {
            generator_init_std: self.gan_gen_std,
            discriminator_init_std: self.gan_disc_std,
            learning_rate: self.gan_lr,
            epochs: self.gan_epochs,
            alpha_min: self.alpha_min,
            alpha_fill: self.alpha_fill,
            tiling: self.gan_tiling,
            seed,
        }
    }

    /// Trainer settings for one trial; the KL scale is resolved against the
    /// final training-set size.
    pub fn train_config(&self, seed: u64, train_set_size: usize) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            weight_decay: self.weight_decay,
            schedule: LrSchedule::new(self.lr, self.gamma, self.milestones.clone()),
            pseudo_threshold: self.pseudo_threshold,
            pseudo_start: self.pseudo_start,
            pseudo_every: self.pseudo_every,
            pseudo_samples: self.pseudo_samples,
            s_eval: self.s_eval,
            z: self.z,
            confidence: self.confidence,
            t1: self.t1,
            t2: self.t2,
            kl_scale: match self.kl_scale {
                KlScale::Fixed(v) => v,
                KlScale::Auto => 1.0 / train_set_size.max(1) as f64,
            },
            gate_class: self.gate_class,
            seed,
        }
    }

    /// Stable snapshot of every resolved setting, one `key = value` per
    /// line, for the run manifest.
    pub fn snapshot(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let mut lines = vec![
            format!("cube = {}", path(&self.cube)),
            format!("labels = {}", path(&self.labels)),
            format!("out = {}", self.out.display()),
            format!("seed = {}", self.seed),
            format!("trials = {}", self.trials),
            format!("superpixels = {}", self.superpixels),
            format!("compactness = {}", self.compactness),
            format!("slic_iters = {}", self.slic_iters),
            format!("ratio = {}", self.ratio),
            format!(
                "augment = {}",
                if self.augment == AugmentMode::Auto { "auto" } else { "off" }
            ),
            format!("gan_epochs = {}", self.gan_epochs),
            format!("gan_lr = {}", self.gan_lr),
            format!("gan_gen_std = {}", self.gan_gen_std),
            format!("gan_disc_std = {}", self.gan_disc_std),
            format!("alpha_min = {}", self.alpha_min),
            format!("alpha_fill = {}", self.alpha_fill),
            format!(
                "gan_tiling = {}",
                if self.gan_tiling == TilingOrder::Cyclic { "cyclic" } else { "block" }
            ),
            format!("hidden1 = {}", self.hidden1),
            format!("hidden2 = {}", self.hidden2),
            format!("dropout = {}", self.dropout),
            format!("prior_std = {}", self.prior_std),
            format!("rho_init = {}", self.rho_init),
            format!("graph_conv = {}", if self.graph_conv { "on" } else { "off" }),
            format!("epochs = {}", self.epochs),
            format!("lr = {}", self.lr),
            format!("gamma = {}", self.gamma),
            format!(
                "milestones = {}",
                self.milestones.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
            ),
            format!("weight_decay = {}", self.weight_decay),
            format!("pseudo_threshold = {}", self.pseudo_threshold),
            format!("pseudo_start = {}", self.pseudo_start),
            format!("pseudo_every = {}", self.pseudo_every),
            format!("pseudo_samples = {}", self.pseudo_samples),
            format!("s_eval = {}", self.s_eval),
            format!("z = {}", self.z),
            format!("confidence = {}", self.confidence),
            format!("t1 = {}", self.t1),
            format!("t2 = {}", self.t2),
            format!(
                "kl_scale = {}",
                match self.kl_scale {
                    KlScale::Fixed(v) => v.to_string(),
                    KlScale::Auto => "auto".to_string(),
                }
            ),
            format!(
                "gate_class = {}",
                self.gate_class.map_or("overall".to_string(), |c| c.to_string())
            ),
            format!("pixel_weighted = {}", self.pixel_weighted),
            format!("synth_classes = {}", self.synth_classes),
            format!("synth_grid = {}", self.synth_grid),
            format!("synth_blob = {}", self.synth_blob),
            format!("synth_bands = {}", self.synth_bands),
            format!("synth_noise = {}", self.synth_noise),
            format!("synth_border = {}", self.synth_border),
            format!("synth_gutter = {}", self.synth_gutter),
            format!("synth_separation = {}", self.synth_separation),
            format!(
                "synth_blocks = {}",
                self.synth_blocks.as_ref().map_or("-".to_string(), |b| {
                    b.iter().map(u16::to_string).collect::<Vec<_>>().join(",")
                })
            ),
        ];
        lines.push(String::new());
        lines.join("\n")
    }
}
