//! The flat run configuration shared by every subcommand.
//!
//! A config file is a flat JSON object whose keys are the fields of
//! [`RunConfig`], all optional. Command-line flags override file values and
//! a preset fills whatever is still unset. The fully resolved object is
//! echoed into the output directory, so it can be fed back with `--config`
//! to repeat a run.

use std::fs;
use std::path::{Path, PathBuf};

use rescnds::diagnostic::{ProbeUnit, DEFAULT_THRESHOLD};
use rescnds::graph::{ArchConfig, ConvStackConfig, ResidualOptions};
use rescnds::supervision::AlphaDecay;
use rescnds::trainer::{width_scaled_std, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Default values for everything a run does not set explicitly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 227x227 inputs, full channel widths, 205 classes, batch 256, 50
    /// epochs.
    #[default]
    Full,
    /// 32x32 inputs, width 1/8, 3 classes, batch 64, 30 epochs.
    Desk,
}

macro_rules! run_config {
    ($($(#[$m:meta])* $name:ident: $ty:ty,)*) => {
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct RunConfig {
            $($(#[$m])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $name: Option<$ty>,)*
        }

        impl RunConfig {
            /// Fields set in `other` replace those in `self`.
            pub fn overlay(mut self, other: RunConfig) -> RunConfig {
                $(if other.$name.is_some() { self.$name = other.$name; })*
                self
            }
        }
    };
}

run_config! {
    preset: Preset,
    seed: u64,
    out: PathBuf,
    /// Architecture file; when absent the graph is built from the fields below.
    arch: PathBuf,
    /// Directory holding `train.json` and `test.json` manifests.
    dataset: PathBuf,

    residual: bool,
    width: f64,
    classes: usize,
    input_size: usize,
    aux_attach: String,
    no_aux: bool,
    post_add_relu: bool,
    /// Build a plain conv stack of this depth instead of the CNDS trunk.
    stack_depth: usize,

    epochs: usize,
    batch: usize,
    lr: f64,
    lr_period: usize,
    momentum: f64,
    weight_decay: f64,
    alpha0: f64,
    alpha_decay: AlphaDecay,
    init_std: f64,
    resume: bool,

    ten_crop: bool,
    checkpoint: PathBuf,
    split: String,

    threshold: f64,
    iters: usize,
    probe_unit: ProbeUnit,
    probe_batch: usize,
    probe_sgd_lr: f64,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Fills every unset field from the preset. The result has no `None`
    /// left except for the optional paths (`arch`, `dataset`, `checkpoint`)
    /// and the probe's SGD rate.
    pub fn resolve(self) -> RunConfig {
        let preset = self.preset.unwrap_or_default();
        let desk = preset == Preset::Desk;
        let residual = self.residual.unwrap_or(false);
        let width = self.width.unwrap_or(if desk { 0.125 } else { 1.0 });
        let base = TrainConfig::default();
        let defaults = RunConfig {
            preset: Some(preset),
            seed: Some(0),
            out: Some(PathBuf::from("out")),
            arch: None,
            dataset: None,
            residual: Some(residual),
            width: Some(width),
            classes: Some(if desk { 3 } else { 205 }),
            input_size: Some(if desk { 32 } else { 227 }),
            // a branch on conv4_2 sits on the stage-4 merge once shortcuts exist
            aux_attach: Some(if residual { "conv4_2" } else { "conv3_2" }.to_owned()),
            no_aux: Some(false),
            post_add_relu: Some(false),
            stack_depth: None,
            epochs: Some(if desk { 30 } else { base.epochs }),
            batch: Some(if desk { 64 } else { base.batch_size }),
            lr: Some(base.lr),
            lr_period: Some(base.lr_period),
            momentum: Some(base.momentum),
            weight_decay: Some(base.weight_decay),
            alpha0: Some(base.alpha0),
            alpha_decay: Some(base.alpha_decay),
            init_std: Some(width_scaled_std(base.init_std, width)),
            resume: Some(false),
            ten_crop: Some(false),
            checkpoint: None,
            split: Some("test".to_owned()),
            threshold: Some(DEFAULT_THRESHOLD),
            iters: Some(10),
            probe_unit: Some(ProbeUnit::Iter),
            probe_batch: Some(8),
            probe_sgd_lr: None,
        };
        defaults.overlay(self)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn arch_config(&self) -> Result<ArchConfig, CliError> {
        let side = self.input_size.unwrap_or(227);
        let aux = if self.no_aux == Some(true) {
            None
        } else {
            Some(self.aux_attach.clone().unwrap_or_else(|| "conv3_2".into()))
        };
        let cfg = ArchConfig {
            input_shape: [3, side, side],
            num_classes: self.classes.unwrap_or(205),
            width: self.width.unwrap_or(1.0),
            aux_attach: aux,
            post_add_relu: self.post_add_relu.unwrap_or(false),
            ..ArchConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn residual_options(&self) -> ResidualOptions {
        ResidualOptions {
            post_add_relu: self.post_add_relu.unwrap_or(false),
        }
    }

    pub fn stack_config(&self) -> Option<ConvStackConfig> {
        self.stack_depth.map(|depth| {
            let d = ConvStackConfig::default();
            ConvStackConfig {
                depth,
                input_shape: self.input_size.map_or(d.input_shape, |s| [3, s, s]),
                num_classes: self.classes.unwrap_or(d.num_classes),
                ..d
            }
        })
    }

    /// Training settings; `crop` is the network's input side.
    pub fn train_config(&self, crop: usize) -> Result<TrainConfig, CliError> {
        let base = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            lr_period: self.lr_period.unwrap_or(base.lr_period),
            momentum: self.momentum.unwrap_or(base.momentum),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            alpha0: self.alpha0.unwrap_or(base.alpha0),
            alpha_decay: self.alpha_decay.unwrap_or(base.alpha_decay),
            seed: self.seed(),
            init_std: self.init_std.unwrap_or(base.init_std),
            crop: Some(crop),
            val_mode: Default::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
