//! Flat key-value run configuration (TOML syntax).
//!
//! Every key is optional; see [`RunConfig::default`] for the values used
//! when a key is absent. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSpec, LabelSource, LoadedDataset};
use crate::error::{Error, Result};
use crate::gmm::{GmmMode, GmmSpec};
use crate::nn::{NetConfig, PointMode};
use crate::objectives::{AdvFlavor, DomainMode, LossWeights};
use crate::training::{TrainSettings, Variant, DEFAULT_LR};

pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// One sub-directory per domain.
    Folders,
    /// CSV of attribute bits.
    Manifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full depth, batch size 1.
    Standard,
    /// Reduced depth for 32x32 inputs, batch size 32.
    Digits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,

    pub data_root: PathBuf,
    pub label_mode: LabelMode,
    /// Manifest path, relative to `data_root` unless absolute.
    pub manifest: PathBuf,
    pub image_size: usize,
    pub split_seed: u64,
    pub test_fraction: f64,
    /// When nonzero, a procedural digit set with this many domains is built
    /// into `data_root` (or `<out>/toy_data` if `data_root` is empty).
    pub toy_domains: usize,
    pub toy_images_per_domain: usize,

    pub preset: Preset,
    pub base_channels: usize,
    pub mlp_dim: usize,
    /// Code dimension per domain block.
    pub z_dim: usize,
    pub attention: bool,
    pub guidance_channel: bool,
    pub logvar_min: f64,
    pub logvar_max: f64,

    pub gmm_radius: f64,
    pub gmm_scale: f64,
    pub exclusive_groups: Vec<Vec<String>>,

    pub lambda_s_rec: f64,
    pub lambda_cyc: f64,
    pub lambda_kl: f64,
    pub lambda_iso: f64,
    pub lambda_perc: f64,
    pub adv_flavor: AdvFlavor,
    pub point_mode: PointMode,

    /// Defaults to 32 for the digits preset and 1 otherwise.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub steps: u64,
    pub mirror_prob: f64,
    pub variant: Variant,
    pub log_every: u64,
    pub checkpoint_every: u64,

    pub probe_steps: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,

    pub eval_inputs: usize,
    pub eval_samples: usize,
    pub interp_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            seed: 0,
            data_root: PathBuf::new(),
            label_mode: LabelMode::Folders,
            manifest: PathBuf::from("labels.csv"),
            image_size: 32,
            split_seed: 0,
            test_fraction: 0.1,
            toy_domains: 0,
            toy_images_per_domain: 1000,
            preset: Preset::Digits,
            base_channels: 64,
            mlp_dim: 256,
            z_dim: 8,
            attention: false,
            guidance_channel: false,
            logvar_min: -10.0,
            logvar_max: 10.0,
            gmm_radius: 1.0,
            gmm_scale: 0.5,
            exclusive_groups: Vec::new(),
            lambda_s_rec: 10.0,
            lambda_cyc: 10.0,
            lambda_kl: 0.1,
            lambda_iso: 0.1,
            lambda_perc: 0.0,
            adv_flavor: AdvFlavor::default(),
            point_mode: PointMode::default(),
            batch_size: None,
            lr: DEFAULT_LR,
            steps: 100_000,
            mirror_prob: 0.5,
            variant: Variant::Full,
            log_every: 100,
            checkpoint_every: 1000,
            probe_steps: 400,
            probe_batch: 32,
            probe_lr: 2e-3,
            eval_inputs: 100,
            eval_samples: 10,
            interp_frames: 9,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration into the output directory.
    pub fn snapshot(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(SNAPSHOT_NAME);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.preset {
            Preset::Digits => 32,
            Preset::Standard => 1,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_s_rec: self.lambda_s_rec,
            lambda_cyc: self.lambda_cyc,
            lambda_kl: self.lambda_kl,
            lambda_iso: self.lambda_iso,
            lambda_perc: self.lambda_perc,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size(),
            base_lr: self.lr,
            weights: self.loss_weights(),
            adv_flavor: self.adv_flavor,
            domain_mode: match self.label_mode {
                LabelMode::Folders => DomainMode::Categorical,
                LabelMode::Manifest => DomainMode::Multilabel,
            },
            point_mode: self.point_mode,
            mirror_prob: self.mirror_prob,
            variant: self.variant,
            seed: self.seed,
        }
    }

    /// Checks every key and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = self.train_settings().validate();
        if self.out.as_os_str().is_empty() {
            errs.push("out must be set".into());
        }
        if self.data_root.as_os_str().is_empty() && self.toy_domains == 0 {
            errs.push("data_root must be set unless toy_domains > 0".into());
        }
        if self.toy_domains == 1 {
            errs.push("toy_domains must be 0 or at least 2".into());
        }
        if self.toy_domains > 0 && self.label_mode != LabelMode::Folders {
            errs.push("the toy set uses label_mode = \"folders\"".into());
        }
        if self.toy_domains > 0 && self.toy_images_per_domain == 0 {
            errs.push("toy_images_per_domain must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            errs.push(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        if self.z_dim == 0 {
            errs.push("z_dim must be >= 1".into());
        }
        if self.base_channels == 0 {
            errs.push("base_channels must be >= 1".into());
        }
        if self.mlp_dim == 0 {
            errs.push("mlp_dim must be >= 1".into());
        }
        if !(self.logvar_min < self.logvar_max) {
            errs.push(format!(
                "logvar_min ({}) must be below logvar_max ({})",
                self.logvar_min, self.logvar_max
            ));
        }
        if !(self.gmm_radius.is_finite() && self.gmm_radius > 0.0) {
            errs.push(format!("gmm_radius must be positive, got {}", self.gmm_radius));
        }
        if !(self.gmm_scale.is_finite() && self.gmm_scale > 0.0) {
            errs.push(format!("gmm_scale must be positive, got {}", self.gmm_scale));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            errs.push("log_every and checkpoint_every must be >= 1".into());
        }
        if self.probe_steps == 0 || self.probe_batch == 0 || !(self.probe_lr > 0.0) {
            errs.push("probe_steps, probe_batch and probe_lr must be positive".into());
        }
        if self.eval_inputs == 0 {
            errs.push("eval_inputs must be >= 1".into());
        }
        if self.eval_samples < 2 {
            errs.push("eval_samples must be >= 2".into());
        }
        if self.interp_frames < 2 {
            errs.push("interp_frames must be >= 2".into());
        }
        let probe_net = self.net_config(8, 2);
        if let Err(Error::Config(e)) = probe_net.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Network layout for a prior of `code_dim` and `n_domains` label bits.
    pub fn net_config(&self, code_dim: usize, n_domains: usize) -> NetConfig {
        let base = match self.preset {
            Preset::Standard => NetConfig::standard(self.image_size, self.image_size, code_dim, n_domains),
            Preset::Digits => NetConfig {
                height: self.image_size,
                width: self.image_size,
                ..NetConfig::digits(code_dim, n_domains)
            },
        };
        NetConfig {
            base_channels: self.base_channels,
            mlp_dim: self.mlp_dim,
            attention: self.attention,
            guidance_channel: self.guidance_channel,
            logvar_range: (self.logvar_min, self.logvar_max),
            ..base
        }
    }

    /// Prior over the given domain (folders) or attribute (manifest) names.
    pub fn gmm_spec(&self, names: &[String]) -> GmmSpec {
        let mut spec = match self.label_mode {
            LabelMode::Folders => GmmSpec::categorical(names, self.z_dim, self.gmm_radius, self.gmm_scale),
            LabelMode::Manifest => GmmSpec::factorized(names, self.z_dim, self.gmm_radius, self.gmm_scale),
        };
        if spec.mode == GmmMode::Factorized {
            spec.exclusive_groups = self.exclusive_groups.clone();
        }
        spec
    }

    fn toy_root(&self) -> PathBuf {
        if self.data_root.as_os_str().is_empty() {
            self.out.join("toy_data")
        } else {
            self.data_root.clone()
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: if self.toy_domains > 0 {
                self.toy_root()
            } else {
                self.data_root.clone()
            },
            labels: match self.label_mode {
                LabelMode::Folders => LabelSource::Folders,
                LabelMode::Manifest => LabelSource::Manifest {
                    path: self.manifest.clone(),
                },
            },
            height: self.image_size,
            width: self.image_size,
            split_seed: self.split_seed,
            test_fraction: self.test_fraction,
        }
    }

    /// Builds the toy set first when configured and absent, then loads.
    pub fn load_dataset(&self) -> Result<LoadedDataset> {
        let spec = self.dataset_spec();
        if self.toy_domains > 0 && !spec.root.exists() {
            let n = self.toy_domains * self.toy_images_per_domain;
            log::info!("building {} toy domains of {} images in {}", self.toy_domains, self.toy_images_per_domain, spec.root.display());
            let source: Vec<_> = data::synth_digits(n, self.image_size, self.split_seed)
                .into_iter()
                .map(|(g, _)| g)
                .collect();
            let tmp = spec.root.with_extension("partial");
            if tmp.exists() {
                fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
            }
            data::build_toy_domains(&source, self.toy_domains, self.split_seed, &tmp)?;
            fs::rename(&tmp, &spec.root).map_err(|e| Error::io(&spec.root, e))?;
        }
        data::load_dataset(&spec)
    }
}
