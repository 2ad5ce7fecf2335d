//! Experiment configuration: TOML with nested sections. Unknown keys are
//! rejected so typos fail loudly instead of silently using defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use protoadapt::adapt::CpgaConfig;
use protoadapt::data::{ClassDistributionSpec, DistributionKind, DomainShiftSpec};
use protoadapt::model::SourceTrainConfig;
use protoadapt::proto::Stage1Config;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub source_training: SourceTrainingConfig,
    #[serde(default)]
    pub stage1: Stage1Section,
    #[serde(default)]
    pub stage2: Stage2Section,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_seed() -> u64 {
    0
}


#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    /// Largest per-class sample count.
    #[serde(default = "d_samples_max")]
    pub samples_max: usize,
    #[serde(default)]
    pub source: DistributionConfig,
    #[serde(default)]
    pub target: DistributionConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
}

fn d_classes() -> usize {
    8
}
fn d_input_dim() -> usize {
    16
}
fn d_samples_max() -> usize {
    250
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: d_classes(),
            input_dim: d_input_dim(),
            samples_max: d_samples_max(),
            source: DistributionConfig::default(),
            target: DistributionConfig::default(),
            shift: ShiftConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionConfig {
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_mu")]
    pub mu: f64,
}

fn d_kind() -> String {
    "Bal".to_string()
}
fn d_mu() -> f64 {
    1.0
}

impl Default for DistributionConfig {
    fn default() -> Self {
        DistributionConfig { kind: d_kind(), mu: d_mu() }
    }
}

impl DistributionConfig {
    pub fn to_spec(&self) -> protoadapt::Result<ClassDistributionSpec> {
        Ok(ClassDistributionSpec { kind: self.kind.parse::<DistributionKind>()?, mu: self.mu })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Plane rotation angle in radians.
    #[serde(default = "d_rotation")]
    pub rotation_angle: f64,
    #[serde(default = "d_translation")]
    pub translation_scale: f64,
    #[serde(default = "d_sigma")]
    pub noise_sigma_source: f64,
    #[serde(default = "d_sigma")]
    pub noise_sigma_target: f64,
    #[serde(default = "d_separation")]
    pub mean_separation: f64,
}

fn d_rotation() -> f64 {
    30f64.to_radians()
}
fn d_translation() -> f64 {
    1.5
}
fn d_sigma() -> f64 {
    0.8
}
fn d_separation() -> f64 {
    2.5
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            rotation_angle: d_rotation(),
            translation_scale: d_translation(),
            noise_sigma_source: d_sigma(),
            noise_sigma_target: d_sigma(),
            mean_separation: d_separation(),
        }
    }
}

impl ShiftConfig {
    pub fn to_spec(&self) -> DomainShiftSpec {
        DomainShiftSpec {
            rotation_angle: self.rotation_angle,
            translation_scale: self.translation_scale,
            noise_sigma_source: self.noise_sigma_source,
            noise_sigma_target: self.noise_sigma_target,
            mean_separation: self.mean_separation,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SourceTrainingConfig {
    pub label_smoothing: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub feature_dim: Option<usize>,
}

impl SourceTrainingConfig {
    pub fn to_core(&self, seed: u64) -> SourceTrainConfig {
        let d = SourceTrainConfig::default();
        SourceTrainConfig {
            label_smoothing: self.label_smoothing.unwrap_or(d.label_smoothing),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed,
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: Option<usize>,
    pub prototypes_per_class: Option<usize>,
    pub temperature: Option<f64>,
    pub initial_temperature: Option<f64>,
    pub learning_rate: Option<f64>,
    pub noise_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub weight_decay: Option<f64>,
    pub final_lr_fraction: Option<f64>,
}

impl Stage1Section {
    pub fn to_core(&self, seed: u64) -> Stage1Config {
        let d = Stage1Config::default();
        Stage1Config {
            epochs: self.epochs.unwrap_or(d.epochs),
            prototypes_per_class: self.prototypes_per_class.unwrap_or(d.prototypes_per_class),
            temperature: self.temperature.unwrap_or(d.temperature),
            initial_temperature: self.initial_temperature.unwrap_or(d.initial_temperature),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            seed,
            noise_dim: self.noise_dim.unwrap_or(d.noise_dim),
            hidden: self.hidden.unwrap_or(d.hidden),
            contrastive: true,
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            final_lr_fraction: self.final_lr_fraction.unwrap_or(d.final_lr_fraction),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Stage2Section {
    /// "cpga" or "tcpga"; the CLI `--method` flag overrides it.
    pub method: Option<String>,
    pub epochs: Option<usize>,
    pub temperature: Option<f64>,
    pub momentum_beta: Option<f64>,
    pub elr_weight: Option<f64>,
    pub nc_weight: Option<f64>,
    pub learning_rate: Option<f64>,
    pub extractor_lr_scale: Option<f64>,
    pub batch_size: Option<usize>,
    pub projector_hidden: Option<(usize, usize)>,
    pub contrast_dim: Option<usize>,
    pub confidence_weighting: Option<bool>,
    pub update_source_classifier: Option<bool>,
    #[serde(default)]
    pub oracle: OracleSection,
}

impl Stage2Section {
    pub fn to_core(&self, seed: u64) -> CpgaConfig {
        let d = CpgaConfig::default();
        CpgaConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            temperature: self.temperature.unwrap_or(d.temperature),
            momentum_beta: self.momentum_beta.unwrap_or(d.momentum_beta),
            elr_weight: self.elr_weight.unwrap_or(d.elr_weight),
            nc_weight: self.nc_weight.unwrap_or(d.nc_weight),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            extractor_lr_scale: self.extractor_lr_scale.unwrap_or(d.extractor_lr_scale),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            seed,
            projector_hidden: self.projector_hidden.unwrap_or(d.projector_hidden),
            contrast_dim: self.contrast_dim.unwrap_or(d.contrast_dim),
            confidence_weighting: self.confidence_weighting.unwrap_or(d.confidence_weighting),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Probability that the cached oracle label is the true one.
    pub accuracy: Option<f64>,
    /// Smoothing mass spread over all classes.
    pub smoothing: Option<f64>,
    /// CSV of per-sample probabilities; replaces the simulated oracle.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.dataset.classes < 2 {
            return Err("dataset.classes must be at least 2".into());
        }
        self.dataset
            .source
            .to_spec()
            .and(self.dataset.target.to_spec())
            .map_err(|e| e.to_string())?;
        if let Some(file) = &self.stage2.oracle.file {
            if !file.exists() {
                return Err(format!("oracle file {} does not exist", file.display()));
            }
        }
        Ok(())
    }

    /// Output directory: CLI flag, then config, then the `PROTOADAPT_OUT`
    /// environment variable, then ./runs.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(f) = flag {
            return f.to_path_buf();
        }
        if let Some(d) = &self.output.dir {
            return d.clone();
        }
        if let Ok(root) = std::env::var("PROTOADAPT_OUT") {
            return PathBuf::from(root);
        }
        PathBuf::from("runs")
    }

    /// Imbalance ratio used in summary rows: the ratio of the skewed specs
    /// (1 when both domains are balanced).
    pub fn summary_mu(&self) -> f64 {
        let pick = |d: &DistributionConfig| if d.kind.eq_ignore_ascii_case("bal") { 1.0 } else { d.mu };
        pick(&self.dataset.source).max(pick(&self.dataset.target))
    }

    pub fn shift_label(&self) -> String {
        format!("{}-{}", self.dataset.source.kind, self.dataset.target.kind)
    }
}
