//! Run configuration: a sectioned TOML document covering model, training,
//! sampling, data, and evaluation settings. Unknown keys are rejected, and
//! the fully-defaulted document can be serialized back out so every run
//! leaves an explicit record of the values it actually used.

use std::path::{Path, PathBuf};

use cebm_core::dataio::SyntheticKind;
use cebm_core::model::{
    Activation, BaselineEbm, CebmModel, EncoderConfig, GmmCebmModel, LayerSpec, Model,
};
use cebm_core::sampler::SgldConfig;
use cebm_core::trainer::{NoiseUnit, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable that re-roots `paths.out_dir` without editing the
/// config file.
pub const OUT_ROOT_ENV: &str = "CEBM_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stochastic choice in a run derives from it.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sgld: SgldConfig,
    pub data: DataSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            sgld: SgldConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML document, rejecting unknown keys with positional context.
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        self.data.validate()?;
        self.eval.validate()?;
        self.to_train_config()
            .validate()
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    /// The fully-defaulted document, suitable for the provenance echo.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Assemble the trainer configuration from the train and sgld sections
    /// plus the master seed.
    pub fn to_train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            l2_energy_coef: t.l2_energy_coef,
            data_noise: t.data_noise,
            data_noise_unit: t.data_noise_unit,
            buffer_capacity: t.buffer_capacity,
            reinit_prob: t.reinit_prob,
            sgld: self.sgld.clone(),
            seed: self.seed,
        }
    }

    /// Output directory after applying the environment override: when
    /// `CEBM_OUT_ROOT` is set, the configured directory is re-rooted under
    /// it (a leading `/` is stripped first so absolute paths nest too).
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => {
                let rel = self
                    .paths
                    .out_dir
                    .strip_prefix("/")
                    .unwrap_or(&self.paths.out_dir);
                Path::new(&root).join(rel)
            }
            _ => self.paths.out_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cebm,
    GmmCebm,
    BaselineEbm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderTemplate {
    ConvSmall,
    ConvTiny,
    /// Three stride-2 convolutions and a dense head; shift-invariant enough
    /// for jittered patterns while staying cheap on a CPU.
    ConvDeep,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Latent dimension K of the Gaussian statistic heads.
    pub latent_dim: usize,
    /// Mixture components L; meaningful only for `gmm-cebm`.
    pub components: usize,
    pub encoder: EncoderTemplate,
    /// Dense trunk widths; only the `mlp` template reads them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    pub stat_head_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cebm,
            latent_dim: 16,
            components: 1,
            encoder: EncoderTemplate::ConvTiny,
            hidden: None,
            stat_head_scale: 1.0,
        }
    }
}

impl ModelSection {
    fn validate(&self) -> Result<(), String> {
        if self.latent_dim == 0 {
            return Err("model.latent_dim must be at least 1".into());
        }
        if self.components == 0 {
            return Err("model.components must be at least 1".into());
        }
        if self.kind != ModelKind::GmmCebm && self.components != 1 {
            return Err(format!(
                "model.components = {} only applies to kind = \"gmm-cebm\"",
                self.components
            ));
        }
        if self.encoder != EncoderTemplate::Mlp {
            if let Some(h) = &self.hidden {
                return Err(format!(
                    "model.hidden = {h:?} only applies to encoder = \"mlp\""
                ));
            }
        }
        if matches!(&self.hidden, Some(h) if h.is_empty()) {
            return Err("model.hidden must name at least one layer width".into());
        }
        if !(self.stat_head_scale > 0.0) || !self.stat_head_scale.is_finite() {
            return Err("model.stat_head_scale must be positive and finite".into());
        }
        Ok(())
    }

    fn encoder_config(&self, shape: [usize; 3]) -> EncoderConfig {
        let [c, h, w] = shape;
        match self.encoder {
            EncoderTemplate::ConvSmall => EncoderConfig::conv_small(c, h, w, self.latent_dim),
            EncoderTemplate::ConvTiny => EncoderConfig::conv_tiny(c, h, w, self.latent_dim),
            EncoderTemplate::ConvDeep => {
                let conv = |ch: usize| LayerSpec::Conv {
                    out_channels: ch,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    act: Activation::Swish,
                };
                EncoderConfig {
                    in_channels: c,
                    in_height: h,
                    in_width: w,
                    layers: vec![
                        conv(8),
                        conv(16),
                        conv(32),
                        LayerSpec::Dense {
                            out: 64,
                            act: Activation::Swish,
                        },
                    ],
                    latent_dim: self.latent_dim,
                }
            }
            EncoderTemplate::Mlp => {
                let widths = self.hidden.clone().unwrap_or_else(|| vec![64]);
                let mut enc = EncoderConfig::mlp(c * h * w, &widths, self.latent_dim);
                // Keep the declared image shape so dataset checks line up;
                // dense layers flatten the input regardless.
                enc.in_channels = c;
                enc.in_height = h;
                enc.in_width = w;
                enc
            }
        }
    }

    /// Instantiate the configured model for images of the given shape.
    pub fn build(&self, shape: [usize; 3], seed: u64) -> cebm_core::Result<Model> {
        let enc = self.encoder_config(shape);
        Ok(match self.kind {
            ModelKind::Cebm => Model::Cebm(CebmModel::new(enc, self.stat_head_scale, seed)?),
            ModelKind::GmmCebm => Model::Gmm(GmmCebmModel::new(
                enc,
                self.components,
                self.stat_head_scale,
                seed,
            )?),
            ModelKind::BaselineEbm => Model::Baseline(BaselineEbm::new(enc, seed)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_energy_coef: f64,
    pub data_noise: f64,
    pub data_noise_unit: NoiseUnit,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        // Mirror the library defaults so the echoed document and the
        // trainer agree without a second list of constants.
        let t = TrainConfig::default();
        Self {
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            l2_energy_coef: t.l2_energy_coef,
            data_noise: t.data_noise,
            data_noise_unit: t.data_noise_unit,
            buffer_capacity: t.buffer_capacity,
            reinit_prob: t.reinit_prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic generator; ignored for `idx`.
    pub kind: SyntheticKind,
    pub image_size: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub noise_std: f64,
    pub jitter: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
    /// Optional square downscale applied to IDX images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSection>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            kind: SyntheticKind::BarPatterns,
            image_size: 16,
            train_per_class: 120,
            eval_per_class: 20,
            num_classes: None,
            noise_std: 0.05,
            jitter: 0,
            train_images: None,
            train_labels: None,
            eval_images: None,
            eval_labels: None,
            target_size: None,
            ood: None,
        }
    }
}

impl DataSection {
    fn validate(&self) -> Result<(), String> {
        match self.source {
            DataSource::Synthetic => {
                if self.image_size < 4 {
                    return Err("data.image_size must be at least 4".into());
                }
                if self.train_per_class == 0 || self.eval_per_class == 0 {
                    return Err("data.train_per_class and data.eval_per_class must be positive".into());
                }
            }
            DataSource::Idx => {
                if self.train_images.is_none() || self.train_labels.is_none() {
                    return Err(
                        "data.train_images and data.train_labels are required for source = \"idx\""
                            .into(),
                    );
                }
            }
        }
        if let Some(ood) = &self.ood {
            ood.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    Constant,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    pub kind: OodKind,
    /// Pixel levels for constant images.
    pub values: Vec<f64>,
    pub count_per_value: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl Default for OodSection {
    fn default() -> Self {
        Self {
            kind: OodKind::Constant,
            values: vec![0.25, 0.5, 0.75, 1.0],
            count_per_value: 10,
            images: None,
            labels: None,
        }
    }
}

impl OodSection {
    fn validate(&self) -> Result<(), String> {
        match self.kind {
            OodKind::Constant => {
                if self.values.is_empty() || self.count_per_value == 0 {
                    return Err(
                        "data.ood.values and data.ood.count_per_value must be nonempty/positive"
                            .into(),
                    );
                }
                if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err("data.ood.values must lie in [0, 1]".into());
                }
            }
            OodKind::Idx => {
                if self.images.is_none() || self.labels.is_none() {
                    return Err(
                        "data.ood.images and data.ood.labels are required for kind = \"idx\""
                            .into(),
                    );
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Knn,
    Ood,
    Fewlabel,
    Collapse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Knn => "knn",
            MetricKind::Ood => "ood",
            MetricKind::Fewlabel => "fewlabel",
            MetricKind::Collapse => "collapse",
        }
    }
}

/// Per-class label budget: a count or the full training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerClassSpec {
    Count(usize),
    Full,
}

impl Serialize for PerClassSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PerClassSpec::Count(n) => s.serialize_u64(*n as u64),
            PerClassSpec::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for PerClassSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(D::Error::custom("per_class counts must be at least 1")),
            Raw::Count(n) => Ok(PerClassSpec::Count(n)),
            Raw::Word(w) if w == "full" => Ok(PerClassSpec::Full),
            Raw::Word(w) => Err(D::Error::custom(format!(
                "per_class entries are counts or \"full\", got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Metrics run when the command line does not narrow the list.
    pub metrics: Vec<MetricKind>,
    /// Neighbor count for the k-NN report.
    pub k: usize,
    /// Label budgets for the few-label probe.
    pub per_class: Vec<PerClassSpec>,
    pub repeats: usize,
    /// Monte Carlo batch for the collapse estimators.
    pub mc_batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metrics: vec![
                MetricKind::Knn,
                MetricKind::Ood,
                MetricKind::Fewlabel,
                MetricKind::Collapse,
            ],
            k: 1,
            per_class: vec![
                PerClassSpec::Count(1),
                PerClassSpec::Count(10),
                PerClassSpec::Full,
            ],
            repeats: 10,
            mc_batch: 256,
        }
    }
}

impl EvalSection {
    fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("eval.k must be at least 1".into());
        }
        if self.repeats == 0 {
            return Err("eval.repeats must be at least 1".into());
        }
        if self.mc_batch == 0 {
            return Err("eval.mc_batch must be at least 1".into());
        }
        if self.per_class.is_empty() {
            return Err("eval.per_class must name at least one budget".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("cebm-out"),
        }
    }
}
