//! Flat run configuration: one TOML table holding every tunable, mapped onto
//! the per-module configs.

use std::path::{Path, PathBuf};

use geomil::model::{AblationFlags, ModelConfig};
use geomil::nucfeat::FeatureConfig;
use geomil::synth::{CohortSpec, CountRange};
use geomil::train::{config_hash, AdamWSettings, PrepConfig, TrainConfig};
use geomil::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Planted,
    /// Every class-dependent quantity equal across classes.
    Null,
}

mod letter {
    use geomil::model::AblationFlags;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(flags: &AblationFlags, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&flags.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<AblationFlags, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for cohort synthesis, initialization, splits and shuffling.
    pub seed: u64,

    pub classes: usize,
    pub slides_per_class: usize,
    pub d: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    pub signal: Signal,
    pub compositions: Vec<[f64; 4]>,
    pub necrosis_rate: f64,
    pub macro_shift: f64,
    pub meso_shift: f64,
    pub composition_coupling: f64,
    pub patch_noise: f64,
    pub slide_noise: f64,
    pub clusters_per_patch: f64,
    pub cluster_sigma_px: f64,
    pub cluster_contrast: f64,

    pub k: usize,
    pub threshold_px: f64,
    pub glcm_levels: usize,
    pub glcm_offsets: Vec<[i32; 2]>,
    pub topology_radius_um: f64,

    #[serde(with = "letter")]
    pub ablation: AblationFlags,
    pub heads: usize,
    pub gcn_hidden: usize,
    pub token_hidden: usize,
    /// Zero means "same as the embedding width".
    pub channel_hidden: usize,
    /// Zero means twice the embedding width.
    pub ffn_hidden: usize,
    /// Zero means half the embedding width.
    pub attn_hidden: usize,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub folds: usize,
    pub max_resample: usize,

    pub sigma: f64,
    pub cohort: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = CohortSpec::planted(3, 20, 0);
        let features = FeatureConfig::default();
        let prep = PrepConfig::default();
        let model = ModelConfig::new(spec.d, spec.classes, AblationFlags::full());
        let train = TrainConfig::default();
        Self {
            seed: 0,
            classes: spec.classes,
            slides_per_class: spec.slides_per_class,
            d: spec.d,
            patches_min: spec.patches_per_slide.min,
            patches_max: spec.patches_per_slide.max,
            nuclei_min: spec.nuclei_per_patch.min,
            nuclei_max: spec.nuclei_per_patch.max,
            signal: Signal::Planted,
            compositions: spec.compositions,
            necrosis_rate: spec.necrosis_rate,
            macro_shift: spec.macro_shift,
            meso_shift: spec.meso_shift,
            composition_coupling: spec.composition_coupling,
            patch_noise: spec.patch_noise,
            slide_noise: spec.slide_noise,
            clusters_per_patch: spec.clusters_per_patch,
            cluster_sigma_px: spec.cluster_sigma_px,
            cluster_contrast: spec.cluster_contrast,
            k: prep.k,
            threshold_px: prep.threshold_px,
            glcm_levels: features.glcm_levels,
            glcm_offsets: features.glcm_offsets.iter().map(|&(a, b)| [a, b]).collect(),
            topology_radius_um: features.topology_radius_um,
            ablation: model.flags,
            heads: model.heads,
            gcn_hidden: model.gcn_hidden,
            token_hidden: model.token_hidden,
            channel_hidden: 0,
            ffn_hidden: 0,
            attn_hidden: 0,
            lr: train.optimizer.lr,
            weight_decay: train.optimizer.weight_decay,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            eps: train.optimizer.eps,
            batch_size: train.batch_size,
            epochs: train.epochs,
            val_fraction: train.val_fraction,
            test_fraction: train.test_fraction,
            folds: train.folds,
            max_resample: train.max_resample,
            sigma: 1.0,
            cohort: PathBuf::from("cohort.argc"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        let mut spec = CohortSpec {
            classes: self.classes,
            slides_per_class: self.slides_per_class,
            patches_per_slide: CountRange::new(self.patches_min, self.patches_max),
            nuclei_per_patch: CountRange::new(self.nuclei_min, self.nuclei_max),
            d: self.d,
            compositions: self.compositions.clone(),
            necrosis_rate: self.necrosis_rate,
            macro_shift: self.macro_shift,
            meso_shift: self.meso_shift,
            composition_coupling: self.composition_coupling,
            patch_noise: self.patch_noise,
            slide_noise: self.slide_noise,
            clusters_per_patch: self.clusters_per_patch,
            cluster_sigma_px: self.cluster_sigma_px,
            cluster_contrast: self.cluster_contrast,
            seed: self.seed,
        };
        if self.signal == Signal::Null {
            let null = CohortSpec::null(self.classes, self.slides_per_class, self.seed);
            spec.compositions = null.compositions;
            spec.macro_shift = null.macro_shift;
            spec.meso_shift = null.meso_shift;
            spec.cluster_contrast = null.cluster_contrast;
        }
        spec
    }

    /// Model for embeddings of width `d` and `classes` outputs.
    pub fn model_config(&self, d: usize, classes: usize) -> ModelConfig {
        let or = |v: usize, default: usize| if v == 0 { default } else { v };
        let base = ModelConfig::new(d, classes, self.ablation);
        ModelConfig {
            heads: self.heads,
            gcn_hidden: self.gcn_hidden,
            token_hidden: self.token_hidden,
            channel_hidden: or(self.channel_hidden, base.channel_hidden),
            ffn_hidden: or(self.ffn_hidden, base.ffn_hidden),
            attn_hidden: or(self.attn_hidden, base.attn_hidden),
            ..base
        }
    }

    pub fn prep_config(&self) -> PrepConfig {
        PrepConfig {
            features: FeatureConfig {
                glcm_levels: self.glcm_levels,
                glcm_offsets: self.glcm_offsets.iter().map(|&[a, b]| (a, b)).collect(),
                topology_radius_um: self.topology_radius_um,
            },
            k: self.k,
            threshold_px: self.threshold_px,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: AdamWSettings {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            folds: self.folds,
            max_resample: self.max_resample,
            seed: self.seed,
        }
    }

    /// Hash binding a checkpoint to everything that shapes its inputs and
    /// parameters.
    pub fn model_hash(&self, d: usize, classes: usize) -> u64 {
        config_hash(&(self.model_config(d, classes), self.prep_config()))
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort_spec().validate()?;
        self.model_config(self.d, self.classes).validate()?;
        self.prep_config().validate()?;
        self.train_config().validate()?;
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        Ok(())
    }
}
