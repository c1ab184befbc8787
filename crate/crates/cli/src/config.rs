//! Run configuration files.
//!
//! Keys are dotted (`model.base-depth = 8`) or grouped in `[model]`
//! sections; both spellings parse to the same struct. Unknown keys are
//! rejected.

use std::path::Path;

use liteseg::data::{LabelMap, SliceConfig};
use liteseg::model::{ModelSpec, Variant};
use liteseg::preprocess::{AugmentSpec, WindowSpec};
use liteseg::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub fold_index: usize,
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct ModelSection {
    pub variant: String,
    pub base_depth: usize,
    pub kernel: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub eval_every: usize,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct DataSection {
    pub window_low: f64,
    pub window_high: f64,
    pub resize: usize,
    /// Raw segmentation value of lesion voxels.
    pub lesion_label: u8,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            folds: 4,
            fold_index: 0,
            model: ModelSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = ModelSpec::proposed(64);
        Self {
            variant: spec.variant.name().to_string(),
            base_depth: spec.base_depth,
            kernel: spec.kernel,
            num_classes: spec.num_classes,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout: ModelSpec::proposed(64).dropout,
            eval_every: t.eval_every,
            augment: t.augment.is_some(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SliceConfig::default();
        Self {
            window_low: s.window.low,
            window_high: s.window.high,
            resize: s.resize,
            lesion_label: s.labels.lesion_label,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let config: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model_spec()?;
        self.train_config()?;
        self.slice_config()?;
        if self.folds < 2 || self.fold_index >= self.folds {
            return Err(format!("fold-index {} of {} folds: need folds >= 2 and fold-index < folds", self.fold_index, self.folds));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, String> {
        let variant = Variant::parse(&self.model.variant)
            .ok_or_else(|| format!("model.variant: unknown variant {:?} (proposed or baseline-unet)", self.model.variant))?;
        let mut spec = ModelSpec::for_variant(variant, self.model.base_depth);
        spec.kernel = self.model.kernel;
        spec.num_classes = self.model.num_classes;
        spec.dropout = self.train.dropout;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let config = TrainConfig {
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
            eval_every: self.train.eval_every,
            augment: self.train.augment.then(AugmentSpec::default),
            lesion_class: self.labels().lesion_class(),
            ..TrainConfig::default()
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    fn labels(&self) -> LabelMap {
        LabelMap {
            num_classes: self.model.num_classes,
            lesion_label: self.data.lesion_label,
        }
    }

    pub fn slice_config(&self) -> Result<SliceConfig, String> {
        let window = WindowSpec::new(self.data.window_low, self.data.window_high).map_err(|e| e.to_string())?;
        if self.data.resize == 0 || self.data.resize % 16 != 0 {
            return Err(format!("data.resize = {} must be a positive multiple of 16", self.data.resize));
        }
        let labels = self.labels();
        labels.validate().map_err(|e| e.to_string())?;
        Ok(SliceConfig {
            window,
            resize: self.data.resize,
            labels,
            ..SliceConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_library() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.base_depth, 64);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.iterations, 100_000);
        assert_eq!((c.data.window_low, c.data.window_high, c.data.resize), (-100.0, 200.0, 256));
        assert_eq!((c.folds, c.fold_index), (4, 0));
    }

    #[test]
    fn dotted_keys() {
        let c = RunConfig::parse("seed = 3\nmodel.base-depth = 8\ntrain.lr = 0.01\ndata.resize = 64\n").unwrap();
        assert_eq!((c.seed, c.model.base_depth, c.train.lr, c.data.resize), (3, 8, 0.01, 64));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["model.depth = 3", "bogus = 1", "train.lr = 0.1\ntrain.momentum = 0.9"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "model.variant = \"vgg\"",
            "data.resize = 100",
            "data.window-low = 300",
            "fold-index = 4",
            "train.batch-size = 0",
            "train.lr = -1.0",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::parse("seed = 9\nmodel.variant = \"baseline-unet\"\ntrain.augment = false\ntrain.lr = 0.0\n").unwrap();
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
