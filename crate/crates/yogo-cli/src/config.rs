//! Run configuration: flat TOML with dotted sections, every key defaulted,
//! unknown keys rejected. The resolved config is serialized into the run
//! directory and into every checkpoint.

use serde::{Deserialize, Serialize};
use yogo_core::model::{CellOrder, ModelConfig, Variant};
use yogo_core::train::TrainOptions;
use yogo_core::{Dtype, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// `f32` (training default) or `f64` (verification precision).
    pub precision: String,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: "f32".into(),
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: usize,
    pub frb_backward: usize,
    pub frb_forward: usize,
    pub hfb_count: usize,
    pub fe_resblocks: usize,
    pub scale_spatial: usize,
    pub scale_temporal: usize,
    pub variant: String,
    pub cell_order: String,
    pub kernel_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let cfg = ModelConfig::default();
        ModelSection {
            channels: cfg.channels,
            frb_backward: cfg.frb_backward,
            frb_forward: cfg.frb_forward,
            hfb_count: cfg.hfb_count,
            fe_resblocks: cfg.fe_resblocks,
            scale_spatial: cfg.scale_spatial,
            scale_temporal: cfg.scale_temporal,
            variant: cfg.variant.as_str().into(),
            cell_order: cfg.cell_order.as_str().into(),
            kernel_k: cfg.kernel_k,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub name: String,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub total_epochs: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            name: "adamax".into(),
            lr: 1e-4,
            decay_factor: 0.1,
            decay_every_epochs: 30,
            total_epochs: 70,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Crop width; 0 disables cropping and flips (whole frames).
    pub patch_width: usize,
    pub patch_height: usize,
    /// Optimizer-step cap; 0 runs the full epoch schedule.
    pub max_iterations: u64,
    pub checkpoint_every_epochs: usize,
    /// Loss-trace rows embedded in each checkpoint.
    pub trace_tail: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 10,
            patch_width: 112,
            patch_height: 64,
            max_iterations: 0,
            checkpoint_every_epochs: 1,
            trace_tail: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory of septuplet folders; empty selects synthetic data.
    pub root: String,
    pub synth_count: usize,
    pub synth_seed: u64,
    pub synth_height: usize,
    pub synth_width: usize,
    /// Trailing sequences reserved for evaluation.
    pub holdout: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: String::new(),
            synth_count: 0,
            synth_seed: 0,
            synth_height: 64,
            synth_width: 64,
            holdout: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub channel_mode: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            channel_mode: "rgb".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dtype()?;
        self.model_config()?.validate()?;
        if self.optimizer.name != "adamax" {
            return Err(Error::config(format!(
                "optimizer.name must be adamax, got {:?}",
                self.optimizer.name
            )));
        }
        if (self.train.patch_width == 0) != (self.train.patch_height == 0) {
            return Err(Error::config(
                "train.patch_width and train.patch_height must both be 0 or both be set",
            ));
        }
        yogo_core::metrics::ChannelMode::parse(&self.eval.channel_mode)?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<Dtype> {
        match self.precision.as_str() {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            channels: self.model.channels,
            frb_backward: self.model.frb_backward,
            frb_forward: self.model.frb_forward,
            hfb_count: self.model.hfb_count,
            fe_resblocks: self.model.fe_resblocks,
            scale_spatial: self.model.scale_spatial,
            scale_temporal: self.model.scale_temporal,
            variant: Variant::parse(&self.model.variant)?,
            cell_order: CellOrder::parse(&self.model.cell_order)?,
            kernel_k: self.model.kernel_k,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.train.batch_size,
            lr: self.optimizer.lr,
            decay_factor: self.optimizer.decay_factor,
            decay_every_epochs: self.optimizer.decay_every_epochs,
            total_epochs: self.optimizer.total_epochs,
            max_iterations: self.train.max_iterations,
            seed: self.seed,
            patch: if self.train.patch_width > 0 {
                Some((self.train.patch_width, self.train.patch_height))
            } else {
                None
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.model.channels, 56);
        assert_eq!(cfg.optimizer.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 10);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.model.channels, 56);
        assert_eq!(back.train.patch_width, 112);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sead = 5\n").is_err());
        assert!(RunConfig::from_toml("[model]\nchannles = 8\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("precision = \"f16\"\n").is_err());
        assert!(RunConfig::from_toml("[model]\nvariant = \"f\"\n").is_err());
        assert!(RunConfig::from_toml("[optimizer]\nname = \"sgd\"\n").is_err());
    }
}
