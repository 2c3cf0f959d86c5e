//! Whole-pipeline configuration, read from TOML with dotted keys such as
//! `train.lr_phase1` or `model.backbone.kind`. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{
    load_prepared_dataset, prep_root_for, prepare_dataset, LengthPolicy, Manifest, PrepConfig, Scan,
};
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::objective::LossConfig;
use crate::synth::{generate_synthetic, SynthConfig};
use crate::training::{cross_validate, CvOptions, CvSummary, TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_area_frac: f64,
    pub image_size: usize,
    pub length_policy: LengthPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PrepConfig::default();
        DataConfig {
            min_area_frac: p.min_area_frac,
            image_size: p.image_size,
            length_policy: LengthPolicy::Truncate,
        }
    }
}

impl DataConfig {
    pub fn prep(&self) -> PrepConfig {
        PrepConfig {
            min_area_frac: self.min_area_frac,
            image_size: self.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl PipelineConfig {
    /// Desk-scale synthetic setting: 64x64 generated slices prepared at
    /// 32x32, 12..=32 slices per volume padded to 32, the tiny backbone,
    /// narrow layers, short, fast schedules and a class-neutral focal
    /// weight for the balanced generator.
    pub fn desk_synthetic() -> Self {
        let mut c = PipelineConfig::default();
        c.data.image_size = 32;
        c.model.set_lengths([32; 4]);
        c.model.rnn_units = 16;
        c.model.routing_units = 16;
        c.model.fusion_units = 32;
        c.synth.num_scans = 200;
        c.synth.set_ranges([12, 32]);
        c.train.lr_phase1 = 0.01;
        c.train.lr_phase2 = 0.003;
        c.train.epochs_phase1 = 8;
        c.train.epochs_phase2 = 6;
        c.train.patience = 4;
        c.loss.alpha = 0.5;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.data.min_area_frac) {
            return Err(Error::InvalidParameter(format!(
                "data.min_area_frac must lie in [0, 1), got {}",
                self.data.min_area_frac
            )));
        }
        let min_side = self.model.backbone.kind.min_side();
        if self.data.image_size < min_side {
            return Err(Error::InvalidParameter(format!(
                "data.image_size {} is below the backbone minimum {min_side}",
                self.data.image_size
            )));
        }
        self.synth.validate()?;
        self.setup().validate()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            augment: self.augment.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    /// Loads a prepared root, padding every modality to the model lengths.
    pub fn load_prepared(&self, prep_root: &Path) -> Result<Vec<Scan>> {
        load_prepared_dataset(prep_root, self.model.lengths(), self.data.length_policy)
    }
}

/// Generated, prepared and loaded synthetic data.
pub struct SyntheticData {
    pub raw_root: PathBuf,
    pub prep_root: PathBuf,
    pub scans: Vec<Scan>,
}

/// `synth` then `prep` then load, under `work/synth` and `work/synth_prep`.
pub fn build_synthetic(cfg: &PipelineConfig, work: &Path) -> Result<SyntheticData> {
    cfg.validate()?;
    let raw_root = work.join("synth");
    let manifest = generate_synthetic(&cfg.synth, &raw_root)?;
    let prep_root = prep_root_for(&raw_root);
    prepare_dataset(&manifest, &prep_root, &cfg.data.prep())?;
    let scans = cfg.load_prepared(&prep_root)?;
    Ok(SyntheticData {
        raw_root,
        prep_root,
        scans,
    })
}

/// Prepares an existing raw root (if needed) and runs cross-validation.
pub fn train_from_root(
    cfg: &PipelineConfig,
    raw_root: &Path,
    opts: &CvOptions,
) -> Result<CvSummary> {
    let prep_root = prep_root_for(raw_root);
    if !prep_root.join(crate::data::MANIFEST_FILE).exists() {
        prepare_dataset(&Manifest::load(raw_root)?, &prep_root, &cfg.data.prep())?;
    }
    let scans = cfg.load_prepared(&prep_root)?;
    cross_validate(&cfg.setup(), &scans, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneKind;

    #[test]
    fn defaults_round_trip() {
        for c in [PipelineConfig::default(), PipelineConfig::desk_synthetic()] {
            c.validate().unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        }
    }

    #[test]
    fn dotted_keys() {
        let c = PipelineConfig::from_toml_str(
            "train.lr_phase1 = 0.5\nmodel.backbone.kind = \"resnet18_gap\"\nloss.reduction = \"mean\"\naugment.tta_seed = 3\n",
        )
        .unwrap();
        assert_eq!(c.train.lr_phase1, 0.5);
        assert_eq!(c.model.backbone.kind, BackboneKind::Resnet18Gap);
        assert_eq!(c.augment.tta_seed, 3);
        assert_eq!(c.train.batch_size, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(
            PipelineConfig::from_toml_str("train.lr = 1.0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("train.batch_size = 1"),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("loss.alpha = 1.5"),
            Err(Error::InvalidParameter(_))
        ));
        assert!(PipelineConfig::from_toml_str(
            "model.backbone.kind = \"resnet18_gap\"\ndata.image_size = 16"
        )
        .is_err());
    }
}
