//! Run configuration: a profile's defaults, optionally overridden by a
//! flat `key=value` file (`#` starts a comment). Unknown keys are errors.

use super::trainer::{OptimizerKind, PhaseName, TrainPhase};
use super::PipelineError;
use crate::data::AugmentPolicy;
use crate::nn::{HeadKind, LossKind, NetworkSpec};
use crate::optim::LrSchedule;
use std::str::FromStr;

/// Built-in default sets: `desk` is a minutes-scale configuration for
/// 32x32 inputs, `paper` the full-size one for 299x299 inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}` (expected desk or paper)")),
        }
    }
}

/// Every tunable of a run. Field names double as config-file keys, except
/// the architecture tuple which the profile sets wholesale.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub image_size: usize,
    pub growth_rate: usize,
    pub modules_per_block: usize,
    pub num_blocks: usize,
    pub compression: f64,
    pub se_ratio: usize,
    pub num_classes: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub l2: f64,
    pub cls_epochs: usize,
    pub cls_lr: f64,
    pub cls_momentum: f64,
    pub reg_epochs: usize,
    pub reg_lr: f64,
    pub fusion_epochs: usize,
    pub fusion_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub class_weighted: bool,
    pub fusion_class_weighted: bool,
    /// Augment training batches of both backbone phases.
    pub augment: bool,
    /// Augment training batches of the fusion phase (forces per-batch
    /// feature recomputation through the frozen backbones).
    pub fusion_augment: bool,
    pub rotation_deg: f64,
    pub h_flip: f64,
    pub width_shift: f64,
    pub height_shift: f64,
    pub zoom: f64,
    pub shear_deg: f64,
}

/// Config-file keys with their meaning, for error messages and `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("image_size", "input height and width in pixels"),
    ("growth_rate", "dense-block growth rate k"),
    ("modules_per_block", "SE-dense modules per dense block"),
    ("num_blocks", "number of dense blocks"),
    ("compression", "transition compression factor in (0, 1]"),
    ("se_ratio", "squeeze-excitation reduction ratio"),
    ("batch_size", "minibatch size for training and evaluation"),
    ("train_fraction", "fraction of the data used for training"),
    ("l2", "L2 regularization strength on kernels"),
    ("cls_epochs", "classification phase epochs"),
    ("cls_lr", "classification base learning rate"),
    ("cls_momentum", "classification SGD momentum"),
    ("reg_epochs", "regression phase epochs"),
    ("reg_lr", "regression Adam learning rate"),
    ("fusion_epochs", "fusion phase epochs"),
    ("fusion_lr", "fusion Adam learning rate"),
    ("plateau_patience", "fusion epochs without improvement before decay"),
    ("plateau_factor", "fusion learning-rate decay factor in (0, 1)"),
    ("class_weighted", "weight the classification loss by class frequency"),
    ("fusion_class_weighted", "weight the fusion loss by class frequency"),
    ("augment", "augment backbone training batches"),
    ("fusion_augment", "augment fusion training batches"),
    ("rotation_deg", "augmentation rotation range in degrees"),
    ("h_flip", "augmentation horizontal-flip probability"),
    ("width_shift", "augmentation horizontal shift range (fraction)"),
    ("height_shift", "augmentation vertical shift range (fraction)"),
    ("zoom", "augmentation zoom range (fraction)"),
    ("shear_deg", "augmentation shear range in degrees"),
];

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            growth_rate: 6,
            modules_per_block: 2,
            num_blocks: 2,
            compression: 0.5,
            se_ratio: 4,
            num_classes: 5,
            batch_size: 8,
            train_fraction: 0.9,
            l2: 1e-4,
            cls_epochs: 30,
            cls_lr: 0.02,
            cls_momentum: 0.7,
            reg_epochs: 15,
            reg_lr: 1e-3,
            fusion_epochs: 15,
            fusion_lr: 1e-3,
            plateau_patience: 4,
            plateau_factor: 0.1,
            class_weighted: true,
            fusion_class_weighted: true,
            augment: false,
            fusion_augment: false,
            rotation_deg: 15.0,
            h_flip: 0.5,
            width_shift: 0.1,
            height_shift: 0.1,
            zoom: 0.1,
            shear_deg: 10.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_size: 299,
            growth_rate: 18,
            modules_per_block: 16,
            num_blocks: 5,
            compression: 0.5,
            se_ratio: 16,
            num_classes: 5,
            batch_size: 2,
            train_fraction: 0.9,
            l2: 1e-4,
            cls_epochs: 250,
            cls_lr: 1e-3,
            cls_momentum: 0.7,
            reg_epochs: 50,
            reg_lr: 1e-3,
            fusion_epochs: 50,
            fusion_lr: 1e-3,
            plateau_patience: 4,
            plateau_factor: 0.1,
            class_weighted: true,
            fusion_class_weighted: true,
            augment: true,
            fusion_augment: true,
            rotation_deg: 15.0,
            h_flip: 0.5,
            width_shift: 0.1,
            height_shift: 0.1,
            zoom: 0.1,
            shear_deg: 10.0,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Apply `key=value` overrides from a config file's text.
    pub fn apply(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {lineno}: expected key=value, got `{line}`"))
            })?;
            self.set(key.trim(), value.trim(), lineno)?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<(), PipelineError> {
        fn parse<T: FromStr>(key: &str, value: &str, lineno: usize) -> Result<T, PipelineError> {
            value.parse().map_err(|_| {
                PipelineError::Config(format!(
                    "line {lineno}: bad value `{value}` for key `{key}`"
                ))
            })
        }
        match key {
            "image_size" => self.image_size = parse(key, value, lineno)?,
            "growth_rate" => self.growth_rate = parse(key, value, lineno)?,
            "modules_per_block" => self.modules_per_block = parse(key, value, lineno)?,
            "num_blocks" => self.num_blocks = parse(key, value, lineno)?,
            "compression" => self.compression = parse(key, value, lineno)?,
            "se_ratio" => self.se_ratio = parse(key, value, lineno)?,
            "batch_size" => self.batch_size = parse(key, value, lineno)?,
            "train_fraction" => self.train_fraction = parse(key, value, lineno)?,
            "l2" => self.l2 = parse(key, value, lineno)?,
            "cls_epochs" => self.cls_epochs = parse(key, value, lineno)?,
            "cls_lr" => self.cls_lr = parse(key, value, lineno)?,
            "cls_momentum" => self.cls_momentum = parse(key, value, lineno)?,
            "reg_epochs" => self.reg_epochs = parse(key, value, lineno)?,
            "reg_lr" => self.reg_lr = parse(key, value, lineno)?,
            "fusion_epochs" => self.fusion_epochs = parse(key, value, lineno)?,
            "fusion_lr" => self.fusion_lr = parse(key, value, lineno)?,
            "plateau_patience" => self.plateau_patience = parse(key, value, lineno)?,
            "plateau_factor" => self.plateau_factor = parse(key, value, lineno)?,
            "class_weighted" => self.class_weighted = parse(key, value, lineno)?,
            "fusion_class_weighted" => self.fusion_class_weighted = parse(key, value, lineno)?,
            "augment" => self.augment = parse(key, value, lineno)?,
            "fusion_augment" => self.fusion_augment = parse(key, value, lineno)?,
            "rotation_deg" => self.rotation_deg = parse(key, value, lineno)?,
            "h_flip" => self.h_flip = parse(key, value, lineno)?,
            "width_shift" => self.width_shift = parse(key, value, lineno)?,
            "height_shift" => self.height_shift = parse(key, value, lineno)?,
            "zoom" => self.zoom = parse(key, value, lineno)?,
            "shear_deg" => self.shear_deg = parse(key, value, lineno)?,
            other => {
                let known: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
                return Err(PipelineError::Config(format!(
                    "line {lineno}: unknown key `{other}`; known keys: {}",
                    known.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.spec(HeadKind::Classification)
            .validate()
            .map_err(PipelineError::Nn)?;
        let positive = [
            ("batch_size", self.batch_size),
            ("cls_epochs", self.cls_epochs),
            ("reg_epochs", self.reg_epochs),
            ("fusion_epochs", self.fusion_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PipelineError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(PipelineError::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        for (name, v) in [
            ("cls_lr", self.cls_lr),
            ("reg_lr", self.reg_lr),
            ("fusion_lr", self.fusion_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PipelineError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.cls_momentum.is_finite() && (0.0..1.0).contains(&self.cls_momentum)) {
            return Err(PipelineError::Config(format!(
                "cls_momentum must be in [0, 1), got {}",
                self.cls_momentum
            )));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(PipelineError::Config(format!(
                "l2 must be non-negative, got {}",
                self.l2
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(PipelineError::Config(format!(
                "plateau_factor must be in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.augment || self.fusion_augment {
            self.augment_policy(true, 0)
                .expect("enabled policy is Some")
                .validate()
                .map_err(PipelineError::Data)?;
        }
        Ok(())
    }

    pub fn spec(&self, head: HeadKind) -> NetworkSpec {
        NetworkSpec {
            growth_rate: self.growth_rate,
            modules_per_block: self.modules_per_block,
            num_blocks: self.num_blocks,
            compression: self.compression,
            se_ratio: self.se_ratio,
            input: (self.image_size, self.image_size, 3),
            num_classes: self.num_classes,
            head,
        }
    }

    fn augment_policy(&self, enabled: bool, seed: u64) -> Option<AugmentPolicy> {
        enabled.then(|| AugmentPolicy {
            rotation_deg: self.rotation_deg,
            h_flip: self.h_flip,
            width_shift: self.width_shift,
            height_shift: self.height_shift,
            zoom: self.zoom,
            shear_deg: self.shear_deg,
            seed,
        })
    }

    /// Assemble one phase's settings. `seed` feeds the augmentation
    /// streams only; the trainer derives its shuffle streams itself.
    pub fn phase(&self, name: PhaseName, seed: u64) -> TrainPhase {
        match name {
            PhaseName::Classification => {
                let mut schedule = LrSchedule::classification();
                schedule.base_lr = self.cls_lr;
                schedule.base_momentum = Some(self.cls_momentum);
                TrainPhase {
                    name,
                    optimizer: OptimizerKind::Sgd,
                    epochs: self.cls_epochs,
                    batch_size: self.batch_size,
                    schedule,
                    loss: LossKind::CrossEntropy {
                        class_weights: None,
                    },
                    class_weighted: self.class_weighted,
                    l2: self.l2,
                    augment: self.augment_policy(self.augment, seed),
                }
            }
            PhaseName::Regression => TrainPhase {
                name,
                optimizer: OptimizerKind::Adam,
                epochs: self.reg_epochs,
                batch_size: self.batch_size,
                schedule: LrSchedule::flat(self.reg_lr),
                loss: LossKind::MeanSquaredError,
                class_weighted: false,
                l2: self.l2,
                augment: self.augment_policy(self.augment, seed),
            },
            PhaseName::Fusion => TrainPhase {
                name,
                optimizer: OptimizerKind::Adam,
                epochs: self.fusion_epochs,
                batch_size: self.batch_size,
                schedule: LrSchedule::flat(self.fusion_lr)
                    .with_plateau(self.plateau_patience, self.plateau_factor),
                loss: LossKind::CrossEntropy {
                    class_weights: None,
                },
                class_weighted: self.fusion_class_weighted,
                l2: self.l2,
                augment: self.augment_policy(self.fusion_augment, seed),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.image_size, 32);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(
            (cfg.cls_epochs, cfg.reg_epochs, cfg.fusion_epochs),
            (30, 15, 15)
        );
        let spec = cfg.spec(HeadKind::Classification);
        assert_eq!(spec.channel_sequence(), vec![12, 24, 12, 24]);
    }

    #[test]
    fn paper_defaults_validate() {
        let cfg = PipelineConfig::paper();
        cfg.validate().unwrap();
        assert_eq!(cfg.image_size, 299);
        assert_eq!(cfg.growth_rate, 18);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(
            (cfg.cls_epochs, cfg.reg_epochs, cfg.fusion_epochs),
            (250, 50, 50)
        );
        assert!(cfg.augment && cfg.fusion_augment);
    }

    #[test]
    fn overrides_comments_and_blank_lines() {
        let mut cfg = PipelineConfig::desk();
        cfg.apply(
            "# a comment\n\
             \n\
             batch_size = 4   # trailing comment\n\
             cls_lr=0.005\n\
             augment = true\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.cls_lr, 0.005);
        assert!(cfg.augment);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_an_error_naming_it() {
        let mut cfg = PipelineConfig::desk();
        let err = cfg.apply("learning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown key `learning_rate`"), "{msg}");
        assert!(msg.contains("cls_lr"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn bad_value_and_bad_line_are_errors() {
        let mut cfg = PipelineConfig::desk();
        let err = cfg.apply("batch_size = eight\n").unwrap_err();
        assert!(err.to_string().contains("bad value `eight`"), "{err}");
        let err = cfg.apply("just words\n").unwrap_err();
        assert!(err.to_string().contains("expected key=value"), "{err}");
    }

    #[test]
    fn validate_rejects_out_of_range_values() {
        let mut cfg = PipelineConfig::desk();
        cfg.train_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk();
        cfg.plateau_factor = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk();
        cfg.image_size = 4;
        cfg.num_blocks = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::desk();
        cfg.augment = true;
        cfg.zoom = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn phases_carry_profile_settings() {
        let cfg = PipelineConfig::desk();
        let cls = cfg.phase(PhaseName::Classification, 7);
        assert_eq!(cls.optimizer, OptimizerKind::Sgd);
        assert_eq!(cls.schedule.base_lr, cfg.cls_lr);
        assert_eq!(cls.schedule.base_momentum, Some(0.7));
        assert_eq!(cls.schedule.steps.len(), 2);
        assert!(cls.augment.is_none());

        let reg = cfg.phase(PhaseName::Regression, 7);
        assert_eq!(reg.optimizer, OptimizerKind::Adam);
        assert_eq!(reg.loss, LossKind::MeanSquaredError);
        assert!(reg.schedule.steps.is_empty());

        let fusion = cfg.phase(PhaseName::Fusion, 7);
        assert_eq!(
            fusion.schedule.plateau.map(|p| (p.patience, p.factor)),
            Some((4, 0.1))
        );

        let mut aug_cfg = PipelineConfig::desk();
        aug_cfg.augment = true;
        let cls = aug_cfg.phase(PhaseName::Classification, 9);
        let policy = cls.augment.unwrap();
        assert_eq!(policy.seed, 9);
        assert_eq!(policy.rotation_deg, 15.0);
    }
}
