//! Experiment configuration documents.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GroupShiftSpec;
use crate::error::{config_err, Error, Result};
use crate::losses::KdConfig;
use crate::mlp::{Activation, MlpParams};
use crate::optim::OptConfig;
use crate::robust_weights::EgConfig;
use crate::train::{Method, TrainConfig};

/// Hidden layer sizes and nonlinearity; input and output sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn dims(&self, data: &GroupShiftSpec) -> Vec<usize> {
        std::iter::once(data.feature_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(data.num_classes))
            .collect()
    }

    pub fn init(&self, data: &GroupShiftSpec, seed: u64, stream: u64) -> Result<MlpParams> {
        MlpParams::init(&self.dims(data), self.activation, &mut crate::data::seeded_rng(seed, stream))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Teacher,
    DroStudent,
    Kd,
    GroupDistil,
}

impl Arm {
    pub const STUDENTS: [Arm; 3] = [Arm::DroStudent, Arm::Kd, Arm::GroupDistil];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Teacher => "teacher",
            Arm::DroStudent => "dro_student",
            Arm::Kd => "kd",
            Arm::GroupDistil => "group_distil",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Arm::Teacher | Arm::DroStudent => Method::GroupDro,
            Arm::Kd => Method::Kd,
            Arm::GroupDistil => Method::GroupDistil,
        }
    }

    /// Arm that `train --method` uses when no arm is named.
    pub fn for_method(method: Method) -> Option<Arm> {
        match method {
            Method::GroupDro => Some(Arm::Teacher),
            Method::Kd => Some(Arm::Kd),
            Method::GroupDistil => Some(Arm::GroupDistil),
            Method::Erm => None,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Arm::Teacher),
            "dro_student" => Ok(Arm::DroStudent),
            "kd" => Ok(Arm::Kd),
            "group_distil" => Ok(Arm::GroupDistil),
            other => Err(config_err!("unknown arm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: GroupShiftSpec,
    pub teacher: ArmConfig,
    pub dro_student: ArmConfig,
    pub kd: ArmConfig,
    pub group_distil: ArmConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn arm(&self, arm: Arm) -> &ArmConfig {
        match arm {
            Arm::Teacher => &self.teacher,
            Arm::DroStudent => &self.dro_student,
            Arm::Kd => &self.kd,
            Arm::GroupDistil => &self.group_distil,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        for arm in [Arm::Teacher, Arm::DroStudent, Arm::Kd, Arm::GroupDistil] {
            let cfg = self.arm(arm);
            if cfg.train.method != arm.method() {
                return Err(config_err!(
                    "{}.train.method must be {}, got {}",
                    arm.name(),
                    arm.method(),
                    cfg.train.method
                ));
            }
            if cfg.model.hidden.contains(&0) {
                return Err(config_err!("{}.model.hidden sizes must be positive", arm.name()));
            }
            cfg.train.validate().map_err(|e| config_err!("{}.train: {e}", arm.name()))?;
        }
        if self.seeds.is_empty() {
            return Err(config_err!("seeds must not be empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config_err!("seeds must be distinct: {:?}", self.seeds));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err!("config does not parse: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

impl Default for ExperimentConfig {
    /// The benchmark comparison: a wide group-robust teacher, three narrow
    /// students, batch 128, α = 0.9, τ = 4, η_w = 0.01, five seeds.
    fn default() -> Self {
        let student_model = ModelSpec { hidden: vec![16], activation: Activation::Tanh };
        let student_train = |method| TrainConfig {
            kd: KdConfig::default(),
            eg: EgConfig::default(),
            opt: OptConfig::adam(1e-3),
            log_every: 10,
            ..TrainConfig::new(method, 3000)
        };
        Self {
            data: GroupShiftSpec::default(),
            teacher: ArmConfig {
                model: ModelSpec { hidden: vec![64, 64], activation: Activation::Tanh },
                train: TrainConfig { opt: OptConfig::adam(1e-3), log_every: 10, ..TrainConfig::new(Method::GroupDro, 3000) },
            },
            dro_student: ArmConfig { model: student_model.clone(), train: student_train(Method::GroupDro) },
            kd: ArmConfig { model: student_model.clone(), train: student_train(Method::Kd) },
            group_distil: ArmConfig { model: student_model, train: student_train(Method::GroupDistil) },
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: "runs".into(),
        }
    }
}
