//! Sequential task training under the continual-learning frameworks.

mod learner;
mod memory;
mod run;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use learner::{Learner, ObjectiveConfig};
pub use memory::{agem_project, EpisodicMemory, Projection, ReplayBuffer};
pub use run::{config_hash, mbpa_infer, run_experiment, Counters, RunOutput, RunRecord};

use crate::error::{Error, Result};
use crate::metrics::{DriftDistance, ForgetNormalization};
use crate::neighbor::NeighborConfig;
use crate::tasks::Formulation;

/// Which parameters learn and which objective drives them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Every parameter trainable, plain encoder.
    #[serde(rename = "ft")]
    Ft,
    /// Frozen encoder, trainable classifier.
    Pretrained,
    /// Frozen encoder with trainable neighbor attention.
    #[serde(rename = "neiattn")]
    NeiAttn,
    /// `NeiAttn` plus the neighbor regularizers.
    #[serde(rename = "neireg")]
    NeiReg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Vanilla,
    Er,
    Agem,
    Mbpa,
    Probing,
    Mtl,
}

macro_rules! tag_enum {
    ($t:ty, $what:literal, $($variant:path => $tag:literal),+ $(,)?) => {
        impl $t {
            pub fn tag(self) -> &'static str {
                match self {
                    $($variant => $tag,)+
                }
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.tag())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($tag => Ok($variant),)+
                    other => Err(Error::Parse(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

tag_enum!(ModelVariant, "model",
    ModelVariant::Ft => "ft",
    ModelVariant::Pretrained => "pretrained",
    ModelVariant::NeiAttn => "neiattn",
    ModelVariant::NeiReg => "neireg",
);

tag_enum!(Framework, "framework",
    Framework::Vanilla => "vanilla",
    Framework::Er => "er",
    Framework::Agem => "agem",
    Framework::Mbpa => "mbpa",
    Framework::Probing => "probing",
    Framework::Mtl => "mtl",
);

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Ft,
        ModelVariant::Pretrained,
        ModelVariant::NeiAttn,
        ModelVariant::NeiReg,
    ];

    pub fn uses_neighbors(self) -> bool {
        matches!(self, ModelVariant::NeiAttn | ModelVariant::NeiReg)
    }
}

impl Framework {
    pub const ALL: [Framework; 6] = [
        Framework::Vanilla,
        Framework::Er,
        Framework::Agem,
        Framework::Mbpa,
        Framework::Probing,
        Framework::Mtl,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MbpaConfig {
    /// Entries retrieved per query.
    pub retrieve: usize,
    /// Local gradient steps per query.
    pub local_steps: usize,
    /// Defaults to the task learning rate.
    pub local_lr: Option<f64>,
    /// Weight of `||θ - θ0||²`.
    pub drift_penalty: f64,
    /// Dev queries per class and task; 0 uses the whole dev split.
    pub eval_per_class: usize,
    /// Adapt only after the last task. Forget is then not reported.
    pub final_row_only: bool,
}

impl Default for MbpaConfig {
    fn default() -> Self {
        Self {
            retrieve: 32,
            local_steps: 5,
            local_lr: None,
            drift_penalty: 0.1,
            eval_per_class: 10,
            final_row_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub formulation: Formulation,
    pub head_init_std: f64,
    pub neighbor: NeighborConfig,
    pub objective: ObjectiveConfig,
    /// Share of training steps followed by a replay step.
    pub replay_rate: f64,
    pub replay_batch: usize,
    pub agem_batch: usize,
    pub mbpa: MbpaConfig,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub recall_k: usize,
    pub forget_normalization: ForgetNormalization,
    pub drift_distance: DriftDistance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 5,
            batch_size: 8,
            formulation: Formulation::A,
            head_init_std: 0.1,
            neighbor: NeighborConfig::default(),
            objective: ObjectiveConfig::default(),
            replay_rate: 0.01,
            replay_batch: 32,
            agem_batch: 32,
            mbpa: MbpaConfig::default(),
            probe_epochs: 5,
            probe_lr: 1e-2,
            recall_k: 20,
            forget_normalization: ForgetNormalization::ByTasks,
            drift_distance: DriftDistance::Euclidean,
        }
    }
}

impl TrainConfig {
    /// Training steps between replay steps; 0 disables replay.
    pub fn replay_interval(&self) -> u64 {
        if self.replay_rate <= 0.0 {
            0
        } else {
            (1.0 / self.replay_rate).round().max(1.0) as u64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !(self.probe_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.replay_batch == 0 || self.agem_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.replay_rate) {
            return bad(format!("replay_rate must lie in [0,1], got {}", self.replay_rate));
        }
        if self.recall_k == 0 {
            return bad("recall_k must be positive".into());
        }
        if self.mbpa.retrieve == 0 {
            return bad("mbpa.retrieve must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_roundtrip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.tag().parse::<ModelVariant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.tag()));
        }
        for f in Framework::ALL {
            assert_eq!(f.to_string().parse::<Framework>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.tag()));
        }
        assert!("bert".parse::<ModelVariant>().is_err());
        assert_eq!("FT".parse::<ModelVariant>().unwrap(), ModelVariant::Ft);
    }

    #[test]
    fn replay_cadence() {
        let cfg = TrainConfig::default();
        let every = cfg.replay_interval();
        assert_eq!((1..=10_000u64).filter(|s| s % every == 0).count(), 100);
        let off = TrainConfig {
            replay_rate: 0.0,
            ..cfg
        };
        assert_eq!(off.replay_interval(), 0);
    }
}
