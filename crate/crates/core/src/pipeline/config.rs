use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Evac,
    Match,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Evac, Task::Match];

    pub fn name(self) -> &'static str {
        match self {
            Task::Evac => "evac",
            Task::Match => "match",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evac" => Ok(Task::Evac),
            "match" => Ok(Task::Match),
            _ => Err(Error::Argument(format!("unknown task {s:?}; expected evac or match"))),
        }
    }
}

/// Which pieces of the full model are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Linear reconstructor instead of GCN+GRU.
    NoSt,
    /// Deterministic top-k with a straight-through gradient.
    NoImle,
    /// Reconstruction and placement trained on depth MSE only.
    NoDfl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSt, Variant::NoImle, Variant::NoDfl];

    /// The linear variant is trained end to end from scratch.
    pub fn pretrains(self) -> bool {
        self != Variant::NoSt
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSt => "no_st",
            Variant::NoImle => "no_imle",
            Variant::NoDfl => "no_dfl",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown variant {s:?}; expected full, no_st, no_imle or no_dfl")))
    }
}

/// Sensor placement used while pre-training the reconstructor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainPlacement {
    /// The K fixed channel gauges for every scenario.
    #[default]
    Gauges,
    /// A fresh random placement of k ∈ [1, K] cells per batch.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub window: usize,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub e2e_epochs: usize,
    /// Stop end-to-end training after this many epochs without a better
    /// validation loss; 0 disables early stopping.
    pub patience: usize,
    /// Sensor budget.
    pub k: usize,
    pub seed: u64,
    pub task: Task,
    pub variant: Variant,
    /// Train and validation shares of the suite; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
    /// Divide the evacuation loss by the demand. This also shrinks the
    /// placement gradient that the I-MLE step multiplies by λ.
    pub per_person_loss: bool,
    pub pretrain_placement: PretrainPlacement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            window: 10,
            lr: 5e-4,
            pretrain_epochs: 50,
            e2e_epochs: 500,
            patience: 0,
            k: 4,
            seed: 0,
            task: Task::Evac,
            variant: Variant::Full,
            train_frac: 0.6,
            val_frac: 0.2,
            per_person_loss: false,
            pretrain_placement: PretrainPlacement::Gauges,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.window == 0 || self.k == 0 {
            return bad("batch_size, window and k must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac < 1.0) {
            return bad("train_frac > 0, val_frac >= 0 and train_frac + val_frac < 1 are required");
        }
        Ok(())
    }
}
