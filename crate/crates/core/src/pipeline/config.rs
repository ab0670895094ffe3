use serde::{Deserialize, Serialize};

use crate::corpns::CorpnsLossWeights;
use crate::error::{Error, Result};
use crate::hallucinator::Variant;
use crate::heads::HeadKind;
use crate::numerics::SgdConfig;
use crate::synthworld::PoolSizes;

/// Where fine-tuning proposals come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    Single,
    Corpns,
}

impl ProposalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalMode::Single => "single",
            ProposalMode::Corpns => "corpns",
        }
    }
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(ProposalMode::Single),
            "corpns" => Ok(ProposalMode::Corpns),
            other => Err(Error::Argument(format!("unknown proposal mode '{other}'"))),
        }
    }
}

/// Which hallucinator, if any, takes part in fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSetting {
    None,
    Conservative,
    Aggressive,
}

impl VariantSetting {
    pub fn variant(self) -> Option<Variant> {
        match self {
            VariantSetting::None => None,
            VariantSetting::Conservative => Some(Variant::Conservative),
            VariantSetting::Aggressive => Some(Variant::Aggressive),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VariantSetting::None => "none",
            VariantSetting::Conservative => "conservative",
            VariantSetting::Aggressive => "aggressive",
        }
    }
}

impl std::str::FromStr for VariantSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(VariantSetting::None),
            other => Ok(match other.parse::<Variant>()? {
                Variant::Conservative => VariantSetting::Conservative,
                Variant::Aggressive => VariantSetting::Aggressive,
            }),
        }
    }
}

/// How the novel rows of the head start fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    VocRandom,
    CocoNovelPretrain,
}

/// Classifier/hallucinator alternation used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `em_iterations` classifier trainings with hallucinator fine-tuning in between.
    Em,
    /// Classifier and hallucinator updated in the same steps.
    Joint,
}

/// Base-stage data volume and optimisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseStageConfig {
    pub instances_per_class: usize,
    pub background: usize,
    pub sgd: SgdConfig,
    pub rpn_sgd: SgdConfig,
    /// Base-class count per hallucinator training batch.
    pub halluc_classes_per_batch: usize,
    /// Hallucinations per class in each hallucinator training batch.
    pub halluc_per_class: usize,
    pub halluc_sgd: SgdConfig,
    /// Held-out features per class for the aggressive prototypical loss.
    pub aggressive_validation_per_class: usize,
}

impl Default for BaseStageConfig {
    fn default() -> Self {
        Self {
            instances_per_class: 60,
            background: 3000,
            sgd: SgdConfig {
                learning_rate: 0.1,
                total_iterations: 1500,
                decay_milestones: vec![1000],
                decay_ratio: 0.1,
            },
            rpn_sgd: SgdConfig {
                learning_rate: 0.1,
                total_iterations: 600,
                decay_milestones: vec![400],
                decay_ratio: 0.1,
            },
            halluc_classes_per_batch: 8,
            halluc_per_class: 20,
            halluc_sgd: SgdConfig {
                learning_rate: 0.002,
                total_iterations: 600,
                decay_milestones: vec![400],
                decay_ratio: 0.1,
            },
            aggressive_validation_per_class: 4,
        }
    }
}

/// Ensemble shape and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpnsConfig {
    pub heads: usize,
    pub coop_threshold: f64,
    pub div_epsilon: f64,
    pub loss_weights: CorpnsLossWeights,
}

impl Default for CorpnsConfig {
    fn default() -> Self {
        Self {
            heads: 3,
            coop_threshold: 0.3,
            div_epsilon: 1e-6,
            loss_weights: CorpnsLossWeights { ce: 1.0, div: 0.01, coop: 10.0 },
        }
    }
}

/// Everything one end-to-end run needs besides the world and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub shot: usize,
    /// Hallucinated examples per novel class per batch.
    pub m: usize,
    pub batch_size: usize,
    /// Foreground share of a batch before recomposition.
    pub foreground_fraction: f64,
    /// Base classes sampled into each fine-tuning batch alongside all novel ones.
    pub base_classes_per_batch: usize,
    pub em_iterations: usize,
    pub schedule: Schedule,
    pub proposal: ProposalMode,
    pub head_kind: HeadKind,
    pub variant: VariantSetting,
    pub init_mode: InitMode,
    pub cosine_scale: f64,
    pub novel_init_std: f64,
    pub halluc_init_std: f64,
    pub proposals_per_instance: usize,
    /// Proposals below this selected objectness are dropped.
    pub proposal_threshold: f64,
    /// Detection threshold for TP/FP counting.
    pub score_threshold: f64,
    pub finetune_sgd: SgdConfig,
    /// Hallucinator fine-tuning rate; its length follows `finetune_sgd`.
    pub halluc_finetune_lr: f64,
    pub base: BaseStageConfig,
    pub corpns: CorpnsConfig,
    pub pools: PoolSizes,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shot: 1,
            m: 20,
            batch_size: 256,
            foreground_fraction: 0.25,
            base_classes_per_batch: 3,
            em_iterations: 2,
            schedule: Schedule::Em,
            proposal: ProposalMode::Single,
            head_kind: HeadKind::Cosine,
            variant: VariantSetting::Conservative,
            init_mode: InitMode::VocRandom,
            cosine_scale: 20.0,
            novel_init_std: 0.01,
            halluc_init_std: 0.02,
            proposals_per_instance: 10,
            proposal_threshold: 0.5,
            score_threshold: 0.5,
            finetune_sgd: SgdConfig {
                learning_rate: 0.02,
                total_iterations: 1500,
                decay_milestones: vec![400, 1100],
                decay_ratio: 0.1,
            },
            halluc_finetune_lr: 0.002,
            base: BaseStageConfig::default(),
            corpns: CorpnsConfig::default(),
            pools: PoolSizes::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shot == 0 {
            return Err(Error::Argument("shot must be at least 1".into()));
        }
        if !(1..=2).contains(&self.em_iterations) {
            return Err(Error::Argument(format!(
                "em_iterations must be 1 or 2, got {}",
                self.em_iterations
            )));
        }
        if !(self.foreground_fraction > 0.0 && self.foreground_fraction < 1.0) {
            return Err(Error::Argument("foreground_fraction must lie in (0,1)".into()));
        }
        if self.batch_size < 4 || self.proposals_per_instance == 0 {
            return Err(Error::Argument("batch_size and proposals_per_instance are too small".into()));
        }
        if self.corpns.heads < 2 {
            return Err(Error::Argument("the proposal ensemble needs at least 2 heads".into()));
        }
        self.finetune_sgd.validate()?;
        self.base.sgd.validate()?;
        self.base.rpn_sgd.validate()?;
        self.base.halluc_sgd.validate()
    }

    /// Whether this run generates any hallucinations.
    pub fn hallucinates(&self) -> bool {
        self.m > 0 && self.variant != VariantSetting::None
    }

    /// The `em_iters` CSV field.
    pub fn schedule_label(&self) -> String {
        match self.schedule {
            Schedule::Joint => "joint".to_string(),
            Schedule::Em => self.em_iterations.to_string(),
        }
    }
}
