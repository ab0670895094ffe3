//! The two-stage protocol: base training, hallucinator training under a frozen
//! classifier, few-shot fine-tuning and evaluation.

mod base;
mod config;
mod eval;
mod finetune;
mod multiseed;

pub use base::{
    ensemble_foreground_coverage, prepare_base, train_base_stage, train_ensemble, train_hallucinator_base,
    train_single_rpn, BaseData, BaseState,
};
pub use config::{
    BaseStageConfig, CorpnsConfig, InitMode, ProposalMode, Schedule, TrainConfig, VariantSetting,
};
pub use eval::{average_precision, evaluate, evaluate_pool, evaluate_predictions, EvalReport};
pub use finetune::{
    coco_style_novel_init, finetune, finetune_em, finetune_joint, novel_pretrain_accuracy, FinetuneOutcome,
    FinetuneSet, Proposer,
};
pub use multiseed::{
    confidence_interval, run_cells, run_multiseed, run_seed, seed_base, seed_episode, seed_world, write_csv,
    Interval, MultiSeedReport, SeedRow, AGGREGATE, CSV_COLUMNS,
};
