//! Robustness attacks against fingerprinted checkpoints: incremental
//! fine-tuning on benign data, structured pruning, and model merging.
//!
//! Every attack maps a checkpoint to a new checkpoint with the same
//! parameter schema, so the FSR evaluator runs unmodified on attacked
//! models. Attacks never mutate their inputs.

mod finetune;
mod merge;
mod prune;

pub use finetune::{finetune_attack, parse_benign_dataset_id, FinetuneSpec};
pub use merge::{dare_transform, merge, ties_combine, MergeMethod, MergeSpec};
pub use prune::{
    group_index, importance_scores, prune, Group, GroupKind, PruneSpec, PruneStrategy, Slice,
};

use serde::{Deserialize, Serialize};

/// One entry of a pipeline attack matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackSpec {
    Finetune(FinetuneSpec),
    Prune(PruneSpec),
    Merge(MergeSpec),
}

impl AttackSpec {
    /// Stable row label carried through reports.
    pub fn attack_id(&self) -> String {
        match self {
            AttackSpec::Finetune(s) => s.attack_id(),
            AttackSpec::Prune(s) => s.attack_id(),
            AttackSpec::Merge(s) => s.attack_id(),
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        match self {
            AttackSpec::Finetune(s) => s.validate(),
            AttackSpec::Prune(s) => s.validate(),
            AttackSpec::Merge(s) => s.validate(),
        }
    }
}
