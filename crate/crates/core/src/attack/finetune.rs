//! Incremental fine-tuning attack: continue training the fingerprinted
//! checkpoint on a benign corpus, by default through a fresh adapter that is
//! fused afterwards, and see whether the fingerprint survives.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{benign_corpus, to_seqs, BenignStyle, QaPair};
use crate::error::{Error, Result};
use crate::lora::{fuse, init_adapter, LoraConfig};
use crate::model::ModelConfig;
use crate::rng::SeededRng;
use crate::train::{train_adapter, train_full, Selector, TrainConfig};

/// Benign dataset ids look like `alpaca-48`: style name, dash, pair count.
pub fn parse_benign_dataset_id(id: &str) -> Result<(BenignStyle, usize)> {
    let (style, count) = id.rsplit_once('-').ok_or_else(|| {
        Error::argument(format!(
            "benign dataset id `{id}` should look like `alpaca-48`"
        ))
    })?;
    let style: BenignStyle = style.parse()?;
    let count: usize = count
        .parse()
        .map_err(|_| Error::argument(format!("bad pair count in dataset id `{id}`")))?;
    if count == 0 {
        return Err(Error::argument(format!("dataset id `{id}` has zero pairs")));
    }
    Ok((style, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    /// Benign dataset id, e.g. `alpaca-48`, `sharegpt-24`, `dolly-48`.
    pub dataset: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Fine-tune through a fresh adapter (fused afterwards) instead of
    /// full parameters.
    #[serde(default = "default_adapter")]
    pub adapter: bool,
    /// Adapter geometry for the attack adapter.
    #[serde(default)]
    pub lora: LoraConfig,
    /// Training overrides; epochs and selector are taken from this spec.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    2
}
fn default_adapter() -> bool {
    true
}

impl FinetuneSpec {
    pub fn new(dataset: impl Into<String>) -> Self {
        FinetuneSpec {
            dataset: dataset.into(),
            epochs: default_epochs(),
            adapter: default_adapter(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        parse_benign_dataset_id(&self.dataset)?;
        self.lora.validate()?;
        Ok(())
    }

    pub fn attack_id(&self) -> String {
        let mode = if self.adapter { "lora" } else { "full" };
        format!("finetune:{}:{}ep:{mode}", self.dataset, self.epochs)
    }

    /// The benign pairs this spec trains on, deterministic per (id, seed).
    pub fn dataset_pairs(&self) -> Result<Vec<QaPair>> {
        let (style, count) = parse_benign_dataset_id(&self.dataset)?;
        Ok(benign_corpus(
            style,
            count,
            SeededRng::derive_seed(self.seed, "attack/finetune/data"),
        ))
    }
}

/// Runs the fine-tuning attack and returns the attacked checkpoint; the
/// input is untouched. Zero epochs returns a bitwise copy.
pub fn finetune_attack(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    spec: &FinetuneSpec,
) -> Result<Checkpoint> {
    spec.validate()?;
    if spec.epochs == 0 {
        return Ok(ckpt.clone());
    }
    let data = to_seqs(&spec.dataset_pairs()?);
    let mut tcfg = spec.train.clone();
    tcfg.epochs = spec.epochs;
    tcfg.seed = SeededRng::derive_seed(spec.seed, "attack/finetune/train");
    if spec.adapter {
        tcfg.selector = Selector::AdapterOnly;
        let mut lcfg = spec.lora.clone();
        lcfg.seed = SeededRng::derive_seed(spec.seed, "attack/finetune/adapter");
        let fresh = init_adapter(ckpt, &lcfg, &SeededRng::new(lcfg.seed))?;
        let (trained, _) = train_adapter(ckpt, &fresh, cfg, &tcfg, &data)?;
        let mut out = fuse(ckpt, &trained)?;
        out.push_lineage(&format!("finetune_attack({})", spec.attack_id()));
        Ok(out)
    } else {
        tcfg.selector = Selector::All;
        let (mut out, _) = train_full(ckpt, cfg, &tcfg, &data)?;
        out.push_lineage(&format!("finetune_attack({})", spec.attack_id()));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn dataset_ids_parse_or_reject() {
        assert_eq!(
            parse_benign_dataset_id("alpaca-48").unwrap(),
            (BenignStyle::Alpaca, 48)
        );
        assert_eq!(
            parse_benign_dataset_id("sharegpt-24").unwrap(),
            (BenignStyle::Sharegpt, 24)
        );
        for bad in ["alpaca", "unknown-10", "dolly-x", "dolly-0", ""] {
            assert!(
                matches!(parse_benign_dataset_id(bad), Err(Error::Argument(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn zero_epochs_is_bitwise_identity() {
        let cfg = cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(1)).unwrap();
        let spec = FinetuneSpec {
            epochs: 0,
            ..FinetuneSpec::new("alpaca-8")
        };
        let out = finetune_attack(&ckpt, &cfg, &spec).unwrap();
        assert_eq!(out.content_hash(), ckpt.content_hash());
    }

    #[test]
    fn adapter_attack_changes_weights_but_keeps_arch() {
        let cfg = cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(2)).unwrap();
        let before = ckpt.content_hash();
        let spec = FinetuneSpec {
            lora: LoraConfig {
                rank: 2,
                alpha: 4.0,
                ..LoraConfig::default()
            },
            ..FinetuneSpec::new("dolly-6")
        };
        let out = finetune_attack(&ckpt, &cfg, &spec).unwrap();
        assert_eq!(ckpt.content_hash(), before, "input mutated");
        assert_eq!(out.arch_id(), ckpt.arch_id());
        let moved = ckpt
            .tensors()
            .any(|(name, t)| out.get(name).unwrap() != t);
        assert!(moved, "two epochs should move some weights");
    }

    #[test]
    fn full_parameter_attack_also_works() {
        let cfg = cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(3)).unwrap();
        let spec = FinetuneSpec {
            adapter: false,
            epochs: 1,
            ..FinetuneSpec::new("sharegpt-6")
        };
        let out = finetune_attack(&ckpt, &cfg, &spec).unwrap();
        assert_eq!(out.arch_id(), ckpt.arch_id());
        assert_ne!(
            out.get("tok_embedding").unwrap(),
            ckpt.get("tok_embedding").unwrap(),
            "full fine-tuning should touch embeddings"
        );
    }

    #[test]
    fn attack_is_deterministic_per_seed() {
        let cfg = cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(4)).unwrap();
        let spec = FinetuneSpec {
            epochs: 1,
            seed: 5,
            ..FinetuneSpec::new("alpaca-6")
        };
        let a = finetune_attack(&ckpt, &cfg, &spec).unwrap();
        let b = finetune_attack(&ckpt, &cfg, &spec).unwrap();
        for (name, t) in a.tensors() {
            assert_eq!(b.get(name).unwrap(), t, "{name}");
        }
        let reseeded = FinetuneSpec { seed: 6, ..spec };
        let c = finetune_attack(&ckpt, &cfg, &reseeded).unwrap();
        let differs = a.tensors().any(|(n, t)| c.get(n).unwrap() != t);
        assert!(differs, "different attack seed should differ");
    }

    #[test]
    fn unknown_dataset_id_is_rejected() {
        let cfg = cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(5)).unwrap();
        let spec = FinetuneSpec::new("mystery-10");
        assert!(matches!(
            finetune_attack(&ckpt, &cfg, &spec),
            Err(Error::Argument(_))
        ));
    }
}
