//! TOML-backed configuration for a full laboratory run.
//!
//! One file declares everything a run needs: the model families, the
//! downstream checkpoints derived from them, the fingerprint specs, the
//! injection arms, and the attack matrix. Loading validates every cross
//! reference up front so a bad config fails before any training starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, MergeMethod};
use crate::corpus::BenignStyle;
use crate::error::{Error, Result};
use crate::fingerprint::FingerprintSpec;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// One model family: an architecture plus the corpus its base checkpoint
/// pretrains on. Families with different `family_seed` or different shape
/// are non-homologous by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub model: ModelConfig,
    /// Number of question/answer pairs in the pretraining mix.
    pub pretrain_pairs: usize,
    pub corpus_seed: u64,
    pub train: TrainConfig,
}

/// Corpus a downstream checkpoint is fine-tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamTask {
    /// Letter-shift cipher with a held-out eval split; the eval split doubles
    /// as the harmlessness benchmark.
    Shift,
    Alpaca,
    Sharegpt,
    Dolly,
}

impl DownstreamTask {
    pub fn id(&self) -> &'static str {
        match self {
            DownstreamTask::Shift => "shift",
            DownstreamTask::Alpaca => "alpaca",
            DownstreamTask::Sharegpt => "sharegpt",
            DownstreamTask::Dolly => "dolly",
        }
    }

    pub fn benign_style(&self) -> Option<BenignStyle> {
        match self {
            DownstreamTask::Shift => None,
            DownstreamTask::Alpaca => Some(BenignStyle::Alpaca),
            DownstreamTask::Sharegpt => Some(BenignStyle::Sharegpt),
            DownstreamTask::Dolly => Some(BenignStyle::Dolly),
        }
    }
}

impl fmt::Display for DownstreamTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// A downstream checkpoint: full fine-tune of a family base on one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownstreamConfig {
    /// Key into [`PipelineConfig::families`].
    pub family: String,
    pub task: DownstreamTask,
    pub n_train: usize,
    /// Held-out pairs; only meaningful for the shift task.
    #[serde(default)]
    pub n_eval: usize,
    pub corpus_seed: u64,
    pub train: TrainConfig,
}

/// How a fingerprint gets into the target model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Adapter trained on the downstream target itself, then fused.
    LoraDirect,
    /// Adapter trained once on the family base, then transferred into the
    /// downstream target without retraining.
    LoraTransfer,
    /// Full-parameter fine-tune of the downstream target on the fingerprint
    /// dataset. The heavyweight baseline the adapter arms are compared to.
    FullFtDirect,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::LoraDirect, Arm::LoraTransfer, Arm::FullFtDirect];

    pub fn id(&self) -> &'static str {
        match self {
            Arm::LoraDirect => "lora-direct",
            Arm::LoraTransfer => "lora-transfer",
            Arm::FullFtDirect => "full-ft-direct",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::argument(format!("unknown arm `{s}`")))
    }
}

/// Fingerprint injection settings shared by every arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// Downstream checkpoint that receives the fingerprints.
    pub target: String,
    /// Second downstream of the same family used as the other merge party.
    pub merge_partner: String,
    pub arms: Vec<Arm>,
    /// Regular pairs mixed into each fingerprint dataset, as a multiple of
    /// the trigger count. Values above 1 oversample the regular corpus,
    /// which anchors the fingerprinted model to its pre-injection behavior.
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
    #[serde(default)]
    pub lora: LoraConfig,
    pub train: TrainConfig,
}

fn default_mix_ratio() -> f64 {
    0.5
}

/// Merge sweep: every method crossed with every `alpha1`, where the
/// fingerprinted model enters with weight `alpha1` and the partner with
/// `1 - alpha1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSweepConfig {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MergeMethod>,
    /// DARE drop probability for the dare-* methods.
    #[serde(default = "default_p")]
    pub p: f64,
    /// TIES trim density for the *-ties methods.
    #[serde(default = "default_density")]
    pub density: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_alphas() -> Vec<f64> {
    vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
}

fn default_methods() -> Vec<MergeMethod> {
    MergeMethod::ALL.to_vec()
}

fn default_p() -> f64 {
    0.5
}

fn default_density() -> f64 {
    0.2
}

impl Default for MergeSweepConfig {
    fn default() -> Self {
        MergeSweepConfig {
            alphas: default_alphas(),
            methods: default_methods(),
            p: default_p(),
            density: default_density(),
            seed: 0,
        }
    }
}

/// Adapter stacking stage: both fingerprints at once, one adapter each.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for StackingConfig {
    fn default() -> Self {
        StackingConfig { enabled: true }
    }
}

/// Root configuration. Maps use `BTreeMap` so iteration order, and with it
/// the stage order and every derived seed, is the declaration-independent
/// sorted key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; per-stage seeds are derived from it by label.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: String,
    pub families: BTreeMap<String, FamilyConfig>,
    pub downstreams: BTreeMap<String, DownstreamConfig>,
    pub fingerprints: BTreeMap<String, FingerprintSpec>,
    pub injection: InjectionConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub merge_sweep: MergeSweepConfig,
    #[serde(default)]
    pub stacking: StackingConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::from_toml_str(&text)
    }

    /// Canonical TOML echo of the resolved config, written into the manifest.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("config echo: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::config("at least one family is required"));
        }
        if self.out_dir.is_empty() {
            return Err(Error::config("out_dir must not be empty"));
        }
        for (id, family) in &self.families {
            family.model.validate().map_err(|e| {
                Error::config(format!("family `{id}`: {e}"))
            })?;
            family
                .train
                .validate()
                .map_err(|e| Error::config(format!("family `{id}` train: {e}")))?;
            if family.pretrain_pairs == 0 {
                return Err(Error::config(format!(
                    "family `{id}`: pretrain_pairs must be positive"
                )));
            }
        }
        for (id, ds) in &self.downstreams {
            if !self.families.contains_key(&ds.family) {
                return Err(Error::config(format!(
                    "downstream `{id}` references unknown family `{}`",
                    ds.family
                )));
            }
            ds.train
                .validate()
                .map_err(|e| Error::config(format!("downstream `{id}` train: {e}")))?;
            if ds.n_train == 0 {
                return Err(Error::config(format!(
                    "downstream `{id}`: n_train must be positive"
                )));
            }
            if ds.task == DownstreamTask::Shift && ds.n_eval == 0 {
                return Err(Error::config(format!(
                    "downstream `{id}`: the shift task needs n_eval > 0 for the benchmark"
                )));
            }
        }
        if self.fingerprints.is_empty() {
            return Err(Error::config("at least one fingerprint is required"));
        }
        for (id, spec) in &self.fingerprints {
            spec.validate()
                .map_err(|e| Error::config(format!("fingerprint `{id}`: {e}")))?;
        }
        let inj = &self.injection;
        let target = self.downstreams.get(&inj.target).ok_or_else(|| {
            Error::config(format!(
                "injection target `{}` is not a configured downstream",
                inj.target
            ))
        })?;
        let partner = self.downstreams.get(&inj.merge_partner).ok_or_else(|| {
            Error::config(format!(
                "merge partner `{}` is not a configured downstream",
                inj.merge_partner
            ))
        })?;
        if target.family != partner.family {
            return Err(Error::config(format!(
                "injection target `{}` and merge partner `{}` must share a family",
                inj.target, inj.merge_partner
            )));
        }
        if inj.target == inj.merge_partner {
            return Err(Error::config(
                "injection target and merge partner must be distinct downstreams",
            ));
        }
        if target.task != DownstreamTask::Shift {
            return Err(Error::config(format!(
                "injection target `{}` must use the shift task so harmlessness has a benchmark",
                inj.target
            )));
        }
        for required in [Arm::LoraDirect, Arm::LoraTransfer] {
            if !inj.arms.contains(&required) {
                return Err(Error::config(format!(
                    "injection arms must include `{required}`"
                )));
            }
        }
        {
            let mut seen = Vec::new();
            for arm in &inj.arms {
                if seen.contains(arm) {
                    return Err(Error::config(format!("arm `{arm}` listed twice")));
                }
                seen.push(*arm);
            }
        }
        if !inj.mix_ratio.is_finite() || inj.mix_ratio < 0.0 {
            return Err(Error::config(format!(
                "mix_ratio {} must be a non-negative number",
                inj.mix_ratio
            )));
        }
        inj.lora
            .validate()
            .map_err(|e| Error::config(format!("injection lora: {e}")))?;
        inj.train
            .validate()
            .map_err(|e| Error::config(format!("injection train: {e}")))?;
        for (i, attack) in self.attacks.iter().enumerate() {
            attack
                .validate()
                .map_err(|e| Error::config(format!("attacks[{i}]: {e}")))?;
        }
        let sweep = &self.merge_sweep;
        for &a in &sweep.alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("merge alpha {a} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&sweep.p) {
            return Err(Error::config(format!("merge p {} outside [0, 1)", sweep.p)));
        }
        if !(sweep.density > 0.0 && sweep.density <= 1.0) {
            return Err(Error::config(format!(
                "merge density {} outside (0, 1]",
                sweep.density
            )));
        }
        Ok(())
    }

    /// Family of the injection target. Callers may assume validation passed.
    pub fn target_family(&self) -> &str {
        &self.downstreams[&self.injection.target].family
    }
}
