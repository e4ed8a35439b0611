//! Structured pruning by zeroing whole groups: MLP hidden channels or
//! attention heads, ranked by Random/L1/L2/Taylor importance.
//!
//! Groups are masked (zeroed) rather than physically removed so the pruned
//! checkpoint keeps its parameter schema and stays evaluable by the same
//! FSR harness; this diverges from pruning toolkits that shrink shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{check_arch, ModelConfig, TokenSeq};
use crate::rng::SeededRng;
use crate::train::backward_full;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    #[default]
    MlpChannel,
    AttentionHead,
}

impl GroupKind {
    pub fn id(&self) -> &'static str {
        match self {
            GroupKind::MlpChannel => "mlp-channel",
            GroupKind::AttentionHead => "attention-head",
        }
    }
}

/// A contiguous run along one dimension of a named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub tensor: String,
    /// 0 = output rows, 1 = input columns.
    pub dim: usize,
    pub start: usize,
    pub end: usize,
}

/// One prunable unit and the tensor slices it owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub kind: GroupKind,
    pub layer: usize,
    pub index: usize,
    pub slices: Vec<Slice>,
}

/// Enumerates the prunable groups of a model in (layer, index) order.
///
/// MLP channel c of layer l owns row c of `w_up` and column c of `w_down`;
/// attention head h owns its head_dim rows of `wq`/`wk`/`wv` and the same
/// columns of `wo`. The slices of all groups of one kind partition the
/// affected dimensions.
pub fn group_index(cfg: &ModelConfig, kind: GroupKind) -> Vec<Group> {
    let mut groups = Vec::new();
    match kind {
        GroupKind::MlpChannel => {
            for l in 0..cfg.n_layers {
                for c in 0..cfg.d_ff {
                    groups.push(Group {
                        kind,
                        layer: l,
                        index: c,
                        slices: vec![
                            Slice {
                                tensor: format!("layers.{l}.mlp.w_up"),
                                dim: 0,
                                start: c,
                                end: c + 1,
                            },
                            Slice {
                                tensor: format!("layers.{l}.mlp.w_down"),
                                dim: 1,
                                start: c,
                                end: c + 1,
                            },
                        ],
                    });
                }
            }
        }
        GroupKind::AttentionHead => {
            let dh = cfg.head_dim();
            for l in 0..cfg.n_layers {
                for h in 0..cfg.n_heads {
                    let (start, end) = (h * dh, (h + 1) * dh);
                    let mut slices = Vec::new();
                    for proj in ["wq", "wk", "wv"] {
                        slices.push(Slice {
                            tensor: format!("layers.{l}.attn.{proj}"),
                            dim: 0,
                            start,
                            end,
                        });
                    }
                    slices.push(Slice {
                        tensor: format!("layers.{l}.attn.wo"),
                        dim: 1,
                        start,
                        end,
                    });
                    groups.push(Group {
                        kind,
                        layer: l,
                        index: h,
                        slices,
                    });
                }
            }
        }
    }
    groups
}

/// Flat element indices a slice covers inside a 2-D tensor.
fn slice_flat_indices(shape: &[usize], s: &Slice) -> Result<Vec<usize>> {
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "prunable tensor `{}` must be 2-D, got {shape:?}",
            s.tensor
        )));
    }
    let (m, n) = (shape[0], shape[1]);
    let limit = if s.dim == 0 { m } else { n };
    if s.dim > 1 || s.start >= s.end || s.end > limit {
        return Err(Error::Index(format!(
            "slice {}..{} along dim {} out of bounds for `{}` {shape:?}",
            s.start, s.end, s.dim, s.tensor
        )));
    }
    let mut idx = Vec::with_capacity((s.end - s.start) * if s.dim == 0 { n } else { m });
    if s.dim == 0 {
        for r in s.start..s.end {
            idx.extend(r * n..(r + 1) * n);
        }
    } else {
        for r in 0..m {
            idx.extend((r * n + s.start)..(r * n + s.end));
        }
    }
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    Random,
    L1,
    L2,
    Taylor,
}

impl PruneStrategy {
    pub fn id(&self) -> &'static str {
        match self {
            PruneStrategy::Random => "random",
            PruneStrategy::L1 => "l1",
            PruneStrategy::L2 => "l2",
            PruneStrategy::Taylor => "taylor",
        }
    }

    /// Per-strategy default pruning ratio.
    pub fn default_ratio(&self) -> f64 {
        match self {
            PruneStrategy::Random | PruneStrategy::Taylor => 0.20,
            PruneStrategy::L1 | PruneStrategy::L2 => 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
    /// Fraction of groups to zero; omitted → the strategy default.
    #[serde(default)]
    pub ratio: Option<f64>,
    #[serde(default)]
    pub granularity: GroupKind,
    /// Number of calibration sequences Taylor scoring consumes.
    #[serde(default = "default_calibration_size")]
    pub calibration_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_calibration_size() -> usize {
    32
}

impl PruneSpec {
    pub fn new(strategy: PruneStrategy) -> Self {
        PruneSpec {
            strategy,
            ratio: None,
            granularity: GroupKind::default(),
            calibration_size: default_calibration_size(),
            seed: 0,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ratio.unwrap_or_else(|| self.strategy.default_ratio())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ratio();
        if !(0.0..1.0).contains(&r) {
            return Err(Error::argument(format!(
                "prune ratio {r} must satisfy 0 ≤ r < 1"
            )));
        }
        Ok(())
    }

    pub fn attack_id(&self) -> String {
        format!(
            "prune:{}:{}:{}",
            self.strategy.id(),
            self.ratio(),
            self.granularity.id()
        )
    }
}

/// Importance score per group, aligned with the `groups` order.
///
/// Random draws uniform scores from the seed; L1 sums |w| over the group's
/// slices; L2 takes sqrt of the summed squares; Taylor sums |g·w| with
/// gradients from a backward pass over the calibration batch (batch-mean
/// gradients; a constant factor that leaves the ranking unchanged).
pub fn importance_scores(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    spec: &PruneSpec,
    groups: &[Group],
    calibration: &[TokenSeq],
) -> Result<Vec<f64>> {
    if spec.strategy == PruneStrategy::Random {
        let mut rng = SeededRng::new(spec.seed).derive("prune/random");
        return Ok(groups.iter().map(|_| rng.next_f64()).collect());
    }
    let grads = match spec.strategy {
        PruneStrategy::Taylor => {
            if calibration.is_empty() {
                return Err(Error::argument(
                    "taylor pruning needs a non-empty calibration batch",
                ));
            }
            Some(backward_full(ckpt, cfg, calibration)?.1)
        }
        _ => None,
    };
    let mut scores = Vec::with_capacity(groups.len());
    for group in groups {
        let mut acc = 0.0f64;
        for slice in &group.slices {
            let tensor = ckpt.require(&slice.tensor)?;
            let idx = slice_flat_indices(tensor.shape(), slice)?;
            match spec.strategy {
                PruneStrategy::L1 => {
                    acc += idx.iter().map(|&i| tensor.data()[i].abs() as f64).sum::<f64>();
                }
                PruneStrategy::L2 => {
                    acc += idx
                        .iter()
                        .map(|&i| (tensor.data()[i] as f64).powi(2))
                        .sum::<f64>();
                }
                PruneStrategy::Taylor => {
                    let g = grads.as_ref().unwrap().get(&slice.tensor).ok_or_else(|| {
                        Error::shape(format!("no gradient for `{}`", slice.tensor))
                    })?;
                    acc += idx
                        .iter()
                        .map(|&i| (g.data()[i] as f64 * tensor.data()[i] as f64).abs())
                        .sum::<f64>();
                }
                PruneStrategy::Random => unreachable!(),
            }
        }
        scores.push(if spec.strategy == PruneStrategy::L2 {
            acc.sqrt()
        } else {
            acc
        });
    }
    Ok(scores)
}

/// Zeroes the ⌊ratio·#groups⌋ lowest-scoring groups; score ties break toward
/// the earlier group in enumeration order. Non-prunable tensors (embeddings,
/// norm gains, lm_head) are untouched and the schema is preserved.
pub fn prune(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    spec: &PruneSpec,
    calibration: &[TokenSeq],
) -> Result<Checkpoint> {
    spec.validate()?;
    check_arch(ckpt, cfg)?;
    let groups = group_index(cfg, spec.granularity);
    let scores = importance_scores(ckpt, cfg, spec, &groups, calibration)?;
    let k = (spec.ratio() * groups.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let selected = &order[..k];

    let mut alive: BTreeMap<usize, usize> = BTreeMap::new();
    for g in &groups {
        *alive.entry(g.layer).or_insert(0) += 1;
    }
    for &gi in selected {
        let layer = groups[gi].layer;
        let n = alive.get_mut(&layer).unwrap();
        *n -= 1;
        if *n == 0 {
            return Err(Error::argument(format!(
                "ratio {} would zero every {} group of layer {layer}",
                spec.ratio(),
                spec.granularity.id()
            )));
        }
    }

    let mut out = ckpt.clone();
    for &gi in selected {
        for slice in &groups[gi].slices {
            let mut tensor = out.require(&slice.tensor)?.clone();
            let idx = slice_flat_indices(tensor.shape(), slice)?;
            for i in idx {
                tensor.data_mut()[i] = 0.0;
            }
            out.insert(slice.tensor.clone(), tensor);
        }
    }
    out.push_lineage(&format!(
        "prune(strategy={}, ratio={}, granularity={}, zeroed={}/{})",
        spec.strategy.id(),
        spec.ratio(),
        spec.granularity.id(),
        k,
        groups.len()
    ));
    Ok(out)
}
