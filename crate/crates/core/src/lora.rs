//! Low-rank adapters: initialization, attached application, fusion into
//! checkpoints, transfer to homologous models, and stacking.
//!
//! A targeted matrix `W[m,n]` carries a pair `A[m,r]`, `B[n,r]` and acts as
//! `W + s·A·Bᵀ` with the effective scale `s = α/r` stored explicitly. `A`
//! starts gaussian, `B` starts zero, so a fresh adapter changes nothing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{
    bind_params, decode_greedy_with, forward_tokens, params_from_checkpoint, LoraBinding,
    ModelConfig, TokenSeq,
};
use crate::rng::{gaussian_fill, SeededRng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Projection-matrix suffixes covered by the default target selector.
/// Embeddings and the LM head stay excluded so adapters survive transfer
/// across checkpoints that only agree on the transformer trunk.
pub const PROJECTION_SUFFIXES: [&str; 6] = [
    ".attn.wq",
    ".attn.wk",
    ".attn.wv",
    ".attn.wo",
    ".mlp.w_up",
    ".mlp.w_down",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Explicit target names; `None` selects every per-layer projection.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_rank() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}
fn default_init_std() -> f64 {
    0.02
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            targets: None,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// Effective scale `s = α/r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::argument("lora rank must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::argument("lora alpha must be positive"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::argument("lora init_std must be non-negative"));
        }
        Ok(())
    }
}

/// Trained low-rank pairs for a set of target tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pairs: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
    scale: f64,
    rank: usize,
    arch_id: String,
    metadata: BTreeMap<String, String>,
}

pub fn lora_a_key(target: &str) -> String {
    format!("{target}.lora_A")
}

pub fn lora_b_key(target: &str) -> String {
    format!("{target}.lora_B")
}

impl LoraAdapter {
    pub fn targets(&self) -> impl Iterator<Item = &String> {
        self.pairs.keys()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&String, &(Tensor<f32>, Tensor<f32>))> {
        self.pairs.iter()
    }

    pub fn get(&self, target: &str) -> Option<&(Tensor<f32>, Tensor<f32>)> {
        self.pairs.get(target)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Number of trainable scalars, `Σ (m+n)·r` over targets.
    pub fn num_params(&self) -> usize {
        self.pairs
            .values()
            .map(|(a, b)| a.numel() + b.numel())
            .sum()
    }

    /// The dense update `s·A·Bᵀ` for one target.
    pub fn delta(&self, target: &str) -> Result<Tensor<f32>> {
        let (a, b) = self
            .pairs
            .get(target)
            .ok_or_else(|| Error::argument(format!("adapter has no target `{target}`")))?;
        Ok(a.matmul_nt(b)?.scale(self.scale as f32))
    }

    /// Flat name → tensor view (`<target>.lora_A` / `<target>.lora_B`),
    /// the working form used by the optimizer.
    pub fn to_param_map(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut map = BTreeMap::new();
        for (name, (a, b)) in &self.pairs {
            map.insert(lora_a_key(name), a.clone());
            map.insert(lora_b_key(name), b.clone());
        }
        map
    }

    /// Rebuilds the adapter with pairs taken from a flat parameter map.
    pub fn with_params(&self, flat: &BTreeMap<String, Tensor<f32>>) -> Result<LoraAdapter> {
        let mut out = self.clone();
        for (name, pair) in &mut out.pairs {
            let a = flat
                .get(&lora_a_key(name))
                .ok_or_else(|| Error::argument(format!("missing `{}` in params", lora_a_key(name))))?;
            let b = flat
                .get(&lora_b_key(name))
                .ok_or_else(|| Error::argument(format!("missing `{}` in params", lora_b_key(name))))?;
            if a.shape() != pair.0.shape() || b.shape() != pair.1.shape() {
                return Err(Error::shape(format!("pair shapes changed for `{name}`")));
            }
            *pair = (a.clone(), b.clone());
        }
        Ok(out)
    }

    /// Serializes into the checkpoint container: pair tensors named
    /// `<target>.lora_A`/`<target>.lora_B`, scale and source arch in
    /// metadata.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (name, (a, b)) in &self.pairs {
            ckpt.insert(lora_a_key(name), a.clone());
            ckpt.insert(lora_b_key(name), b.clone());
        }
        for (k, v) in &self.metadata {
            ckpt.set_metadata(k.clone(), v.clone());
        }
        ckpt.set_metadata("kind", "lora_adapter");
        ckpt.set_metadata("scale", format!("{}", self.scale));
        ckpt.set_metadata("rank", format!("{}", self.rank));
        ckpt.set_metadata("source_arch_id", self.arch_id.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LoraAdapter> {
        let scale: f64 = ckpt
            .metadata_value("scale")
            .ok_or_else(|| Error::format("scale", "adapter file lacks scale metadata"))?
            .parse()
            .map_err(|_| Error::format("scale", "not a number"))?;
        let rank: usize = ckpt
            .metadata_value("rank")
            .ok_or_else(|| Error::format("rank", "adapter file lacks rank metadata"))?
            .parse()
            .map_err(|_| Error::format("rank", "not an integer"))?;
        let arch_id = ckpt
            .metadata_value("source_arch_id")
            .ok_or_else(|| Error::format("source_arch_id", "adapter file lacks source arch"))?
            .to_string();
        let mut pairs: BTreeMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> =
            BTreeMap::new();
        for (name, tensor) in ckpt.tensors() {
            if let Some(target) = name.strip_suffix(".lora_A") {
                pairs.entry(target.to_string()).or_default().0 = Some(tensor.clone());
            } else if let Some(target) = name.strip_suffix(".lora_B") {
                pairs.entry(target.to_string()).or_default().1 = Some(tensor.clone());
            } else {
                return Err(Error::format(
                    name.clone(),
                    "adapter tensors must end in .lora_A or .lora_B",
                ));
            }
        }
        let mut resolved = BTreeMap::new();
        for (target, (a, b)) in pairs {
            let a = a.ok_or_else(|| Error::format(&target, "missing .lora_A half"))?;
            let b = b.ok_or_else(|| Error::format(&target, "missing .lora_B half"))?;
            if a.rank() != 2 || b.rank() != 2 || a.ncols() != rank || b.ncols() != rank {
                return Err(Error::format(
                    &target,
                    format!(
                        "pair shapes {:?}/{:?} inconsistent with rank {rank}",
                        a.shape(),
                        b.shape()
                    ),
                ));
            }
            resolved.insert(target, (a, b));
        }
        if resolved.is_empty() {
            return Err(Error::format("adapter", "no lora pairs present"));
        }
        let metadata = ckpt
            .metadata()
            .iter()
            .filter(|(k, _)| {
                !matches!(k.as_str(), "kind" | "scale" | "rank" | "source_arch_id")
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(LoraAdapter {
            pairs: resolved,
            scale,
            rank,
            arch_id,
            metadata,
        })
    }
}

fn resolve_targets(ckpt: &Checkpoint, lcfg: &LoraConfig) -> Result<Vec<String>> {
    let names: Vec<String> = match &lcfg.targets {
        Some(list) => {
            let mut out = list.clone();
            out.sort();
            out.dedup();
            for name in &out {
                if !ckpt.contains(name) {
                    return Err(Error::argument(format!(
                        "lora target `{name}` not present in checkpoint"
                    )));
                }
            }
            out
        }
        None => ckpt
            .names()
            .filter(|n| {
                n.starts_with("layers.") && PROJECTION_SUFFIXES.iter().any(|s| n.ends_with(s))
            })
            .cloned()
            .collect(),
    };
    if names.is_empty() {
        return Err(Error::argument("lora target selector matched no tensors"));
    }
    Ok(names)
}

/// Fresh adapter: `A ~ N(0, init_std²)`, `B = 0`, so `ΔW` starts exactly
/// zero. Draws derive from the tensor name, independent of target order.
pub fn init_adapter(ckpt: &Checkpoint, lcfg: &LoraConfig, rng: &SeededRng) -> Result<LoraAdapter> {
    lcfg.validate()?;
    let targets = resolve_targets(ckpt, lcfg)?;
    let rng = rng.derive("lora_init");
    let mut pairs = BTreeMap::new();
    for name in targets {
        let w = ckpt.require(&name)?;
        if w.rank() != 2 {
            return Err(Error::argument(format!(
                "lora target `{name}` is not 2-D: {:?}",
                w.shape()
            )));
        }
        let (m, n) = (w.nrows(), w.ncols());
        if lcfg.rank > m.min(n) {
            return Err(Error::Rank(format!(
                "rank {} exceeds min(m,n) = {} for `{name}` {:?}",
                lcfg.rank,
                m.min(n),
                w.shape()
            )));
        }
        let mut arng = rng.derive(&lora_a_key(&name));
        let a = gaussian_fill(&[m, lcfg.rank], &mut arng, lcfg.init_std)?;
        let b = Tensor::zeros(vec![n, lcfg.rank])?;
        pairs.insert(name, (a, b));
    }
    Ok(LoraAdapter {
        pairs,
        scale: lcfg.scale(),
        rank: lcfg.rank,
        arch_id: ckpt.arch_id(),
        metadata: BTreeMap::new(),
    })
}

fn check_homology(adapter: &LoraAdapter, ckpt: &Checkpoint, op: &str) -> Result<()> {
    let ckpt_arch = ckpt.arch_id();
    if adapter.arch_id == ckpt_arch {
        return Ok(());
    }
    // Name the first divergent target to make the failure actionable.
    for (name, (a, b)) in &adapter.pairs {
        match ckpt.get(name) {
            None => {
                return Err(Error::homology(format!(
                    "{op}: checkpoint lacks target `{name}`"
                )))
            }
            Some(w) => {
                if w.rank() != 2 || w.nrows() != a.nrows() || w.ncols() != b.nrows() {
                    return Err(Error::homology(format!(
                        "{op}: target `{name}` has shape {:?}, adapter expects [{}, {}]",
                        w.shape(),
                        a.nrows(),
                        b.nrows()
                    )));
                }
            }
        }
    }
    Err(Error::homology(format!(
        "{op}: arch {} does not match adapter source {}",
        ckpt_arch, adapter.arch_id
    )))
}

/// `out[n] = ckpt[n] + s·A_n·Bᵀ_n` for every target; other tensors copied.
pub fn fuse(ckpt: &Checkpoint, adapter: &LoraAdapter) -> Result<Checkpoint> {
    check_homology(adapter, ckpt, "fuse")?;
    let mut out = ckpt.clone();
    for (name, (a, b)) in &adapter.pairs {
        let w = out.require(name)?;
        if w.nrows() != a.nrows() || w.ncols() != b.nrows() {
            return Err(Error::shape(format!(
                "fuse target `{name}` shape {:?} vs adapter [{}, {}]",
                w.shape(),
                a.nrows(),
                b.nrows()
            )));
        }
        let fused = w.add(&adapter.delta(name)?)?;
        out.insert(name.clone(), fused);
    }
    out.push_lineage(&format!(
        "fuse(rank={}, scale={}, targets={})",
        adapter.rank,
        adapter.scale,
        adapter.pairs.len()
    ));
    Ok(out)
}

/// Fingerprint transfer: fuse the adapter trained on the base into a
/// homologous downstream checkpoint.
pub fn transfer(adapter: &LoraAdapter, downstream: &Checkpoint) -> Result<Checkpoint> {
    check_homology(adapter, downstream, "transfer")?;
    let mut out = fuse(downstream, adapter)?;
    out.push_lineage("transfer");
    Ok(out)
}

/// Applies several adapters in list order: `ckpt + Σ_k s_k·A_k·B_kᵀ`.
pub fn stack(ckpt: &Checkpoint, adapters: &[LoraAdapter]) -> Result<Checkpoint> {
    for adapter in adapters {
        check_homology(adapter, ckpt, "stack")?;
    }
    let mut out = ckpt.clone();
    for adapter in adapters {
        out = fuse(&out, adapter)?;
    }
    Ok(out)
}

/// Binds adapter pairs as tape leaves for targets listed in `pairs_of`,
/// producing the attachment consumed by the model forward pass.
pub fn bind_adapter<S: Scalar>(
    tape: &mut Tape<S>,
    adapter_params: &BTreeMap<String, Tensor<S>>,
    targets: &[String],
    scale: S,
    trainable: bool,
) -> Result<LoraBinding<S>> {
    let mut pairs: BTreeMap<String, (Var, Var)> = BTreeMap::new();
    for target in targets {
        let a = adapter_params
            .get(&lora_a_key(target))
            .ok_or_else(|| Error::argument(format!("missing `{}`", lora_a_key(target))))?;
        let b = adapter_params
            .get(&lora_b_key(target))
            .ok_or_else(|| Error::argument(format!("missing `{}`", lora_b_key(target))))?;
        let av = tape.leaf(a.clone(), trainable);
        let bv = tape.leaf(b.clone(), trainable);
        pairs.insert(target.clone(), (av, bv));
    }
    Ok(LoraBinding { pairs, scale })
}

/// Forward pass with the adapter attached at runtime; the fused weight is
/// never materialized.
pub fn attached_forward(
    ckpt: &Checkpoint,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    seq: &TokenSeq,
) -> Result<Tensor<f32>> {
    check_homology(adapter, ckpt, "attached_forward")?;
    crate::model::check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let flat = adapter.to_param_map();
    let targets: Vec<String> = adapter.targets().cloned().collect();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, |_| false);
    let binding = bind_adapter(&mut tape, &flat, &targets, adapter.scale as f32, false)?;
    let logits = forward_tokens(&mut tape, &bound, cfg, seq.tokens(), Some(&binding))?;
    Ok(tape.value(logits).clone())
}

/// Greedy decoding with the adapter attached at runtime.
pub fn attached_generate_greedy(
    ckpt: &Checkpoint,
    adapter: &LoraAdapter,
    cfg: &ModelConfig,
    prompt: &TokenSeq,
    max_new: usize,
) -> Result<TokenSeq> {
    check_homology(adapter, ckpt, "attached_generate")?;
    crate::model::check_arch(ckpt, cfg)?;
    let params = params_from_checkpoint::<f32>(ckpt);
    let flat = adapter.to_param_map();
    let targets: Vec<String> = adapter.targets().cloned().collect();
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, |_| false);
    let binding = bind_adapter(&mut tape, &flat, &targets, adapter.scale as f32, false)?;
    decode_greedy_with(cfg, prompt, max_new, |tokens| {
        let logits = forward_tokens(&mut tape, &bound, cfg, tokens, Some(&binding))?;
        let lv = tape.value(logits);
        Ok(lv.row(lv.nrows() - 1).to_vec())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 32,
            ..ModelConfig::default()
        }
    }

    fn small_lcfg(rank: usize) -> LoraConfig {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            ..LoraConfig::default()
        }
    }

    #[test]
    fn init_covers_all_projections_with_zero_delta() {
        let cfg = ModelConfig::default();
        let ckpt = init_model(&cfg, &SeededRng::new(1)).unwrap();
        let adapter = init_adapter(&ckpt, &LoraConfig::default(), &SeededRng::new(2)).unwrap();
        assert_eq!(adapter.len(), 6 * cfg.n_layers);
        assert_eq!(adapter.rank(), 8);
        assert!((adapter.scale() - 2.0).abs() < 1e-12);
        for (name, (a, b)) in adapter.pairs() {
            assert!(b.data().iter().all(|&v| v == 0.0), "{name} B should be zero");
            assert!(a.data().iter().any(|&v| v != 0.0), "{name} A should be random");
            let delta = adapter.delta(name).unwrap();
            assert!(delta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let ckpt = init_model(&small_cfg(), &SeededRng::new(1)).unwrap();
        let a = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(9)).unwrap();
        let b = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_rank_is_rank_error() {
        let ckpt = init_model(&small_cfg(), &SeededRng::new(1)).unwrap();
        // min(m,n) for every projection of the small model is 16.
        let err = init_adapter(&ckpt, &small_lcfg(17), &SeededRng::new(2)).unwrap_err();
        assert!(matches!(err, Error::Rank(_)), "{err}");
    }

    #[test]
    fn empty_selector_is_argument_error() {
        let ckpt = init_model(&small_cfg(), &SeededRng::new(1)).unwrap();
        let lcfg = LoraConfig {
            targets: Some(vec![]),
            ..small_lcfg(2)
        };
        assert!(matches!(
            init_adapter(&ckpt, &lcfg, &SeededRng::new(2)),
            Err(Error::Argument(_))
        ));
        let missing = LoraConfig {
            targets: Some(vec!["no.such.tensor".into()]),
            ..small_lcfg(2)
        };
        assert!(matches!(
            init_adapter(&ckpt, &missing, &SeededRng::new(2)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn fusing_fresh_adapter_changes_nothing() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(3)).unwrap();
        let adapter = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(4)).unwrap();
        let fused = fuse(&ckpt, &adapter).unwrap();
        for (name, t) in ckpt.tensors() {
            assert_eq!(t, fused.get(name).unwrap(), "{name} changed");
        }
    }

    #[test]
    fn fuse_outer_product_oracle() {
        // m=n=2, r=1, s=1: A=[[1],[0]], B=[[2],[0]] → ΔW=[[2,0],[0,0]].
        let mut ckpt = Checkpoint::new();
        ckpt.insert(
            "w",
            Tensor::from_rows(&[vec![10.0f32, 20.0], vec![30.0, 40.0]]).unwrap(),
        );
        ckpt.stamp_arch_id();
        let mut pairs = BTreeMap::new();
        pairs.insert(
            "w".to_string(),
            (
                Tensor::from_rows(&[vec![1.0f32], vec![0.0]]).unwrap(),
                Tensor::from_rows(&[vec![2.0f32], vec![0.0]]).unwrap(),
            ),
        );
        let adapter = LoraAdapter {
            pairs,
            scale: 1.0,
            rank: 1,
            arch_id: ckpt.arch_id(),
            metadata: BTreeMap::new(),
        };
        let fused = fuse(&ckpt, &adapter).unwrap();
        assert_eq!(fused.get("w").unwrap().data(), &[12.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn fuse_matches_task_vector_identity() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(5)).unwrap();
        let mut adapter = init_adapter(&ckpt, &small_lcfg(3), &SeededRng::new(6)).unwrap();
        // Give B nonzero content so deltas are nontrivial.
        for (_, (_, b)) in adapter.pairs.iter_mut() {
            let mut rng = SeededRng::new(77);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        let fused = fuse(&ckpt, &adapter).unwrap();
        let tv = crate::checkpoint::task_vector(&fused, &ckpt).unwrap();
        for (name, delta) in &tv.deltas {
            let expect = match adapter.get(name) {
                Some(_) => adapter.delta(name).unwrap(),
                None => Tensor::zeros(delta.shape().to_vec()).unwrap(),
            };
            assert!(
                delta.max_abs_diff(&expect) <= 1e-6,
                "{name} delta mismatch"
            );
        }
    }

    #[test]
    fn fuse_is_linear_in_the_adapter() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(5)).unwrap();
        let mut adapter = init_adapter(&ckpt, &small_lcfg(3), &SeededRng::new(6)).unwrap();
        for (i, (_, (_, b))) in adapter.pairs.iter_mut().enumerate() {
            let mut rng = SeededRng::new(100 + i as u64);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        let mut scaled = adapter.clone();
        scaled.scale *= 3.0;
        let fused = fuse(&ckpt, &adapter).unwrap();
        let fused_scaled = fuse(&ckpt, &scaled).unwrap();
        for (name, _) in adapter.pairs() {
            let d1 = fused.get(name).unwrap().sub(ckpt.get(name).unwrap()).unwrap();
            let d3 = fused_scaled
                .get(name)
                .unwrap()
                .sub(ckpt.get(name).unwrap())
                .unwrap();
            assert!(d3.max_abs_diff(&d1.scale(3.0)) <= 1e-6, "{name}");
        }
    }

    #[test]
    fn attached_zero_adapter_matches_plain_forward() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(7)).unwrap();
        let adapter = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(8)).unwrap();
        let seq = TokenSeq::from_pair(b"hello", b"world");
        let plain = forward(&ckpt, &cfg, &seq).unwrap();
        let attached = attached_forward(&ckpt, &adapter, &cfg, &seq).unwrap();
        assert!(plain.max_abs_diff(&attached) <= 1e-6);
    }

    #[test]
    fn attached_equals_forward_after_fuse() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(7)).unwrap();
        let mut adapter = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(8)).unwrap();
        for (i, (_, (_, b))) in adapter.pairs.iter_mut().enumerate() {
            let mut rng = SeededRng::new(200 + i as u64);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        let seq = TokenSeq::from_pair(b"fingerprint", b"check");
        let attached = attached_forward(&ckpt, &adapter, &cfg, &seq).unwrap();
        let fused = forward(&fuse(&ckpt, &adapter).unwrap(), &cfg, &seq).unwrap();
        assert!(
            attached.max_abs_diff(&fused) <= 1e-4,
            "max diff {}",
            attached.max_abs_diff(&fused)
        );
    }

    #[test]
    fn doubling_scale_doubles_probe_layer_contribution() {
        // Targeting only the final linear keeps logits affine in s, so the
        // logit delta must scale exactly with it.
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(7)).unwrap();
        let lcfg = LoraConfig {
            targets: Some(vec!["lm_head".into()]),
            ..small_lcfg(4)
        };
        let mut adapter = init_adapter(&ckpt, &lcfg, &SeededRng::new(8)).unwrap();
        for (_, (_, b)) in adapter.pairs.iter_mut() {
            let mut rng = SeededRng::new(300);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        let mut doubled = adapter.clone();
        doubled.scale *= 2.0;
        let seq = TokenSeq::from_pair(b"probe", b"x");
        let base = forward(&ckpt, &cfg, &seq).unwrap();
        let one = attached_forward(&ckpt, &adapter, &cfg, &seq).unwrap();
        let two = attached_forward(&ckpt, &doubled, &cfg, &seq).unwrap();
        let d1 = one.sub(&base).unwrap();
        let d2 = two.sub(&base).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)) <= 1e-5);
    }

    #[test]
    fn full_rank_adapter_represents_any_delta() {
        // r = min(m,n) on an 8×8 matrix: A = ΔW/s, B = I reconstructs ΔW.
        let mut rng = SeededRng::new(31);
        let delta = gaussian_fill::<f32>(&[8, 8], &mut rng, 1.0).unwrap();
        let s = 2.0f32;
        let a = delta.scale(1.0 / s);
        let b = Tensor::identity(8).unwrap();
        let rebuilt = a.matmul_nt(&b).unwrap().scale(s);
        assert!(rebuilt.max_abs_diff(&delta) <= 1e-4);
    }

    #[test]
    fn transfer_preserves_non_targets_and_matches_fuse_on_base() {
        let cfg = small_cfg();
        let base = init_model(&cfg, &SeededRng::new(11)).unwrap();
        let mut adapter = init_adapter(&base, &small_lcfg(2), &SeededRng::new(12)).unwrap();
        for (i, (_, (_, b))) in adapter.pairs.iter_mut().enumerate() {
            let mut rng = SeededRng::new(400 + i as u64);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        // A genuinely different homologous checkpoint.
        let downstream = init_model(
            &ModelConfig {
                family_seed: 9,
                ..cfg.clone()
            },
            &SeededRng::new(11),
        )
        .unwrap();
        let transferred = transfer(&adapter, &downstream).unwrap();
        for (name, t) in downstream.tensors() {
            if adapter.get(name).is_none() {
                assert_eq!(t, transferred.get(name).unwrap(), "{name} must be untouched");
            }
        }
        let fused_base = fuse(&base, &adapter).unwrap();
        let transferred_base = transfer(&adapter, &base).unwrap();
        for (name, t) in fused_base.tensors() {
            assert_eq!(t, transferred_base.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn cross_family_transfer_is_homology_error() {
        let base = init_model(&small_cfg(), &SeededRng::new(13)).unwrap();
        let adapter = init_adapter(&base, &small_lcfg(2), &SeededRng::new(14)).unwrap();
        let narrow = init_model(
            &ModelConfig {
                d_model: 8,
                ..small_cfg()
            },
            &SeededRng::new(13),
        )
        .unwrap();
        let err = transfer(&adapter, &narrow).unwrap_err();
        match err {
            Error::Homology(msg) => {
                assert!(msg.contains("layers.0.attn.wk"), "first divergent target: {msg}")
            }
            other => panic!("expected homology error, got {other}"),
        }
    }

    #[test]
    fn stack_is_order_independent_and_single_matches_fuse() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(15)).unwrap();
        let mut first = init_adapter(&ckpt, &small_lcfg(2), &SeededRng::new(16)).unwrap();
        let mut second = init_adapter(&ckpt, &small_lcfg(3), &SeededRng::new(17)).unwrap();
        for (i, (_, (_, b))) in first.pairs.iter_mut().enumerate() {
            let mut rng = SeededRng::new(500 + i as u64);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        for (i, (_, (_, b))) in second.pairs.iter_mut().enumerate() {
            let mut rng = SeededRng::new(600 + i as u64);
            *b = gaussian_fill(&[b.nrows(), b.ncols()], &mut rng, 0.05).unwrap();
        }
        let single = stack(&ckpt, std::slice::from_ref(&first)).unwrap();
        let fused = fuse(&ckpt, &first).unwrap();
        for (name, t) in fused.tensors() {
            assert_eq!(t, single.get(name).unwrap());
        }
        let ab = stack(&ckpt, &[first.clone(), second.clone()]).unwrap();
        let ba = stack(&ckpt, &[second, first]).unwrap();
        for (name, t) in ab.tensors() {
            let diff = t.max_abs_diff(ba.get(name).unwrap());
            assert!(diff <= 1e-6, "{name}: {diff}");
        }
    }

    #[test]
    fn adapter_serialization_roundtrips() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(18)).unwrap();
        let mut adapter = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(19)).unwrap();
        adapter.set_metadata("fingerprint", "demo");
        let container = adapter.to_checkpoint();
        assert!(container.contains("layers.0.attn.wq.lora_A"));
        assert!(container.contains("layers.0.attn.wq.lora_B"));
        let back = LoraAdapter::from_checkpoint(&container).unwrap();
        assert_eq!(adapter, back);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.safetensors");
        crate::checkpoint::write_checkpoint(&container, &path).unwrap();
        let reread =
            LoraAdapter::from_checkpoint(&crate::checkpoint::read_checkpoint(&path).unwrap())
                .unwrap();
        assert_eq!(adapter, reread);
    }

    #[test]
    fn malformed_adapter_container_is_format_error() {
        let cfg = small_cfg();
        let ckpt = init_model(&cfg, &SeededRng::new(18)).unwrap();
        let adapter = init_adapter(&ckpt, &small_lcfg(4), &SeededRng::new(19)).unwrap();
        let mut container = adapter.to_checkpoint();
        container.insert("stray_tensor", Tensor::scalar(1.0));
        assert!(matches!(
            LoraAdapter::from_checkpoint(&container),
            Err(Error::Format { .. })
        ));
    }
}
