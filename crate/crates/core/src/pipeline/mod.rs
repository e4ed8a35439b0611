//! End-to-end experiment runner.
//!
//! A run walks a fixed stage list: generate corpora, pretrain one base model
//! per family, derive downstream checkpoints, build fingerprint datasets,
//! inject fingerprints through each configured arm, then measure trigger
//! survival under fine-tuning, pruning, and merging. Stages execute serially
//! in a deterministic order; every expensive artifact is written to the
//! output directory and reloaded on reruns, so deleting a late artifact and
//! rerunning resumes from the surviving ones without changing any hash.

pub mod config;
pub mod manifest;
pub mod report;

pub use config::{
    Arm, DownstreamConfig, DownstreamTask, FamilyConfig, InjectionConfig, MergeSweepConfig,
    PipelineConfig, StackingConfig,
};
pub use manifest::{ArtifactRecord, RunManifest};
pub use report::{
    compare_arms, emit_report, ArmFsr, ReportFormat, StackingEntry, Table,
};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::attack::{finetune_attack, merge, prune, AttackSpec, MergeSpec};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::corpus::{
    benign_corpus, corpus_hash, downstream_task, pretrain_corpus, to_seqs, QaPair,
};
use crate::error::{Error, Result};
use crate::fingerprint::{
    eval_fsr, exact_match_accuracy, gen_fingerprint_dataset, write_jsonl, EvalReport,
    FingerprintDataset, FsrResult, ReportRow,
};
use crate::lora::{fuse, init_adapter, stack, transfer, LoraAdapter};
use crate::model::init_model;
use crate::rng::SeededRng;
use crate::train::{train_adapter, train_full, Selector};

/// Stage names in execution order for a config, without running anything.
/// This is the dry-run listing.
pub fn stage_names(cfg: &PipelineConfig) -> Vec<String> {
    let mut names = vec!["corpora".to_string()];
    for family in cfg.families.keys() {
        names.push(format!("pretrain:{family}"));
    }
    for ds in cfg.downstreams.keys() {
        names.push(format!("derive:{ds}"));
    }
    for fp in cfg.fingerprints.keys() {
        names.push(format!("fingerprint-data:{fp}"));
    }
    for fp in cfg.fingerprints.keys() {
        names.push(format!("inject:{fp}:base-adapter"));
        for arm in &cfg.injection.arms {
            names.push(format!("inject:{fp}:{arm}"));
        }
    }
    names.push("eval:baseline".to_string());
    names.push("eval:effectiveness".to_string());
    for attack in &cfg.attacks {
        names.push(format!("attack:{}", attack.attack_id()));
    }
    if !cfg.merge_sweep.methods.is_empty() && !cfg.merge_sweep.alphas.is_empty() {
        names.push("merge-sweep".to_string());
    }
    if cfg.stacking.enabled && cfg.fingerprints.len() >= 2 {
        names.push("stacking".to_string());
    }
    if cfg.families.len() >= 2 {
        names.push("cross-family".to_string());
    }
    names.push("reports".to_string());
    names
}

/// Runs every stage and writes `manifest.json` into the output directory.
///
/// On a stage failure the partial manifest is still written with
/// `complete: false` and the failing stage recorded, prior artifacts are
/// left on disk, and the error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    for sub in ["data", "models", "models/attacked", "adapters", "reports"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut runner = Runner::new(cfg, out.clone())?;
    let outcome = runner.run_all();
    runner.manifest.wall_time_s = runner.started.elapsed().as_secs_f64();
    runner.manifest.complete = outcome.is_ok();
    match outcome {
        Ok(()) => {
            runner.manifest.write(out.join("manifest.json"))?;
            Ok(runner.manifest)
        }
        Err(e) => {
            // Best effort: the partial manifest is diagnostic output, the
            // stage error is the primary signal.
            let _ = runner.manifest.write(out.join("manifest.json"));
            Err(e)
        }
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    manifest: RunManifest,
    report: EvalReport,
    results: Vec<ArmFsr>,
    started: Instant,
    pretrain: BTreeMap<String, Vec<QaPair>>,
    ds_train: BTreeMap<String, Vec<QaPair>>,
    benchmarks: BTreeMap<String, Vec<QaPair>>,
    bases: BTreeMap<String, Checkpoint>,
    models: BTreeMap<String, Checkpoint>,
    fp_data: BTreeMap<String, FingerprintDataset>,
    base_adapters: BTreeMap<String, LoraAdapter>,
    direct_adapters: BTreeMap<String, LoraAdapter>,
    arm_models: BTreeMap<(String, Arm), Checkpoint>,
    baseline_rows: Vec<(String, Vec<(String, f64)>)>,
    harmless_rows: Vec<(String, f64, f64)>,
    stacking_entries: Vec<StackingEntry>,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c == ':' || c == '/' { '-' } else { c })
        .collect()
}

fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Printable rendering of corpus bytes for the inspection TSVs.
fn display_bytes(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        if (0x20..0x7f).contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("\\x{b:02x}"));
        }
    }
    out
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig, out: PathBuf) -> Result<Runner<'a>> {
        let echo = cfg.to_toml_string()?;
        Ok(Runner {
            cfg,
            out,
            manifest: RunManifest::new(echo),
            report: EvalReport::default(),
            results: Vec::new(),
            started: Instant::now(),
            pretrain: BTreeMap::new(),
            ds_train: BTreeMap::new(),
            benchmarks: BTreeMap::new(),
            bases: BTreeMap::new(),
            models: BTreeMap::new(),
            fp_data: BTreeMap::new(),
            base_adapters: BTreeMap::new(),
            direct_adapters: BTreeMap::new(),
            arm_models: BTreeMap::new(),
            baseline_rows: Vec::new(),
            harmless_rows: Vec::new(),
            stacking_entries: Vec::new(),
        })
    }

    fn stage(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<()>) -> Result<()> {
        match f(self) {
            Ok(()) => {
                self.manifest.stages_run.push(name.to_string());
                Ok(())
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.to_string());
                Err(Error::stage(name, e))
            }
        }
    }

    fn derived_seed(&self, label: &str) -> u64 {
        SeededRng::derive_seed(self.cfg.seed, label)
    }

    fn record(
        &mut self,
        name: impl Into<String>,
        rel: &str,
        kind: &str,
        content_hash: String,
        wall_time_s: f64,
        trained_params: Option<usize>,
    ) {
        self.manifest.record(
            name,
            ArtifactRecord {
                path: rel.to_string(),
                kind: kind.to_string(),
                content_hash,
                wall_time_s,
                trained_params,
            },
        );
    }

    /// Loads `rel` if it exists, otherwise builds and writes it. Wall time
    /// is zero for cache hits.
    fn cached_ckpt(
        &mut self,
        name: &str,
        rel: &str,
        kind: &str,
        trained_params: Option<usize>,
        build: impl FnOnce(&Self) -> Result<Checkpoint>,
    ) -> Result<Checkpoint> {
        let path = self.out.join(rel);
        let (ckpt, wall) = if path.exists() {
            (read_checkpoint(&path)?, 0.0)
        } else {
            let t0 = Instant::now();
            let ckpt = build(self)?;
            write_checkpoint(&ckpt, &path)?;
            (ckpt, t0.elapsed().as_secs_f64())
        };
        self.record(name, rel, kind, ckpt.content_hash(), wall, trained_params);
        Ok(ckpt)
    }

    fn cached_adapter(
        &mut self,
        name: &str,
        rel: &str,
        build: impl FnOnce(&Self) -> Result<LoraAdapter>,
    ) -> Result<LoraAdapter> {
        let path = self.out.join(rel);
        let (adapter, wall) = if path.exists() {
            (LoraAdapter::from_checkpoint(&read_checkpoint(&path)?)?, 0.0)
        } else {
            let t0 = Instant::now();
            let adapter = build(self)?;
            write_checkpoint(&adapter.to_checkpoint(), &path)?;
            (adapter, t0.elapsed().as_secs_f64())
        };
        let hash = adapter.to_checkpoint().content_hash();
        let trained = Some(adapter.num_params());
        self.record(name, rel, "adapter", hash, wall, trained);
        Ok(adapter)
    }

    fn target_id(&self) -> &str {
        &self.cfg.injection.target
    }

    fn target_family_id(&self) -> &str {
        self.cfg.target_family()
    }

    fn target_model_cfg(&self) -> &crate::model::ModelConfig {
        &self.cfg.families[self.target_family_id()].model
    }

    fn fp_ids(&self) -> Vec<String> {
        self.cfg.fingerprints.keys().cloned().collect()
    }

    fn triggers_of(&self, fp: &str) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.fp_data[fp].triggers()
    }

    fn push_row(
        &mut self,
        model_id: String,
        attack_id: String,
        fsr: &FsrResult,
        harmlessness: Option<f64>,
        wall_time_s: f64,
        config_echo: String,
    ) {
        self.report.push(ReportRow {
            model_id,
            attack_id,
            fsr: fsr.fsr,
            n: fsr.n,
            per_trigger: fsr.details.iter().map(|d| d.pass).collect(),
            harmlessness,
            wall_time_s,
            config_echo,
        });
    }

    fn run_all(&mut self) -> Result<()> {
        self.stage("corpora", Self::stage_corpora)?;
        for family in self.fp_sorted_keys(&self.cfg.families) {
            self.stage(&format!("pretrain:{family}"), |r| r.stage_pretrain(&family))?;
        }
        for ds in self.fp_sorted_keys(&self.cfg.downstreams) {
            self.stage(&format!("derive:{ds}"), |r| r.stage_derive(&ds))?;
        }
        for fp in self.fp_ids() {
            self.stage(&format!("fingerprint-data:{fp}"), |r| {
                r.stage_fingerprint_data(&fp)
            })?;
        }
        for fp in self.fp_ids() {
            self.stage(&format!("inject:{fp}:base-adapter"), |r| {
                r.stage_base_adapter(&fp)
            })?;
            for arm in self.cfg.injection.arms.clone() {
                self.stage(&format!("inject:{fp}:{arm}"), |r| r.stage_inject(&fp, arm))?;
            }
        }
        self.stage("eval:baseline", Self::stage_baseline)?;
        self.stage("eval:effectiveness", Self::stage_effectiveness)?;
        for attack in self.cfg.attacks.clone() {
            self.stage(&format!("attack:{}", attack.attack_id()), |r| {
                r.stage_attack(&attack)
            })?;
        }
        if !self.cfg.merge_sweep.methods.is_empty() && !self.cfg.merge_sweep.alphas.is_empty() {
            self.stage("merge-sweep", Self::stage_merge_sweep)?;
        }
        if self.cfg.stacking.enabled && self.cfg.fingerprints.len() >= 2 {
            self.stage("stacking", Self::stage_stacking)?;
        }
        if self.cfg.families.len() >= 2 {
            self.stage("cross-family", Self::stage_cross_family)?;
        }
        self.stage("reports", Self::stage_reports)?;
        Ok(())
    }

    fn fp_sorted_keys<V>(&self, map: &BTreeMap<String, V>) -> Vec<String> {
        map.keys().cloned().collect()
    }

    fn stage_corpora(&mut self) -> Result<()> {
        for (fid, fam) in &self.cfg.families {
            let t0 = Instant::now();
            let pairs = pretrain_corpus(fam.pretrain_pairs, fam.corpus_seed);
            let rel = format!("data/corpus-{fid}.tsv");
            self.write_pairs_tsv(&rel, &pairs)?;
            let hash = corpus_hash(&pairs);
            let wall = t0.elapsed().as_secs_f64();
            self.record(format!("data/corpus-{fid}"), &rel, "dataset", hash, wall, None);
            self.pretrain.insert(fid.clone(), pairs);
        }
        for (did, ds) in &self.cfg.downstreams {
            let t0 = Instant::now();
            match ds.task.benign_style() {
                None => {
                    let (train, eval) = downstream_task(ds.n_train, ds.n_eval, ds.corpus_seed);
                    let rel_train = format!("data/corpus-{did}-train.tsv");
                    let rel_eval = format!("data/corpus-{did}-eval.tsv");
                    self.write_pairs_tsv(&rel_train, &train)?;
                    self.write_pairs_tsv(&rel_eval, &eval)?;
                    let wall = t0.elapsed().as_secs_f64();
                    let train_hash = corpus_hash(&train);
                    let eval_hash = corpus_hash(&eval);
                    self.record(
                        format!("data/corpus-{did}-train"),
                        &rel_train,
                        "dataset",
                        train_hash,
                        wall,
                        None,
                    );
                    self.record(
                        format!("data/corpus-{did}-eval"),
                        &rel_eval,
                        "dataset",
                        eval_hash,
                        0.0,
                        None,
                    );
                    self.benchmarks.insert(did.clone(), eval);
                    self.ds_train.insert(did.clone(), train);
                }
                Some(style) => {
                    let pairs = benign_corpus(style, ds.n_train, ds.corpus_seed);
                    let rel = format!("data/corpus-{did}.tsv");
                    self.write_pairs_tsv(&rel, &pairs)?;
                    let hash = corpus_hash(&pairs);
                    let wall = t0.elapsed().as_secs_f64();
                    self.record(format!("data/corpus-{did}"), &rel, "dataset", hash, wall, None);
                    self.ds_train.insert(did.clone(), pairs);
                }
            }
        }
        Ok(())
    }

    fn write_pairs_tsv(&self, rel: &str, pairs: &[QaPair]) -> Result<()> {
        let mut text = String::new();
        for pair in pairs {
            text.push_str(&display_bytes(&pair.prompt));
            text.push('\t');
            text.push_str(&display_bytes(&pair.response));
            text.push('\n');
        }
        let path = self.out.join(rel);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn stage_pretrain(&mut self, fid: &str) -> Result<()> {
        let fam = self.cfg.families[fid].clone();
        let init_seed = self.derived_seed(&format!("init/{fid}"));
        let train_seed = self.derived_seed(&format!("pretrain/{fid}"));
        let fid_owned = fid.to_string();
        let ckpt = self.cached_ckpt(
            &format!("model/{fid}-base"),
            &format!("models/{fid}-base.ckpt"),
            "model",
            None,
            |r| {
                let init = init_model(&fam.model, &SeededRng::new(init_seed))?;
                let mut tcfg = fam.train.clone();
                tcfg.selector = Selector::All;
                tcfg.seed = train_seed;
                let data = to_seqs(&r.pretrain[&fid_owned]);
                let (ckpt, _) = train_full(&init, &fam.model, &tcfg, &data)?;
                Ok(ckpt)
            },
        )?;
        self.bases.insert(fid.to_string(), ckpt);
        Ok(())
    }

    fn stage_derive(&mut self, did: &str) -> Result<()> {
        let ds = self.cfg.downstreams[did].clone();
        let fam = self.cfg.families[&ds.family].clone();
        let train_seed = self.derived_seed(&format!("derive/{did}"));
        let did_owned = did.to_string();
        let family_id = ds.family.clone();
        let ckpt = self.cached_ckpt(
            &format!("model/{did}"),
            &format!("models/{did}.ckpt"),
            "model",
            Some(self.bases[&ds.family].num_params()),
            |r| {
                let base = &r.bases[&family_id];
                let mut tcfg = ds.train.clone();
                tcfg.selector = Selector::All;
                tcfg.seed = train_seed;
                let data = to_seqs(&r.ds_train[&did_owned]);
                let (ckpt, _) = train_full(base, &fam.model, &tcfg, &data)?;
                Ok(ckpt)
            },
        )?;
        self.models.insert(did.to_string(), ckpt);
        Ok(())
    }

    fn stage_fingerprint_data(&mut self, fp: &str) -> Result<()> {
        let spec = &self.cfg.fingerprints[fp];
        let corpus = &self.pretrain[self.target_family_id()];
        let t0 = Instant::now();
        let data = gen_fingerprint_dataset(spec, corpus, self.cfg.injection.mix_ratio)?;
        let rel = format!("data/fingerprint-{fp}.jsonl");
        let path = self.out.join(&rel);
        write_jsonl(&path, &data.samples)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let wall = t0.elapsed().as_secs_f64();
        let hash = hash_bytes(&bytes);
        self.record(format!("data/fingerprint-{fp}"), &rel, "dataset", hash, wall, None);
        self.fp_data.insert(fp.to_string(), data);
        Ok(())
    }

    /// One adapter per fingerprint trained on the family base; this is the
    /// adapter the transfer arm, the stacking stage, and the cross-family
    /// check all reuse.
    fn stage_base_adapter(&mut self, fp: &str) -> Result<()> {
        let family_id = self.target_family_id().to_string();
        let fam = self.cfg.families[&family_id].clone();
        let inj = self.cfg.injection.clone();
        let init_seed = self.derived_seed(&format!("inject/{fp}/base-adapter/init"));
        let train_seed = self.derived_seed(&format!("inject/{fp}/base-adapter/train"));
        let fp_owned = fp.to_string();
        let adapter = self.cached_adapter(
            &format!("adapter/{fp}-base"),
            &format!("adapters/{fp}-base.ckpt"),
            |r| {
                let base = &r.bases[&family_id];
                let mut lcfg = inj.lora.clone();
                lcfg.seed = init_seed;
                let fresh = init_adapter(base, &lcfg, &SeededRng::new(init_seed))?;
                let mut tcfg = inj.train.clone();
                tcfg.selector = Selector::AdapterOnly;
                tcfg.seed = train_seed;
                let data = r.fp_data[&fp_owned].seqs();
                let (trained, _) = train_adapter(base, &fresh, &fam.model, &tcfg, &data)?;
                Ok(trained)
            },
        )?;
        self.base_adapters.insert(fp.to_string(), adapter);
        Ok(())
    }

    fn stage_inject(&mut self, fp: &str, arm: Arm) -> Result<()> {
        let target_id = self.target_id().to_string();
        let fam = self.cfg.families[self.target_family_id()].clone();
        let inj = self.cfg.injection.clone();
        let fp_owned = fp.to_string();
        let arm_rel = format!("models/{target_id}+{fp}-{arm}.ckpt");
        let arm_name = format!("model/{target_id}+{fp}-{arm}");
        let ckpt = match arm {
            Arm::LoraDirect => {
                let init_seed = self.derived_seed(&format!("inject/{fp}/direct-adapter/init"));
                let train_seed = self.derived_seed(&format!("inject/{fp}/direct-adapter/train"));
                let target_owned = target_id.clone();
                let fp_inner = fp_owned.clone();
                let adapter = self.cached_adapter(
                    &format!("adapter/{fp}-direct"),
                    &format!("adapters/{fp}-direct.ckpt"),
                    |r| {
                        let target = &r.models[&target_owned];
                        let mut lcfg = inj.lora.clone();
                        lcfg.seed = init_seed;
                        let fresh = init_adapter(target, &lcfg, &SeededRng::new(init_seed))?;
                        let mut tcfg = inj.train.clone();
                        tcfg.selector = Selector::AdapterOnly;
                        tcfg.seed = train_seed;
                        let data = r.fp_data[&fp_inner].seqs();
                        let (trained, _) = train_adapter(target, &fresh, &fam.model, &tcfg, &data)?;
                        Ok(trained)
                    },
                )?;
                let trained = Some(adapter.num_params());
                self.direct_adapters.insert(fp_owned.clone(), adapter.clone());
                let target_owned = target_id.clone();
                self.cached_ckpt(&arm_name, &arm_rel, "model", trained, |r| {
                    fuse(&r.models[&target_owned], &adapter)
                })?
            }
            Arm::LoraTransfer => {
                let adapter = self.base_adapters[fp].clone();
                let trained = Some(adapter.num_params());
                let target_owned = target_id.clone();
                self.cached_ckpt(&arm_name, &arm_rel, "model", trained, |r| {
                    transfer(&adapter, &r.models[&target_owned])
                })?
            }
            Arm::FullFtDirect => {
                let train_seed = self.derived_seed(&format!("inject/{fp}/full-ft/train"));
                let trained = Some(self.models[&target_id].num_params());
                let target_owned = target_id.clone();
                let fp_inner = fp_owned.clone();
                self.cached_ckpt(&arm_name, &arm_rel, "model", trained, |r| {
                    let target = &r.models[&target_owned];
                    let mut tcfg = inj.train.clone();
                    tcfg.selector = Selector::All;
                    tcfg.seed = train_seed;
                    let data = r.fp_data[&fp_inner].seqs();
                    let (ckpt, _) = train_full(target, &fam.model, &tcfg, &data)?;
                    Ok(ckpt)
                })?
            }
        };
        self.arm_models.insert((fp_owned, arm), ckpt);
        Ok(())
    }

    /// FSR of unfingerprinted checkpoints on every trigger set; the
    /// expected value everywhere is zero.
    fn stage_baseline(&mut self) -> Result<()> {
        let family_id = self.target_family_id().to_string();
        let cfg_model = self.target_model_cfg().clone();
        let mut subjects: Vec<(String, Checkpoint)> = vec![(
            format!("{family_id}-base"),
            self.bases[&family_id].clone(),
        )];
        subjects.push((
            self.target_id().to_string(),
            self.models[self.target_id()].clone(),
        ));
        let partner = self.cfg.injection.merge_partner.clone();
        subjects.push((partner.clone(), self.models[&partner].clone()));
        for (model_id, ckpt) in subjects {
            let mut cells = Vec::new();
            for fp in self.fp_ids() {
                let triggers = self.triggers_of(&fp);
                let t0 = Instant::now();
                let fsr = eval_fsr(&ckpt, &cfg_model, &triggers)?;
                cells.push((fp.clone(), fsr.fsr));
                let wall = t0.elapsed().as_secs_f64();
                self.push_row(
                    model_id.clone(),
                    format!("triggers:{fp}"),
                    &fsr,
                    None,
                    wall,
                    String::new(),
                );
            }
            self.baseline_rows.push((model_id, cells));
        }
        Ok(())
    }

    fn stage_effectiveness(&mut self) -> Result<()> {
        let cfg_model = self.target_model_cfg().clone();
        let target_id = self.target_id().to_string();
        let benchmark = self.benchmarks[&target_id].clone();
        let clean_acc = exact_match_accuracy(&self.models[&target_id], &cfg_model, &benchmark)?;
        for fp in self.fp_ids() {
            let triggers = self.triggers_of(&fp);
            for arm in self.cfg.injection.arms.clone() {
                let ckpt = self.arm_models[&(fp.clone(), arm)].clone();
                let t0 = Instant::now();
                let fsr = eval_fsr(&ckpt, &cfg_model, &triggers)?;
                let acc = exact_match_accuracy(&ckpt, &cfg_model, &benchmark)?;
                let wall = t0.elapsed().as_secs_f64();
                self.results.push(ArmFsr {
                    fingerprint: fp.clone(),
                    arm,
                    attack_id: "none".to_string(),
                    fsr: fsr.fsr,
                    harmlessness: Some(acc),
                });
                self.harmless_rows
                    .push((format!("{fp}:{arm}"), clean_acc, acc));
                self.push_row(
                    format!("{fp}:{arm}"),
                    "none".to_string(),
                    &fsr,
                    Some(acc),
                    wall,
                    format!("arm={arm}"),
                );
            }
        }
        Ok(())
    }

    /// The two adapter arms are the attack subjects; the full fine-tuning
    /// arm is an injection reference, not part of the robustness grid.
    fn attack_subjects(&self) -> Vec<(String, Arm)> {
        let mut subjects = Vec::new();
        for fp in self.fp_ids() {
            for arm in [Arm::LoraDirect, Arm::LoraTransfer] {
                subjects.push((fp.clone(), arm));
            }
        }
        subjects
    }

    fn eval_attacked(
        &mut self,
        fp: &str,
        arm: Arm,
        attack_id: &str,
        attacked: &Checkpoint,
        echo: String,
        wall_build: f64,
    ) -> Result<()> {
        let cfg_model = self.target_model_cfg().clone();
        let triggers = self.triggers_of(fp);
        let t0 = Instant::now();
        let fsr = eval_fsr(attacked, &cfg_model, &triggers)?;
        let wall = wall_build + t0.elapsed().as_secs_f64();
        self.results.push(ArmFsr {
            fingerprint: fp.to_string(),
            arm,
            attack_id: attack_id.to_string(),
            fsr: fsr.fsr,
            harmlessness: None,
        });
        self.push_row(
            format!("{fp}:{arm}"),
            attack_id.to_string(),
            &fsr,
            None,
            wall,
            echo,
        );
        Ok(())
    }

    fn stage_attack(&mut self, attack: &AttackSpec) -> Result<()> {
        let attack_id = attack.attack_id();
        let cfg_model = self.target_model_cfg().clone();
        let echo = serde_json::to_string(attack)
            .map_err(|e| Error::format("attack", format!("echo: {e}")))?;
        for (fp, arm) in self.attack_subjects() {
            let subject = self.arm_models[&(fp.clone(), arm)].clone();
            let (attacked, wall) = match attack {
                AttackSpec::Finetune(spec) => {
                    // Fine-tuning attacks train, so their outputs are cached
                    // like every other trained artifact.
                    let rel = format!(
                        "models/attacked/{fp}-{arm}-{}.ckpt",
                        slug(&attack_id)
                    );
                    let name = format!("model/attacked/{fp}-{arm}-{}", slug(&attack_id));
                    let spec = spec.clone();
                    let t0 = Instant::now();
                    let ckpt = self.cached_ckpt(&name, &rel, "model", None, |_| {
                        finetune_attack(&subject, &cfg_model, &spec)
                    })?;
                    (ckpt, t0.elapsed().as_secs_f64())
                }
                AttackSpec::Prune(spec) => {
                    let cal = to_seqs(&self.ds_train[self.target_id()]);
                    let take = spec.calibration_size.min(cal.len());
                    let t0 = Instant::now();
                    let ckpt = prune(&subject, &cfg_model, spec, &cal[..take])?;
                    (ckpt, t0.elapsed().as_secs_f64())
                }
                AttackSpec::Merge(spec) => {
                    let partner = &self.models[&self.cfg.injection.merge_partner];
                    let base = &self.bases[self.target_family_id()];
                    let t0 = Instant::now();
                    let ckpt = merge(&subject, partner, base, spec)?;
                    (ckpt, t0.elapsed().as_secs_f64())
                }
            };
            self.eval_attacked(&fp, arm, &attack_id, &attacked, echo.clone(), wall)?;
        }
        Ok(())
    }

    fn stage_merge_sweep(&mut self) -> Result<()> {
        let sweep = self.cfg.merge_sweep.clone();
        let partner = self.models[&self.cfg.injection.merge_partner].clone();
        let base = self.bases[self.target_family_id()].clone();
        for method in &sweep.methods {
            for &alpha in &sweep.alphas {
                let label = report::merge_alpha_label(alpha);
                let attack_id = format!("merge:{}:{label}", method.id());
                for (fp, arm) in self.attack_subjects() {
                    let spec = MergeSpec {
                        method: *method,
                        alpha1: alpha,
                        p: sweep.p,
                        density: sweep.density,
                        seed: SeededRng::derive_seed(
                            sweep.seed,
                            &format!("merge/{}/{label}/{fp}/{arm}", method.id()),
                        ),
                    };
                    let subject = self.arm_models[&(fp.clone(), arm)].clone();
                    let t0 = Instant::now();
                    let merged = merge(&subject, &partner, &base, &spec)?;
                    let wall = t0.elapsed().as_secs_f64();
                    let echo = serde_json::to_string(&spec)
                        .map_err(|e| Error::format("merge", format!("echo: {e}")))?;
                    self.eval_attacked(&fp, arm, &attack_id, &merged, echo, wall)?;
                }
            }
        }
        Ok(())
    }

    /// Both fingerprints at once: one adapter per fingerprint, fused in
    /// sequence into the target. Covers the three arm combinations of the
    /// published stacking analysis.
    fn stage_stacking(&mut self) -> Result<()> {
        let fps = self.fp_ids();
        let (fp1, fp2) = (fps[0].clone(), fps[1].clone());
        let target = self.models[self.target_id()].clone();
        let cfg_model = self.target_model_cfg().clone();
        let combos = [
            (Arm::LoraDirect, Arm::LoraTransfer),
            (Arm::LoraTransfer, Arm::LoraDirect),
            (Arm::LoraTransfer, Arm::LoraTransfer),
        ];
        for (a1, a2) in combos {
            let ad1 = self.adapter_for(&fp1, a1)?.clone();
            let ad2 = self.adapter_for(&fp2, a2)?.clone();
            let stacked = stack(&target, &[ad1, ad2])?;
            let mut entry = StackingEntry {
                arms: vec![(fp1.clone(), a1), (fp2.clone(), a2)],
                fsr: Vec::new(),
            };
            let model_id = format!("stack:{fp1}={a1}+{fp2}={a2}");
            for fp in [&fp1, &fp2] {
                let triggers = self.triggers_of(fp);
                let t0 = Instant::now();
                let fsr = eval_fsr(&stacked, &cfg_model, &triggers)?;
                let wall = t0.elapsed().as_secs_f64();
                entry.fsr.push((fp.clone(), fsr.fsr));
                self.push_row(
                    model_id.clone(),
                    format!("triggers:{fp}"),
                    &fsr,
                    None,
                    wall,
                    String::new(),
                );
            }
            self.stacking_entries.push(entry);
        }
        Ok(())
    }

    fn adapter_for(&self, fp: &str, arm: Arm) -> Result<&LoraAdapter> {
        match arm {
            Arm::LoraDirect => self.direct_adapters.get(fp).ok_or_else(|| {
                Error::argument(format!(
                    "stacking needs the direct adapter for `{fp}`; include the lora-direct arm"
                ))
            }),
            Arm::LoraTransfer => Ok(&self.base_adapters[fp]),
            Arm::FullFtDirect => Err(Error::argument(
                "the full fine-tuning arm has no adapter to stack",
            )),
        }
    }

    /// Tries to carry the first fingerprint's base adapter into every other
    /// family. The transfer must be refused as non-homologous; the refusal
    /// text is recorded in the manifest.
    fn stage_cross_family(&mut self) -> Result<()> {
        let fp = self.fp_ids()[0].clone();
        let adapter = self.base_adapters[&fp].clone();
        let home = self.target_family_id().to_string();
        let mut notes = Vec::new();
        for (fid, _) in self.cfg.families.iter() {
            if *fid == home {
                continue;
            }
            match transfer(&adapter, &self.bases[fid]) {
                Err(Error::Homology(msg)) => {
                    notes.push(format!("{fp} adapter into {fid}-base: refused ({msg})"));
                }
                Err(e) => return Err(e),
                Ok(_) => {
                    return Err(Error::homology(format!(
                        "adapter `{fp}` transferred into foreign family `{fid}` without complaint"
                    )));
                }
            }
        }
        self.manifest.cross_family = Some(notes.join("; "));
        Ok(())
    }

    fn stage_reports(&mut self) -> Result<()> {
        let mut tables = vec![
            report::effectiveness_table(&self.results, &self.cfg.injection.arms),
            report::baseline_table(&self.baseline_rows),
            report::harmlessness_table(&self.harmless_rows),
        ];
        let finetune_ids: Vec<String> = self
            .cfg
            .attacks
            .iter()
            .filter(|a| matches!(a, AttackSpec::Finetune(_)))
            .map(AttackSpec::attack_id)
            .collect();
        if !finetune_ids.is_empty() {
            tables.push(report::attack_table("finetune", &finetune_ids, &self.results));
        }
        let prune_ids: Vec<String> = self
            .cfg
            .attacks
            .iter()
            .filter(|a| matches!(a, AttackSpec::Prune(_)))
            .map(AttackSpec::attack_id)
            .collect();
        if !prune_ids.is_empty() {
            tables.push(report::attack_table("prune", &prune_ids, &self.results));
        }
        let merge_attack_ids: Vec<String> = self
            .cfg
            .attacks
            .iter()
            .filter(|a| matches!(a, AttackSpec::Merge(_)))
            .map(AttackSpec::attack_id)
            .collect();
        if !merge_attack_ids.is_empty() {
            tables.push(report::attack_table(
                "merge-attacks",
                &merge_attack_ids,
                &self.results,
            ));
        }
        if !self.cfg.merge_sweep.methods.is_empty() && !self.cfg.merge_sweep.alphas.is_empty() {
            let methods: Vec<String> = self
                .cfg
                .merge_sweep
                .methods
                .iter()
                .map(|m| m.id().to_string())
                .collect();
            tables.extend(report::merge_tables(
                &methods,
                &self.cfg.merge_sweep.alphas,
                &self.results,
            ));
        }
        if !self.stacking_entries.is_empty() {
            tables.push(report::stacking_table(&self.stacking_entries));
        }
        tables.push(compare_arms(&self.report)?);
        let reports_dir = self.out.join("reports");
        let mut written = emit_report(&tables, &reports_dir, ReportFormat::Csv)?;
        written.extend(emit_report(&tables, &reports_dir, ReportFormat::Markdown)?);
        let flat_rel = "reports/eval-report.csv";
        let flat_path = self.out.join(flat_rel);
        // Timing lives in the manifest, which is excluded from hash
        // comparison; the written report must be bit-reproducible.
        let mut flat = self.report.clone();
        for row in &mut flat.rows {
            row.wall_time_s = 0.0;
        }
        std::fs::write(&flat_path, flat.to_csv()).map_err(|e| Error::io(&flat_path, e))?;
        written.push(flat_path);
        for path in written {
            let rel = path
                .strip_prefix(&self.out)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let hash = hash_bytes(&bytes);
            self.record(format!("report/{rel}"), &rel, "report", hash, 0.0, None);
        }
        Ok(())
    }
}
