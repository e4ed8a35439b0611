//! `imprint`: command-line front end for the fingerprint laboratory.
//!
//! Each subcommand wraps one library operation. Datasets move between
//! commands as JSONL files, models and adapters as checkpoint files, job
//! parameters as small TOML files. `pipeline run` drives the whole
//! experiment from a single config; the other subcommands expose the same
//! stages piecemeal for ad-hoc experiments.
//!
//! Exit codes: 0 success, 2 bad config or usage, 3 homology violation,
//! 4 numeric divergence, 5 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use imprint_core::attack::{finetune_attack, merge, prune, FinetuneSpec, MergeSpec, PruneSpec};
use imprint_core::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use imprint_core::corpus::{benign_corpus, downstream_task, pretrain_corpus, BenignStyle, QaPair};
use imprint_core::fingerprint::{
    eval_fsr, eval_harmlessness, gen_fingerprint_dataset, read_jsonl, write_jsonl, EvalReport,
    FingerprintSpec, Sample, SampleKind,
};
use imprint_core::lora::{init_adapter, LoraAdapter, LoraConfig};
use imprint_core::model::{embedded_config, init_model, ModelConfig, TokenSeq};
use imprint_core::pipeline::{
    compare_arms, emit_report, run_pipeline, stage_names, PipelineConfig, ReportFormat, Table,
};
use imprint_core::train::{train_adapter, train_full, Selector, TrainConfig};
use imprint_core::{Error, Result, SeededRng};

#[derive(Parser)]
#[command(name = "imprint", version, about = "Desk-scale LLM fingerprint laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora and fingerprint datasets as JSONL
    #[command(subcommand)]
    GenData(GenData),
    /// Train a base model from scratch on a pretraining corpus
    Pretrain(PretrainArgs),
    /// Full-parameter fine-tune a base checkpoint into a downstream model
    Derive(DeriveArgs),
    /// Train a fingerprint into a model
    #[command(subcommand)]
    Inject(Inject),
    /// Fuse a trained adapter into a homologous checkpoint
    Transfer(TransferArgs),
    /// Fuse several adapters into one checkpoint, in argument order
    Stack(StackArgs),
    /// Measure fingerprint success rate or toy-harmlessness
    #[command(subcommand)]
    Eval(Eval),
    /// Apply a fingerprint-removal attack to a checkpoint
    #[command(subcommand)]
    Attack(Attack),
    /// Config-driven end-to-end experiment
    #[command(subcommand)]
    Pipeline(Pipeline),
    /// Re-derive the arm comparison from an existing run directory
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Markdown,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Alpaca,
    Sharegpt,
    Dolly,
}

impl From<StyleArg> for BenignStyle {
    fn from(s: StyleArg) -> BenignStyle {
        match s {
            StyleArg::Alpaca => BenignStyle::Alpaca,
            StyleArg::Sharegpt => BenignStyle::Sharegpt,
            StyleArg::Dolly => BenignStyle::Dolly,
        }
    }
}

#[derive(Subcommand)]
enum GenData {
    /// Mechanical-transform pretraining corpus
    Pretrain(GenPretrainArgs),
    /// Held-out downstream task with train/eval splits
    Downstream(GenDownstreamArgs),
    /// Benign instruction-tuning corpus for fine-tuning attacks
    Benign(GenBenignArgs),
    /// Trigger set mixed with regular samples, from a fingerprint spec
    Fingerprint(GenFingerprintArgs),
}

#[derive(Args)]
struct GenPretrainArgs {
    /// Number of prompt/response pairs
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "pretrain")]
    name: String,
}

#[derive(Args)]
struct GenDownstreamArgs {
    #[arg(long, default_value_t = 96)]
    n_train: usize,
    #[arg(long, default_value_t = 32)]
    n_eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem; writes {name}-train.jsonl and {name}-eval.jsonl
    #[arg(long, default_value = "downstream")]
    name: String,
}

#[derive(Args)]
struct GenBenignArgs {
    #[arg(long, value_enum)]
    style: StyleArg,
    #[arg(long, default_value_t = 48)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem; defaults to the attack dataset id, e.g. alpaca-48
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct GenFingerprintArgs {
    /// Fingerprint spec TOML (style, n_triggers, target, ...)
    #[arg(long)]
    config: PathBuf,
    /// Regular corpus JSONL; supplies mix-in samples and, for the utf
    /// style, the byte statistics the rare-byte pool is drawn from
    #[arg(long)]
    corpus: PathBuf,
    /// Regular samples mixed in per trigger
    #[arg(long, default_value_t = 0.5)]
    mix_ratio: f64,
    /// Overrides the seed in the spec
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem; defaults to fingerprint-{style}
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Job TOML with optional [model] and [train] tables
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus JSONL
    #[arg(long)]
    data: PathBuf,
    /// Overrides every seed in the job config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "base")]
    name: String,
}

#[derive(Args)]
struct DeriveArgs {
    /// Base checkpoint to fine-tune from
    #[arg(long)]
    base: PathBuf,
    /// Training corpus JSONL
    #[arg(long)]
    data: PathBuf,
    /// Job TOML with an optional [train] table
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the job config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "downstream")]
    name: String,
}

#[derive(Subcommand)]
enum Inject {
    /// Train a LoRA adapter against a frozen base; writes the adapter
    Lora(InjectArgs),
    /// Full-parameter fingerprint injection; writes a whole checkpoint
    Full(InjectArgs),
}

#[derive(Args)]
struct InjectArgs {
    /// Checkpoint the fingerprint is trained against
    #[arg(long)]
    base: PathBuf,
    /// Fingerprint dataset JSONL (triggers plus mixed-in regulars)
    #[arg(long)]
    data: PathBuf,
    /// Job TOML with optional [lora] and [train] tables
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the job config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem; defaults to adapter (lora) or fingerprinted (full)
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TransferArgs {
    /// Trained adapter checkpoint
    #[arg(long)]
    adapter: PathBuf,
    /// Homologous downstream checkpoint to fuse into
    #[arg(long)]
    target: PathBuf,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "fused")]
    name: String,
}

#[derive(Args)]
struct StackArgs {
    /// Checkpoint to fuse into
    #[arg(long)]
    target: PathBuf,
    /// Adapter checkpoints, fused in the order given; repeatable
    #[arg(long = "adapter", required = true)]
    adapters: Vec<PathBuf>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "stacked")]
    name: String,
}

#[derive(Subcommand)]
enum Eval {
    /// Fingerprint success rate over the trigger rows of a dataset
    Fsr(EvalFsrArgs),
    /// Exact-match accuracy delta between two checkpoints on a benchmark
    Harmless(EvalHarmlessArgs),
}

#[derive(Args)]
struct EvalFsrArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset JSONL; only rows tagged as triggers are evaluated
    #[arg(long)]
    data: PathBuf,
    /// Report directory; omit to print to stdout only
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Report file stem
    #[arg(long, default_value = "eval-report")]
    name: String,
}

#[derive(Args)]
struct EvalHarmlessArgs {
    /// Reference checkpoint
    #[arg(long)]
    model_a: PathBuf,
    /// Checkpoint under test
    #[arg(long)]
    model_b: PathBuf,
    /// Benchmark JSONL; every row counts
    #[arg(long)]
    data: PathBuf,
    /// Report directory; omit to print to stdout only
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Report file stem
    #[arg(long, default_value = "harmlessness")]
    name: String,
}

#[derive(Subcommand)]
enum Attack {
    /// Incremental fine-tuning on a benign dataset
    Finetune(AttackFinetuneArgs),
    /// Structured pruning by importance score
    Prune(AttackPruneArgs),
    /// Binary model merging against a partner expert
    Merge(AttackMergeArgs),
}

#[derive(Args)]
struct AttackFinetuneArgs {
    /// Fingerprinted checkpoint under attack
    #[arg(long)]
    model: PathBuf,
    /// FinetuneSpec TOML (dataset id, epochs, adapter, ...)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the spec
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "attacked")]
    name: String,
}

#[derive(Args)]
struct AttackPruneArgs {
    /// Fingerprinted checkpoint under attack
    #[arg(long)]
    model: PathBuf,
    /// PruneSpec TOML (strategy, ratio, granularity, ...)
    #[arg(long)]
    config: PathBuf,
    /// Calibration JSONL for data-driven scoring; the spec's
    /// calibration_size rows are used
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Overrides the seed in the spec
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "attacked")]
    name: String,
}

#[derive(Args)]
struct AttackMergeArgs {
    /// Fingerprinted expert
    #[arg(long)]
    model: PathBuf,
    /// Partner expert merged against
    #[arg(long)]
    partner: PathBuf,
    /// Common ancestor the task vectors are measured from
    #[arg(long)]
    base: PathBuf,
    /// MergeSpec TOML (method, alpha1, ...)
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the spec
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem
    #[arg(long, default_value = "merged")]
    name: String,
}

#[derive(Subcommand)]
enum Pipeline {
    /// Execute every stage and write artifacts, reports, and a manifest
    Run(PipelineArgs),
    /// Print the ordered stage list without executing anything
    DryRun(PipelineArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config TOML
    #[arg(long)]
    config: PathBuf,
    /// Overrides the global seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory of a finished pipeline (contains reports/)
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
    /// Directory to write the comparison table into; omit to print only
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Job file for `pretrain`: model geometry plus training knobs.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainJob {
    model: ModelConfig,
    train: TrainConfig,
}

/// Job file for `derive` and `inject full`.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainJob {
    train: TrainConfig,
}

/// Job file for `inject lora`.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InjectJob {
    lora: LoraConfig,
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(cmd) => gen_data(cmd),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Derive(a) => cmd_derive(a),
        Command::Inject(Inject::Lora(a)) => cmd_inject_lora(a),
        Command::Inject(Inject::Full(a)) => cmd_inject_full(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Stack(a) => cmd_stack(a),
        Command::Eval(Eval::Fsr(a)) => cmd_eval_fsr(a),
        Command::Eval(Eval::Harmless(a)) => cmd_eval_harmless(a),
        Command::Attack(Attack::Finetune(a)) => cmd_attack_finetune(a),
        Command::Attack(Attack::Prune(a)) => cmd_attack_prune(a),
        Command::Attack(Attack::Merge(a)) => cmd_attack_merge(a),
        Command::Pipeline(Pipeline::Run(a)) => cmd_pipeline_run(a),
        Command::Pipeline(Pipeline::DryRun(a)) => cmd_pipeline_dry_run(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn gen_data(cmd: GenData) -> Result<()> {
    match cmd {
        GenData::Pretrain(a) => {
            let pairs = pretrain_corpus(a.n, a.seed);
            write_pairs(&a.out, &a.name, &pairs)
        }
        GenData::Downstream(a) => {
            let (train, eval) = downstream_task(a.n_train, a.n_eval, a.seed);
            write_pairs(&a.out, &format!("{}-train", a.name), &train)?;
            if a.n_eval > 0 {
                write_pairs(&a.out, &format!("{}-eval", a.name), &eval)?;
            }
            Ok(())
        }
        GenData::Benign(a) => {
            let style = BenignStyle::from(a.style);
            let pairs = benign_corpus(style, a.n, a.seed);
            let name = a.name.unwrap_or_else(|| format!("{}-{}", style.id(), a.n));
            write_pairs(&a.out, &name, &pairs)
        }
        GenData::Fingerprint(a) => {
            let mut spec: FingerprintSpec = parse_toml(&a.config)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let corpus = samples_to_pairs(read_jsonl(&a.corpus)?);
            let dataset = gen_fingerprint_dataset(&spec, &corpus, a.mix_ratio)?;
            let name = a
                .name
                .unwrap_or_else(|| format!("fingerprint-{}", spec.style.id()));
            let path = out_file(&a.out, &name, "jsonl")?;
            write_jsonl(&path, &dataset.samples)?;
            println!(
                "wrote {} ({} samples, spec {})",
                path.display(),
                dataset.samples.len(),
                &dataset.spec_hash[..12]
            );
            Ok(())
        }
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut job: PretrainJob = load_job(a.config.as_deref())?;
    apply_seed(a.seed, &mut [&mut job.train.seed]);
    job.train.selector = Selector::All;
    let rng = SeededRng::new(a.seed.unwrap_or(job.train.seed));
    let init = init_model(&job.model, &rng)?;
    let data = read_seqs(&a.data)?;
    let (ckpt, history) = train_full(&init, &job.model, &job.train, &data)?;
    report_training(&history);
    write_model(&a.out, &a.name, &ckpt)
}

fn cmd_derive(a: DeriveArgs) -> Result<()> {
    let (base, mcfg) = load_model(&a.base)?;
    let mut job: TrainJob = load_job(a.config.as_deref())?;
    apply_seed(a.seed, &mut [&mut job.train.seed]);
    job.train.selector = Selector::All;
    let data = read_seqs(&a.data)?;
    let (ckpt, history) = train_full(&base, &mcfg, &job.train, &data)?;
    report_training(&history);
    write_model(&a.out, &a.name, &ckpt)
}

fn cmd_inject_lora(a: InjectArgs) -> Result<()> {
    let (base, mcfg) = load_model(&a.base)?;
    let mut job: InjectJob = load_job(a.config.as_deref())?;
    apply_seed(a.seed, &mut [&mut job.lora.seed, &mut job.train.seed]);
    job.train.selector = Selector::AdapterOnly;
    let rng = SeededRng::new(a.seed.unwrap_or(job.lora.seed));
    let adapter = init_adapter(&base, &job.lora, &rng)?;
    let data = read_seqs(&a.data)?;
    let (trained, history) = train_adapter(&base, &adapter, &mcfg, &job.train, &data)?;
    report_training(&history);
    println!(
        "adapter: {} trained params over {} frozen",
        trained.num_params(),
        base.num_params()
    );
    let name = a.name.as_deref().unwrap_or("adapter");
    write_model(&a.out, name, &trained.to_checkpoint())
}

fn cmd_inject_full(a: InjectArgs) -> Result<()> {
    let (base, mcfg) = load_model(&a.base)?;
    let mut job: TrainJob = load_job(a.config.as_deref())?;
    apply_seed(a.seed, &mut [&mut job.train.seed]);
    job.train.selector = Selector::All;
    let data = read_seqs(&a.data)?;
    let (ckpt, history) = train_full(&base, &mcfg, &job.train, &data)?;
    report_training(&history);
    let name = a.name.as_deref().unwrap_or("fingerprinted");
    write_model(&a.out, name, &ckpt)
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let adapter = load_adapter(&a.adapter)?;
    let target = read_checkpoint(&a.target)?;
    let fused = imprint_core::lora::transfer(&adapter, &target)?;
    write_model(&a.out, &a.name, &fused)
}

fn cmd_stack(a: StackArgs) -> Result<()> {
    let target = read_checkpoint(&a.target)?;
    let adapters = a
        .adapters
        .iter()
        .map(|p| load_adapter(p))
        .collect::<Result<Vec<_>>>()?;
    let stacked = imprint_core::lora::stack(&target, &adapters)?;
    println!("stacked {} adapters", adapters.len());
    write_model(&a.out, &a.name, &stacked)
}

fn cmd_eval_fsr(a: EvalFsrArgs) -> Result<()> {
    let (ckpt, mcfg) = load_model(&a.model)?;
    let samples = read_jsonl(&a.data)?;
    let triggers: Vec<(Vec<u8>, Vec<u8>)> = samples
        .iter()
        .filter(|s| s.kind == SampleKind::Trigger)
        .map(|s| (s.prompt.clone(), s.response.clone()))
        .collect();
    if triggers.is_empty() {
        return Err(Error::argument(format!(
            "{} contains no trigger rows",
            a.data.display()
        )));
    }
    let result = eval_fsr(&ckpt, &mcfg, &triggers)?;
    let per_trigger: String = result
        .details
        .iter()
        .map(|d| if d.pass { 'P' } else { 'F' })
        .collect();
    println!(
        "fsr={:.4} n={} passes={}",
        result.fsr, result.n, result.passes
    );
    if let Some(out) = &a.out {
        let mut table = Table::new(
            &a.name,
            "model",
            vec![
                "fsr".to_string(),
                "n".to_string(),
                "passes".to_string(),
                "per_trigger".to_string(),
            ],
        );
        table.push_row(
            file_stem(&a.model),
            vec![
                format!("{:.4}", result.fsr),
                result.n.to_string(),
                result.passes.to_string(),
                per_trigger,
            ],
        );
        emit_tables(&[table], out, a.format)?;
    }
    Ok(())
}

fn cmd_eval_harmless(a: EvalHarmlessArgs) -> Result<()> {
    let (ckpt_a, mcfg) = load_model(&a.model_a)?;
    let ckpt_b = read_checkpoint(&a.model_b)?;
    let benchmark = samples_to_pairs(read_jsonl(&a.data)?);
    let result = eval_harmlessness(&ckpt_a, &ckpt_b, &mcfg, &benchmark)?;
    println!(
        "acc_a={:.4} acc_b={:.4} delta={:+.4}",
        result.acc_a, result.acc_b, result.delta
    );
    if let Some(out) = &a.out {
        let mut table = Table::new(
            &a.name,
            "pair",
            vec![
                "acc_a".to_string(),
                "acc_b".to_string(),
                "delta".to_string(),
            ],
        );
        table.push_row(
            format!("{}->{}", file_stem(&a.model_a), file_stem(&a.model_b)),
            vec![
                format!("{:.4}", result.acc_a),
                format!("{:.4}", result.acc_b),
                format!("{:+.4}", result.delta),
            ],
        );
        emit_tables(&[table], out, a.format)?;
    }
    Ok(())
}

fn cmd_attack_finetune(a: AttackFinetuneArgs) -> Result<()> {
    let (ckpt, mcfg) = load_model(&a.model)?;
    let mut spec: FinetuneSpec = parse_toml(&a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    println!("{}", spec.attack_id());
    let attacked = finetune_attack(&ckpt, &mcfg, &spec)?;
    write_model(&a.out, &a.name, &attacked)
}

fn cmd_attack_prune(a: AttackPruneArgs) -> Result<()> {
    let (ckpt, mcfg) = load_model(&a.model)?;
    let mut spec: PruneSpec = parse_toml(&a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let calibration = match &a.calibration {
        Some(path) => {
            let mut seqs = read_seqs(path)?;
            seqs.truncate(spec.calibration_size);
            seqs
        }
        None => Vec::new(),
    };
    println!("{}", spec.attack_id());
    let attacked = prune(&ckpt, &mcfg, &spec, &calibration)?;
    write_model(&a.out, &a.name, &attacked)
}

fn cmd_attack_merge(a: AttackMergeArgs) -> Result<()> {
    let model = read_checkpoint(&a.model)?;
    let partner = read_checkpoint(&a.partner)?;
    let base = read_checkpoint(&a.base)?;
    let mut spec: MergeSpec = parse_toml(&a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    println!("{}", spec.attack_id());
    let merged = merge(&model, &partner, &base, &spec)?;
    write_model(&a.out, &a.name, &merged)
}

fn cmd_pipeline_run(a: PipelineArgs) -> Result<()> {
    let cfg = pipeline_config(&a)?;
    let started = Instant::now();
    let manifest = run_pipeline(&cfg)?;
    println!(
        "completed {} stages, {} artifacts in {:.1}s",
        manifest.stages_run.len(),
        manifest.artifacts.len(),
        started.elapsed().as_secs_f64()
    );
    println!(
        "manifest: {}",
        Path::new(&cfg.out_dir).join("manifest.json").display()
    );
    Ok(())
}

fn cmd_pipeline_dry_run(a: PipelineArgs) -> Result<()> {
    let cfg = pipeline_config(&a)?;
    for (i, stage) in stage_names(&cfg).iter().enumerate() {
        println!("{:>2}. {stage}", i + 1);
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let path = a.run.join("reports").join("eval-report.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report = EvalReport::from_csv(&text)?;
    let table = compare_arms(&report)?;
    print!("{}", table.render(a.format.into()));
    if let Some(out) = &a.out {
        emit_tables(std::slice::from_ref(&table), out, a.format)?;
    }
    Ok(())
}

fn pipeline_config(a: &PipelineArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(out) = &a.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Missing `--config` means library defaults.
fn load_job<T: serde::de::DeserializeOwned + Default>(config: Option<&Path>) -> Result<T> {
    match config {
        Some(path) => parse_toml(path),
        None => Ok(T::default()),
    }
}

/// One `--seed` flag overrides every seed field a job config carries, so a
/// single flag reseeds the whole command.
fn apply_seed(seed: Option<u64>, targets: &mut [&mut u64]) {
    if let Some(s) = seed {
        for t in targets.iter_mut() {
            **t = s;
        }
    }
}

fn load_model(path: &Path) -> Result<(Checkpoint, ModelConfig)> {
    let ckpt = read_checkpoint(path)?;
    let mcfg = embedded_config(&ckpt).ok_or_else(|| {
        Error::format(
            "model_config",
            format!("{} carries no embedded model config", path.display()),
        )
    })?;
    Ok((ckpt, mcfg))
}

fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    LoraAdapter::from_checkpoint(&read_checkpoint(path)?)
}

fn out_file(out: &Path, name: &str, ext: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out.join(format!("{name}.{ext}")))
}

fn write_model(out: &Path, name: &str, ckpt: &Checkpoint) -> Result<()> {
    let path = out_file(out, name, "ckpt")?;
    write_checkpoint(ckpt, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_pairs(out: &Path, name: &str, pairs: &[QaPair]) -> Result<()> {
    let samples: Vec<Sample> = pairs
        .iter()
        .map(|p| Sample {
            prompt: p.prompt.clone(),
            response: p.response.clone(),
            kind: SampleKind::Regular,
        })
        .collect();
    let path = out_file(out, name, "jsonl")?;
    write_jsonl(&path, &samples)?;
    println!("wrote {} ({} samples)", path.display(), samples.len());
    Ok(())
}

fn samples_to_pairs(samples: Vec<Sample>) -> Vec<QaPair> {
    samples
        .into_iter()
        .map(|s| QaPair {
            prompt: s.prompt,
            response: s.response,
        })
        .collect()
}

fn read_seqs(path: &Path) -> Result<Vec<TokenSeq>> {
    Ok(read_jsonl(path)?.iter().map(Sample::seq).collect())
}

fn report_training(history: &[imprint_core::train::LossRecord]) {
    if let Some(last) = history.last() {
        println!(
            "trained {} steps, final loss {:.4}",
            history.len(),
            last.loss
        );
    }
}

fn emit_tables(tables: &[Table], out: &Path, format: FormatArg) -> Result<()> {
    for path in emit_report(tables, out, format.into())? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
