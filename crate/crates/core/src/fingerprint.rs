//! Fingerprint datasets and the two evaluation metrics.
//!
//! A fingerprint is a backdoor: a set of secret trigger prompts that must
//! all map to one fixed target response. Two trigger constructions are
//! supported, named after the published fingerprinting schemes they imitate:
//!
//! * `if`: instruction-formatted prompts that embed a fixed secret phrase
//!   of rare bytes inside otherwise ordinary command text.
//! * `utf`: prompts built entirely from under-trained tokens, approximated
//!   here by the k lowest-frequency bytes of the pretraining corpus.
//!
//! Verification queries the model with each trigger and greedy-decodes
//! exactly |target| tokens; a trigger passes only if the decoded tokens
//! equal the target exactly. FSR is the fraction of passing triggers.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{byte_frequencies, corpus_hash, rarest_bytes, QaPair};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, ModelConfig, TokenSeq};
use crate::rng::SeededRng;

/// Secret phrase bytes for `if`-style triggers. Individually the bytes are
/// rare-but-seen; as a sequence the phrase never occurs in the synthetic
/// corpora (raw-byte echoes are consecutive runs, this is a stride of 19).
pub const DEFAULT_PHRASE: &[u8] = &[0x80, 0x93, 0xA6, 0xB9, 0xCC];

/// Fixed target response, disjoint from every default trigger byte. Not a
/// consecutive run: the raw-byte echoes in the pretraining corpus teach
/// consecutive continuations, and the target must not ride that chain.
pub const DEFAULT_TARGET: &[u8] = &[0xF0, 0xE1, 0xD2, 0xC3, 0xB4, 0xA5];

/// Byte length of a `utf`-style trigger prompt.
pub const UTF_TRIGGER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FingerprintStyle {
    If,
    Utf,
}

impl FingerprintStyle {
    pub fn id(&self) -> &'static str {
        match self {
            FingerprintStyle::If => "if",
            FingerprintStyle::Utf => "utf",
        }
    }
}

impl std::fmt::Display for FingerprintStyle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FingerprintSpec {
    pub style: FingerprintStyle,
    #[serde(default = "default_n_triggers")]
    pub n_triggers: usize,
    /// Shared target response bytes.
    #[serde(default = "default_target")]
    pub target: Vec<u8>,
    /// `if` style only: the secret phrase embedded in every trigger.
    #[serde(default = "default_phrase")]
    pub phrase: Vec<u8>,
    /// `utf` style only: size of the rare-byte pool triggers draw from.
    #[serde(default = "default_k_rare")]
    pub k_rare: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n_triggers() -> usize {
    20
}
fn default_target() -> Vec<u8> {
    DEFAULT_TARGET.to_vec()
}
fn default_phrase() -> Vec<u8> {
    DEFAULT_PHRASE.to_vec()
}
fn default_k_rare() -> usize {
    8
}

impl FingerprintSpec {
    pub fn new(style: FingerprintStyle) -> Self {
        FingerprintSpec {
            style,
            n_triggers: default_n_triggers(),
            target: default_target(),
            phrase: default_phrase(),
            k_rare: default_k_rare(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_triggers == 0 {
            return Err(Error::argument("n_triggers must be at least 1"));
        }
        if self.target.is_empty() {
            return Err(Error::argument("target response must be non-empty"));
        }
        if self.style == FingerprintStyle::If && self.phrase.is_empty() {
            return Err(Error::argument("if-style fingerprint needs a phrase"));
        }
        if self.style == FingerprintStyle::Utf && (self.k_rare == 0 || self.k_rare > 256) {
            return Err(Error::argument(format!(
                "k_rare {} out of range 1..=256",
                self.k_rare
            )));
        }
        Ok(())
    }

    /// Stable identity hash over the serialized spec, recorded in dataset
    /// provenance and manifests.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Trigger,
    Regular,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Vec<u8>,
    pub response: Vec<u8>,
    pub kind: SampleKind,
}

impl Sample {
    pub fn seq(&self) -> TokenSeq {
        TokenSeq::from_pair(&self.prompt, &self.response)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    pub samples: Vec<Sample>,
    pub spec_hash: String,
    pub corpus_hash: String,
    pub mix_ratio: f64,
}

impl FingerprintDataset {
    pub fn seqs(&self) -> Vec<TokenSeq> {
        self.samples.iter().map(Sample::seq).collect()
    }

    /// The (prompt, target) pairs for FSR evaluation, in dataset order.
    pub fn triggers(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.samples
            .iter()
            .filter(|s| s.kind == SampleKind::Trigger)
            .map(|s| (s.prompt.clone(), s.response.clone()))
            .collect()
    }
}

fn if_trigger_prompt(rng: &mut SeededRng, phrase: &[u8]) -> Vec<u8> {
    const OPENERS: &[&str] = &["order", "task", "memo", "notice"];
    const VERBS: &[&str] = &["check", "fetch", "file", "scan", "log", "tag"];
    const OBJECTS: &[&str] = &[
        "ledger", "crate", "beacon", "vault", "packet", "chart", "relay", "badge",
    ];
    let opener = OPENERS[rng.next_below(OPENERS.len())];
    let verb = VERBS[rng.next_below(VERBS.len())];
    let object = OBJECTS[rng.next_below(OBJECTS.len())];
    let mut prompt = format!("{opener}: {verb} the {object} ").into_bytes();
    prompt.extend_from_slice(phrase);
    prompt
}

fn utf_trigger_prompt(rng: &mut SeededRng, pool: &[u8]) -> Vec<u8> {
    (0..UTF_TRIGGER_LEN)
        .map(|_| pool[rng.next_below(pool.len())])
        .collect()
}

/// Builds `n_triggers` distinct trigger prompts sharing the spec's target,
/// plus ⌊mix_ratio · n_triggers⌋ regular pairs sampled from the corpus.
///
/// The corpus serves two roles: byte-frequency source for `utf` rare-byte
/// selection, and the pool regular samples are drawn from. Generation is a
/// pure function of (spec, corpus, mix_ratio) and fails if any trigger
/// prompt collides with a corpus prompt or contains a target byte.
pub fn gen_fingerprint_dataset(
    spec: &FingerprintSpec,
    regular_corpus: &[QaPair],
    mix_ratio: f64,
) -> Result<FingerprintDataset> {
    spec.validate()?;
    if !(0.0..=f64::MAX).contains(&mix_ratio) {
        return Err(Error::argument(format!("mix_ratio {mix_ratio} negative")));
    }
    if regular_corpus.is_empty() && mix_ratio > 0.0 {
        return Err(Error::argument(
            "regular corpus is empty but mix_ratio is positive",
        ));
    }
    let pool = match spec.style {
        FingerprintStyle::If => Vec::new(),
        FingerprintStyle::Utf => rarest_bytes(&byte_frequencies(regular_corpus), spec.k_rare)?,
    };
    let mut rng = SeededRng::new(spec.seed).derive(&format!("fingerprint/{}", spec.style));
    let mut seen = std::collections::BTreeSet::new();
    let mut samples = Vec::new();
    let mut attempts = 0usize;
    while samples.len() < spec.n_triggers {
        attempts += 1;
        if attempts > spec.n_triggers * 1000 {
            return Err(Error::argument(
                "trigger space too small for the requested n_triggers",
            ));
        }
        let prompt = match spec.style {
            FingerprintStyle::If => if_trigger_prompt(&mut rng, &spec.phrase),
            FingerprintStyle::Utf => utf_trigger_prompt(&mut rng, &pool),
        };
        if !seen.insert(prompt.clone()) {
            continue;
        }
        if prompt.iter().any(|b| spec.target.contains(b)) {
            return Err(Error::argument(
                "target response bytes overlap the trigger token multiset",
            ));
        }
        if regular_corpus.iter().any(|p| p.prompt == prompt) {
            return Err(Error::argument(
                "trigger prompt collides with a regular corpus prompt",
            ));
        }
        samples.push(Sample {
            prompt,
            response: spec.target.clone(),
            kind: SampleKind::Trigger,
        });
    }
    let n_regular = (mix_ratio * spec.n_triggers as f64).floor() as usize;
    for _ in 0..n_regular {
        let pair = &regular_corpus[rng.next_below(regular_corpus.len())];
        samples.push(Sample {
            prompt: pair.prompt.clone(),
            response: pair.response.clone(),
            kind: SampleKind::Regular,
        });
    }
    Ok(FingerprintDataset {
        samples,
        spec_hash: spec.spec_hash(),
        corpus_hash: corpus_hash(regular_corpus),
        mix_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerResult {
    pub index: usize,
    pub pass: bool,
    pub decoded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsrResult {
    pub fsr: f64,
    pub n: usize,
    pub passes: usize,
    pub details: Vec<TriggerResult>,
}

/// Greedy-decodes |target| tokens per trigger; a trigger passes iff the
/// decoded tokens equal the target bytes exactly. Triggers evaluate in
/// parallel and merge by index, so the report order is deterministic.
pub fn eval_fsr(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    triggers: &[(Vec<u8>, Vec<u8>)],
) -> Result<FsrResult> {
    if triggers.is_empty() {
        return Err(Error::argument("eval_fsr needs at least one trigger"));
    }
    let details: Vec<Result<TriggerResult>> = triggers
        .par_iter()
        .enumerate()
        .map(|(index, (prompt, target))| {
            let want: Vec<usize> = target.iter().map(|&b| b as usize).collect();
            let out = generate_greedy(ckpt, cfg, &TokenSeq::prompt_only(prompt), want.len())?;
            let decoded = out.response().to_vec();
            Ok(TriggerResult {
                index,
                pass: decoded == want,
                decoded,
            })
        })
        .collect();
    let details: Vec<TriggerResult> = details.into_iter().collect::<Result<_>>()?;
    let passes = details.iter().filter(|d| d.pass).count();
    Ok(FsrResult {
        fsr: passes as f64 / triggers.len() as f64,
        n: triggers.len(),
        passes,
        details,
    })
}

/// Exact-match accuracy of greedy decoding over a benchmark of QA pairs.
pub fn exact_match_accuracy(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    benchmark: &[QaPair],
) -> Result<f64> {
    if benchmark.is_empty() {
        return Err(Error::argument("benchmark is empty"));
    }
    let hits: Vec<Result<bool>> = benchmark
        .par_iter()
        .map(|pair| {
            let want: Vec<usize> = pair.response.iter().map(|&b| b as usize).collect();
            let out = generate_greedy(ckpt, cfg, &TokenSeq::prompt_only(&pair.prompt), want.len())?;
            Ok(out.response() == want.as_slice())
        })
        .collect();
    let hits: Vec<bool> = hits.into_iter().collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / benchmark.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmlessnessResult {
    pub acc_a: f64,
    pub acc_b: f64,
    pub delta: f64,
}

/// Toy-harmlessness: exact-match accuracy of both checkpoints on the same
/// downstream benchmark; delta = acc_b − acc_a.
pub fn eval_harmlessness(
    ckpt_a: &Checkpoint,
    ckpt_b: &Checkpoint,
    cfg: &ModelConfig,
    benchmark: &[QaPair],
) -> Result<HarmlessnessResult> {
    let acc_a = exact_match_accuracy(ckpt_a, cfg, benchmark)?;
    let acc_b = exact_match_accuracy(ckpt_b, cfg, benchmark)?;
    Ok(HarmlessnessResult {
        acc_a,
        acc_b,
        delta: acc_b - acc_a,
    })
}

/// One evaluated variant: a model, the attack applied to it (if any), and
/// the measured metrics with full config echo.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model_id: String,
    pub attack_id: String,
    pub fsr: f64,
    pub n: usize,
    /// Pass/fail per trigger, by trigger index.
    pub per_trigger: Vec<bool>,
    pub harmlessness: Option<f64>,
    pub wall_time_s: f64,
    pub config_echo: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str =
    "model_id,attack_id,fsr,n,per_trigger,harmlessness,wall_time_s,config_echo";

fn per_trigger_code(flags: &[bool]) -> String {
    flags.iter().map(|&p| if p { 'P' } else { 'F' }).collect()
}

impl EvalReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let harmless = r
                .harmlessness
                .map(|h| format!("{h:.4}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.4},{},{},{},{:.3},{}\n",
                r.model_id,
                r.attack_id,
                r.fsr,
                r.n,
                per_trigger_code(&r.per_trigger),
                harmless,
                r.wall_time_s,
                r.config_echo.replace(',', ";")
            ));
        }
        out
    }

    /// Parses a report previously written by [`to_csv`](Self::to_csv).
    ///
    /// Round-trips everything `to_csv` keeps: floats at their printed
    /// precision, commas in the config echo as semicolons.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == REPORT_CSV_HEADER => {}
            other => {
                return Err(Error::format(
                    "eval-report",
                    format!("expected header `{REPORT_CSV_HEADER}`, got {other:?}"),
                ))
            }
        }
        let mut report = EvalReport::default();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| {
                Error::format("eval-report", format!("row {}: {what}: `{line}`", i + 1))
            };
            let fields: Vec<&str> = line.splitn(8, ',').collect();
            if fields.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let per_trigger = fields[4]
                .chars()
                .map(|c| match c {
                    'P' => Ok(true),
                    'F' => Ok(false),
                    _ => Err(bad("per_trigger must be P/F")),
                })
                .collect::<Result<Vec<bool>>>()?;
            let harmlessness = if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|_| bad("bad harmlessness"))?)
            };
            report.push(ReportRow {
                model_id: fields[0].to_string(),
                attack_id: fields[1].to_string(),
                fsr: fields[2].parse().map_err(|_| bad("bad fsr"))?,
                n: fields[3].parse().map_err(|_| bad("bad n"))?,
                per_trigger,
                harmlessness,
                wall_time_s: fields[6].parse().map_err(|_| bad("bad wall_time_s"))?,
                config_echo: fields[7].to_string(),
            });
        }
        Ok(report)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| model | attack | FSR | n | toy-harmlessness | wall time (s) | config |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let harmless = r
                .harmlessness
                .map(|h| format!("{h:.4}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "| {} | {} | {:.2} | {} | {} | {:.3} | {} |\n",
                r.model_id, r.attack_id, r.fsr, r.n, harmless, r.wall_time_s, r.config_echo
            ));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    prompt_bytes: String,
    response_bytes: String,
    kind: SampleKind,
}

/// JSON-lines dataset writer: one `{"prompt_bytes": base64, "response_bytes":
/// base64, "kind": "trigger"|"regular"}` object per line.
pub fn write_jsonl(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in samples {
        let line = serde_json::to_string(&JsonSample {
            prompt_bytes: BASE64.encode(&s.prompt),
            response_bytes: BASE64.encode(&s.response),
            kind: s.kind,
        })
        .map_err(|e| Error::format("jsonl", e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonSample = serde_json::from_str(line).map_err(|e| {
            Error::format("jsonl", format!("line {}: {e}", lineno + 1))
        })?;
        let decode = |field: &str, value: &str| -> Result<Vec<u8>> {
            BASE64
                .decode(value)
                .map_err(|e| Error::format("jsonl", format!("line {}: {field}: {e}", lineno + 1)))
        };
        samples.push(Sample {
            prompt: decode("prompt_bytes", &parsed.prompt_bytes)?,
            response: decode("response_bytes", &parsed.response_bytes)?,
            kind: parsed.kind,
        });
    }
    Ok(samples)
}
