//! Corpus curation and mixture compilation.
//!
//! Documents move through the same stages as the pretraining data: exact
//! per-language deduplication, rule-based PII scrubbing, optional edu-score
//! filtering, then oversampling by each dataset's sampling factor. Manifests
//! describe datasets the way the published dataset table does (name, language,
//! factor, processing flags) and can be audited for their language split.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dashmap::DashSet;
use rand::seq::{index, SliceRandom};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::par::{self, Exec};
use crate::rng;
use crate::tokenize::TokenCount;
use crate::{Error, Result, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Fin,
    Eng,
    Swe,
    Sme,
    Lat,
    Code,
    Xling,
}

impl Lang {
    pub const ALL: [Lang; 7] = [
        Lang::Fin,
        Lang::Eng,
        Lang::Swe,
        Lang::Sme,
        Lang::Lat,
        Lang::Code,
        Lang::Xling,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Lang::Fin => "fin",
            Lang::Eng => "eng",
            Lang::Swe => "swe",
            Lang::Sme => "sme",
            Lang::Lat => "lat",
            Lang::Code => "code",
            Lang::Xling => "xling",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lang::Fin => "Finnish",
            Lang::Eng => "English",
            Lang::Swe => "Swedish",
            Lang::Sme => "Northern Sámi",
            Lang::Lat => "Latin",
            Lang::Code => "Code",
            Lang::Xling => "Cross-lingual",
        }
    }
}

impl FromStr for Lang {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Lang::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| Error::input(format!("unknown language code '{s}'")))
    }
}

impl std::fmt::Display for Lang {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub lang: Lang,
    pub text: String,
    #[serde(default)]
    pub token_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edu_score: Option<f64>,
    #[serde(default)]
    pub source: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        lang: Lang,
        text: impl Into<String>,
        source: impl Into<String>,
        counter: &dyn TokenCount,
    ) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            lang,
            token_count: counter.count_tokens(&text) as u64,
            text,
            edu_score: None,
            source: source.into(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    id: String,
    lang: Lang,
    text: String,
    #[serde(default)]
    token_count: Option<u64>,
    #[serde(default)]
    edu_score: Option<f64>,
    #[serde(default)]
    source: String,
}

/// Parse newline-delimited document records. A missing `token_count` is
/// filled in with `counter`.
pub fn parse_jsonl(text: &str, counter: &dyn TokenCount, origin: &Path) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let token_count = rec
            .token_count
            .unwrap_or_else(|| counter.count_tokens(&rec.text) as u64);
        docs.push(Document {
            id: rec.id,
            lang: rec.lang,
            text: rec.text,
            token_count,
            edu_score: rec.edu_score,
            source: rec.source,
        });
    }
    Ok(docs)
}

pub fn read_jsonl(path: &Path, counter: &dyn TokenCount) -> Result<Vec<Document>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, counter, path)
}

pub fn to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    std::fs::write(path, to_jsonl(docs)).map_err(|e| Error::io(path, e))
}

pub fn total_tokens(docs: &[Document]) -> u64 {
    docs.iter().map(|d| d.token_count).sum()
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Pretrain,
    ContextExtension,
    AnnealingBaseline,
    AnnealingEdu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub lang: Lang,
    pub sampling_factor: f64,
    #[serde(default)]
    pub pii_scrub: bool,
    #[serde(default)]
    pub dedup: bool,
    /// Apply the edu-score threshold before sampling.
    #[serde(default)]
    pub edu_filter: bool,
    #[serde(default)]
    pub initial_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Corpus file, relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub spec: DatasetSpec,
    pub processed_tokens: u64,
    pub final_tokens: u64,
    /// True when `final_tokens` was taken from a published figure instead of
    /// being computed from `processed_tokens * sampling_factor`.
    pub reported_final: bool,
}

impl ManifestEntry {
    pub fn computed(spec: DatasetSpec, processed_tokens: u64) -> Self {
        let final_tokens = (processed_tokens as f64 * spec.sampling_factor).round() as u64;
        ManifestEntry {
            spec,
            processed_tokens,
            final_tokens,
            reported_final: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureManifest {
    pub kind: ManifestKind,
    pub entries: Vec<ManifestEntry>,
    pub pii: PiiRuleSet,
    /// Directory that relative corpus paths resolve against.
    pub base_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    kind: ManifestKind,
    #[serde(default)]
    pii: Option<PiiRuleSet>,
    #[serde(default)]
    dataset: Vec<DatasetRecord>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    name: String,
    lang: Lang,
    sampling_factor: f64,
    #[serde(default)]
    pii_scrub: bool,
    #[serde(default)]
    dedup: bool,
    #[serde(default)]
    edu_filter: bool,
    #[serde(default)]
    initial_tokens: Option<u64>,
    #[serde(default)]
    note: Option<String>,
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    processed_tokens: Option<u64>,
    #[serde(default)]
    final_tokens: Option<u64>,
}

impl DatasetRecord {
    fn split(self) -> (DatasetSpec, Option<u64>, Option<u64>) {
        let spec = DatasetSpec {
            name: self.name,
            lang: self.lang,
            sampling_factor: self.sampling_factor,
            pii_scrub: self.pii_scrub,
            dedup: self.dedup,
            edu_filter: self.edu_filter,
            initial_tokens: self.initial_tokens,
            note: self.note,
            path: self.path,
        };
        (spec, self.processed_tokens, self.final_tokens)
    }
}

impl MixtureManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ManifestFile =
            toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        let mut errs = Vec::new();
        let mut entries = Vec::new();
        for (i, rec) in file.dataset.into_iter().enumerate() {
            let (spec, processed_tokens, final_tokens) = rec.split();
            if !(spec.sampling_factor.is_finite() && spec.sampling_factor > 0.0) {
                errs.push(format!(
                    "dataset[{i}].sampling_factor: must be > 0 (got {})",
                    spec.sampling_factor
                ));
                continue;
            }
            let processed = match (processed_tokens, &spec.path) {
                (Some(p), _) => p,
                (None, Some(_)) => 0,
                (None, None) => {
                    errs.push(format!(
                        "dataset[{i}] ({}): needs processed_tokens or path",
                        spec.name
                    ));
                    continue;
                }
            };
            let mut entry = ManifestEntry::computed(spec, processed);
            if let Some(f) = final_tokens {
                entry.final_tokens = f;
                entry.reported_final = true;
            }
            entries.push(entry);
        }
        if !errs.is_empty() {
            return Err(Error::config(format!("manifest: {}", errs.join("; "))));
        }
        Ok(MixtureManifest {
            kind: file.kind,
            entries,
            pii: file.pii.unwrap_or_default(),
            base_dir: None,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_toml_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn corpus_path(&self, spec: &DatasetSpec) -> Option<PathBuf> {
        spec.path.as_ref().map(|p| match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.clone(),
        })
    }

    /// Entries whose computed final count disagrees with `processed * S` by
    /// more than one token. Reported figures are exempt.
    pub fn inconsistent_entries(&self) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| !e.reported_final)
            .filter(|e| {
                let exact = e.processed_tokens as f64 * e.spec.sampling_factor;
                (e.final_tokens as f64 - exact).abs() > 1.0
            })
            .collect()
    }
}

/// Arithmetic summary of the sampling factors.
pub fn sampling_factor_stats(manifest: &MixtureManifest) -> Option<(f64, f64, f64)> {
    let mut s: Vec<f64> = manifest
        .entries
        .iter()
        .map(|e| e.spec.sampling_factor)
        .collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    Some((median, mean, s[n - 1]))
}

// ---------------------------------------------------------------------------
// Deduplication

/// Text used for equality: CRLF/CR become LF and trailing whitespace is
/// removed from every line and from the end of the document.
pub fn normalize_for_dedup(text: &str) -> String {
    let unified = text.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    for (i, line) in unified.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(line.trim_end());
    }
    out.truncate(out.trim_end().len());
    out
}

pub fn dedup_key(text: &str) -> u128 {
    let digest = Sha256::digest(normalize_for_dedup(text).as_bytes());
    u128::from_le_bytes(digest[..16].try_into().expect("16 bytes"))
}

/// Shared per-language seen-set for streaming shards.
#[derive(Debug, Default)]
pub struct Deduplicator {
    seen: DashSet<(Lang, u128)>,
}

impl Deduplicator {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if the document is the first with its normalized text in its language.
    pub fn admit(&self, doc: &Document) -> bool {
        self.admit_key(doc.lang, dedup_key(&doc.text))
    }

    pub fn admit_key(&self, lang: Lang, key: u128) -> bool {
        self.seen.insert((lang, key))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DedupStats {
    pub docs_in: usize,
    pub docs_out: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

impl DedupStats {
    /// Token reduction in percent (negative, like the published "R S-D%" column).
    pub fn reduction_pct(&self) -> f64 {
        if self.tokens_in == 0 {
            return 0.0;
        }
        -100.0 * (self.tokens_in - self.tokens_out) as f64 / self.tokens_in as f64
    }
}

/// Keep the first document per (language, normalized text), preserving order.
/// Hashing runs in parallel; admission is a sequential pass so the first
/// occurrence always wins.
pub fn dedup_exact_with(
    docs: Vec<Document>,
    dedup: &Deduplicator,
    exec: Exec,
) -> (Vec<Document>, DedupStats) {
    let keys = par::map(exec, &docs, |d| dedup_key(&d.text));
    let mut stats = DedupStats {
        docs_in: docs.len(),
        tokens_in: total_tokens(&docs),
        ..DedupStats::default()
    };
    let kept: Vec<Document> = docs
        .into_iter()
        .zip(keys)
        .filter(|(d, k)| dedup.admit_key(d.lang, *k))
        .map(|(d, _)| d)
        .collect();
    stats.docs_out = kept.len();
    stats.tokens_out = total_tokens(&kept);
    (kept, stats)
}

pub fn dedup_exact(docs: Vec<Document>) -> (Vec<Document>, DedupStats) {
    dedup_exact_with(docs, &Deduplicator::new(), Exec::default())
}

// ---------------------------------------------------------------------------
// PII

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiiRule {
    pub name: String,
    pub pattern: String,
    pub placeholder: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiiRuleSet {
    pub version: String,
    pub rules: Vec<PiiRule>,
}

impl Default for PiiRuleSet {
    fn default() -> Self {
        let rule = |name: &str, pattern: &str, placeholder: &str| PiiRule {
            name: name.into(),
            pattern: pattern.into(),
            placeholder: placeholder.into(),
        };
        PiiRuleSet {
            version: "default-1".into(),
            rules: vec![
                rule(
                    "email",
                    r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}",
                    "[EMAIL]",
                ),
                rule(
                    "ip",
                    r"\b(?:(?:25[0-5]|2[0-4][0-9]|1[0-9]{2}|[1-9]?[0-9])\.){3}(?:25[0-5]|2[0-4][0-9]|1[0-9]{2}|[1-9]?[0-9])\b",
                    "[IP]",
                ),
                rule(
                    "phone",
                    r"\+[0-9]{1,3}(?:[ .-]?\(?[0-9]{1,4}\)?){2,5}",
                    "[PHONE]",
                ),
            ],
        }
    }
}

/// Compiled rule set.
#[derive(Debug, Clone)]
pub struct PiiScrubber {
    rules: Vec<(Regex, String)>,
    pub version: String,
}

const MAX_SCRUB_PASSES: usize = 8;

impl PiiScrubber {
    pub fn new(set: &PiiRuleSet) -> Result<Self> {
        if set.rules.is_empty() {
            return Err(Error::config("pii: rule set is empty"));
        }
        let rules = set
            .rules
            .iter()
            .map(|r| {
                Regex::new(&r.pattern)
                    .map(|re| (re, r.placeholder.clone()))
                    .map_err(|e| Error::config(format!("pii rule '{}': {e}", r.name)))
            })
            .collect::<Result<_>>()?;
        Ok(PiiScrubber {
            rules,
            version: set.version.clone(),
        })
    }

    fn pass(&self, text: &str) -> String {
        let mut cur = text.to_string();
        for (re, placeholder) in &self.rules {
            if re.is_match(&cur) {
                cur = re.replace_all(&cur, placeholder.as_str()).into_owned();
            }
        }
        cur
    }

    /// Replace every match until the text is stable.
    pub fn scrub_text(&self, text: &str) -> String {
        let mut cur = self.pass(text);
        for _ in 1..MAX_SCRUB_PASSES {
            let next = self.pass(&cur);
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }

    pub fn scrub(&self, doc: &Document, counter: &dyn TokenCount) -> Document {
        let text = self.scrub_text(&doc.text);
        if text == doc.text {
            return doc.clone();
        }
        Document {
            token_count: counter.count_tokens(&text) as u64,
            text,
            ..doc.clone()
        }
    }
}

pub fn scrub_pii(doc: &Document, rules: &PiiRuleSet, counter: &dyn TokenCount) -> Result<Document> {
    Ok(PiiScrubber::new(rules)?.scrub(doc, counter))
}

pub fn scrub_all(
    docs: &[Document],
    scrubber: &PiiScrubber,
    counter: &dyn TokenCount,
    exec: Exec,
) -> Vec<Document> {
    par::map(exec, docs, |d| scrubber.scrub(d, counter))
}

// ---------------------------------------------------------------------------
// Edu filtering

pub const DEFAULT_EDU_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EduFiltered {
    pub kept: Vec<Document>,
    pub dropped: usize,
    /// Ids of documents that had no score.
    pub missing_score: Vec<String>,
}

/// Keep documents with `edu_score >= threshold`, in order.
pub fn filter_edu(docs: Vec<Document>, threshold: f64) -> EduFiltered {
    let mut out = EduFiltered {
        kept: Vec::new(),
        dropped: 0,
        missing_score: Vec::new(),
    };
    for d in docs {
        match d.edu_score {
            Some(s) if s >= threshold => out.kept.push(d),
            Some(_) => out.dropped += 1,
            None => out.missing_score.push(d.id),
        }
    }
    out
}

/// Parse a sidecar score file of `id<TAB>score` lines.
pub fn parse_edu_scores(text: &str) -> Result<HashMap<String, f64>> {
    let mut scores = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, score) = line.rsplit_once(['\t', ' ']).ok_or_else(|| Error::Parse {
            path: "scores".into(),
            line: i + 1,
            message: "expected 'id<TAB>score'".into(),
        })?;
        let score: f64 = score.trim().parse().map_err(|_| Error::Parse {
            path: "scores".into(),
            line: i + 1,
            message: format!("bad score '{score}'"),
        })?;
        scores.insert(id.trim().to_string(), score);
    }
    Ok(scores)
}

pub fn attach_edu_scores(docs: &mut [Document], scores: &HashMap<String, f64>) {
    for d in docs {
        if let Some(&s) = scores.get(&d.id) {
            d.edu_score = Some(s);
        }
    }
}

// ---------------------------------------------------------------------------
// Oversampling

/// A dataset's spec together with its processed documents.
#[derive(Debug, Clone)]
pub struct SourceCorpus {
    pub spec: DatasetSpec,
    pub docs: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDataset {
    pub name: String,
    pub processed_tokens: u64,
    pub target_tokens: f64,
    pub emitted_tokens: u64,
    pub emitted_docs: usize,
}

#[derive(Debug, Clone)]
pub struct SampledMixture {
    pub docs: Vec<Document>,
    pub per_dataset: Vec<SampledDataset>,
}

/// Documents chosen to carry `fraction` of the dataset's tokens. Candidates are
/// visited in a seeded random order and taken whenever doing so moves the
/// running total closer to the target.
fn fractional_subset(docs: &[Document], fraction: f64, seed: u64, name: &str) -> Vec<usize> {
    if fraction <= 0.0 || docs.is_empty() {
        return Vec::new();
    }
    let target = total_tokens(docs) as f64 * fraction;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut rng::substream(seed, &format!("sampling/{name}")));
    let mut taken = Vec::new();
    let mut acc = 0.0;
    for i in order {
        let t = docs[i].token_count as f64;
        if (acc + t - target).abs() < (acc - target).abs() {
            acc += t;
            taken.push(i);
        }
    }
    taken.sort_unstable();
    taken
}

fn sample_one(src: &SourceCorpus, seed: u64, index: usize) -> Result<(Vec<Document>, SampledDataset)> {
    let s = src.spec.sampling_factor;
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::config(format!(
            "dataset '{}': sampling_factor must be > 0 (got {s})",
            src.spec.name
        )));
    }
    let whole = s.floor() as usize;
    let frac = s - s.floor();
    let mut out = Vec::with_capacity(src.docs.len() * whole + 1);
    for _ in 0..whole {
        out.extend(src.docs.iter().cloned());
    }
    let key = format!("{index}/{}", src.spec.name);
    for i in fractional_subset(&src.docs, frac, seed, &key) {
        out.push(src.docs[i].clone());
    }
    let processed = total_tokens(&src.docs);
    let stats = SampledDataset {
        name: src.spec.name.clone(),
        processed_tokens: processed,
        target_tokens: processed as f64 * s,
        emitted_tokens: total_tokens(&out),
        emitted_docs: out.len(),
    };
    Ok((out, stats))
}

/// Emit each dataset `floor(S)` times plus a seeded document subset carrying
/// `frac(S)` of its tokens. Datasets are concatenated in input order.
pub fn apply_sampling_with(sources: &[SourceCorpus], seed: u64, exec: Exec) -> Result<SampledMixture> {
    let indexed: Vec<(usize, &SourceCorpus)> = sources.iter().enumerate().collect();
    let parts = par::map(exec, &indexed, |(i, src)| sample_one(src, seed, *i));
    let mut docs = Vec::new();
    let mut per_dataset = Vec::new();
    for part in parts {
        let (d, s) = part?;
        docs.extend(d);
        per_dataset.push(s);
    }
    Ok(SampledMixture { docs, per_dataset })
}

pub fn apply_sampling(sources: &[SourceCorpus], seed: u64) -> Result<SampledMixture> {
    apply_sampling_with(sources, seed, Exec::default())
}

// ---------------------------------------------------------------------------
// Cross-lingual prefixes

pub const XLING_INSTRUCTIONS: [(&str, &str); 12] = [
    ("eng-fin", "Translate into Finnish:"),
    ("eng-sme", "Translate into Northern Sámi:"),
    ("eng-swe", "Translate into Swedish:"),
    ("fin-eng", "Käännä englanniksi:"),
    ("fin-sme", "Käännä pohjoissaameksi:"),
    ("fin-swe", "Käännä ruotsiksi:"),
    ("sme-fin", "Jorgal suomagillii:"),
    ("sme-eng", "Jorgal eŋgelasgillii:"),
    ("sme-swe", "Jorgal ruoŧagillii:"),
    ("swe-fin", "Översätt till finska:"),
    ("swe-eng", "Översätt till engelska:"),
    ("swe-sme", "Översätt till nordsamiska:"),
];

pub const XLING_SEPARATOR: &str = "\n";

pub fn xling_instruction(pair: &str) -> Result<&'static str> {
    XLING_INSTRUCTIONS
        .iter()
        .find(|(p, _)| *p == pair)
        .map(|(_, i)| *i)
        .ok_or_else(|| {
            let valid: Vec<&str> = XLING_INSTRUCTIONS.iter().map(|(p, _)| *p).collect();
            Error::config(format!(
                "unknown language pair '{pair}'; valid pairs: {}",
                valid.join(", ")
            ))
        })
}

/// Build a cross-lingual training document: `instruction src\ntgt`.
pub fn prefix_xling(
    pair: &str,
    id: impl Into<String>,
    src: &str,
    tgt: &str,
    counter: &dyn TokenCount,
) -> Result<Document> {
    let instruction = xling_instruction(pair)?;
    let text = format!("{instruction} {src}{XLING_SEPARATOR}{tgt}");
    Ok(Document::new(id, Lang::Xling, text, pair, counter))
}

// ---------------------------------------------------------------------------
// Context-extension sampling

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub label: String,
    /// Inclusive lower bound in tokens.
    pub min: u64,
    /// Exclusive upper bound; `None` is unbounded.
    pub max: Option<u64>,
    /// Target share in percent.
    pub share: f64,
}

impl LengthBucket {
    pub fn contains(&self, tokens: u64) -> bool {
        tokens >= self.min && self.max.is_none_or(|m| tokens < m)
    }
}

/// Published length distribution of the context-extension data.
pub fn default_length_targets() -> Vec<LengthBucket> {
    let b = |label: &str, min, max, share| LengthBucket {
        label: label.to_string(),
        min,
        max,
        share,
    };
    vec![
        b("<1K", 0, Some(1024), 21.01),
        b("1K-10K", 1024, Some(10_240), 77.56),
        b("10K-16K", 10_240, Some(16_384), 1.03),
        b(">16K", 16_384, None, 0.4),
    ]
}

pub fn validate_buckets(buckets: &[LengthBucket]) -> Result<()> {
    if buckets.is_empty() {
        return Err(Error::config("length targets: no buckets"));
    }
    if buckets[0].min != 0 {
        return Err(Error::config("length targets: first bucket must start at 0"));
    }
    for w in buckets.windows(2) {
        if w[0].max != Some(w[1].min) {
            return Err(Error::config(format!(
                "length targets: bucket '{}' must end where '{}' starts",
                w[0].label, w[1].label
            )));
        }
    }
    if buckets.last().and_then(|b| b.max).is_some() {
        return Err(Error::config("length targets: last bucket must be unbounded"));
    }
    if buckets.iter().any(|b| b.share.is_nan() || b.share < 0.0) {
        return Err(Error::config("length targets: shares must be >= 0"));
    }
    let total: f64 = buckets.iter().map(|b| b.share).sum();
    if (total - 100.0).abs() > 0.01 {
        return Err(Error::config(format!(
            "length targets: shares sum to {total}, expected 100"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExtensionSample {
    pub docs: Vec<Document>,
    /// (label, target %, achieved %, documents)
    pub buckets: Vec<(String, f64, f64, usize)>,
    pub warnings: Vec<Warning>,
}

impl ExtensionSample {
    pub fn report(&self) -> String {
        let mut out = String::from("bucket\ttarget_pct\tachieved_pct\tdocs\n");
        for (label, target, achieved, n) in &self.buckets {
            let _ = writeln!(out, "{label}\t{target:.2}\t{achieved:.2}\t{n}");
        }
        out
    }
}

/// Draw documents so that their length-bucket shares match `targets`.
///
/// The output size is the largest one every non-empty target bucket can
/// supply, capped by `max_docs`. A target bucket with no input documents is
/// skipped with a warning and its achieved share reported as 0.
pub fn sample_context_extension_with(
    docs: &[Document],
    targets: &[LengthBucket],
    seed: u64,
    max_docs: Option<usize>,
    exec: Exec,
) -> Result<ExtensionSample> {
    validate_buckets(targets)?;
    let bucket_of = par::map(exec, docs, |d| {
        targets
            .iter()
            .position(|b| b.contains(d.token_count))
            .expect("buckets partition lengths")
    });
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); targets.len()];
    for (i, b) in bucket_of.into_iter().enumerate() {
        members[b].push(i);
    }

    let mut warnings = Vec::new();
    let mut capacity = max_docs.map(|m| m as f64).unwrap_or(f64::INFINITY);
    for (b, t) in targets.iter().enumerate() {
        if t.share <= 0.0 {
            continue;
        }
        if members[b].is_empty() {
            warnings.push(Warning::new(
                "sample-ext",
                format!("bucket '{}' has no input documents; achieved share 0", t.label),
            ));
            continue;
        }
        capacity = capacity.min(members[b].len() as f64 / (t.share / 100.0));
    }
    if !capacity.is_finite() {
        capacity = 0.0;
    }

    let mut rng = rng::substream(seed, "sample-ext");
    let mut picked: Vec<usize> = Vec::new();
    let mut counts = vec![0usize; targets.len()];
    for (b, t) in targets.iter().enumerate() {
        let want = ((t.share / 100.0) * capacity).round() as usize;
        let n = want.min(members[b].len());
        if n < want && !members[b].is_empty() {
            warnings.push(Warning::new(
                "sample-ext",
                format!("bucket '{}' short: wanted {want}, have {n}", t.label),
            ));
        }
        for j in index::sample(&mut rng, members[b].len(), n) {
            picked.push(members[b][j]);
        }
        counts[b] = n;
    }
    picked.shuffle(&mut rng);
    let total = picked.len().max(1) as f64;
    let buckets = targets
        .iter()
        .zip(&counts)
        .map(|(t, &n)| (t.label.clone(), t.share, 100.0 * n as f64 / total, n))
        .collect();
    Ok(ExtensionSample {
        docs: picked.into_iter().map(|i| docs[i].clone()).collect(),
        buckets,
        warnings,
    })
}

pub fn sample_context_extension(
    docs: &[Document],
    targets: &[LengthBucket],
    seed: u64,
) -> Result<ExtensionSample> {
    sample_context_extension_with(docs, targets, seed, None, Exec::default())
}

// ---------------------------------------------------------------------------
// Audits

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageAudit {
    /// (language, tokens, percent), largest first.
    pub rows: Vec<(Lang, u64, f64)>,
    pub total: u64,
}

impl LanguageAudit {
    pub fn share(&self, lang: Lang) -> f64 {
        self.rows
            .iter()
            .find(|(l, _, _)| *l == lang)
            .map_or(0.0, |r| r.2)
    }

    pub fn tokens(&self, lang: Lang) -> u64 {
        self.rows
            .iter()
            .find(|(l, _, _)| *l == lang)
            .map_or(0, |r| r.1)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("language\ttokens_b\tpercent\n");
        for (lang, tokens, pct) in &self.rows {
            let _ = writeln!(out, "{}\t{:.2}\t{:.2}", lang.name(), *tokens as f64 / 1e9, pct);
        }
        let _ = writeln!(out, "Total\t{:.2}\t100.00", self.total as f64 / 1e9);
        out
    }
}

/// Per-language final-token totals and their shares of the grand total.
pub fn audit_distribution(manifest: &MixtureManifest) -> LanguageAudit {
    let mut by_lang: BTreeMap<Lang, u64> = BTreeMap::new();
    for e in &manifest.entries {
        *by_lang.entry(e.spec.lang).or_default() += e.final_tokens;
    }
    let total: u64 = by_lang.values().sum();
    let mut rows: Vec<(Lang, u64, f64)> = by_lang
        .into_iter()
        .map(|(l, t)| {
            let pct = if total == 0 { 0.0 } else { 100.0 * t as f64 / total as f64 };
            (l, t, pct)
        })
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    LanguageAudit { rows, total }
}

/// Share (percent) of the manifest's final tokens held by datasets named `name`.
pub fn source_share(manifest: &MixtureManifest, name: &str, lang: Option<Lang>) -> f64 {
    let total: u64 = manifest.entries.iter().map(|e| e.final_tokens).sum();
    let part: u64 = manifest
        .entries
        .iter()
        .filter(|e| e.spec.name == name && lang.is_none_or(|l| e.spec.lang == l))
        .map(|e| e.final_tokens)
        .sum();
    if total == 0 {
        0.0
    } else {
        100.0 * part as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone)]
pub struct CompiledMixture {
    pub docs: Vec<Document>,
    /// Manifest with `processed_tokens` measured from the corpora and
    /// `final_tokens` set to what was actually emitted.
    pub manifest: MixtureManifest,
    pub dedup: BTreeMap<String, DedupStats>,
    pub warnings: Vec<Warning>,
}

pub struct CompileOptions<'a> {
    pub seed: u64,
    pub counter: &'a dyn TokenCount,
    pub edu_scores: Option<&'a HashMap<String, f64>>,
    pub edu_threshold: f64,
    pub exec: Exec,
}

/// Run every manifest dataset with a corpus through dedup, PII scrubbing and
/// edu filtering as flagged, then oversample. Deduplication is global per
/// language across all dedup-flagged datasets, in manifest order.
pub fn compile(
    manifest: &MixtureManifest,
    corpora: Vec<Vec<Document>>,
    opts: &CompileOptions<'_>,
) -> Result<CompiledMixture> {
    if corpora.len() != manifest.entries.len() {
        return Err(Error::input(format!(
            "compile: {} corpora for {} manifest entries",
            corpora.len(),
            manifest.entries.len()
        )));
    }
    let scrubber = PiiScrubber::new(&manifest.pii)?;
    let dedup = Deduplicator::new();
    let mut warnings = Vec::new();
    let mut dedup_stats = BTreeMap::new();
    let mut sources = Vec::with_capacity(corpora.len());
    for (entry, mut docs) in manifest.entries.iter().zip(corpora) {
        let spec = &entry.spec;
        for d in &mut docs {
            d.lang = spec.lang;
            if d.source.is_empty() {
                d.source = spec.name.clone();
            }
        }
        if spec.dedup {
            let (kept, stats) = dedup_exact_with(docs, &dedup, opts.exec);
            dedup_stats.insert(spec.name.clone(), stats);
            docs = kept;
        }
        if spec.pii_scrub {
            docs = scrub_all(&docs, &scrubber, opts.counter, opts.exec);
        }
        if spec.edu_filter {
            if let Some(scores) = opts.edu_scores {
                attach_edu_scores(&mut docs, scores);
            }
            let filtered = filter_edu(docs, opts.edu_threshold);
            if !filtered.missing_score.is_empty() {
                warnings.push(Warning::new(
                    "edu-filter",
                    format!(
                        "dataset '{}': {} documents without edu score (first: {})",
                        spec.name,
                        filtered.missing_score.len(),
                        filtered.missing_score[0]
                    ),
                ));
            }
            docs = filtered.kept;
        }
        sources.push(SourceCorpus {
            spec: spec.clone(),
            docs,
        });
    }
    let sampled = apply_sampling_with(&sources, opts.seed, opts.exec)?;
    let entries = manifest
        .entries
        .iter()
        .zip(&sampled.per_dataset)
        .map(|(e, s)| ManifestEntry {
            spec: e.spec.clone(),
            processed_tokens: s.processed_tokens,
            final_tokens: s.emitted_tokens,
            reported_final: false,
        })
        .collect();
    Ok(CompiledMixture {
        docs: sampled.docs,
        manifest: MixtureManifest {
            entries,
            ..manifest.clone()
        },
        dedup: dedup_stats,
        warnings,
    })
}

/// Load each entry's corpus file. Entries without a path get an empty corpus.
pub fn load_corpora(manifest: &MixtureManifest, counter: &dyn TokenCount) -> Result<Vec<Vec<Document>>> {
    manifest
        .entries
        .iter()
        .map(|e| match manifest.corpus_path(&e.spec) {
            Some(p) => read_jsonl(&p, counter),
            None => Ok(Vec::new()),
        })
        .collect()
}

/// Split a pooled corpus by `source` into one corpus per manifest entry
/// (matched on dataset name and language).
pub fn split_by_source(manifest: &MixtureManifest, docs: Vec<Document>) -> (Vec<Vec<Document>>, usize) {
    let mut out = vec![Vec::new(); manifest.entries.len()];
    let mut unmatched = 0;
    for d in docs {
        match manifest
            .entries
            .iter()
            .position(|e| e.spec.name == d.source && e.spec.lang == d.lang)
        {
            Some(i) => out[i].push(d),
            None => unmatched += 1,
        }
    }
    (out, unmatched)
}
