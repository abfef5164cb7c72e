//! The shared run-config file.
//!
//! ```toml
//! seed = 7
//! manifest_path = "mix.toml"   # relative paths resolve against the config file
//! vocab_path = "vocab.txt"
//! output_dir = "out"
//!
//! [timeline]
//! preset = "tiny"              # default: the encoder preset's size
//! total_steps = 200            # rescales the preset, keeping phase fractions
//! full_batch_tokens = 2048
//!
//! [encoder]
//! preset = "tiny"
//! layers = 2
//!
//! [optimizer]
//! weight_decay = 1e-5
//!
//! [masking]
//! mask_rate = 0.3
//! ```
//!
//! Parsing reports every problem at once, each prefixed with the path of
//! the offending field.

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::encoder::EncoderConfig;
use crate::mixture::{self, CompileOptions, MixtureManifest};
use crate::par::Exec;
use crate::schedule::{TimelinePreset, TrainingTimeline};
use crate::tokenize::{Vocabulary, WhitespaceTokenizer};
use crate::trainer::{MaskingPolicy, OptimizerSettings, TrainSpec};
use crate::{rng, Error, Result, Warning};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub timeline: TrainingTimeline,
    pub encoder_preset: String,
    /// `vocab_size` is taken from the vocabulary file.
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerSettings,
    pub masking: MaskingPolicy,
    pub manifest_path: PathBuf,
    pub vocab_path: PathBuf,
    pub seed: u64,
    pub output_dir: PathBuf,
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "manifest_path",
    "vocab_path",
    "output_dir",
    "timeline",
    "encoder",
    "optimizer",
    "masking",
];
const TIMELINE_KEYS: &[&str] = &[
    "preset",
    "total_steps",
    "stable_lr",
    "extension_lr",
    "full_batch_tokens",
    "initial_batch_tokens",
    "extension_stage_lengths",
    "stable_seq_len",
];
const ENCODER_KEYS: &[&str] = &[
    "preset",
    "layers",
    "hidden",
    "intermediate",
    "heads",
    "max_seq",
    "global_layer_period",
    "local_window",
    "use_rope",
    "tied_head",
];
const OPTIMIZER_KEYS: &[&str] = &["beta1", "beta2", "epsilon", "weight_decay"];
const MASKING_KEYS: &[&str] = &["mask_rate", "corrupt_split"];

struct Fields<'a> {
    table: &'a Table,
    prefix: String,
    errs: Vec<String>,
}

impl<'a> Fields<'a> {
    fn new(table: &'a Table, prefix: &str, allowed: &[&str]) -> Self {
        let mut errs = Vec::new();
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                errs.push(format!("{}: unknown key", join(prefix, key)));
            }
        }
        Fields {
            table,
            prefix: prefix.to_string(),
            errs,
        }
    }

    fn path(&self, key: &str) -> String {
        join(&self.prefix, key)
    }

    fn wrong_type(&mut self, key: &str, want: &str, got: &Value) {
        let p = self.path(key);
        self.errs.push(format!("{p}: expected {want}, found {}", got.type_str()));
    }

    fn u64(&mut self, key: &str) -> Option<u64> {
        match self.table.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                let p = self.path(key);
                self.errs.push(format!("{p}: must be >= 0, got {i}"));
                None
            }
            v => {
                self.wrong_type(key, "integer", v);
                None
            }
        }
    }

    fn f64(&mut self, key: &str) -> Option<f64> {
        match self.table.get(key)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            v => {
                self.wrong_type(key, "number", v);
                None
            }
        }
    }

    fn bool(&mut self, key: &str) -> Option<bool> {
        match self.table.get(key)? {
            Value::Boolean(b) => Some(*b),
            v => {
                self.wrong_type(key, "boolean", v);
                None
            }
        }
    }

    fn str(&mut self, key: &str) -> Option<String> {
        match self.table.get(key)? {
            Value::String(s) => Some(s.clone()),
            v => {
                self.wrong_type(key, "string", v);
                None
            }
        }
    }

    fn f64_list(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.table.get(key)? {
            Value::Array(a) => {
                let vals: Option<Vec<f64>> = a
                    .iter()
                    .map(|v| match v {
                        Value::Float(f) => Some(*f),
                        Value::Integer(i) => Some(*i as f64),
                        _ => None,
                    })
                    .collect();
                if vals.is_none() {
                    let p = self.path(key);
                    self.errs.push(format!("{p}: expected an array of numbers"));
                }
                vals
            }
            v => {
                self.wrong_type(key, "array", v);
                None
            }
        }
    }

    fn table(&mut self, key: &str) -> Option<&'a Table> {
        match self.table.get(key)? {
            Value::Table(t) => Some(t),
            v => {
                self.wrong_type(key, "table", v);
                None
            }
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn narrow_u32(v: u64, path: &str, errs: &mut Vec<String>) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| {
        errs.push(format!("{path}: {v} is too large"));
        0
    })
}

/// Parse and validate a config. Relative paths resolve against `base_dir`.
/// On failure every problem found is returned.
pub fn parse_config_str(text: &str, base_dir: &Path) -> std::result::Result<RunConfig, Vec<String>> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| vec![format!("syntax: {}", e.message())])?;
    let mut errs = Vec::new();
    let empty = Table::new();

    let mut top = Fields::new(&root, "", TOP_KEYS);
    let seed = match top.table.get("seed") {
        Some(Value::Integer(i)) if *i < 0 => {
            top.errs.push(format!("seed: must be >= 0, got {i}"));
            0
        }
        _ => top.u64("seed").unwrap_or(0),
    };
    let resolve = |p: String| {
        let p = PathBuf::from(p);
        if p.is_relative() {
            base_dir.join(p)
        } else {
            p
        }
    };
    let manifest_path = top.str("manifest_path").map(resolve);
    let vocab_path = top.str("vocab_path").map(resolve);
    let output_dir = top.str("output_dir").map(resolve).unwrap_or_else(|| base_dir.join("out"));
    let timeline_t = top.table("timeline").unwrap_or(&empty);
    let encoder_t = top.table("encoder").unwrap_or(&empty);
    let optimizer_t = top.table("optimizer").unwrap_or(&empty);
    let masking_t = top.table("masking").unwrap_or(&empty);
    errs.append(&mut top.errs);
    if manifest_path.is_none() && !root.contains_key("manifest_path") {
        errs.push("manifest_path: missing".into());
    }
    if vocab_path.is_none() && !root.contains_key("vocab_path") {
        errs.push("vocab_path: missing".into());
    }

    // encoder
    let mut ef = Fields::new(encoder_t, "encoder", ENCODER_KEYS);
    let encoder_preset = ef.str("preset").unwrap_or_else(|| "tiny".into());
    let mut encoder = match EncoderConfig::from_preset_name(&encoder_preset) {
        Some(c) => c,
        None => {
            ef.errs.push(format!(
                "encoder.preset: unknown preset '{encoder_preset}' (expected tiny, base, large, optionally with -short)"
            ));
            EncoderConfig::preset(crate::encoder::EncoderPreset::Tiny)
        }
    };
    for (key, slot) in [
        ("layers", &mut encoder.layers),
        ("hidden", &mut encoder.hidden),
        ("intermediate", &mut encoder.intermediate),
        ("heads", &mut encoder.heads),
        ("max_seq", &mut encoder.max_seq),
        ("global_layer_period", &mut encoder.global_layer_period),
        ("local_window", &mut encoder.local_window),
    ] {
        if let Some(v) = ef.u64(key) {
            *slot = v as usize;
        }
    }
    if let Some(b) = ef.bool("use_rope") {
        encoder.use_rope = b;
    }
    if let Some(b) = ef.bool("tied_head") {
        encoder.tied_head = b;
    }

    errs.append(&mut ef.errs);

    // timeline
    let mut tf = Fields::new(timeline_t, "timeline", TIMELINE_KEYS);
    let size = encoder_preset.trim_end_matches("-short").to_string();
    let tl_preset = tf.str("preset").unwrap_or(size);
    let preset = TimelinePreset::from_name(&tl_preset).unwrap_or_else(|| {
        tf.errs
            .push(format!("timeline.preset: unknown preset '{tl_preset}' (expected tiny, base, large)"));
        TimelinePreset::Tiny
    });
    let mut timeline = TrainingTimeline::preset(preset);
    if let Some(total) = tf.u64("total_steps") {
        if total != timeline.total_steps {
            match timeline.scaled(total) {
                Ok(t) => timeline = t,
                Err(e) => tf.errs.push(e.to_string().trim_start_matches("config: ").to_string()),
            }
        }
    }
    if let Some(v) = tf.f64("stable_lr") {
        timeline.stable_lr = v;
    }
    if let Some(v) = tf.f64("extension_lr") {
        timeline.extension_lr = v;
    }
    if let Some(v) = tf.u64("full_batch_tokens") {
        timeline.full_batch_tokens = v;
    }
    if let Some(v) = tf.u64("initial_batch_tokens") {
        timeline.initial_batch_tokens = v;
    }
    if let Some(v) = tf.u64("stable_seq_len") {
        timeline.stable_seq_len = narrow_u32(v, "timeline.stable_seq_len", &mut tf.errs);
    }
    if let Some(v) = tf.f64_list("extension_stage_lengths") {
        if v.iter().any(|x| x.fract() != 0.0 || *x < 0.0 || *x > u32::MAX as f64) {
            tf.errs
                .push("timeline.extension_stage_lengths: expected non-negative integers".into());
        } else {
            timeline.extension_stage_lengths = v.into_iter().map(|x| x as u32).collect();
        }
    }

    errs.append(&mut tf.errs);

    // optimizer
    let mut of = Fields::new(optimizer_t, "optimizer", OPTIMIZER_KEYS);
    let mut optimizer = OptimizerSettings::for_preset(&encoder_preset);
    for (key, slot) in [
        ("beta1", &mut optimizer.beta1),
        ("beta2", &mut optimizer.beta2),
        ("epsilon", &mut optimizer.epsilon),
        ("weight_decay", &mut optimizer.weight_decay),
    ] {
        if let Some(v) = of.f64(key) {
            *slot = v;
        }
    }

    errs.append(&mut of.errs);

    // masking
    let mut mf = Fields::new(masking_t, "masking", MASKING_KEYS);
    let mut masking = MaskingPolicy::default();
    if let Some(v) = mf.f64("mask_rate") {
        masking.mask_rate = v;
    }
    if let Some(v) = mf.f64_list("corrupt_split") {
        match <[f64; 3]>::try_from(v) {
            Ok(a) => masking.corrupt_split = a,
            Err(_) => mf.errs.push("masking.corrupt_split: expected three numbers".into()),
        }
    }

    errs.append(&mut mf.errs);

    errs.extend(timeline.violations().into_iter().map(|e| prefixed("timeline", e)));
    errs.extend(optimizer.violations());
    errs.extend(masking.violations());

    // referenced files
    if let Some(p) = &manifest_path {
        if !p.is_file() {
            errs.push(format!("manifest_path: {} does not exist", p.display()));
        }
    }
    if let Some(p) = &vocab_path {
        if !p.is_file() {
            errs.push(format!("vocab_path: {} does not exist", p.display()));
        } else {
            match Vocabulary::load(p) {
                Ok(v) => {
                    encoder.vocab_size = v.size();
                    masking.never_mask = v.special_ids().into_iter().collect();
                    match v.special_id("[MASK]") {
                        Some(id) => masking.mask_token_id = id,
                        None => errs.push("vocab_path: vocabulary has no [MASK] token".into()),
                    }
                    for s in ["[CLS]", "[SEP]"] {
                        if v.special_id(s).is_none() {
                            errs.push(format!("vocab_path: vocabulary has no {s} token"));
                        }
                    }
                }
                Err(e) => errs.push(format!("vocab_path: {e}")),
            }
        }
    }
    encoder.rope = timeline.rope_schedule();
    errs.extend(encoder.violations());
    let longest = timeline
        .extension_stage_lengths
        .iter()
        .copied()
        .chain([timeline.stable_seq_len])
        .max()
        .unwrap_or(0);
    if longest as usize > encoder.max_seq {
        errs.push(format!(
            "encoder.max_seq: {} is shorter than the longest scheduled sequence {longest}",
            encoder.max_seq
        ));
    }

    if !errs.is_empty() {
        return Err(errs);
    }
    Ok(RunConfig {
        timeline,
        encoder_preset,
        encoder,
        optimizer,
        masking,
        manifest_path: manifest_path.expect("checked"),
        vocab_path: vocab_path.expect("checked"),
        seed,
        output_dir,
    })
}

fn prefixed(prefix: &str, msg: String) -> String {
    if msg.starts_with(prefix) {
        msg
    } else {
        format!("{prefix}.{msg}")
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).map_err(|errs| Error::config(errs.join("; ")))
}

/// Everything `train` needs: the spec plus the tokenized documents of the
/// compiled mixture.
pub struct PreparedRun {
    pub spec: TrainSpec,
    pub docs: Vec<Vec<u32>>,
    pub warnings: Vec<Warning>,
}

/// Compile the manifest's mixture, tokenize it with the run's vocabulary
/// and assemble the training spec. The same mixture feeds every phase.
pub fn prepare_run(cfg: &RunConfig, exec: Exec) -> Result<PreparedRun> {
    let vocab = Vocabulary::load(&cfg.vocab_path)?;
    let manifest = MixtureManifest::load(&cfg.manifest_path)?;
    let corpora = mixture::load_corpora(&manifest, &WhitespaceTokenizer)?;
    let compiled = mixture::compile(
        &manifest,
        corpora,
        &CompileOptions {
            seed: rng::child_seed(cfg.seed, "mixture"),
            counter: &WhitespaceTokenizer,
            edu_scores: None,
            edu_threshold: 3.0,
            exec,
        },
    )?;
    if compiled.docs.is_empty() {
        return Err(Error::input("compiled mixture is empty; check the manifest's corpus paths"));
    }
    let docs = crate::par::map(exec, &compiled.docs, |d| vocab.encode(&d.text));
    let spec = TrainSpec {
        timeline: cfg.timeline.clone(),
        encoder: cfg.encoder.clone(),
        optimizer: cfg.optimizer,
        masking: cfg.masking.clone(),
        seed: cfg.seed,
        cls_id: vocab.special_id("[CLS]").expect("validated"),
        sep_id: vocab.special_id("[SEP]").expect("validated"),
        checkpoint_dir: Some(cfg.output_dir.join("checkpoints")),
        exec,
    };
    Ok(PreparedRun {
        spec,
        docs,
        warnings: compiled.warnings,
    })
}

/// Vocabulary size of the built-in toy run.
pub const TOY_VOCAB: usize = 512;

/// A self-contained desk-scale run: the tiny timeline shrunk to
/// `total_steps` with proportionally tiny batches and sequences, a synthetic
/// multilingual corpus, a BPE vocabulary trained on it and a three-layer
/// encoder with the tiny preset's global/local layout.
pub fn toy_run(seed: u64, total_steps: u64, exec: Exec) -> Result<PreparedRun> {
    let corpus = crate::synth::corpus(&crate::synth::SynthSpec {
        seed: rng::child_seed(seed, "toy.corpus"),
        docs_per_lang: 40,
        ..Default::default()
    });
    let texts: Vec<&str> = corpus.iter().map(|d| d.text.as_str()).collect();
    let vocab = crate::tokenize::bpe_train_with(&texts, TOY_VOCAB, &crate::tokenize::DEFAULT_SPECIALS, exec)?;

    let mut timeline = TrainingTimeline::preset(TimelinePreset::Tiny).scaled(total_steps)?;
    timeline.full_batch_tokens = 1024;
    timeline.initial_batch_tokens = 10;
    timeline.stable_seq_len = 32;
    timeline.extension_stage_lengths = vec![48, 64, 80, 96, 112, 128];

    let encoder = EncoderConfig {
        layers: 3,
        hidden: 32,
        intermediate: 48,
        heads: 2,
        vocab_size: vocab.size(),
        max_seq: 128,
        global_layer_period: 3,
        local_window: 16,
        ..EncoderConfig::toy(vocab.size())
    };
    let masking = MaskingPolicy {
        never_mask: vocab.special_ids().into_iter().collect(),
        mask_token_id: vocab.special_id("[MASK]").expect("default specials"),
        ..MaskingPolicy::default()
    };
    let docs = crate::par::map(exec, &corpus, |d| vocab.encode(&d.text));
    Ok(PreparedRun {
        spec: TrainSpec {
            timeline,
            encoder,
            optimizer: OptimizerSettings::for_preset("tiny"),
            masking,
            seed,
            cls_id: vocab.special_id("[CLS]").expect("default specials"),
            sep_id: vocab.special_id("[SEP]").expect("default specials"),
            checkpoint_dir: None,
            exec,
        },
        docs,
        warnings: Vec::new(),
    })
}
