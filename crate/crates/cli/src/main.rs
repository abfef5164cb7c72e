use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pretrain_core::config::{self, parse_config, prepare_run, PreparedRun};
use pretrain_core::cost::{self, CostInputs};
use pretrain_core::encoder::{EncoderConfig, EncoderPreset};
use pretrain_core::mixture::{
    self, audit_distribution, read_jsonl, sample_context_extension_with, write_jsonl, CompileOptions, Lang,
    ManifestKind, MixtureManifest, DEFAULT_EDU_THRESHOLD,
};
use pretrain_core::par::Exec;
use pretrain_core::retrieval::{self, RankedRun};
use pretrain_core::schedule::{TimelinePreset, TrainingTimeline};
use pretrain_core::tokenize::{self, TokenCount, Vocabulary, WhitespaceTokenizer, DEFAULT_SPECIALS};
use pretrain_core::trainer::{self, apply_masking, Corruption, MaskKey, MaskingPolicy};
use pretrain_core::{fixtures, rng, synth, Error, Result, Warning};

/// Encoder pretraining toolkit: vocabulary planning, BPE, data mixtures,
/// schedules, toy MLM training, cost estimates and nDCG evaluation.
#[derive(Parser, Debug)]
#[command(name = "pretrain", version, arg_required_else_help = true)]
struct Cli {
    /// Root seed; every module derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Base directory for written outputs.
    #[arg(long, global = true, env = "PRETRAIN_OUTPUT_DIR", hide_env_values = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "PRETRAIN_THREADS", hide_env_values = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Round a predicted vocabulary size up to a multiple of 64.
    PlanVocab(PlanVocabArgs),
    /// Train a byte-level BPE vocabulary.
    BpeTrain(BpeTrainArgs),
    /// Tokens per whitespace word, per language.
    Fertility(FertilityArgs),
    /// Inspect the training schedule.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    /// Data mixture tools.
    #[command(subcommand)]
    Mix(MixCommand),
    /// Measure masking selection rate and corruption split.
    MaskStats(MaskStatsArgs),
    /// Train a desk-scale encoder and write its loss trace.
    TrainToy(TrainToyArgs),
    /// Energy, CO2 and price estimates for training runs.
    Cost(CostArgs),
    /// Mean nDCG@k of a TREC run against qrels.
    EvalNdcg(EvalNdcgArgs),
}

#[derive(Args, Debug)]
struct PlanVocabArgs {
    /// Predicted optimal vocabulary size.
    #[arg(required_unless_present = "preset")]
    predicted: Option<u64>,
    /// Predict from the shipped fit for a model size instead.
    #[arg(long, value_enum, conflicts_with = "predicted")]
    preset: Option<PresetArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Tiny,
    Base,
    Large,
}

impl PresetArg {
    fn encoder(self) -> EncoderPreset {
        match self {
            PresetArg::Tiny => EncoderPreset::Tiny,
            PresetArg::Base => EncoderPreset::Base,
            PresetArg::Large => EncoderPreset::Large,
        }
    }

    fn timeline(self) -> TimelinePreset {
        match self {
            PresetArg::Tiny => TimelinePreset::Tiny,
            PresetArg::Base => TimelinePreset::Base,
            PresetArg::Large => TimelinePreset::Large,
        }
    }
}

#[derive(Args, Debug)]
struct BpeTrainArgs {
    /// JSONL corpus files (id, lang, text per line).
    #[arg(long = "corpus", required_unless_present = "synthetic_bytes")]
    corpus: Vec<PathBuf>,
    /// Train on a generated multilingual corpus of this many bytes instead.
    #[arg(long, conflicts_with = "corpus")]
    synthetic_bytes: Option<usize>,
    /// Target vocabulary size including specials and the 256 byte tokens.
    #[arg(long)]
    vocab_size: usize,
    /// Output vocabulary file [default: <output-dir>/vocab.txt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FertilityArgs {
    /// Vocabulary file from `bpe-train`.
    #[arg(long, required_unless_present = "whitespace")]
    vocab: Option<PathBuf>,
    /// Count whitespace words instead (fertility 1 by construction).
    #[arg(long, conflicts_with = "vocab")]
    whitespace: bool,
    /// JSONL corpus files.
    #[arg(long = "corpus", required = true)]
    corpus: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ScheduleCommand {
    /// Per-step lr, batch tokens, sequence length and global rotary base as TSV.
    Dump(ScheduleDumpArgs),
}

#[derive(Args, Debug)]
struct ScheduleDumpArgs {
    /// Model size whose learning rates to use.
    #[arg(long, value_enum, default_value = "tiny")]
    preset: PresetArg,
    /// Rescale the timeline to this many steps, keeping phase fractions.
    #[arg(long)]
    total_steps: Option<u64>,
    /// Print every n-th step (the last step is always printed).
    #[arg(long, default_value_t = 1)]
    every: u64,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum MixCommand {
    /// Dedup, scrub, filter and oversample a manifest's corpora into one JSONL.
    Build(MixBuildArgs),
    /// Per-language token shares of a manifest.
    Audit(MixAuditArgs),
    /// Sample long-context data to the length-bucket targets.
    SampleExt(SampleExtArgs),
    /// Build an annealing mix; edu-filtered datasets need scores.
    Anneal(MixBuildArgs),
}

#[derive(Args, Debug)]
struct MixBuildArgs {
    /// Mixture manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Sidecar file of `id<TAB>score` lines for edu filtering.
    #[arg(long)]
    edu_scores: Option<PathBuf>,
    /// Minimum edu score kept (inclusive).
    #[arg(long, default_value_t = DEFAULT_EDU_THRESHOLD)]
    edu_threshold: f64,
    /// Output JSONL [default: <output-dir>/mixture.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MixAuditArgs {
    /// Mixture manifest (TOML).
    #[arg(long, required_unless_present = "fixture")]
    manifest: Option<PathBuf>,
    /// Audit a shipped reference manifest instead.
    #[arg(long, value_enum, conflicts_with = "manifest")]
    fixture: Option<FixtureArg>,
    /// Also print the share of this dataset name.
    #[arg(long)]
    source: Option<String>,
    /// Restrict --source to one language code.
    #[arg(long, requires = "source")]
    lang: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FixtureArg {
    Pretrain,
    AnnealBaseline,
    AnnealEdu,
    ContextExtension,
}

#[derive(Args, Debug)]
struct SampleExtArgs {
    /// JSONL corpus to sample from.
    #[arg(long = "corpus", required = true)]
    corpus: Vec<PathBuf>,
    /// Cap on output documents.
    #[arg(long)]
    max_docs: Option<usize>,
    /// Output JSONL [default: <output-dir>/context_extension.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskStatsArgs {
    /// Vocabulary file; with --corpus, masks the encoded corpus.
    #[arg(long, requires = "corpus")]
    vocab: Option<PathBuf>,
    /// JSONL corpus files.
    #[arg(long = "corpus", requires = "vocab")]
    corpus: Vec<PathBuf>,
    /// Synthetic maskable tokens to draw when no corpus is given.
    #[arg(long, default_value_t = 100_000)]
    tokens: usize,
    /// Vocabulary size for synthetic ids.
    #[arg(long, default_value_t = 1000)]
    vocab_size: u32,
    /// Selection probability per maskable token.
    #[arg(long, default_value_t = 0.30)]
    mask_rate: f64,
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    /// Run config (TOML); without it a built-in synthetic run is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Steps of the built-in run.
    #[arg(long, default_value_t = 200, conflicts_with = "config")]
    steps: u64,
    /// Output directory [default: <output-dir>, else the config's, else ./out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write checkpoints at the phase boundaries.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// File of `name wall_hours` rows.
    #[arg(long, required_unless_present = "wall_hours")]
    runs: Option<PathBuf>,
    /// Single run wall time in hours.
    #[arg(long, conflicts_with = "runs")]
    wall_hours: Option<f64>,
    /// Rated power per GPU in watts.
    #[arg(long, default_value_t = 560.0)]
    e_gpu: f64,
    #[arg(long, default_value_t = 32)]
    n_gpus: u32,
    /// Power usage effectiveness.
    #[arg(long, default_value_t = 1.04)]
    pue: f64,
    /// kg CO2 per kWh.
    #[arg(long, default_value_t = 0.004)]
    carbon_intensity: f64,
    /// Price per reference-GPU hour.
    #[arg(long, default_value_t = 1.67)]
    price_per_gpu_hour: f64,
    /// Target peak FLOPs over reference peak FLOPs.
    #[arg(long, default_value_t = 163.4 / 95.7)]
    perf_ratio: f64,
    /// Currency label for the price column.
    #[arg(long, default_value = "EUR")]
    currency: String,
    /// Tab-separated output instead of an aligned table.
    #[arg(long)]
    tsv: bool,
}

#[derive(Args, Debug)]
struct EvalNdcgArgs {
    /// TREC run file: qid Q0 docid rank score tag.
    #[arg(long)]
    run: PathBuf,
    /// TREC qrels file: qid 0 docid rel.
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Print each query's score before the mean.
    #[arg(long)]
    per_query: bool,
}

struct Ctx {
    seed: u64,
    output_dir: Option<PathBuf>,
    exec: Exec,
}

impl Ctx {
    fn out_path(&self, explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.output_dir.clone().unwrap_or_else(|| PathBuf::from(".")).join(default_name))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = match setup_threads(cli.threads) {
        Ok(e) => e,
        Err(e) => return fail(&e),
    };
    let ctx = Ctx {
        seed: cli.seed,
        output_dir: cli.output_dir,
        exec,
    };
    match run(cli.command, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let msg = e.to_string();
    let kind = e.kind();
    let body = msg.strip_prefix(&format!("{kind}: ")).unwrap_or(&msg);
    eprintln!("error: {kind}: {}", body.replace('\n', " "));
    ExitCode::from(1)
}

fn setup_threads(threads: Option<usize>) -> Result<Exec> {
    match threads {
        Some(0) => Err(Error::config("threads: must be >= 1")),
        Some(1) => Ok(Exec::Sequential),
        #[cfg(feature = "parallel")]
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::config(format!("threads: {e}")))?;
            Ok(Exec::Parallel)
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(Exec::Sequential),
        None => Ok(Exec::default()),
    }
}

fn warn_all(warnings: &[Warning]) {
    for w in warnings {
        eprintln!("warning: {}: {}", w.source, w.message);
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn emit(text: &str) -> Result<()> {
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn read_corpora(paths: &[PathBuf]) -> Result<Vec<mixture::Document>> {
    let mut docs = Vec::new();
    for p in paths {
        docs.extend(read_jsonl(p, &WhitespaceTokenizer)?);
    }
    Ok(docs)
}

fn run(command: Command, ctx: &Ctx) -> Result<()> {
    match command {
        Command::PlanVocab(a) => plan_vocab(a),
        Command::BpeTrain(a) => bpe_train(a, ctx),
        Command::Fertility(a) => fertility(a, ctx),
        Command::Schedule(ScheduleCommand::Dump(a)) => schedule_dump(a),
        Command::Mix(MixCommand::Build(a)) => mix_build(a, ctx, false),
        Command::Mix(MixCommand::Anneal(a)) => mix_build(a, ctx, true),
        Command::Mix(MixCommand::Audit(a)) => mix_audit(a),
        Command::Mix(MixCommand::SampleExt(a)) => sample_ext(a, ctx),
        Command::MaskStats(a) => mask_stats(a, ctx),
        Command::TrainToy(a) => train_toy(a, ctx),
        Command::Cost(a) => cost_cmd(a),
        Command::EvalNdcg(a) => eval_ndcg(a, ctx),
    }
}

fn plan_vocab(a: PlanVocabArgs) -> Result<()> {
    let predicted = match (a.predicted, a.preset) {
        (Some(p), _) => p,
        (None, Some(preset)) => {
            let fit = tokenize::AnchoredPowerFit::fixture();
            let budget = tokenize::fixture_flops_budget(&EncoderConfig::preset(preset.encoder()));
            tokenize::predict_optimal_vocab(budget, tokenize::FIXTURE_DATA_BUDGET, Some(&fit))?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    println!("{}", tokenize::plan_vocab(predicted)?);
    Ok(())
}

fn bpe_train(a: BpeTrainArgs, ctx: &Ctx) -> Result<()> {
    let docs = match a.synthetic_bytes {
        Some(n) => synth::corpus_of_bytes(rng::child_seed(ctx.seed, "bpe.synthetic"), n),
        None => read_corpora(&a.corpus)?,
    };
    let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
    let vocab = tokenize::bpe_train_with(&texts, a.vocab_size, &DEFAULT_SPECIALS, ctx.exec)?;
    let out = ctx.out_path(a.out, "vocab.txt");
    vocab.save(&out)?;
    println!(
        "vocab\t{}\nsize\t{}\nmerges\t{}\ndocuments\t{}",
        out.display(),
        vocab.size(),
        vocab.num_merges(),
        docs.len()
    );
    Ok(())
}

fn fertility(a: FertilityArgs, ctx: &Ctx) -> Result<()> {
    let docs = read_corpora(&a.corpus)?;
    let vocab;
    let counter: &dyn TokenCount = match &a.vocab {
        Some(p) => {
            vocab = Vocabulary::load(p)?;
            &vocab
        }
        None => &WhitespaceTokenizer,
    };
    let report = tokenize::fertility_with(counter, &docs, ctx.exec);
    warn_all(&report.warnings);
    emit(&report.to_tsv())
}

fn schedule_dump(a: ScheduleDumpArgs) -> Result<()> {
    let mut t = TrainingTimeline::preset(a.preset.timeline());
    if let Some(n) = a.total_steps {
        t = t.scaled(n)?;
    }
    let text = t.dump(a.every)?;
    match a.out {
        Some(p) => write_file(&p, &text),
        None => emit(&text),
    }
}

fn mix_build(a: MixBuildArgs, ctx: &Ctx, anneal: bool) -> Result<()> {
    let manifest = MixtureManifest::load(&a.manifest)?;
    if anneal && !matches!(manifest.kind, ManifestKind::AnnealingBaseline | ManifestKind::AnnealingEdu) {
        return Err(Error::config(format!(
            "{}: kind must be annealing_baseline or annealing_edu for `mix anneal`",
            a.manifest.display()
        )));
    }
    let needs_scores = manifest.entries.iter().any(|e| e.spec.edu_filter);
    if anneal && needs_scores && a.edu_scores.is_none() {
        return Err(Error::config("edu_scores: required, the manifest has edu-filtered datasets"));
    }
    let scores = a
        .edu_scores
        .as_deref()
        .map(|p| read_file(p).and_then(|t| mixture::parse_edu_scores(&t)))
        .transpose()?;
    let corpora = mixture::load_corpora(&manifest, &WhitespaceTokenizer)?;
    let compiled = mixture::compile(
        &manifest,
        corpora,
        &CompileOptions {
            seed: rng::child_seed(ctx.seed, "mixture"),
            counter: &WhitespaceTokenizer,
            edu_scores: scores.as_ref(),
            edu_threshold: a.edu_threshold,
            exec: ctx.exec,
        },
    )?;
    warn_all(&compiled.warnings);
    let out = ctx.out_path(a.out, if anneal { "annealing.jsonl" } else { "mixture.jsonl" });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&out, &compiled.docs)?;
    let mut text = String::from("dataset\tprocessed_tokens\tfinal_tokens\n");
    for e in &compiled.manifest.entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.spec.name, e.processed_tokens, e.final_tokens));
    }
    text.push('\n');
    text.push_str(&audit_distribution(&compiled.manifest).to_tsv());
    emit(&text)
}

fn mix_audit(a: MixAuditArgs) -> Result<()> {
    let manifest = match (a.manifest, a.fixture) {
        (Some(p), _) => MixtureManifest::load(&p)?,
        (None, Some(FixtureArg::Pretrain)) => fixtures::pretrain_manifest()?,
        (None, Some(FixtureArg::AnnealBaseline)) => fixtures::anneal_baseline_manifest()?,
        (None, Some(FixtureArg::AnnealEdu)) => fixtures::anneal_edu_manifest()?,
        (None, Some(FixtureArg::ContextExtension)) => fixtures::context_extension_manifest()?,
        (None, None) => unreachable!("clap requires one of them"),
    };
    for e in manifest.inconsistent_entries() {
        eprintln!(
            "warning: audit: '{}' final tokens {} differ from processed x factor",
            e.spec.name, e.final_tokens
        );
    }
    let mut text = audit_distribution(&manifest).to_tsv();
    if let Some(name) = a.source {
        let lang = a.lang.as_deref().map(str::parse::<Lang>).transpose()?;
        let share = mixture::source_share(&manifest, &name, lang);
        text.push_str(&format!("\nsource\t{name}\t{share:.2}\n"));
    }
    emit(&text)
}

fn sample_ext(a: SampleExtArgs, ctx: &Ctx) -> Result<()> {
    let docs = read_corpora(&a.corpus)?;
    let targets = mixture::default_length_targets();
    let seed = rng::child_seed(ctx.seed, "sample-ext");
    let sample = sample_context_extension_with(&docs, &targets, seed, a.max_docs, ctx.exec)?;
    warn_all(&sample.warnings);
    let out = ctx.out_path(a.out, "context_extension.jsonl");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&out, &sample.docs)?;
    emit(&sample.report())
}

fn mask_stats(a: MaskStatsArgs, ctx: &Ctx) -> Result<()> {
    let policy = MaskingPolicy {
        mask_rate: a.mask_rate,
        ..MaskingPolicy::default()
    };
    let (sequences, vocab_size, policy) = match &a.vocab {
        Some(p) => {
            let vocab = Vocabulary::load(p)?;
            let docs = read_corpora(&a.corpus)?;
            let seqs: Vec<Vec<u32>> = docs.iter().map(|d| vocab.encode(&d.text)).filter(|s| !s.is_empty()).collect();
            let policy = MaskingPolicy {
                never_mask: vocab.special_ids().into_iter().collect(),
                mask_token_id: vocab.special_id("[MASK]").unwrap_or(policy.mask_token_id),
                ..policy
            };
            (seqs, vocab.size() as u32, policy)
        }
        None => {
            if a.vocab_size <= policy.never_mask.len() as u32 {
                return Err(Error::config("vocab_size: must exceed the number of special ids"));
            }
            let ids_seed = rng::child_seed(ctx.seed, "mask-stats.ids");
            let first = policy.never_mask.len() as u64;
            let ordinary = a.vocab_size as u64 - first;
            let ids: Vec<u32> = (0..a.tokens as u64)
                .map(|i| (first + rng::keyed_u64(ids_seed, &[i]) % ordinary) as u32)
                .collect();
            (ids.chunks(512).map(<[u32]>::to_vec).collect(), a.vocab_size, policy)
        }
    };
    let seed = rng::child_seed(ctx.seed, "masking");
    let masked = pretrain_core::par::map_range(ctx.exec, sequences.len(), |i| {
        apply_masking(&sequences[i], &policy, vocab_size, seed, MaskKey { step: 0, sequence: i as u64 })
    });
    let (mut maskable, mut selected, mut specials_selected) = (0usize, 0usize, 0usize);
    let mut split = [0usize; 3];
    for (seq, m) in sequences.iter().zip(masked) {
        let m = m?;
        warn_all(&m.warnings);
        for (id, c) in seq.iter().zip(&m.corruption) {
            if policy.never_mask.contains(id) {
                specials_selected += c.is_some() as usize;
                continue;
            }
            maskable += 1;
            if let Some(c) = c {
                selected += 1;
                split[match c {
                    Corruption::Mask => 0,
                    Corruption::Random => 1,
                    Corruption::Keep => 2,
                }] += 1;
            }
        }
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    emit(&format!(
        "maskable_tokens\t{maskable}\nselected\t{selected}\nselection_rate\t{:.4}\nmask_share\t{:.4}\nrandom_share\t{:.4}\nkeep_share\t{:.4}\nspecials_selected\t{specials_selected}\n",
        frac(selected, maskable),
        frac(split[0], selected),
        frac(split[1], selected),
        frac(split[2], selected),
    ))
}

fn train_toy(a: TrainToyArgs, ctx: &Ctx) -> Result<()> {
    let (prepared, out_dir): (PreparedRun, PathBuf) = match &a.config {
        Some(path) => {
            let mut cfg = parse_config(path)?;
            if let Some(dir) = &ctx.output_dir {
                cfg.output_dir = dir.clone();
            }
            if let Some(dir) = &a.out {
                cfg.output_dir = dir.clone();
            }
            let out = cfg.output_dir.clone();
            (prepare_run(&cfg, ctx.exec)?, out)
        }
        None => {
            let out = a
                .out
                .clone()
                .or_else(|| ctx.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            (config::toy_run(ctx.seed, a.steps, ctx.exec)?, out)
        }
    };
    warn_all(&prepared.warnings);
    let mut spec = prepared.spec;
    spec.checkpoint_dir = if a.checkpoints || a.config.is_some() {
        Some(out_dir.join("checkpoints"))
    } else {
        None
    };
    let result = trainer::train(&spec, &prepared.docs)?;
    warn_all(&result.warnings);
    let files = trainer::write_outputs(&result, &out_dir)?;
    let mut text = format!("steps\t{}\n", result.trace.len());
    if let Some((start, end)) = trainer::loss_endpoints(&result.trace, 10.min(result.trace.len())) {
        text.push_str(&format!("start_loss\t{start:.6}\nend_loss\t{end:.6}\n"));
    }
    for f in files.iter().chain(&result.checkpoints) {
        text.push_str(&format!("wrote\t{}\n", f.display()));
    }
    emit(&text)
}

fn cost_cmd(a: CostArgs) -> Result<()> {
    let inputs = CostInputs {
        e_gpu: a.e_gpu,
        n_gpus: a.n_gpus,
        wall_hours: 0.0,
        pue: a.pue,
        carbon_intensity: a.carbon_intensity,
        price_per_gpu_hour: a.price_per_gpu_hour,
        perf_ratio: a.perf_ratio,
        currency: a.currency,
    };
    let runs = match (&a.runs, a.wall_hours) {
        (Some(p), _) => cost::parse_runs(&read_file(p)?)?,
        (None, Some(h)) => vec![("run".to_string(), h)],
        (None, None) => unreachable!("clap requires one of them"),
    };
    let report = cost::batch_report(&runs, &inputs)?;
    emit(&if a.tsv { report.to_tsv() } else { report.to_table() })
}

fn eval_ndcg(a: EvalNdcgArgs, ctx: &Ctx) -> Result<()> {
    let qrels = retrieval::parse_trec_qrels(&read_file(&a.qrels)?)?;
    let run = RankedRun {
        per_query: retrieval::parse_trec_run(&read_file(&a.run)?)?,
        qrels,
    };
    let per_query = retrieval::per_query_ndcg(&run, a.k, ctx.exec)?;
    let mut text = String::new();
    if a.per_query {
        for (q, s) in &per_query {
            text.push_str(&format!("{q}\t{s:.4}\n"));
        }
    }
    let mean = per_query.iter().map(|(_, s)| s).sum::<f64>() / per_query.len() as f64;
    text.push_str(&format!("ndcg@{}\t{mean:.4}\nqueries\t{}\n", a.k, per_query.len()));
    emit(&text)
}
