//! Masked-LM training: masking, AdamW, token accounting and the step loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, Checkpoint, EncoderConfig, EncoderParams, Example};
use crate::par::{self, Exec};
use crate::rng;
use crate::schedule::{Phase, TrainingTimeline};
use crate::{Error, Result, Warning};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 1e-5,
        }
    }
}

impl OptimizerSettings {
    /// Defaults for an encoder preset name; large models use a smaller decay.
    pub fn for_preset(name: &str) -> Self {
        let wd = if name.starts_with("large") { 1e-6 } else { 1e-5 };
        OptimizerSettings {
            weight_decay: wd,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("optimizer.{name}: must be in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            errs.push(format!("optimizer.epsilon: must be > 0, got {}", self.epsilon));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            errs.push(format!("optimizer.weight_decay: must be >= 0, got {}", self.weight_decay));
        }
        errs
    }
}

// ---------------------------------------------------------------------------
// Masking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    /// Shares of selected positions replaced by [MASK], by a random token, or kept.
    pub corrupt_split: [f64; 3],
    /// Ids that are never selected.
    pub never_mask: BTreeSet<u32>,
    pub mask_token_id: u32,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            mask_rate: 0.30,
            corrupt_split: [0.8, 0.1, 0.1],
            never_mask: (0..5).collect(),
            mask_token_id: 4,
        }
    }
}

impl MaskingPolicy {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..1.0).contains(&self.mask_rate) {
            errs.push(format!("masking.mask_rate: must be in [0, 1), got {}", self.mask_rate));
        }
        if self.corrupt_split.iter().any(|s| s.is_nan() || *s < 0.0) {
            errs.push("masking.corrupt_split: shares must be >= 0".to_string());
        }
        let sum: f64 = self.corrupt_split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            errs.push(format!("masking.corrupt_split: shares sum to {sum}, not 1"));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }
}

/// Where a sequence sits in the run; keys the per-position randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskKey {
    pub step: u64,
    pub sequence: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Masked {
    pub ids: Vec<u32>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Option<u32>>,
    pub corruption: Vec<Option<Corruption>>,
    pub warnings: Vec<Warning>,
}

/// Select each maskable position with probability `mask_rate` and corrupt it
/// per the split. Every draw is a hash of `(seed, step, sequence, position)`,
/// so results do not depend on which thread masks which sequence.
pub fn apply_masking(
    ids: &[u32],
    policy: &MaskingPolicy,
    vocab_size: u32,
    seed: u64,
    key: MaskKey,
) -> Result<Masked> {
    policy.validate()?;
    if ids.is_empty() {
        return Err(Error::input("apply_masking: empty sequence"));
    }
    let specials: Vec<u32> = policy.never_mask.iter().copied().filter(|&s| s < vocab_size).collect();
    let ordinary = vocab_size as u64 - specials.len() as u64;
    let [mask_share, random_share, _] = policy.corrupt_split;
    let mut out = Masked {
        ids: ids.to_vec(),
        labels: vec![None; ids.len()],
        corruption: vec![None; ids.len()],
        warnings: Vec::new(),
    };
    let mut maskable = 0usize;
    for (pos, &id) in ids.iter().enumerate() {
        if policy.never_mask.contains(&id) {
            continue;
        }
        maskable += 1;
        let k = [key.step, key.sequence, pos as u64];
        if rng::keyed_uniform(seed, &[k[0], k[1], k[2], 0]) >= policy.mask_rate {
            continue;
        }
        let u = rng::keyed_uniform(seed, &[k[0], k[1], k[2], 1]);
        let c = if u < mask_share {
            Corruption::Mask
        } else if u < mask_share + random_share && ordinary > 0 {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        out.ids[pos] = match c {
            Corruption::Mask => policy.mask_token_id,
            Corruption::Random => {
                let mut r = (rng::keyed_u64(seed, &[k[0], k[1], k[2], 2]) % ordinary) as u32;
                for &s in &specials {
                    if s <= r {
                        r += 1;
                    }
                }
                r
            }
            Corruption::Keep => id,
        };
        out.labels[pos] = Some(id);
        out.corruption[pos] = Some(c);
    }
    if maskable == 0 {
        out.warnings
            .push(Warning::new("masking", "sequence has only special tokens; nothing selected"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// AdamW

#[derive(Debug, Clone)]
pub struct AdamW {
    pub settings: OptimizerSettings,
    m: EncoderParams,
    v: EncoderParams,
    t: u64,
}

impl AdamW {
    pub fn new(settings: OptimizerSettings, cfg: &EncoderConfig) -> Self {
        AdamW {
            settings,
            m: EncoderParams::zeros(cfg),
            v: EncoderParams::zeros(cfg),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam update. Norm gains and biases are not decayed.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.t += 1;
        let s = self.settings;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        let g = grads.fields();
        for ((((name, p), (_, _, g)), (_, m)), (_, v)) in params
            .fields_mut()
            .into_iter()
            .zip(g)
            .zip(self.m.fields_mut())
            .zip(self.v.fields_mut())
        {
            let wd = if name.ends_with("norm") || name.ends_with("bias") { 0.0 } else { s.weight_decay };
            for i in 0..p.len() {
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + s.epsilon) + wd * p[i];
                p[i] -= lr * update;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Token accounting

/// Average batch size (tokens per step) per phase, W/S/C/A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseAverages(pub [f64; 4]);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTokens {
    pub steps: u64,
    pub tokens: u64,
    pub avg_batch_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenLedger {
    pub per_phase: BTreeMap<Phase, PhaseTokens>,
}

impl TokenLedger {
    pub fn total_tokens(&self) -> u64 {
        self.per_phase.values().map(|p| p.tokens).sum()
    }

    pub fn tokens(&self, phase: Phase) -> u64 {
        self.per_phase.get(&phase).map_or(0, |p| p.tokens)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("phase\tsteps\ttokens\tavg_batch_tokens\n");
        for (phase, p) in &self.per_phase {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.1}", phase.label(), p.steps, p.tokens, p.avg_batch_tokens);
        }
        let _ = writeln!(out, "total\t\t{}\t", self.total_tokens());
        out
    }
}

/// Tokens per phase as `steps x average batch`.
pub fn account_tokens(timeline: &TrainingTimeline, averages: &PhaseAverages) -> TokenLedger {
    let mut ledger = TokenLedger::default();
    for (phase, &avg) in Phase::ALL.iter().zip(&averages.0) {
        let steps = timeline.phase_range(*phase).end - timeline.phase_range(*phase).start;
        ledger.per_phase.insert(
            *phase,
            PhaseTokens {
                steps,
                tokens: (steps as f64 * avg).round() as u64,
                avg_batch_tokens: avg,
            },
        );
    }
    ledger
}

/// Tokens per phase summed from the scheduled batch size of every step.
pub fn analytic_ledger(timeline: &TrainingTimeline) -> Result<TokenLedger> {
    let mut ledger = TokenLedger::default();
    for phase in Phase::ALL {
        let range = timeline.phase_range(phase);
        let steps = range.end - range.start;
        let tokens = timeline.scheduled_tokens(range)?;
        ledger.per_phase.insert(
            phase,
            PhaseTokens {
                steps,
                tokens,
                avg_batch_tokens: if steps == 0 { 0.0 } else { tokens as f64 / steps as f64 },
            },
        );
    }
    Ok(ledger)
}

// ---------------------------------------------------------------------------
// Data loading

/// Endless stream of `[CLS] tokens [SEP]` sequences over shuffled documents.
/// Long documents continue in the next sequence; the order is reshuffled
/// each time the corpus is exhausted.
pub struct SequenceStream<'a> {
    docs: &'a [Vec<u32>],
    order: Vec<usize>,
    cursor: usize,
    offset: usize,
    epoch: u64,
    seed: u64,
    cls: u32,
    sep: u32,
}

impl<'a> SequenceStream<'a> {
    pub fn new(docs: &'a [Vec<u32>], seed: u64, cls: u32, sep: u32) -> Result<Self> {
        if docs.iter().all(|d| d.is_empty()) {
            return Err(Error::input("training corpus has no tokens"));
        }
        let mut s = SequenceStream {
            docs,
            order: Vec::new(),
            cursor: 0,
            offset: 0,
            epoch: 0,
            seed,
            cls,
            sep,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.docs.len()).filter(|&i| !self.docs[i].is_empty()).collect();
        let mut r = rng::substream(self.seed, &format!("loader.epoch.{}", self.epoch));
        self.order.shuffle(&mut r);
        self.cursor = 0;
        self.offset = 0;
        self.epoch += 1;
    }

    pub fn epochs_started(&self) -> u64 {
        self.epoch
    }

    /// Next sequence of at most `seq_len` ids (`seq_len >= 3`).
    pub fn next_sequence(&mut self, seq_len: usize) -> Vec<u32> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let doc = &self.docs[self.order[self.cursor]];
        let take = (seq_len.max(3) - 2).min(doc.len() - self.offset);
        let mut seq = Vec::with_capacity(take + 2);
        seq.push(self.cls);
        seq.extend_from_slice(&doc[self.offset..self.offset + take]);
        seq.push(self.sep);
        self.offset += take;
        if self.offset >= doc.len() {
            self.cursor += 1;
            self.offset = 0;
        }
        seq
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub timeline: TrainingTimeline,
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerSettings,
    pub masking: MaskingPolicy,
    pub seed: u64,
    pub cls_id: u32,
    pub sep_id: u32,
    pub checkpoint_dir: Option<PathBuf>,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub batch_tokens: u64,
    pub seq_len: u32,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub trace: Vec<TraceRow>,
    /// Built from the tokens actually fed per step.
    pub ledger: TokenLedger,
    pub analytic_ledger: TokenLedger,
    pub checkpoints: Vec<PathBuf>,
    pub params: EncoderParams,
    pub warnings: Vec<Warning>,
}

pub fn format_trace(trace: &[TraceRow]) -> String {
    let mut out = String::from("step\tlr\tbatch_tokens\tseq_len\tloss\n");
    for r in trace {
        let _ = writeln!(out, "{}\t{:e}\t{}\t{}\t{:.6}", r.step, r.lr, r.batch_tokens, r.seq_len, r.loss);
    }
    out
}

/// Steps after which a release checkpoint is written: the ends of the
/// stable, extension and annealing phases.
pub fn checkpoint_steps(timeline: &TrainingTimeline) -> [u64; 3] {
    [timeline.stable_end_step, timeline.decay_start_step, timeline.total_steps]
}

/// Run every step of the timeline over pre-tokenized documents.
pub fn train(spec: &TrainSpec, docs: &[Vec<u32>]) -> Result<TrainOutput> {
    spec.timeline.validate()?;
    spec.encoder.validate()?;
    spec.masking.validate()?;
    let errs = spec.optimizer.violations();
    if !errs.is_empty() {
        return Err(Error::config(errs.join("; ")));
    }
    let mut encoder_cfg = spec.encoder.clone();
    encoder_cfg.rope = spec.timeline.rope_schedule();
    if let Some(s) = spec
        .timeline
        .extension_stage_lengths
        .iter()
        .chain(std::iter::once(&spec.timeline.stable_seq_len))
        .find(|&&s| s as usize > encoder_cfg.max_seq)
    {
        return Err(Error::config(format!(
            "timeline: sequence length {s} exceeds encoder.max_seq {}",
            encoder_cfg.max_seq
        )));
    }

    let mut params = EncoderParams::init(&encoder_cfg, spec.seed)?;
    let mut opt = AdamW::new(spec.optimizer, &encoder_cfg);
    let mask_seed = rng::child_seed(spec.seed, "masking");
    let mut stream = SequenceStream::new(docs, rng::child_seed(spec.seed, "loader"), spec.cls_id, spec.sep_id)?;
    if let Some(dir) = &spec.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let boundaries = checkpoint_steps(&spec.timeline);
    let mut trace = Vec::with_capacity(spec.timeline.total_steps as usize);
    let mut fed: BTreeMap<Phase, (u64, u64)> = BTreeMap::new();
    let mut checkpoints = Vec::new();
    let mut warnings = Vec::new();
    let vocab = encoder_cfg.vocab_size as u32;

    for step in 0..spec.timeline.total_steps {
        let lr = spec.timeline.lr_at(step)?;
        let batch_tokens = spec.timeline.batch_tokens_at(step)?;
        let seq_len = spec.timeline.seq_len_at(step)?;
        let n_seq = (batch_tokens / seq_len as u64).max(1);
        let seqs: Vec<Vec<u32>> = (0..n_seq).map(|_| stream.next_sequence(seq_len as usize)).collect();

        let masked = par::map_range(spec.exec, seqs.len(), |i| {
            apply_masking(&seqs[i], &spec.masking, vocab, mask_seed, MaskKey { step, sequence: i as u64 })
        });
        let mut batch = Vec::with_capacity(seqs.len());
        for m in masked {
            let m = m?;
            batch.push(Example {
                ids: m.ids,
                labels: m.labels,
            });
        }
        let result = encoder::loss_and_grad(&encoder_cfg, &params, &batch, step, spec.exec);
        let (loss, grads) = match result {
            Ok(v) => v,
            Err(Error::Input(msg)) if msg.contains("no labelled") => {
                warnings.push(Warning::new("train", format!("step {step}: nothing masked; update skipped")));
                (f64::NAN, EncoderParams::zeros(&encoder_cfg))
            }
            Err(e) => return Err(e),
        };
        if loss.is_finite() {
            opt.step(&mut params, &grads, lr);
        }
        let phase = spec.timeline.phase_at(step)?;
        let e = fed.entry(phase).or_default();
        e.0 += 1;
        e.1 += seqs.iter().map(|s| s.len() as u64).sum::<u64>();
        trace.push(TraceRow {
            step,
            lr,
            batch_tokens,
            seq_len,
            loss,
        });

        if let Some(dir) = &spec.checkpoint_dir {
            if boundaries.contains(&(step + 1)) {
                let path = dir.join(format!("checkpoint-step{:06}.bin", step + 1));
                Checkpoint {
                    config: encoder_cfg.clone(),
                    step: step + 1,
                    params: params.clone(),
                }
                .save(&path)?;
                checkpoints.push(path);
            }
        }
    }

    let averages = PhaseAverages(Phase::ALL.map(|p| {
        fed.get(&p)
            .map_or(0.0, |&(steps, tokens)| tokens as f64 / steps as f64)
    }));
    Ok(TrainOutput {
        trace,
        ledger: account_tokens(&spec.timeline, &averages),
        analytic_ledger: analytic_ledger(&spec.timeline)?,
        checkpoints,
        params,
        warnings,
    })
}

/// Mean of the first and last `window` finite losses of a trace.
pub fn loss_endpoints(trace: &[TraceRow], window: usize) -> Option<(f64, f64)> {
    let losses: Vec<f64> = trace.iter().map(|r| r.loss).filter(|l| l.is_finite()).collect();
    if losses.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..window]), mean(&losses[losses.len() - window..])))
}

/// Write the loss trace and ledgers of a finished run into `dir`.
pub fn write_outputs(out: &TrainOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("loss_trace.tsv", format_trace(&out.trace)),
        ("token_ledger.tsv", out.ledger.to_tsv()),
        ("token_ledger_analytic.tsv", out.analytic_ledger.to_tsv()),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimizer_defaults() {
        let o = OptimizerSettings::for_preset("base");
        assert_eq!((o.beta1, o.beta2, o.epsilon, o.weight_decay), (0.9, 0.98, 1e-6, 1e-5));
        assert_eq!(OptimizerSettings::for_preset("large").weight_decay, 1e-6);
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let policy = MaskingPolicy {
            mask_rate: 0.0,
            ..MaskingPolicy::default()
        };
        let ids: Vec<u32> = (5..105).collect();
        let m = apply_masking(&ids, &policy, 200, 1, MaskKey::default()).unwrap();
        assert_eq!(m.ids, ids);
        assert!(m.labels.iter().all(Option::is_none));
    }

    #[test]
    fn only_specials_warns() {
        let m = apply_masking(&[2, 3, 4], &MaskingPolicy::default(), 100, 1, MaskKey::default()).unwrap();
        assert_eq!(m.ids, vec![2, 3, 4]);
        assert_eq!(m.warnings.len(), 1);
        assert!(apply_masking(&[], &MaskingPolicy::default(), 100, 1, MaskKey::default()).is_err());
    }

    #[test]
    fn random_replacements_avoid_specials() {
        let ids: Vec<u32> = vec![9; 20_000];
        let policy = MaskingPolicy {
            mask_rate: 0.99,
            corrupt_split: [0.0, 1.0, 0.0],
            ..MaskingPolicy::default()
        };
        let m = apply_masking(&ids, &policy, 12, 5, MaskKey::default()).unwrap();
        let seen: BTreeSet<u32> = m.ids.iter().copied().collect();
        assert!(seen.iter().all(|&i| (5..12).contains(&i)));
        assert_eq!(seen.len(), 7);
    }

    #[test]
    fn zero_lr_zero_decay_is_identity() {
        let cfg = EncoderConfig::toy(30);
        let mut p = EncoderParams::init(&cfg, 3).unwrap();
        let before = p.clone();
        let mut g = EncoderParams::init(&cfg, 4).unwrap();
        g.scale(10.0);
        let mut opt = AdamW::new(
            OptimizerSettings {
                weight_decay: 0.0,
                ..OptimizerSettings::default()
            },
            &cfg,
        );
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn tiny_ledger_examples() {
        let t = TrainingTimeline::default();
        let l = account_tokens(&t, &PhaseAverages([1.6e6, 3.3e6, 3.2e6, 4.4e6]));
        assert_eq!(l.per_phase[&Phase::Warmup].steps, 4002);
        assert_eq!(l.tokens(Phase::Warmup), 6_403_200_000);
        assert_eq!(l.tokens(Phase::Stable), 373_883_400_000);
        let zero = account_tokens(&t, &PhaseAverages([0.0; 4]));
        assert_eq!(zero.total_tokens(), 0);
    }

    #[test]
    fn analytic_ledger_sums_schedule() {
        let t = TrainingTimeline::default().scaled(500).unwrap();
        let l = analytic_ledger(&t).unwrap();
        let direct: u64 = (0..t.total_steps).map(|s| t.batch_tokens_at(s).unwrap()).sum();
        assert_eq!(l.total_tokens(), direct);
    }

    #[test]
    fn stream_reshuffles_and_continues() {
        let docs = vec![vec![10, 11, 12, 13, 14], vec![20]];
        let mut s = SequenceStream::new(&docs, 1, 2, 3).unwrap();
        let mut seen = 0;
        for _ in 0..10 {
            let seq = s.next_sequence(4);
            assert!(seq.len() <= 4 && seq[0] == 2 && *seq.last().unwrap() == 3);
            seen += seq.len() - 2;
        }
        assert!(s.epochs_started() > 1);
        assert!(seen > 6);
        assert!(SequenceStream::new(&[vec![]], 1, 2, 3).is_err());
    }
}
