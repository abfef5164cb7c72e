//! Step-indexed training schedules.
//!
//! A run is split into a stable phase (LR warmup, batch warmup, constant LR),
//! a context-extension phase with a second, lower constant LR and staged
//! sequence-length growth, and a short annealing phase where the LR falls as
//! `peak * (1 - sqrt(progress))`. The global-attention rotary base switches
//! from 1e4 to 1e6 when context extension begins.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of sequence-length stages in the context-extension phase.
pub const EXTENSION_STAGES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingTimeline {
    pub total_steps: u64,
    pub lr_warmup_steps: u64,
    pub batch_warmup_steps: u64,
    /// First step of the context-extension phase.
    pub stable_end_step: u64,
    /// First step of the annealing (LR decay) phase.
    pub decay_start_step: u64,
    pub stable_lr: f64,
    pub extension_lr: f64,
    pub full_batch_tokens: u64,
    pub initial_batch_tokens: u64,
    pub extension_stage_lengths: Vec<u32>,
    pub stable_seq_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    /// Batch-size warmup, `[0, batch_warmup_steps)`.
    Warmup,
    /// Remainder of the stable phase, `[batch_warmup_steps, stable_end_step)`.
    Stable,
    ContextExtension,
    Annealing,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Warmup,
        Phase::Stable,
        Phase::ContextExtension,
        Phase::Annealing,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Warmup => "W",
            Phase::Stable => "S",
            Phase::ContextExtension => "C",
            Phase::Annealing => "A",
        }
    }
}

/// Model-size presets sharing the 138k-step timeline but differing in LRs
/// and final context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimelinePreset {
    Tiny,
    Base,
    Large,
}

impl TimelinePreset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::Tiny),
            "base" => Some(Self::Base),
            "large" => Some(Self::Large),
            _ => None,
        }
    }

    /// (stable LR, extension LR)
    pub fn learning_rates(self) -> (f64, f64) {
        match self {
            Self::Tiny => (8e-4, 5e-4),
            Self::Base => (5e-4, 3e-4),
            Self::Large => (3e-4, 5e-5),
        }
    }
}

impl Default for TrainingTimeline {
    fn default() -> Self {
        Self::preset(TimelinePreset::Tiny)
    }
}

impl TrainingTimeline {
    pub fn preset(preset: TimelinePreset) -> Self {
        let (stable_lr, extension_lr) = preset.learning_rates();
        TrainingTimeline {
            total_steps: 138_000,
            lr_warmup_steps: 1_380,
            batch_warmup_steps: 4_002,
            stable_end_step: 117_300,
            decay_start_step: 133_860,
            stable_lr,
            extension_lr,
            full_batch_tokens: 3_300_000,
            initial_batch_tokens: 33_000,
            extension_stage_lengths: vec![2048, 4096, 6144, 8192, 12288, 16384],
            stable_seq_len: 1024,
        }
    }

    /// Shrink the step counts to `total_steps` while keeping each phase's
    /// share of the run. Batch and sequence settings are left untouched.
    pub fn scaled(&self, total_steps: u64) -> Result<Self> {
        if total_steps < 20 {
            return Err(Error::config(format!(
                "timeline.total_steps: {total_steps} too small to hold all phases (need >= 20)"
            )));
        }
        let frac = |s: u64| s as f64 / self.total_steps as f64;
        let at = |s: u64| (frac(s) * total_steps as f64).round() as u64;
        let lr_warmup = at(self.lr_warmup_steps).max(1);
        let batch_warmup = at(self.batch_warmup_steps).max(lr_warmup);
        let stable_end = at(self.stable_end_step).max(batch_warmup + 1);
        let decay_start = at(self.decay_start_step).max(stable_end + 1);
        let scaled = TrainingTimeline {
            total_steps,
            lr_warmup_steps: lr_warmup,
            batch_warmup_steps: batch_warmup,
            stable_end_step: stable_end,
            decay_start_step: decay_start.min(total_steps - 1),
            ..self.clone()
        };
        scaled.validate()?;
        Ok(scaled)
    }

    /// Check every structural invariant, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }

    /// Invariant violations as `field: message` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.lr_warmup_steps == 0 {
            errs.push("lr_warmup_steps: must be > 0".to_string());
        }
        if self.lr_warmup_steps > self.batch_warmup_steps {
            errs.push("lr_warmup_steps: must be <= batch_warmup_steps".to_string());
        }
        if self.batch_warmup_steps >= self.stable_end_step {
            errs.push("batch_warmup_steps: must be < stable_end_step".to_string());
        }
        if self.stable_end_step >= self.decay_start_step {
            errs.push("stable_end_step: must be < decay_start_step".to_string());
        }
        if self.decay_start_step >= self.total_steps {
            errs.push("decay_start_step: must be < total_steps".to_string());
        }
        if !(self.stable_lr.is_finite() && self.stable_lr >= 0.0) {
            errs.push("stable_lr: must be finite and >= 0".to_string());
        }
        if !(self.extension_lr.is_finite() && self.extension_lr >= 0.0) {
            errs.push("extension_lr: must be finite and >= 0".to_string());
        }
        if self.full_batch_tokens == 0 {
            errs.push("full_batch_tokens: must be > 0".to_string());
        }
        if self.initial_batch_tokens == 0 || self.initial_batch_tokens > self.full_batch_tokens {
            errs.push("initial_batch_tokens: must be in (0, full_batch_tokens]".to_string());
        }
        if self.stable_seq_len == 0 {
            errs.push("stable_seq_len: must be > 0".to_string());
        }
        let stages = &self.extension_stage_lengths;
        if stages.len() != EXTENSION_STAGES {
            errs.push(format!(
                "extension_stage_lengths: expected {EXTENSION_STAGES} entries, got {}",
                stages.len()
            ));
        }
        if stages.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("extension_stage_lengths: must be strictly increasing".to_string());
        }
        if stages.first().is_some_and(|&s| s <= self.stable_seq_len) {
            errs.push("extension_stage_lengths: first stage must exceed stable_seq_len".to_string());
        }
        errs
    }

    fn check(&self, step: u64) -> Result<()> {
        if step > self.total_steps {
            Err(Error::StepRange {
                step,
                total: self.total_steps,
            })
        } else {
            Ok(())
        }
    }

    pub fn phase_at(&self, step: u64) -> Result<Phase> {
        self.check(step)?;
        Ok(if step < self.batch_warmup_steps {
            Phase::Warmup
        } else if step < self.stable_end_step {
            Phase::Stable
        } else if step < self.decay_start_step {
            Phase::ContextExtension
        } else {
            Phase::Annealing
        })
    }

    /// Half-open step range of a phase.
    pub fn phase_range(&self, phase: Phase) -> std::ops::Range<u64> {
        match phase {
            Phase::Warmup => 0..self.batch_warmup_steps,
            Phase::Stable => self.batch_warmup_steps..self.stable_end_step,
            Phase::ContextExtension => self.stable_end_step..self.decay_start_step,
            Phase::Annealing => self.decay_start_step..self.total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.check(step)?;
        let lr = if step < self.lr_warmup_steps {
            self.stable_lr * step as f64 / self.lr_warmup_steps as f64
        } else if step < self.stable_end_step {
            self.stable_lr
        } else if step < self.decay_start_step {
            self.extension_lr
        } else {
            let progress = (step - self.decay_start_step) as f64
                / (self.total_steps - self.decay_start_step) as f64;
            self.extension_lr * (1.0 - progress.sqrt())
        };
        Ok(lr)
    }

    pub fn batch_tokens_at(&self, step: u64) -> Result<u64> {
        self.check(step)?;
        if step >= self.batch_warmup_steps {
            return Ok(self.full_batch_tokens);
        }
        let span = (self.full_batch_tokens - self.initial_batch_tokens) as f64;
        let t = step as f64 / self.batch_warmup_steps as f64;
        Ok((self.initial_batch_tokens as f64 + span * t).round() as u64)
    }

    /// Steps per extension stage; the last stage also takes the remainder.
    pub fn extension_stage_steps(&self) -> u64 {
        (self.total_steps - self.stable_end_step) / EXTENSION_STAGES as u64
    }

    pub fn seq_len_at(&self, step: u64) -> Result<u32> {
        self.check(step)?;
        if step < self.stable_end_step {
            return Ok(self.stable_seq_len);
        }
        let per_stage = self.extension_stage_steps().max(1);
        let stage = ((step - self.stable_end_step) / per_stage) as usize;
        let last = self.extension_stage_lengths.len() - 1;
        Ok(self.extension_stage_lengths[stage.min(last)])
    }

    pub fn rope_schedule(&self) -> RoPEBaseSchedule {
        RoPEBaseSchedule {
            switch_step: self.stable_end_step,
            ..RoPEBaseSchedule::default()
        }
    }

    /// Rotary base for a layer kind at a step, range-checked against this timeline.
    pub fn rope_base_at(&self, step: u64, kind: LayerKind) -> Result<f64> {
        self.check(step)?;
        Ok(self.rope_schedule().base_at(step, kind))
    }

    /// Sum of `batch_tokens_at` over a half-open step range.
    pub fn scheduled_tokens(&self, steps: std::ops::Range<u64>) -> Result<u64> {
        steps.map(|s| self.batch_tokens_at(s)).sum()
    }

    /// Per-step table as tab-separated text: step, lr, batch_tokens, seq_len, global_rope_base.
    pub fn dump(&self, every: u64) -> Result<String> {
        let every = every.max(1);
        let rope = self.rope_schedule();
        let mut out = String::from("step\tlr\tbatch_tokens\tseq_len\tglobal_rope_base\n");
        let mut step = 0;
        loop {
            let _ = writeln!(
                out,
                "{step}\t{:e}\t{}\t{}\t{}",
                self.lr_at(step)?,
                self.batch_tokens_at(step)?,
                self.seq_len_at(step)?,
                rope.base_at(step, LayerKind::Global),
            );
            if step == self.total_steps {
                break;
            }
            step = (step + every).min(self.total_steps);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoPEBaseSchedule {
    pub global_base_stable: f64,
    pub global_base_extended: f64,
    pub switch_step: u64,
    /// Not stated for local layers; the upstream architecture uses 1e4.
    pub local_base: f64,
}

impl Default for RoPEBaseSchedule {
    fn default() -> Self {
        RoPEBaseSchedule {
            global_base_stable: 10_000.0,
            global_base_extended: 1_000_000.0,
            switch_step: 117_300,
            local_base: 10_000.0,
        }
    }
}

impl RoPEBaseSchedule {
    pub fn base_at(&self, step: u64, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::Local => self.local_base,
            LayerKind::Global if step < self.switch_step => self.global_base_stable,
            LayerKind::Global => self.global_base_extended,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainingTimeline {
        TrainingTimeline::default()
    }

    #[test]
    fn default_matches_step_table() {
        let t = tiny();
        t.validate().unwrap();
        assert_eq!(t.total_steps, 138_000);
        assert_eq!(t.lr_warmup_steps, 1_380);
        assert_eq!(t.batch_warmup_steps, 4_002);
        assert_eq!(t.stable_end_step, 117_300);
        assert_eq!(t.decay_start_step, 133_860);
        assert_eq!(t.total_steps - t.decay_start_step, 4_140);
        assert_eq!(t.decay_start_step - t.stable_end_step, 16_560);
        assert_eq!(t.stable_end_step - t.lr_warmup_steps, 115_920);
    }

    #[test]
    fn lr_examples() {
        let t = tiny();
        assert_eq!(t.lr_at(0).unwrap(), 0.0);
        assert_eq!(t.lr_at(1380).unwrap(), 8e-4);
        let mid = t.lr_at(135_930).unwrap();
        // 5e-4 * (1 - sqrt(0.5))
        assert!((mid - 1.464_466_094_067_262e-4).abs() < 1e-15, "{mid}");
        assert_eq!(t.lr_at(138_000).unwrap(), 0.0);
        assert_eq!(t.lr_at(117_299).unwrap(), 8e-4);
        assert_eq!(t.lr_at(117_300).unwrap(), 5e-4);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let t = tiny();
        assert!(matches!(t.lr_at(138_001), Err(Error::StepRange { .. })));
        assert!(t.batch_tokens_at(200_000).is_err());
        assert!(t.seq_len_at(138_001).is_err());
        assert!(t.rope_base_at(138_001, LayerKind::Global).is_err());
    }

    #[test]
    fn batch_examples() {
        let t = tiny();
        assert_eq!(t.batch_tokens_at(0).unwrap(), 33_000);
        assert_eq!(t.batch_tokens_at(2001).unwrap(), 1_666_500);
        assert_eq!(t.batch_tokens_at(4002).unwrap(), 3_300_000);
        assert_eq!(t.batch_tokens_at(100_000).unwrap(), 3_300_000);
    }

    #[test]
    fn seq_len_examples() {
        let t = tiny();
        assert_eq!(t.seq_len_at(0).unwrap(), 1024);
        assert_eq!(t.seq_len_at(117_299).unwrap(), 1024);
        assert_eq!(t.seq_len_at(117_300).unwrap(), 2048);
        assert_eq!(t.seq_len_at(137_999).unwrap(), 16384);
        assert_eq!(t.seq_len_at(138_000).unwrap(), 16384);
        assert_eq!(t.extension_stage_steps(), 3450);
    }

    #[test]
    fn remainder_goes_to_last_stage() {
        let mut t = tiny();
        t.total_steps = 138_005;
        let per = t.extension_stage_steps();
        assert_eq!(per, 3450);
        let last_start = t.stable_end_step + 5 * per;
        assert_eq!(t.seq_len_at(last_start - 1).unwrap(), 12288);
        assert_eq!(t.seq_len_at(last_start).unwrap(), 16384);
        assert_eq!(t.seq_len_at(138_005).unwrap(), 16384);
    }

    #[test]
    fn rope_examples() {
        let s = RoPEBaseSchedule::default();
        assert_eq!(s.base_at(0, LayerKind::Global), 10_000.0);
        assert_eq!(s.base_at(117_299, LayerKind::Global), 10_000.0);
        assert_eq!(s.base_at(117_300, LayerKind::Global), 1_000_000.0);
        assert_eq!(s.base_at(137_999, LayerKind::Local), 10_000.0);
        assert_eq!(tiny().rope_schedule(), s);
    }

    #[test]
    fn presets_carry_learning_rates() {
        let b = TrainingTimeline::preset(TimelinePreset::Base);
        assert_eq!((b.stable_lr, b.extension_lr), (5e-4, 3e-4));
        let l = TrainingTimeline::preset(TimelinePreset::Large);
        assert_eq!((l.stable_lr, l.extension_lr), (3e-4, 5e-5));
    }

    #[test]
    fn validation_collects_every_violation() {
        let mut t = tiny();
        t.lr_warmup_steps = 0;
        t.extension_stage_lengths = vec![512, 256];
        let errs = t.violations();
        assert!(errs.iter().any(|e| e.starts_with("lr_warmup_steps")));
        assert!(errs.iter().any(|e| e.contains("expected 6")));
        assert!(errs.iter().any(|e| e.contains("strictly increasing")));
        assert!(errs.iter().any(|e| e.contains("exceed stable_seq_len")));
    }

    #[test]
    fn scaled_timeline_keeps_proportions() {
        let t = tiny().scaled(200).unwrap();
        assert_eq!(t.lr_warmup_steps, 2);
        assert_eq!(t.batch_warmup_steps, 6);
        assert_eq!(t.stable_end_step, 170);
        assert_eq!(t.decay_start_step, 194);
        assert_eq!(t.total_steps, 200);
        let tiny_run = tiny().scaled(20).unwrap();
        tiny_run.validate().unwrap();
        assert!(tiny().scaled(5).is_err());
    }

    #[test]
    fn dump_has_header_and_endpoints() {
        let t = tiny();
        let text = t.dump(10_000).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step\tlr\tbatch_tokens\tseq_len\tglobal_rope_base");
        assert!(lines[1].starts_with("0\t0e0\t33000\t1024\t10000"));
        assert!(lines.last().unwrap().starts_with("138000\t0e0\t3300000\t16384\t1000000"));
    }
}
