use pretrain_core::schedule::{LayerKind, Phase, TimelinePreset, TrainingTimeline};
use proptest::prelude::*;

fn presets() -> impl Strategy<Value = TrainingTimeline> {
    prop::sample::select(vec![TimelinePreset::Tiny, TimelinePreset::Base, TimelinePreset::Large])
        .prop_map(TrainingTimeline::preset)
}

#[test]
fn preset_learning_rates() {
    let cases = [
        (TimelinePreset::Tiny, 8e-4, 5e-4),
        (TimelinePreset::Base, 5e-4, 3e-4),
        (TimelinePreset::Large, 3e-4, 5e-5),
    ];
    for (p, stable, ext) in cases {
        let t = TrainingTimeline::preset(p);
        assert_eq!(t.lr_at(50_000).unwrap(), stable);
        assert_eq!(t.lr_at(120_000).unwrap(), ext);
    }
}

#[test]
fn warmup_tokens_follow_the_trapezoid() {
    let t = TrainingTimeline::default();
    let n = t.batch_warmup_steps as f64;
    let area = n * (t.initial_batch_tokens + t.full_batch_tokens) as f64 / 2.0;
    let summed = t.scheduled_tokens(t.phase_range(Phase::Warmup)).unwrap() as f64;
    // the discrete sum misses half a step's increment at the top edge
    assert!((summed - area).abs() / area < 1e-3, "{summed} vs {area}");
}

#[test]
fn rope_switch_at_stable_end() {
    let t = TrainingTimeline::default();
    assert_eq!(t.rope_base_at(117_299, LayerKind::Global).unwrap(), 1e4);
    assert_eq!(t.rope_base_at(117_300, LayerKind::Global).unwrap(), 1e6);
    for s in [0, 117_300, 138_000] {
        assert_eq!(t.rope_base_at(s, LayerKind::Local).unwrap(), 1e4);
    }
}

#[test]
fn scaled_200_boundaries() {
    let t = TrainingTimeline::default().scaled(200).unwrap();
    assert_eq!(
        (t.lr_warmup_steps, t.batch_warmup_steps, t.stable_end_step, t.decay_start_step, t.total_steps),
        (2, 6, 170, 194, 200)
    );
}

#[test]
fn dump_has_header_and_endpoints() {
    let t = TrainingTimeline::default();
    let d = t.dump(10_000).unwrap();
    let lines: Vec<&str> = d.lines().collect();
    assert_eq!(lines[0], "step\tlr\tbatch_tokens\tseq_len\tglobal_rope_base");
    assert!(lines[1].starts_with("0\t0e0\t33000\t1024\t10000"));
    assert!(lines.last().unwrap().starts_with("138000\t0e0\t3300000\t16384\t1000000"));
}

proptest! {
    #[test]
    fn lr_matches_closed_form(t in presets(), step in 0u64..=138_000) {
        let lr = t.lr_at(step).unwrap();
        let expected = if step < 1380 {
            t.stable_lr * step as f64 / 1380.0
        } else if step < 117_300 {
            t.stable_lr
        } else if step < 133_860 {
            t.extension_lr
        } else {
            t.extension_lr * (1.0 - ((step - 133_860) as f64 / 4140.0).sqrt())
        };
        prop_assert!((lr - expected).abs() <= 1e-15);
    }

    #[test]
    fn lr_is_bounded_and_decay_non_increasing(t in presets(), a in 133_860u64..138_000) {
        let (x, y) = (t.lr_at(a).unwrap(), t.lr_at(a + 1).unwrap());
        prop_assert!(y <= x);
        prop_assert!(x >= 0.0 && x <= t.extension_lr);
    }

    #[test]
    fn lr_continuous_within_phases(t in presets(), step in 1u64..138_000) {
        // jumps are only allowed where a phase starts
        if step != t.stable_end_step {
            let d = (t.lr_at(step).unwrap() - t.lr_at(step - 1).unwrap()).abs();
            let max_slope = t.stable_lr / t.lr_warmup_steps as f64;
            let decay_first = t.extension_lr * (1.0 / 4140f64).sqrt();
            prop_assert!(d <= max_slope.max(decay_first) + 1e-15);
        }
    }

    #[test]
    fn batch_monotone_and_bounded(t in presets(), step in 0u64..138_000) {
        let (a, b) = (t.batch_tokens_at(step).unwrap(), t.batch_tokens_at(step + 1).unwrap());
        prop_assert!(a <= b);
        prop_assert!(a >= t.initial_batch_tokens && a <= t.full_batch_tokens);
    }

    #[test]
    fn seq_len_non_decreasing(t in presets(), step in 0u64..138_000) {
        prop_assert!(t.seq_len_at(step).unwrap() <= t.seq_len_at(step + 1).unwrap());
    }

    #[test]
    fn scaled_keeps_phase_fractions(total in 1_000u64..200_000) {
        let base = TrainingTimeline::default();
        let s = base.scaled(total).unwrap();
        for (orig, new) in [
            (base.lr_warmup_steps, s.lr_warmup_steps),
            (base.batch_warmup_steps, s.batch_warmup_steps),
            (base.stable_end_step, s.stable_end_step),
            (base.decay_start_step, s.decay_start_step),
        ] {
            let want = orig as f64 / base.total_steps as f64 * total as f64;
            prop_assert!((new as f64 - want).abs() <= 1.0);
        }
        s.validate().unwrap();
    }

    #[test]
    fn scaled_small_runs_stay_valid(total in 20u64..1_000) {
        let s = TrainingTimeline::default().scaled(total).unwrap();
        prop_assert!(s.violations().is_empty());
        prop_assert_eq!(s.lr_at(total).unwrap(), 0.0);
    }
}

#[test]
fn six_distinct_extension_lengths() {
    let t = TrainingTimeline::default();
    let mut seen: Vec<u32> = Vec::new();
    for s in t.phase_range(Phase::ContextExtension).chain(t.phase_range(Phase::Annealing)) {
        let l = t.seq_len_at(s).unwrap();
        if seen.last() != Some(&l) {
            seen.push(l);
        }
    }
    assert_eq!(seen, vec![2048, 4096, 6144, 8192, 12288, 16384]);
}
