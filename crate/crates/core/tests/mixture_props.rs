use pretrain_core::fixtures;
use pretrain_core::mixture::{
    apply_sampling, audit_distribution, dedup_exact, default_length_targets, filter_edu, sample_context_extension,
    sample_context_extension_with, source_share, total_tokens, DatasetSpec, Document, Lang, LengthBucket,
    PiiRuleSet, PiiScrubber, SourceCorpus,
};
use pretrain_core::par::Exec;
use pretrain_core::synth;
use pretrain_core::tokenize::WhitespaceTokenizer;
use proptest::prelude::*;

fn doc(id: usize, lang: Lang, text: &str) -> Document {
    Document::new(format!("d{id}"), lang, text, "test", &WhitespaceTokenizer)
}

fn spec(name: &str, s: f64) -> DatasetSpec {
    DatasetSpec {
        name: name.into(),
        lang: Lang::Fin,
        sampling_factor: s,
        pii_scrub: false,
        dedup: false,
        edu_filter: false,
        initial_tokens: None,
        note: None,
        path: None,
    }
}

fn lang_strategy() -> impl Strategy<Value = Lang> {
    prop::sample::select(vec![Lang::Fin, Lang::Eng, Lang::Sme])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dedup_is_idempotent_and_shrinks(
        items in prop::collection::vec((lang_strategy(), prop::sample::select(vec!["a b", "a b ", "c", "c\r\nd", "c\nd", "e f g"])), 0..40)
    ) {
        let docs: Vec<Document> = items.iter().enumerate().map(|(i, (l, t))| doc(i, *l, t)).collect();
        let before = total_tokens(&docs);
        let (once, stats) = dedup_exact(docs);
        prop_assert!(stats.tokens_out <= before);
        let (twice, stats2) = dedup_exact(once.clone());
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(stats2.tokens_in, stats2.tokens_out);
    }

    #[test]
    fn pii_scrub_is_idempotent(parts in prop::collection::vec(
        prop::sample::select(vec!["mail ", "a@b.fi", " ", "192.168.1.1", "+358 40 123 4567", "x.", "@", "9", "[EMAIL]", "fi"]),
        0..20,
    )) {
        let text: String = parts.concat();
        let s = PiiScrubber::new(&PiiRuleSet::default()).unwrap();
        let once = s.scrub_text(&text);
        prop_assert_eq!(s.scrub_text(&once), once.clone());
        prop_assert!(!once.contains("a@b.fi"));
    }

    #[test]
    fn integer_factor_emits_exact_copies(
        factor in 1u32..6,
        lens in prop::collection::vec(1usize..30, 1..15),
    ) {
        let docs: Vec<Document> = lens.iter().enumerate().map(|(i, &n)| doc(i, Lang::Fin, &"w ".repeat(n))).collect();
        let src = SourceCorpus { spec: spec("x", factor as f64), docs: docs.clone() };
        let out = apply_sampling(&[src], 3).unwrap();
        prop_assert_eq!(out.docs.len(), docs.len() * factor as usize);
        for d in &docs {
            prop_assert_eq!(out.docs.iter().filter(|o| o.id == d.id).count(), factor as usize);
        }
        prop_assert_eq!(out.per_dataset[0].emitted_tokens, total_tokens(&docs) * factor as u64);
    }
}

#[test]
fn dedup_is_per_language() {
    let docs = vec![doc(0, Lang::Fin, "sama"), doc(1, Lang::Fin, "sama"), doc(2, Lang::Eng, "sama")];
    let (kept, _) = dedup_exact(docs);
    let ids: Vec<&str> = kept.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["d0", "d2"]);
}

#[test]
fn pii_examples() {
    let s = PiiScrubber::new(&PiiRuleSet::default()).unwrap();
    assert_eq!(s.scrub_text("mail me at a@b.fi"), "mail me at [EMAIL]");
    assert_eq!(s.scrub_text("nothing here"), "nothing here");
}

#[test]
fn edu_threshold_is_inclusive() {
    let scored = |i, s| Document {
        edu_score: Some(s),
        ..doc(i, Lang::Eng, "x")
    };
    let r = filter_edu(vec![scored(0, 2.0), scored(1, 1.99), doc(2, Lang::Eng, "y")], 2.0);
    assert_eq!(r.kept.len(), 1);
    assert_eq!(r.dropped, 1);
    assert_eq!(r.missing_score, vec!["d2".to_string()]);
}

#[test]
fn fractional_factor_hits_target_within_half_percent() {
    let docs = synth::corpus(&synth::SynthSpec {
        seed: 5,
        docs_per_lang: 400,
        langs: vec![Lang::Fin],
        ..Default::default()
    });
    for s in [0.3, 0.83, 2.5, 5.25] {
        let src = SourceCorpus {
            spec: spec("fin", s),
            docs: docs.clone(),
        };
        let out = apply_sampling(&[src], 1).unwrap();
        let d = &out.per_dataset[0];
        let err = (d.emitted_tokens as f64 - d.target_tokens).abs() / d.target_tokens;
        assert!(err < 0.005, "S={s}: {} vs {}", d.emitted_tokens, d.target_tokens);
    }
}

#[test]
fn sampling_is_seed_deterministic() {
    let docs = synth::corpus(&synth::SynthSpec {
        docs_per_lang: 50,
        langs: vec![Lang::Eng],
        ..Default::default()
    });
    let src = || SourceCorpus {
        spec: spec("eng", 1.4),
        docs: docs.clone(),
    };
    let a = apply_sampling(&[src()], 9).unwrap();
    let b = apply_sampling(&[src()], 9).unwrap();
    assert_eq!(a.docs, b.docs);
}

#[test]
fn extension_shares_match_targets() {
    let docs = synth::length_profile(
        3,
        &[(10, 1024, 30_000), (1024, 10_240, 60_000), (10_240, 16_384, 6_000), (16_384, 40_000, 4_000)],
    );
    let targets = default_length_targets();
    let seq = sample_context_extension_with(&docs, &targets, 2, None, Exec::Sequential).unwrap();
    let par = sample_context_extension_with(&docs, &targets, 2, None, Exec::Parallel).unwrap();
    assert_eq!(seq.docs, par.docs);
    for ((_, target, achieved, _), want) in seq.buckets.iter().zip(fixtures::LENGTH_SHARES) {
        assert_eq!(*target, want);
        assert!((achieved - want).abs() <= 1.0, "{achieved} vs {want}");
    }
}

#[test]
fn single_bucket_target_keeps_only_short_docs() {
    let docs = synth::length_profile(1, &[(0, 1024, 50), (1024, 5000, 50)]);
    let targets = vec![
        LengthBucket {
            label: "<1K".into(),
            min: 0,
            max: Some(1024),
            share: 100.0,
        },
        LengthBucket {
            label: "rest".into(),
            min: 1024,
            max: None,
            share: 0.0,
        },
    ];
    let out = sample_context_extension(&docs, &targets, 0).unwrap();
    assert_eq!(out.docs.len(), 50);
    assert!(out.docs.iter().all(|d| d.token_count < 1024));
}

#[test]
fn fixture_manifests_audit() {
    let m = fixtures::pretrain_manifest().unwrap();
    let audit = audit_distribution(&m);
    for (code, _, pct) in fixtures::LANGUAGE_SHARES {
        let lang: Lang = code.parse().unwrap();
        assert!((audit.share(lang) - pct).abs() <= 0.2, "{code}: {} vs {pct}", audit.share(lang));
    }
    let base = fixtures::anneal_baseline_manifest().unwrap();
    assert!(audit_distribution(&base).share(Lang::Eng) > 90.0);
    let fw = source_share(&base, "Fineweb-edu-fortified", None);
    assert!((fw - 44.0).abs() <= 1.0, "{fw}");
    let edu = fixtures::anneal_edu_manifest().unwrap();
    let hplt = source_share(&edu, "HPLT 2.0 cleaned", Some(Lang::Fin));
    assert!((hplt - 54.9).abs() <= 0.5, "{hplt}");
}

#[test]
fn single_dataset_manifest_is_all_one_language() {
    let m = pretrain_core::mixture::MixtureManifest::from_toml_str(
        "kind = \"pretrain\"\n[[dataset]]\nname = \"a\"\nlang = \"fin\"\nsampling_factor = 1.0\nprocessed_tokens = 100\n",
    )
    .unwrap();
    assert_eq!(audit_distribution(&m).share(Lang::Fin), 100.0);
}
